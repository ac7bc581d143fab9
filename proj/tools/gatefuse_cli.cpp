#include "gatefuse/cli.hpp"

int main(int argc, char** argv) { return gatefuse::cli::run_command(argc, argv); }
