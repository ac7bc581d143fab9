#pragma once

// Command-line surface: train, eval, analyze, count-params, make-synthetic.
// Exit codes: 0 success, 1 usage, 2 data/config error, 3 numeric abort.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include "gatefuse/checkpoint.hpp"
#include "gatefuse/evaluation.hpp"
#include "gatefuse/gate_analysis.hpp"
#include "gatefuse/synthetic.hpp"
#include "gatefuse/trainer.hpp"

namespace gatefuse::cli {

inline constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3;
inline constexpr const char* kLogEnv = "GATEFUSE_LOG_LEVEL";

namespace fs = std::filesystem;

/// Parsed config file: {"model": {...}, "training": {...}, "data": {...},
/// "synthetic": {...}}; every section optional, unknown keys rejected.
struct ConfigFile {
  nlohmann::json model = nlohmann::json::object();
  nlohmann::json training = nlohmann::json::object();
  nlohmann::json data = nlohmann::json::object();
  nlohmann::json synthetic = nlohmann::json::object();
  fs::path base_dir;  // relative data paths resolve against this
};

inline ConfigFile load_config(const std::string& path) {
  ConfigFile c;
  c.base_dir = fs::path(path).parent_path();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  detail::reject_unknown_keys(j, {"model", "training", "data", "synthetic"}, path);
  if (j.contains("model")) c.model = j["model"];
  if (j.contains("training")) c.training = j["training"];
  if (j.contains("data")) c.data = j["data"];
  if (j.contains("synthetic")) c.synthetic = j["synthetic"];
  detail::reject_unknown_keys(c.data, {"text_corpus", "captions", "embeddings", "vocab", "split_dir"},
                              "data");
  detail::reject_unknown_keys(c.synthetic, {"n_images", "n_text", "n_minimal_pairs", "n_forced_choice", "signal"},
                              "synthetic");
  return c;
}

inline std::string data_path(const ConfigFile& c, const std::string& key) {
  if (!c.data.contains(key)) return {};
  const fs::path p = c.data[key].get<std::string>();
  return (p.is_absolute() ? p : c.base_dir / p).lexically_normal().string();
}

inline Tokenizer load_tokenizer(const std::string& vocab_path) {
  return vocab_path.empty() ? Tokenizer{} : Tokenizer::from_vocab_file(vocab_path);
}

/// Model config from the file, with vocab_size and image_embedding_dim
/// filled from the data when the file leaves them out.
inline ModelConfig resolve_model_config(const ConfigFile& c, std::size_t vocab, std::size_t image_dim) {
  auto m = model_config_from_json(c.model);
  if (!c.model.contains("vocab_size")) m.vocab_size = vocab;
  else if (m.vocab_size != vocab)
    throw std::invalid_argument("model.vocab_size is " + std::to_string(m.vocab_size) +
                                " but the tokenizer has " + std::to_string(vocab) + " ids");
  if (!c.model.contains("image_embedding_dim")) m.image_embedding_dim = image_dim;
  else if (m.image_embedding_dim != image_dim)
    throw std::invalid_argument("model.image_embedding_dim is " + std::to_string(m.image_embedding_dim) +
                                " but the embeddings file has dim " + std::to_string(image_dim));
  m.validate();
  return m;
}

/// Reuses a persisted split when present (it must describe the same
/// dataset, size and seed), otherwise creates and saves one.
inline DataSplit ensure_split(const fs::path& path, const std::string& dataset, std::size_t n,
                              std::uint64_t seed) {
  if (fs::exists(path)) {
    auto s = read_split(path.string());
    if (s.dataset != dataset || s.size != n || s.seed != seed)
      throw std::invalid_argument(path.string() + " was made for " + s.dataset + " (size " +
                                  std::to_string(s.size) + ", seed " + std::to_string(s.seed) +
                                  "); expected " + dataset + " (size " + std::to_string(n) + ", seed " +
                                  std::to_string(seed) + ")");
    return s;
  }
  auto s = make_split(dataset, n, seed);
  fs::create_directories(path.parent_path());
  write_split(path.string(), s);
  return s;
}

inline std::string format_metrics_file(const std::vector<std::string>& rows) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) out += r + "\n";
  return out;
}

/// Metric rows already on disk with step <= last_step (used on resume).
inline std::vector<std::string> metrics_rows_through(const fs::path& path, std::size_t last_step) {
  std::vector<std::string> rows;
  if (!fs::exists(path)) return rows;
  std::istringstream in(read_file(path.string()));
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw FormatError(path.string() + ": unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoull(line.substr(0, line.find(','))) <= last_step) rows.push_back(line);
  }
  return rows;
}

// ---------------------------------------------------------------- commands

struct CommonArgs {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

inline void add_common(CLI::App* cmd, CommonArgs& a, bool config_required = false, bool out_required = false) {
  auto* c = cmd->add_option("--config", a.config, "JSON config file");
  if (config_required) c->required();
  auto* o = cmd->add_option("--out-dir", a.out_dir, "output directory");
  if (out_required) o->required();
  cmd->add_option("--seed", a.seed, "overrides the configured seed");
}

inline int count_params_command(const CommonArgs& a) {
  const auto cfg = load_config(a.config);
  const auto m = model_config_from_json(cfg.model);
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = count_parameters(m);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  std::cout << n << "\n";
  spdlog::debug("counted {} parameters in {:.3f} ms", n, ms);
  if (!a.out_dir.empty()) {
    fs::create_directories(a.out_dir);
    atomic_write((fs::path(a.out_dir) / "param_count.json").string(),
                 nlohmann::json{{"parameters", n}, {"model", to_json(m)}}.dump(2) + "\n");
  }
  return kExitOk;
}

struct TrainArgs {
  std::string resume;
  std::optional<std::size_t> max_steps;
};

inline int train_command(const CommonArgs& a, const TrainArgs& t) {
  const auto cfg = load_config(a.config);
  auto tc = training_config_from_json(cfg.training);
  if (a.seed) tc.seed = *a.seed;
  if (t.max_steps) tc.max_steps = *t.max_steps;
  tc.validate();

  const auto text_path = data_path(cfg, "text_corpus"), captions_path = data_path(cfg, "captions"),
             embeddings_path = data_path(cfg, "embeddings"), vocab_path = data_path(cfg, "vocab");
  for (const auto& [key, p] : {std::pair{"text_corpus", text_path}, std::pair{"captions", captions_path},
                               std::pair{"embeddings", embeddings_path}})
    if (p.empty()) throw std::invalid_argument(std::string("config: data.") + key + " is required for training");

  const auto tok = load_tokenizer(vocab_path);
  auto images = read_embeddings(embeddings_path);
  const auto model_cfg = resolve_model_config(cfg, tok.vocab_size(), images.dim);
  const auto corpus = load_text_corpus(text_path, tok, model_cfg.max_seq_len);
  const auto records = read_captions(captions_path);
  const auto captions = build_caption_dataset(records, std::move(images), tok, model_cfg.max_seq_len);
  if (corpus.truncated) spdlog::info("truncated {} text lines to max_seq_len", corpus.truncated);
  if (captions.truncated) spdlog::info("truncated {} captions to max_seq_len", captions.truncated);

  const fs::path out(a.out_dir);
  const fs::path split_dir = cfg.data.contains("split_dir") ? fs::path(data_path(cfg, "split_dir")) : out / "splits";
  const auto text_split = ensure_split(split_dir / "text.split", "text", corpus.samples.size(), tc.seed);
  const auto caption_split = ensure_split(split_dir / "captions.split", "captions", captions.samples.size(), tc.seed);

  TrainingData data;
  for (auto i : text_split.train) data.text.push_back(corpus.samples[i]);
  data.captions.images = captions.images;
  for (auto i : caption_split.train) data.captions.samples.push_back(captions.samples[i]);
  data.hashes = {{"text", file_hash(text_path)},
                 {"captions", file_hash(captions_path)},
                 {"embeddings", file_hash(embeddings_path)},
                 {"vocab", vocab_path.empty() ? std::string("byte-level") : file_hash(vocab_path)},
                 {"text_split", hex64(fnv1a64(serialize_split(text_split)))},
                 {"captions_split", hex64(fnv1a64(serialize_split(caption_split)))}};
  std::vector<std::vector<std::int32_t>> val_text;
  for (auto i : text_split.validation) val_text.push_back(corpus.samples[i]);

  fs::create_directories(out / "checkpoints");
  std::optional<Trainer<float>> trainer;
  std::vector<std::string> rows;
  if (!t.resume.empty()) {
    trainer.emplace(Trainer<float>::resume(t.resume, data));
    auto stored = to_json(trainer->config()), wanted = to_json(tc);
    stored.erase("max_steps");
    wanted.erase("max_steps");
    if (stored != wanted || to_json(trainer->model().config()) != to_json(model_cfg))
      throw std::invalid_argument(t.resume + ": config differs from the checkpoint's run");
    rows = metrics_rows_through(out / "metrics.csv", trainer->step());
    spdlog::info("resumed from {} at step {}", t.resume, trainer->step());
  } else {
    trainer.emplace(model_cfg, tc, data);
  }
  auto& tr = *trainer;
  if (t.max_steps) tr.set_max_steps(*t.max_steps);

  auto manifest = tr.manifest();
  manifest["data"] = {{"text_corpus", text_path}, {"captions", captions_path}, {"embeddings", embeddings_path},
                      {"vocab", vocab_path}, {"split_dir", split_dir.string()}};
  manifest["sizes"] = {{"text_train", data.text.size()}, {"captions_train", data.captions.samples.size()}};
  atomic_write((out / "manifest.json").string(), manifest.dump(2) + "\n");
  spdlog::info("training {} steps ({} image-caption) with strategy {}", tr.planned_steps(),
               tr.schedule().image_caption_steps(), to_string(tc.strategy));

  const auto metrics_path = out / "metrics.csv";
  atomic_write(metrics_path.string(), format_metrics_file(rows));
  std::ofstream metrics(metrics_path, std::ios::app | std::ios::binary);
  if (!metrics) throw IoError("cannot append to metrics log", metrics_path.string());
  std::string validation = "step,text_ntp,caption_ntp\n";

  tr.run(
      [&](const MetricsRow& r) {
        metrics << format_metrics_row(r) << "\n";
        metrics.flush();
        spdlog::debug("step {} {} ntp={:.4f} aux={:.4f} lr={:.3g} tau={:.3f}", r.step, r.modality, r.ntp, r.aux,
                      r.lr, r.tau);
      },
      (out / "checkpoints").string(),
      [&](const std::string& path) {
        const auto [vt, vc] = validation_ntp(tr.model(), val_text, captions, caption_split.validation);
        char line[128];
        std::snprintf(line, sizeof line, "%zu,%.17g,%.17g\n", tr.step(), vt, vc);
        validation += line;
        atomic_write((out / "validation.csv").string(), validation);
        spdlog::info("checkpoint {} (validation ntp text {:.4f}, captions {:.4f})", path, vt, vc);
      });
  tr.save_checkpoint((out / "final.gfck").string());
  spdlog::info("finished at step {}; final checkpoint {}", tr.step(), (out / "final.gfck").string());
  return kExitOk;
}

template <class Real>
int eval_with(const std::string& checkpoint, const std::optional<ModelConfig>& expected, const Tokenizer& tok,
              const std::string& pairs_path, const std::string& choice_path, const std::string& embeddings_path,
              const ScoringOptions& opt, const fs::path& out) {
  const auto model = load_model<Real>(checkpoint, expected);
  const auto& mc = model.config();
  if (tok.vocab_size() != mc.vocab_size)
    throw std::invalid_argument("tokenizer has " + std::to_string(tok.vocab_size()) +
                                " ids but the checkpoint's vocab_size is " + std::to_string(mc.vocab_size));
  nlohmann::json scores = {{"checkpoint", checkpoint}, {"checkpoint_hash", file_hash(checkpoint)},
                           {"length_normalize", opt.length_normalize}};
  if (!pairs_path.empty()) {
    const auto pairs = parse_minimal_pairs(read_file(pairs_path), tok, mc.max_seq_len, pairs_path);
    scores["minimal_pairs"] = to_json(minimal_pair_accuracy(model, pairs, opt));
    spdlog::info("minimal pairs: {:.4f} on {} pairs", scores["minimal_pairs"]["accuracy"].template get<double>(),
                 pairs.size());
  }
  if (!choice_path.empty()) {
    if (embeddings_path.empty())
      throw std::invalid_argument("--forced-choice needs --embeddings (or data.embeddings in the config)");
    const auto images = read_embeddings(embeddings_path);
    const auto items = parse_forced_choice(read_file(choice_path), tok, images, mc.max_seq_len, choice_path);
    scores["forced_choice"] = to_json(forced_choice_accuracy(model, items, opt));
    spdlog::info("forced choice: {:.4f} on {} items", scores["forced_choice"]["accuracy"].template get<double>(),
                 items.size());
  }
  fs::create_directories(out);
  atomic_write((out / "scores.json").string(), scores.dump(2) + "\n");
  return kExitOk;
}

struct EvalArgs {
  std::string checkpoint, minimal_pairs, forced_choice, embeddings, vocab;
  bool length_normalize = false;
  std::optional<double> forced_gate;
};

inline int eval_command(const CommonArgs& a, const EvalArgs& e) {
  std::optional<ModelConfig> expected;
  std::string vocab = e.vocab, embeddings = e.embeddings;
  if (!a.config.empty()) {
    const auto cfg = load_config(a.config);
    if (vocab.empty()) vocab = data_path(cfg, "vocab");
    if (embeddings.empty()) embeddings = data_path(cfg, "embeddings");
    const auto tok = load_tokenizer(vocab);
    auto m = model_config_from_json(cfg.model);
    if (!cfg.model.contains("vocab_size")) m.vocab_size = tok.vocab_size();
    if (!cfg.model.contains("image_embedding_dim") && !embeddings.empty())
      m.image_embedding_dim = read_embeddings(embeddings).dim;
    expected = m;
  }
  if (e.minimal_pairs.empty() && e.forced_choice.empty())
    throw std::invalid_argument("eval: give --minimal-pairs and/or --forced-choice");
  ScoringOptions opt;
  opt.length_normalize = e.length_normalize;
  opt.forced_gate = e.forced_gate;
  const auto tok = load_tokenizer(vocab);
  const fs::path out = a.out_dir.empty() ? fs::path(".") : fs::path(a.out_dir);
  if (checkpoint_element_bytes(e.checkpoint) == 8)
    return eval_with<double>(e.checkpoint, expected, tok, e.minimal_pairs, e.forced_choice, embeddings, opt, out);
  return eval_with<float>(e.checkpoint, expected, tok, e.minimal_pairs, e.forced_choice, embeddings, opt, out);
}

struct AnalyzeArgs {
  std::string checkpoint, captions, embeddings, tags, lexicon, vocab;
  bool case_insensitive = false;
};

template <class Real>
int analyze_with(const AnalyzeArgs& z, const Tokenizer& tok, const fs::path& out) {
  const auto model = load_model<Real>(z.checkpoint);
  const auto data = build_caption_dataset(read_captions(z.captions), read_embeddings(z.embeddings), tok,
                                          model.config().max_seq_len);
  AnalysisInputs in;
  in.tags = parse_tag_map(read_file(z.tags), z.tags);
  in.lexicon = parse_lexicon(read_file(z.lexicon), z.lexicon);
  in.case_insensitive = z.case_insensitive;
  in.manifest_hash = file_hash(z.checkpoint);
  const auto records = trace_gates(model, data, tok);
  const auto stats = analysis_report(records, in, out.string());
  spdlog::info("H = {:.4f} (p = {:.3g}); rho concreteness = {:.4f}, imageability = {:.4f}",
               stats["kruskal_wallis"]["H"].template get<double>(), stats["kruskal_wallis"]["p"].template get<double>(),
               stats["spearman_concreteness"]["rho"].template get<double>(),
               stats["spearman_imageability"]["rho"].template get<double>());
  return kExitOk;
}

inline int analyze_command(const CommonArgs& a, AnalyzeArgs z) {
  if (!a.config.empty()) {
    const auto cfg = load_config(a.config);
    if (z.vocab.empty()) z.vocab = data_path(cfg, "vocab");
    if (z.embeddings.empty()) z.embeddings = data_path(cfg, "embeddings");
    if (z.captions.empty()) z.captions = data_path(cfg, "captions");
  }
  if (z.captions.empty() || z.embeddings.empty())
    throw std::invalid_argument("analyze: --captions and --embeddings are required (or set them in the config)");
  const auto tok = load_tokenizer(z.vocab);
  const fs::path out = a.out_dir.empty() ? fs::path(".") : fs::path(a.out_dir);
  if (checkpoint_element_bytes(z.checkpoint) == 8) return analyze_with<double>(z, tok, out);
  return analyze_with<float>(z, tok, out);
}

struct SyntheticArgs {
  std::optional<std::size_t> images, text, pairs, forced;
};

inline int make_synthetic_command(const CommonArgs& a, const SyntheticArgs& s) {
  SyntheticOptions o;
  if (!a.config.empty()) {
    const auto cfg = load_config(a.config);
    const auto& j = cfg.synthetic;
    o.n_images = j.value("n_images", o.n_images);
    o.n_text = j.value("n_text", o.n_text);
    o.n_minimal_pairs = j.value("n_minimal_pairs", o.n_minimal_pairs);
    o.n_forced_choice = j.value("n_forced_choice", o.n_forced_choice);
    o.signal = j.value("signal", o.signal);
    if (cfg.training.contains("seed")) o.seed = cfg.training["seed"].get<std::uint64_t>();
  }
  if (a.seed) o.seed = *a.seed;
  if (s.images) o.n_images = *s.images;
  if (s.text) o.n_text = *s.text;
  if (s.pairs) o.n_minimal_pairs = *s.pairs;
  if (s.forced) o.n_forced_choice = *s.forced;
  write_synthetic(make_synthetic(o), a.out_dir);
  spdlog::info("wrote synthetic data (seed {}) to {}", o.seed, a.out_dir);
  return kExitOk;
}

inline void configure_logging() {
  spdlog::set_pattern("[%l] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv(kLogEnv)) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off")
      spdlog::warn("{}='{}' is not a log level; using info", kLogEnv, env);
    else
      spdlog::set_level(level);
  }
}

/// Entry point; argv[0] is the program name.
inline int run_command(int argc, const char* const* argv) {
  configure_logging();
  CLI::App app{"Gated text/image fusion language model toolkit"};
  app.require_subcommand(1);
  CommonArgs common;
  TrainArgs train;
  EvalArgs ev;
  AnalyzeArgs an;
  SyntheticArgs syn;

  auto* count = app.add_subcommand("count-params", "print the parameter count of a model config");
  add_common(count, common, true);

  auto* tr = app.add_subcommand("train", "train a model from a config file");
  add_common(tr, common, true, true);
  tr->add_option("--resume", train.resume, "checkpoint to resume from");
  tr->add_option("--max-steps", train.max_steps, "stop after this many total steps");

  auto* e = app.add_subcommand("eval", "score minimal-pair / forced-choice suites");
  add_common(e, common);
  e->add_option("--checkpoint", ev.checkpoint, "trained checkpoint (.gfck)")->required();
  e->add_option("--minimal-pairs", ev.minimal_pairs, "JSON array of {good, bad, subtask}");
  e->add_option("--forced-choice", ev.forced_choice, "JSON array of {image_index, candidates, correct, prefix}");
  e->add_option("--embeddings", ev.embeddings, "embeddings file for forced-choice images");
  e->add_option("--vocab", ev.vocab, "vocabulary file (default: byte-level)");
  e->add_flag("--length-normalize", ev.length_normalize, "divide log-probabilities by scored length");
  e->add_option("--forced-gate", ev.forced_gate, "replace every gate with this constant");

  auto* z = app.add_subcommand("analyze", "gate tracing and statistics report");
  add_common(z, common);
  z->add_option("--checkpoint", an.checkpoint, "trained checkpoint (.gfck)")->required();
  z->add_option("--captions", an.captions, "captions JSON (default: data.captions)");
  z->add_option("--embeddings", an.embeddings, "embeddings file (default: data.embeddings)");
  z->add_option("--tags", an.tags, "CSV token,label")->required();
  z->add_option("--lexicon", an.lexicon, "CSV word,concreteness,imageability")->required();
  z->add_option("--vocab", an.vocab, "vocabulary file (default: byte-level)");
  z->add_flag("--case-insensitive", an.case_insensitive, "lowercase words before tag and lexicon lookup");

  auto* s = app.add_subcommand("make-synthetic", "write a deterministic toy dataset");
  add_common(s, common, false, true);
  s->add_option("--images", syn.images, "number of images and captions");
  s->add_option("--text", syn.text, "number of text-only sentences");
  s->add_option("--pairs", syn.pairs, "number of minimal pairs");
  s->add_option("--forced", syn.forced, "number of forced-choice items");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (count->parsed()) return count_params_command(common);
    if (tr->parsed()) return train_command(common, train);
    if (e->parsed()) return eval_command(common, ev);
    if (z->parsed()) return analyze_command(common, an);
    if (s->parsed()) return make_synthetic_command(common, syn);
  } catch (const NumericError& err) {
    spdlog::error("{}", err.what());
    return kExitNumeric;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace gatefuse::cli
