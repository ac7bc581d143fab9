#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "gatefuse/checkpoint.hpp"
#include "gatefuse/data_io.hpp"

using namespace gatefuse;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gatefuse_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

EmbeddingMatrix small_matrix() {
  EmbeddingMatrix m;
  m.count = 3;
  m.dim = 2;
  m.data = {1.5f, -2.0f, 0.0f, 3.25f, 1e-7f, -0.0f};
  return m;
}

}  // namespace

TEST(Embeddings, RoundTripIsBitExact) {
  const auto m = small_matrix();
  const auto bytes = serialize_embeddings(m);
  EXPECT_EQ(bytes.size(), 16u + 4u * 6u);
  EXPECT_EQ(bytes.substr(0, 4), "GFEM");
  EXPECT_EQ(parse_embeddings(bytes), m);
}

TEST(Embeddings, TruncatedFileNamesOffset) {
  auto bytes = serialize_embeddings(small_matrix());
  bytes.pop_back();
  try {
    parse_embeddings(bytes, "x.bin");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 39"), std::string::npos) << e.what();
  }
}

TEST(Embeddings, BadMagicRejected) {
  auto bytes = serialize_embeddings(small_matrix());
  bytes[0] = 'X';
  EXPECT_THROW(parse_embeddings(bytes), FormatError);
}

TEST(Embeddings, FileRoundTrip) {
  const auto dir = temp_dir("emb");
  const auto path = (dir / "e.bin").string();
  write_embeddings(path, small_matrix());
  EXPECT_EQ(read_embeddings(path), small_matrix());
  EXPECT_THROW(read_embeddings((dir / "missing.bin").string()), IoError);
}

TEST(Corpus, EncodeSampleFramesAndTruncates) {
  const Tokenizer tok;
  bool cut = true;
  auto ids = encode_sample(tok, "ab", 8, &cut);
  EXPECT_FALSE(cut);
  EXPECT_EQ(ids, (std::vector<std::int32_t>{kBosId, 'a' + 3, 'b' + 3, kEosId}));
  ids = encode_sample(tok, "abcdefgh", 5, &cut);
  EXPECT_TRUE(cut);
  EXPECT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids.back(), kEosId);
}

TEST(Corpus, LoadSkipsEmptyLinesAndCountsTruncation) {
  const auto dir = temp_dir("corpus");
  const auto path = (dir / "c.txt").string();
  atomic_write(path, "one\r\n\ntwo words here\n");
  const auto c = load_text_corpus(path, Tokenizer{}, 6);
  ASSERT_EQ(c.samples.size(), 2u);
  EXPECT_EQ(c.truncated, 1u);
  EXPECT_EQ(c.samples[0].size(), 5u);
}

TEST(Captions, RoundTripAndValidation) {
  const std::vector<CaptionRecord> recs{{"a cat", 0}, {"two \"dogs\"", 2}};
  EXPECT_EQ(parse_captions(serialize_captions(recs), "c"), recs);
  EXPECT_THROW(parse_captions("{}", "c"), FormatError);
  EXPECT_THROW(parse_captions("[{\"caption\": 1, \"image_index\": 0}]", "c"), FormatError);
  EXPECT_THROW(parse_captions("[{\"caption\": \"x\", \"image_index\": -1}]", "c"), FormatError);
  EXPECT_THROW(parse_captions("[", "c"), FormatError);
}

TEST(Captions, DatasetRejectsDanglingImageIndex) {
  const std::vector<CaptionRecord> recs{{"a", 0}, {"b", 3}};
  EXPECT_THROW(build_caption_dataset(recs, small_matrix(), Tokenizer{}, 16), FormatError);
  const auto d = build_caption_dataset({{"a", 2}}, small_matrix(), Tokenizer{}, 16);
  EXPECT_EQ(d.samples.at(0).image_index, 2u);
}

TEST(Split, PartitionIsDisjointCompleteAndSeeded) {
  const auto s = make_split("text", 103, 42);
  EXPECT_EQ(s.train.size(), 82u);
  EXPECT_EQ(s.validation.size(), 10u);
  EXPECT_EQ(s.test.size(), 11u);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  all.insert(s.test.begin(), s.test.end());
  EXPECT_EQ(all.size(), 103u);
  EXPECT_EQ(*all.rbegin(), 102u);
  EXPECT_EQ(make_split("text", 103, 42), s);
  EXPECT_NE(make_split("text", 103, 43).train, s.train);
  EXPECT_NE(make_split("captions", 103, 42).train, s.train);
}

TEST(Split, SerializeRoundTripAndErrors) {
  const auto s = make_split("captions", 20, 7);
  EXPECT_EQ(parse_split(serialize_split(s)), s);
  auto text = serialize_split(s);
  EXPECT_THROW(parse_split("nope\n"), FormatError);
  EXPECT_THROW(parse_split(text.substr(0, text.size() - 3)), FormatError);
  const auto at = text.find("\ntrain 16\n") + 10;
  text.replace(at, text.find('\n', at) - at, "99");
  EXPECT_THROW(parse_split(text), FormatError);
}

TEST(Checkpoint, RoundTripPreservesBlocksAndManifest) {
  CheckpointFile<double> ck;
  ck.manifest = {{"step", 3}, {"name", "x"}};
  ck.blocks.push_back({"param/a", {2, 2}, {1.0, -2.0, 3.5, 1e-300}});
  ck.blocks.push_back({"param/b", {}, {0.25}});
  const auto back = parse_checkpoint<double>(serialize_checkpoint(ck));
  EXPECT_EQ(back.manifest, ck.manifest);
  EXPECT_EQ(back.blocks, ck.blocks);
  EXPECT_EQ(back.block("param/b").data[0], 0.25);
  EXPECT_THROW(back.block("param/c"), FormatError);
}

TEST(Checkpoint, PrecisionMismatchAndCorruptionDetected) {
  CheckpointFile<float> ck;
  ck.manifest = nlohmann::json::object();
  ck.blocks.push_back({"w", {3}, {1.0f, 2.0f, 3.0f}});
  const auto bytes = serialize_checkpoint(ck);
  EXPECT_THROW(parse_checkpoint<double>(bytes), std::invalid_argument);
  EXPECT_THROW(parse_checkpoint<float>(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(parse_checkpoint<float>(bytes + "x"), FormatError);
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(parse_checkpoint<float>(bad), FormatError);
}

TEST(Checkpoint, AtomicWriteLeavesNoTempFile) {
  const auto dir = temp_dir("ck");
  CheckpointFile<float> ck;
  ck.manifest = {{"k", 1}};
  write_checkpoint((dir / "a.gfck").string(), ck);
  EXPECT_EQ(checkpoint_element_bytes((dir / "a.gfck").string()), 4u);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
}
