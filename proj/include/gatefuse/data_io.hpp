#pragma once

// File formats: plain-text corpora, caption lists (JSON), the binary
// embeddings container, and persisted train/validation/test splits.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/errors.hpp"
#include "gatefuse/rng.hpp"
#include "gatefuse/tokenizer.hpp"

namespace gatefuse {

// ---------------------------------------------------------------- raw files

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file", path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed", path);
  return ss.str();
}

/// Writes to a sibling temporary and renames it into place.
inline void atomic_write(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing", tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed", tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed (" + ec.message() + ")", path);
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Content hash recorded in run manifests.
inline std::string file_hash(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

// ------------------------------------------------------- little-endian bytes

namespace le {

template <class T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.append(bytes.data(), bytes.size());
}

/// Sequential reader over a byte buffer; errors name the offending offset.
class Reader {
 public:
  Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get(const char* field) {
    need(sizeof(T), field);
    std::array<char, sizeof(T)> raw;
    std::memcpy(raw.data(), bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(raw);
  }

  std::string_view take(std::size_t n, const char* field) {
    need(n, field);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n)
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(pos_) + " while reading " +
                        field + " (need " + std::to_string(n) + " bytes, have " +
                        std::to_string(bytes_.size() - pos_) + ")");
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw FormatError(what_ + ": " + message + " at byte offset " + std::to_string(pos_));
  }

  std::size_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace le

// --------------------------------------------------------------- embeddings

/// count x dim row-major float matrix.
struct EmbeddingMatrix {
  std::uint32_t count = 0;
  std::uint32_t dim = 0;
  std::vector<float> data;

  std::span<const float> row(std::size_t i) const {
    if (i >= count) throw std::invalid_argument("embedding row " + std::to_string(i) + " out of range");
    return {data.data() + i * dim, dim};
  }
  bool operator==(const EmbeddingMatrix&) const = default;
};

inline constexpr char kEmbeddingsMagic[4] = {'G', 'F', 'E', 'M'};
inline constexpr std::uint32_t kEmbeddingsVersion = 1;

inline std::string serialize_embeddings(const EmbeddingMatrix& m) {
  if (m.data.size() != static_cast<std::size_t>(m.count) * m.dim)
    throw std::invalid_argument("embeddings: data size does not match count x dim");
  std::string out(kEmbeddingsMagic, 4);
  le::put(out, kEmbeddingsVersion);
  le::put(out, m.count);
  le::put(out, m.dim);
  for (float v : m.data) le::put(out, v);
  return out;
}

inline EmbeddingMatrix parse_embeddings(std::string_view bytes, const std::string& name = "embeddings") {
  le::Reader r(bytes, name);
  if (r.take(4, "magic") != std::string_view(kEmbeddingsMagic, 4)) {
    throw FormatError(name + ": bad magic at byte offset 0 (expected GFEM)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kEmbeddingsVersion)
    throw FormatError(name + ": unsupported version " + std::to_string(version) + " at byte offset 4");
  EmbeddingMatrix m;
  m.count = r.get<std::uint32_t>("count");
  m.dim = r.get<std::uint32_t>("dim");
  const std::uint64_t expected = 16 + 4ULL * m.count * m.dim;
  if (bytes.size() != expected) {
    const std::size_t at = std::min<std::uint64_t>(bytes.size(), expected);
    throw FormatError(name + ": length " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expected) + " for " + std::to_string(m.count) + "x" +
                      std::to_string(m.dim) + " (mismatch at byte offset " + std::to_string(at) + ")");
  }
  m.data.resize(static_cast<std::size_t>(m.count) * m.dim);
  for (auto& v : m.data) v = r.get<float>("payload");
  return m;
}

inline void write_embeddings(const std::string& path, const EmbeddingMatrix& m) {
  atomic_write(path, serialize_embeddings(m));
}

inline EmbeddingMatrix read_embeddings(const std::string& path) {
  return parse_embeddings(read_file(path), path);
}

// ------------------------------------------------------------------ corpora

struct TokenizedCorpus {
  std::vector<std::vector<std::int32_t>> samples;  // BOS ... EOS
  std::size_t truncated = 0;                       // lines cut to fit max_seq_len
};

/// Encodes one sample, cutting content to max_seq_len - 2 tokens so the
/// BOS/EOS-framed sequence fits.
inline std::vector<std::int32_t> encode_sample(const Tokenizer& tok, std::string_view text,
                                               std::size_t max_seq_len, bool* truncated = nullptr) {
  auto content = tok.encode_content(text);
  const std::size_t limit = max_seq_len - 2;
  if (truncated) *truncated = content.size() > limit;
  if (content.size() > limit) content.resize(limit);
  std::vector<std::int32_t> ids{kBosId};
  ids.insert(ids.end(), content.begin(), content.end());
  ids.push_back(kEosId);
  return ids;
}

/// One sample per non-empty line, no other preprocessing.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

inline TokenizedCorpus load_text_corpus(const std::string& path, const Tokenizer& tok,
                                        std::size_t max_seq_len) {
  TokenizedCorpus c;
  for (const auto& line : read_lines(path)) {
    bool cut = false;
    c.samples.push_back(encode_sample(tok, line, max_seq_len, &cut));
    c.truncated += cut;
  }
  return c;
}

struct CaptionRecord {
  std::string caption;
  std::uint32_t image_index = 0;
  bool operator==(const CaptionRecord&) const = default;
};

inline std::vector<CaptionRecord> parse_captions(const std::string& text, const std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError(name + ": expected a JSON array of {caption, image_index}");
  std::vector<CaptionRecord> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_object() || !e.contains("caption") || !e.contains("image_index") ||
        !e["caption"].is_string() || !e["image_index"].is_number_unsigned())
      throw FormatError(name + ": record " + std::to_string(i) +
                        " needs a string 'caption' and a non-negative integer 'image_index'");
    out.push_back({e["caption"].get<std::string>(), e["image_index"].get<std::uint32_t>()});
  }
  return out;
}

inline std::vector<CaptionRecord> read_captions(const std::string& path) {
  return parse_captions(read_file(path), path);
}

inline std::string serialize_captions(const std::vector<CaptionRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records) j.push_back({{"caption", r.caption}, {"image_index", r.image_index}});
  return j.dump(1) + "\n";
}

struct CaptionSample {
  std::vector<std::int32_t> tokens;
  std::uint32_t image_index = 0;
};

struct CaptionDataset {
  std::vector<CaptionSample> samples;
  EmbeddingMatrix images;
  std::size_t truncated = 0;
};

inline CaptionDataset build_caption_dataset(const std::vector<CaptionRecord>& records,
                                            EmbeddingMatrix images, const Tokenizer& tok,
                                            std::size_t max_seq_len) {
  CaptionDataset d;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].image_index >= images.count)
      throw FormatError("caption " + std::to_string(i) + " references image " +
                        std::to_string(records[i].image_index) + " but only " +
                        std::to_string(images.count) + " embeddings exist");
    bool cut = false;
    d.samples.push_back({encode_sample(tok, records[i].caption, max_seq_len, &cut),
                         records[i].image_index});
    d.truncated += cut;
  }
  d.images = std::move(images);
  return d;
}

// ------------------------------------------------------------------- splits

struct DataSplit {
  std::string dataset;
  std::uint64_t seed = 0;
  std::size_t size = 0;
  std::vector<std::size_t> train, validation, test;
  bool operator==(const DataSplit&) const = default;
};

/// Seeded 80/10/10 partition of [0, n).
inline DataSplit make_split(const std::string& dataset, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed, "split/" + dataset);
  rng.shuffle(idx);
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  DataSplit s{dataset, seed, n, {}, {}, {}};
  s.train.assign(idx.begin(), idx.begin() + n_train);
  s.validation.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
  s.test.assign(idx.begin() + n_train + n_val, idx.end());
  return s;
}

inline std::string serialize_split(const DataSplit& s) {
  std::string out = "gatefuse-split 1\ndataset " + s.dataset + "\nseed " + std::to_string(s.seed) +
                    "\nsize " + std::to_string(s.size) + "\n";
  auto section = [&](const char* name, const std::vector<std::size_t>& v) {
    out += std::string(name) + " " + std::to_string(v.size()) + "\n";
    for (auto i : v) out += std::to_string(i) + "\n";
  };
  section("train", s.train);
  section("validation", s.validation);
  section("test", s.test);
  return out;
}

inline DataSplit parse_split(const std::string& text, const std::string& name = "split") {
  std::istringstream in(text);
  std::size_t line_no = 0;
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(name + ": missing " + what + " at end of file");
    ++line_no;
    return line;
  };
  auto keyed = [&](const std::string& key) {
    const auto l = next(key.c_str());
    if (l.rfind(key + " ", 0) != 0)
      throw FormatError(name + ": line " + std::to_string(line_no) + " should start with '" + key + "'");
    return l.substr(key.size() + 1);
  };
  auto number = [&](const std::string& s) -> std::uint64_t {
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || s[0] == '-')
      throw FormatError(name + ": line " + std::to_string(line_no) + ": expected an integer, got '" + s + "'");
    return v;
  };
  if (next("header") != "gatefuse-split 1") throw FormatError(name + ": bad header on line 1");
  DataSplit s;
  s.dataset = keyed("dataset");
  s.seed = number(keyed("seed"));
  s.size = number(keyed("size"));
  for (auto [key, target] : {std::pair{"train", &s.train}, std::pair{"validation", &s.validation},
                             std::pair{"test", &s.test}}) {
    const auto count = number(keyed(key));
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto v = number(next("index"));
      if (v >= s.size)
        throw FormatError(name + ": line " + std::to_string(line_no) + ": index " + std::to_string(v) +
                          " >= size " + std::to_string(s.size));
      target->push_back(v);
    }
  }
  return s;
}

inline void write_split(const std::string& path, const DataSplit& s) { atomic_write(path, serialize_split(s)); }
inline DataSplit read_split(const std::string& path) { return parse_split(read_file(path), path); }

}  // namespace gatefuse
