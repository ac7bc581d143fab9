#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gatefuse/errors.hpp"

namespace gatefuse {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kEosId = 2;
inline constexpr std::int32_t kNumSpecials = 3;

/// Byte-level tokenizer (ids 3..258 are bytes 0..255), or greedy
/// longest-match over an external vocabulary file (one token per line, ids
/// assigned from 3 in file order).
class Tokenizer {
 public:
  Tokenizer() = default;

  static Tokenizer from_vocab_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open vocabulary file", path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
  }

  static Tokenizer from_tokens(std::vector<std::string> tokens) {
    Tokenizer t;
    t.vocab_ = std::move(tokens);
    t.lookup_.clear();
    for (std::size_t i = 0; i < t.vocab_.size(); ++i) {
      if (!t.lookup_.emplace(t.vocab_[i], static_cast<std::int32_t>(i) + kNumSpecials).second)
        throw FormatError("duplicate vocabulary entry '" + t.vocab_[i] + "'");
      t.max_len_ = std::max(t.max_len_, t.vocab_[i].size());
    }
    return t;
  }

  bool byte_level() const noexcept { return vocab_.empty(); }

  std::size_t vocab_size() const noexcept {
    return kNumSpecials + (byte_level() ? 256 : vocab_.size());
  }

  /// Content ids only, no specials.
  std::vector<std::int32_t> encode_content(std::string_view text) const {
    std::vector<std::int32_t> ids;
    if (byte_level()) {
      ids.reserve(text.size());
      for (unsigned char c : text) ids.push_back(static_cast<std::int32_t>(c) + kNumSpecials);
      return ids;
    }
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t len = std::min(max_len_, text.size() - pos);
      for (; len > 0; --len) {
        auto it = lookup_.find(std::string(text.substr(pos, len)));
        if (it != lookup_.end()) {
          ids.push_back(it->second);
          break;
        }
      }
      if (len == 0)
        throw std::invalid_argument("tokenize: no vocabulary entry matches at byte offset " +
                                    std::to_string(pos));
      pos += len;
    }
    return ids;
  }

  /// BOS + content + EOS.
  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> ids{kBosId};
    auto body = encode_content(text);
    ids.insert(ids.end(), body.begin(), body.end());
    ids.push_back(kEosId);
    return ids;
  }

  /// Surface text of one id; specials map to "".
  std::string token_text(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size())
      throw std::invalid_argument("detokenize: id " + std::to_string(id) + " out of range");
    if (id < kNumSpecials) return {};
    if (byte_level()) return std::string(1, static_cast<char>(id - kNumSpecials));
    return vocab_[static_cast<std::size_t>(id - kNumSpecials)];
  }

  /// Concatenated surface text, specials stripped.
  std::string decode(const std::vector<std::int32_t>& ids) const {
    std::string out;
    for (auto id : ids) out += token_text(id);
    return out;
  }

  static bool is_special(std::int32_t id) noexcept { return id >= 0 && id < kNumSpecials; }

 private:
  std::vector<std::string> vocab_;
  std::map<std::string, std::int32_t> lookup_;
  std::size_t max_len_ = 0;
};

}  // namespace gatefuse
