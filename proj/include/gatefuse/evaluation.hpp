#pragma once

// Log-probability scoring: minimal pairs and image-conditioned forced choice.
// Scores are raw sums of token log-probabilities unless length
// normalisation is requested.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/data_io.hpp"
#include "gatefuse/model.hpp"
#include "gatefuse/tokenizer.hpp"

namespace gatefuse {

struct MinimalPair {
  std::vector<std::int32_t> good, bad;  // BOS ... EOS
  std::string subtask;
};

struct ForcedChoiceItem {
  std::vector<float> image;
  std::vector<std::vector<std::int32_t>> candidates;  // content ids, no specials
  std::size_t correct = 0;
  std::vector<std::int32_t> prefix;  // content ids conditioned on but not scored
};

struct ScoringOptions {
  bool length_normalize = false;
  std::optional<double> forced_gate;
  std::size_t batch_size = 32;
};

/// One sequence to score: targets at positions > prefix_len are summed.
struct ScoringRequest {
  std::vector<std::int32_t> tokens;  // BOS ... EOS
  std::size_t prefix_len = 0;        // tokens after BOS that are context only
  const std::vector<float>* image = nullptr;
};

/// Batched scoring in eval mode with no autodiff tape. Requests in one call
/// must either all carry images or all be text-only.
template <class Real>
std::vector<double> score_sequences(const GatedFusionModel<Real>& model,
                                    const std::vector<ScoringRequest>& requests,
                                    const ScoringOptions& opt = {}) {
  if (model.training()) throw std::logic_error("score_sequences: model must be in eval mode");
  const auto& c = model.config();
  std::vector<double> out;
  out.reserve(requests.size());
  NoGradGuard no_grad;
  ForwardOptions fo;
  fo.forced_gate = opt.forced_gate;
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t start = 0; start < requests.size(); start += bs) {
    const std::size_t end = std::min(requests.size(), start + bs);
    const bool with_image = requests[start].image != nullptr;
    std::vector<std::vector<std::int32_t>> rows;
    std::vector<float> images;
    for (std::size_t i = start; i < end; ++i) {
      const auto& r = requests[i];
      if (r.tokens.size() < 2)
        throw std::invalid_argument("sequence_logprob: sequence needs BOS and at least one target");
      if (r.prefix_len + 2 > r.tokens.size())
        throw std::invalid_argument("sequence_logprob: prefix leaves nothing to score");
      if ((r.image != nullptr) != with_image)
        throw std::invalid_argument("score_sequences: mixed image and text-only requests in one call");
      if (with_image) {
        if (r.image->size() != c.image_embedding_dim)
          throw std::invalid_argument("sequence_logprob: image has dim " + std::to_string(r.image->size()) +
                                      ", model expects " + std::to_string(c.image_embedding_dim));
        images.insert(images.end(), r.image->begin(), r.image->end());
      }
      rows.push_back(r.tokens);
    }
    auto batch = Batch::from_sequences(rows, with_image ? Modality::image_caption : Modality::text_only,
                                       std::move(images));
    batch.validate(c);
    const auto trace = model.forward(batch, fo);
    const auto logits = trace.logits.data();
    const std::size_t T = batch.seq_len, V = c.vocab_size;
    for (std::size_t i = start; i < end; ++i) {
      const auto& r = requests[i];
      const std::size_t b = i - start;
      double total = 0;
      std::size_t scored = 0;
      for (std::size_t t = r.prefix_len + 1; t < r.tokens.size(); ++t) {
        const Real* row = logits.data() + (b * T + t - 1) * V;
        const double mx = *std::max_element(row, row + V);
        double z = 0;
        for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
        total += static_cast<double>(row[r.tokens[t]]) - mx - std::log(z);
        ++scored;
      }
      out.push_back(opt.length_normalize ? total / static_cast<double>(scored) : total);
    }
  }
  return out;
}

/// Sum of log p(token_t | tokens_<t) over positions 1..L-1.
template <class Real>
double sequence_logprob(const GatedFusionModel<Real>& model, const std::vector<std::int32_t>& tokens,
                        const std::vector<float>* image = nullptr, const ScoringOptions& opt = {}) {
  return score_sequences(model, {{tokens, 0, image}}, opt).at(0);
}

struct AccuracyReport {
  double accuracy = 0;
  std::size_t correct = 0, total = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> subtasks;  // label -> (correct, total)
};

inline nlohmann::json to_json(const AccuracyReport& r) {
  nlohmann::json sub = nlohmann::json::object();
  for (const auto& [k, v] : r.subtasks)
    sub[k] = {{"accuracy", static_cast<double>(v.first) / static_cast<double>(v.second)},
              {"correct", v.first},
              {"total", v.second}};
  return {{"accuracy", r.accuracy}, {"correct", r.correct}, {"total", r.total}, {"subtasks", sub}};
}

/// Fraction of pairs with logprob(good) > logprob(bad); ties are failures.
template <class Real>
AccuracyReport minimal_pair_accuracy(const GatedFusionModel<Real>& model, const std::vector<MinimalPair>& pairs,
                                     const ScoringOptions& opt = {}) {
  if (pairs.empty()) throw std::invalid_argument("minimal_pair_accuracy: empty suite");
  std::vector<ScoringRequest> req;
  for (const auto& p : pairs) {
    req.push_back({p.good, 0, nullptr});
    req.push_back({p.bad, 0, nullptr});
  }
  const auto s = score_sequences(model, req, opt);
  AccuracyReport r;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool ok = s[2 * i] > s[2 * i + 1];
    r.correct += ok;
    auto& sub = r.subtasks[pairs[i].subtask.empty() ? "all" : pairs[i].subtask];
    sub.first += ok;
    ++sub.second;
  }
  r.total = pairs.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  return r;
}

inline std::vector<std::int32_t> frame_candidate(const std::vector<std::int32_t>& prefix,
                                                 const std::vector<std::int32_t>& candidate) {
  std::vector<std::int32_t> t{kBosId};
  t.insert(t.end(), prefix.begin(), prefix.end());
  t.insert(t.end(), candidate.begin(), candidate.end());
  t.push_back(kEosId);
  return t;
}

/// Fraction of items whose highest-scoring candidate (image-conditioned,
/// prefix not scored) is the correct one. A tie for the maximum fails.
template <class Real>
AccuracyReport forced_choice_accuracy(const GatedFusionModel<Real>& model,
                                      const std::vector<ForcedChoiceItem>& items,
                                      const ScoringOptions& opt = {}) {
  if (items.empty()) throw std::invalid_argument("forced_choice_accuracy: empty suite");
  std::vector<ScoringRequest> req;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    if (it.image.empty())
      throw std::invalid_argument("forced choice item " + std::to_string(i) + " has no image");
    if (it.candidates.size() < 2)
      throw std::invalid_argument("forced choice item " + std::to_string(i) + " needs >= 2 candidates");
    if (it.correct >= it.candidates.size())
      throw std::invalid_argument("forced choice item " + std::to_string(i) + ": correct index out of range");
    for (const auto& cand : it.candidates)
      req.push_back({frame_candidate(it.prefix, cand), it.prefix.size(), &it.image});
  }
  const auto s = score_sequences(model, req, opt);
  AccuracyReport r;
  std::size_t k = 0;
  for (const auto& it : items) {
    const double best = s[k + it.correct];
    bool ok = true;
    for (std::size_t j = 0; j < it.candidates.size(); ++j)
      if (j != it.correct && s[k + j] >= best) ok = false;
    r.correct += ok;
    k += it.candidates.size();
  }
  r.total = items.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.total);
  r.subtasks["all"] = {r.correct, r.total};
  return r;
}

// ------------------------------------------------------------ suite files

/// [{"good": str, "bad": str, "subtask": str?}, ...]
inline std::vector<MinimalPair> parse_minimal_pairs(const std::string& text, const Tokenizer& tok,
                                                    std::size_t max_seq_len, const std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError(name + ": expected a JSON array of {good, bad, subtask}");
  std::vector<MinimalPair> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_object() || !e.contains("good") || !e.contains("bad") || !e["good"].is_string() ||
        !e["bad"].is_string() || (e.contains("subtask") && !e["subtask"].is_string()))
      throw FormatError(name + ": record " + std::to_string(i) + " needs string 'good' and 'bad'");
    out.push_back({encode_sample(tok, e["good"].get<std::string>(), max_seq_len),
                   encode_sample(tok, e["bad"].get<std::string>(), max_seq_len),
                   e.value("subtask", std::string{})});
  }
  return out;
}

/// [{"image_index": n, "candidates": [str, ...], "correct": k, "prefix": str?}, ...]
inline std::vector<ForcedChoiceItem> parse_forced_choice(const std::string& text, const Tokenizer& tok,
                                                         const EmbeddingMatrix& images,
                                                         std::size_t max_seq_len, const std::string& name) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + ": " + e.what());
  }
  if (!j.is_array()) throw FormatError(name + ": expected a JSON array of forced-choice items");
  std::vector<ForcedChoiceItem> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    const std::string where = name + ": item " + std::to_string(i);
    if (!e.is_object() || !e.contains("image_index") || !e["image_index"].is_number_unsigned() ||
        !e.contains("candidates") || !e["candidates"].is_array() || !e.contains("correct") ||
        !e["correct"].is_number_unsigned())
      throw FormatError(where + " needs image_index, candidates[] and correct");
    ForcedChoiceItem it;
    const auto idx = e["image_index"].get<std::size_t>();
    if (idx >= images.count)
      throw FormatError(where + " references image " + std::to_string(idx) + " but only " +
                        std::to_string(images.count) + " embeddings exist");
    const auto row = images.row(idx);
    it.image.assign(row.begin(), row.end());
    std::vector<std::string> seen;
    for (const auto& cand : e["candidates"]) {
      if (!cand.is_string()) throw FormatError(where + ": candidates must be strings");
      const auto s = cand.get<std::string>();
      if (std::find(seen.begin(), seen.end(), s) != seen.end())
        throw FormatError(where + ": duplicate candidate '" + s + "'");
      seen.push_back(s);
      it.candidates.push_back(tok.encode_content(s));
    }
    if (it.candidates.size() < 2) throw FormatError(where + ": needs at least 2 candidates");
    it.correct = e["correct"].get<std::size_t>();
    if (it.correct >= it.candidates.size()) throw FormatError(where + ": correct index out of range");
    if (e.contains("prefix")) {
      if (!e["prefix"].is_string()) throw FormatError(where + ": prefix must be a string");
      it.prefix = tok.encode_content(e["prefix"].get<std::string>());
    }
    for (const auto& cand : it.candidates)
      if (it.prefix.size() + cand.size() + 2 > max_seq_len)
        throw FormatError(where + ": prefix + candidate exceed max_seq_len " + std::to_string(max_seq_len));
    out.push_back(std::move(it));
  }
  return out;
}

}  // namespace gatefuse
