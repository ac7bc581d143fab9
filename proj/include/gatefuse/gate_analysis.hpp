#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/curriculum.hpp"
#include "gatefuse/data_io.hpp"
#include "gatefuse/model.hpp"
#include "gatefuse/stats.hpp"
#include "gatefuse/tokenizer.hpp"

namespace gatefuse {

struct GateTraceRecord {
  std::int32_t token_id = -1;  // first token of the word for grouped records
  std::string surface;
  std::size_t sample = 0;
  std::size_t position = 0;
  std::vector<double> per_layer;  // mean over features, one per decoder layer
  double aggregate = 0;           // unweighted mean over layers
};

struct TraceOptions {
  std::size_t batch_size = 32;
  std::optional<double> forced_gate;
};

/// Eval-mode gate values for every non-special token of an image-caption
/// dataset. Position t is the gate computed at input position t.
template <class Real>
std::vector<GateTraceRecord> trace_gates(const GatedFusionModel<Real>& model, const CaptionDataset& data,
                                         const Tokenizer& tok, const TraceOptions& opt = {}) {
  if (model.config().gate_variant == GateVariant::none)
    throw std::invalid_argument("trace_gates: model has no gate (gate_variant = none)");
  if (model.training()) throw std::logic_error("trace_gates: model must be in eval mode");
  NoGradGuard no_grad;
  ForwardOptions fo;
  fo.forced_gate = opt.forced_gate;
  std::vector<GateTraceRecord> out;
  const std::size_t bs = std::max<std::size_t>(1, opt.batch_size);
  for (std::size_t start = 0; start < data.samples.size(); start += bs) {
    const std::size_t end = std::min(data.samples.size(), start + bs);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = collate_captions(data, idx);
    batch.validate(model.config());
    const auto trace = model.forward(batch, fo);
    const std::size_t T = batch.seq_len;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto& tokens = data.samples[idx[b]].tokens;
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < kNumSpecials) continue;
        GateTraceRecord r{tokens[t], tok.token_text(tokens[t]), idx[b], t, {}, 0};
        for (const auto& g : trace.gate_values) {
          const std::size_t width = g.dim(2);
          const auto v = g.data().subspan((b * T + t) * width, width);
          double s = 0;
          for (Real x : v) s += static_cast<double>(x);
          r.per_layer.push_back(s / static_cast<double>(width));
        }
        r.aggregate = std::accumulate(r.per_layer.begin(), r.per_layer.end(), 0.0) /
                      static_cast<double>(r.per_layer.size());
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

namespace detail {
inline bool word_char(unsigned char c) { return std::isalnum(c) || c == '\'' || c >= 0x80; }
}  // namespace detail

/// Merges token records into whitespace/punctuation-delimited words. A
/// word's gate values are the mean over the tokens that contribute to it;
/// each punctuation character is its own word and whitespace is dropped.
inline std::vector<GateTraceRecord> group_words(const std::vector<GateTraceRecord>& tokens) {
  std::vector<GateTraceRecord> words;
  GateTraceRecord cur;
  std::vector<const GateTraceRecord*> parts;
  auto emit = [&](GateTraceRecord w, const std::vector<const GateTraceRecord*>& from) {
    w.per_layer.assign(from.front()->per_layer.size(), 0.0);
    w.aggregate = 0;
    for (const auto* p : from) {
      for (std::size_t l = 0; l < w.per_layer.size(); ++l) w.per_layer[l] += p->per_layer[l];
      w.aggregate += p->aggregate;
    }
    for (auto& v : w.per_layer) v /= static_cast<double>(from.size());
    w.aggregate /= static_cast<double>(from.size());
    words.push_back(std::move(w));
  };
  auto flush = [&] {
    if (!parts.empty()) emit(cur, parts);
    parts.clear();
    cur = {};
  };
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& t = tokens[i];
    if (i > 0 && t.sample != tokens[i - 1].sample) flush();
    for (unsigned char c : t.surface) {
      if (detail::word_char(c)) {
        if (parts.empty()) {
          cur.token_id = t.token_id;
          cur.sample = t.sample;
          cur.position = t.position;
        }
        cur.surface.push_back(static_cast<char>(c));
        if (parts.empty() || parts.back() != &t) parts.push_back(&t);
      } else {
        flush();
        if (!std::isspace(c)) emit({t.token_id, std::string(1, static_cast<char>(c)), t.sample, t.position, {}, 0},
                                   {&t});
      }
    }
  }
  flush();
  return words;
}

// ------------------------------------------------------------------ tables

struct CategoryRow {
  std::string label;
  double mean = 0, sd = 0;  // population SD; both 0 for an empty row
  std::size_t count = 0;
};

struct CategoryTable {
  std::vector<CategoryRow> rows;
  std::size_t matched = 0, unmatched = 0;
  std::map<std::string, std::vector<double>> values;  // label -> aggregates, for tests
};

namespace detail {
inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline CategoryRow summarize(const std::string& label, const std::vector<double>& v) {
  CategoryRow r{label, 0, 0, v.size()};
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.sd = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}
}  // namespace detail

/// Per-label mean/SD/count of record aggregates; labels sorted.
inline CategoryTable aggregate_by_category(const std::vector<GateTraceRecord>& records,
                                           const std::map<std::string, std::string>& tag_map,
                                           bool case_insensitive = false) {
  std::map<std::string, std::string> tags;
  for (const auto& [k, v] : tag_map) tags[case_insensitive ? detail::lower(k) : k] = v;
  CategoryTable table;
  for (const auto& r : records) {
    const auto it = tags.find(case_insensitive ? detail::lower(r.surface) : r.surface);
    if (it == tags.end()) {
      ++table.unmatched;
      continue;
    }
    table.values[it->second].push_back(r.aggregate);
    ++table.matched;
  }
  if (table.matched == 0) throw std::invalid_argument("aggregate_by_category: no record matches the tag map");
  for (const auto& [label, v] : table.values) table.rows.push_back(detail::summarize(label, v));
  return table;
}

struct LexiconEntry {
  std::string word;
  double concreteness = 0, imageability = 0;
};

enum class ScoreKind { concreteness, imageability };

inline std::string_view to_string(ScoreKind k) {
  return k == ScoreKind::concreteness ? "concreteness" : "imageability";
}

struct BinEdges {
  double mean = 0, sd = 0;
  double lo() const { return mean - sd; }
  double hi() const { return mean + sd; }
};

inline BinEdges score_edges(const std::vector<LexiconEntry>& lexicon, ScoreKind kind) {
  if (lexicon.empty()) throw std::invalid_argument("bin_by_score: empty lexicon");
  std::vector<double> v;
  for (const auto& e : lexicon) v.push_back(kind == ScoreKind::concreteness ? e.concreteness : e.imageability);
  const auto s = detail::summarize("", v);
  return {s.mean, s.sd};
}

/// Bin index 0..3 for cutpoints mu-sd, mu, mu+sd; a value on a cutpoint goes
/// to the higher bin.
inline std::size_t score_bin(double score, const BinEdges& e) {
  if (score < e.lo()) return 0;
  if (score < e.mean) return 1;
  if (score < e.hi()) return 2;
  return 3;
}

inline std::vector<std::string> bin_labels(ScoreKind kind, const BinEdges& e) {
  auto num = [](double x) {
    char b[32];
    std::snprintf(b, sizeof b, "%.6g", x);
    return std::string(b);
  };
  const char* names[2][4] = {{"Very Abstract", "Abstract", "Concrete", "Very Concrete"},
                             {"Very Low", "Low", "High", "Very High"}};
  const auto& n = names[kind == ScoreKind::concreteness ? 0 : 1];
  return {std::string(n[0]) + " (<" + num(e.lo()) + ")",
          std::string(n[1]) + " (" + num(e.lo()) + "-" + num(e.mean) + ")",
          std::string(n[2]) + " (" + num(e.mean) + "-" + num(e.hi()) + ")",
          std::string(n[3]) + " (>" + num(e.hi()) + ")"};
}

namespace detail {
inline std::map<std::string, const LexiconEntry*> lexicon_index(const std::vector<LexiconEntry>& lexicon,
                                                               bool case_insensitive) {
  std::map<std::string, const LexiconEntry*> m;
  for (const auto& e : lexicon) m[case_insensitive ? lower(e.word) : e.word] = &e;
  return m;
}
}  // namespace detail

inline CategoryTable bin_by_score(const std::vector<GateTraceRecord>& records,
                                  const std::vector<LexiconEntry>& lexicon, ScoreKind kind,
                                  bool case_insensitive = false) {
  const auto edges = score_edges(lexicon, kind);
  const auto labels = bin_labels(kind, edges);
  const auto index = detail::lexicon_index(lexicon, case_insensitive);
  std::vector<std::vector<double>> bins(4);
  CategoryTable table;
  for (const auto& r : records) {
    const auto it = index.find(case_insensitive ? detail::lower(r.surface) : r.surface);
    if (it == index.end()) {
      ++table.unmatched;
      continue;
    }
    const double s = kind == ScoreKind::concreteness ? it->second->concreteness : it->second->imageability;
    bins[score_bin(s, edges)].push_back(r.aggregate);
    ++table.matched;
  }
  if (table.matched == 0) throw std::invalid_argument("bin_by_score: no record matches the lexicon");
  for (std::size_t i = 0; i < 4; ++i) {
    table.rows.push_back(detail::summarize(labels[i], bins[i]));
    table.values[labels[i]] = bins[i];
  }
  return table;
}

/// Spearman correlation between record aggregates and lexicon scores over
/// matched records.
inline TestResult score_correlation(const std::vector<GateTraceRecord>& records,
                                    const std::vector<LexiconEntry>& lexicon, ScoreKind kind,
                                    bool case_insensitive = false) {
  const auto index = detail::lexicon_index(lexicon, case_insensitive);
  std::vector<double> gates, scores;
  for (const auto& r : records) {
    const auto it = index.find(case_insensitive ? detail::lower(r.surface) : r.surface);
    if (it == index.end()) continue;
    gates.push_back(r.aggregate);
    scores.push_back(kind == ScoreKind::concreteness ? it->second->concreteness : it->second->imageability);
  }
  return spearman(gates, scores);
}

// --------------------------------------------------------------- CSV files

/// Splits one CSV line; fields may be double-quoted with "" as an escape.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false, was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field.push_back(c);
      }
    } else if (c == '"' && field.empty() && !was_quoted) {
      quoted = was_quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(field));
      field.clear();
      was_quoted = false;
    } else {
      field.push_back(c);
    }
  }
  if (quoted) throw FormatError("unterminated quote in CSV line: " + line);
  out.push_back(std::move(field));
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

namespace detail {
/// Data rows of a CSV file whose first line must equal `header`.
inline std::vector<std::vector<std::string>> read_csv(const std::string& text, const std::string& header,
                                                      std::size_t columns, const std::string& name) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != header) throw FormatError(name + ": line 1 should be the header '" + header + "'");
      continue;
    }
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != columns)
      throw FormatError(name + ": line " + std::to_string(line_no) + " has " + std::to_string(f.size()) +
                        " fields, expected " + std::to_string(columns));
    rows.push_back(std::move(f));
  }
  if (line_no == 0) throw FormatError(name + ": empty file");
  return rows;
}

inline double parse_score(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v))
    throw FormatError(where + ": expected a finite number, got '" + s + "'");
  return v;
}
}  // namespace detail

/// CSV with header `token,label`.
inline std::map<std::string, std::string> parse_tag_map(const std::string& text, const std::string& name) {
  std::map<std::string, std::string> m;
  for (const auto& r : detail::read_csv(text, "token,label", 2, name)) m[r[0]] = r[1];
  return m;
}

/// CSV with header `word,concreteness,imageability`.
inline std::vector<LexiconEntry> parse_lexicon(const std::string& text, const std::string& name) {
  std::vector<LexiconEntry> out;
  for (const auto& r : detail::read_csv(text, "word,concreteness,imageability", 3, name))
    out.push_back({r[0], detail::parse_score(r[1], name + " '" + r[0] + "'"),
                   detail::parse_score(r[2], name + " '" + r[0] + "'")});
  return out;
}

// ------------------------------------------------------------------ report

namespace detail {
inline std::string num(double v) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", v);
  return b;
}

inline std::string records_csv(const std::vector<GateTraceRecord>& records) {
  const std::size_t layers = records.empty() ? 0 : records.front().per_layer.size();
  std::string out = "sample,position,token_id,surface";
  for (std::size_t l = 0; l < layers; ++l) out += ",layer_" + std::to_string(l);
  out += ",aggregate\n";
  for (const auto& r : records) {
    out += std::to_string(r.sample) + "," + std::to_string(r.position) + "," + std::to_string(r.token_id) +
           "," + csv_field(r.surface);
    for (double v : r.per_layer) out += "," + num(v);
    out += "," + num(r.aggregate) + "\n";
  }
  return out;
}

inline std::string table_csv(const CategoryTable& t) {
  std::string out = "category,mean,sd,count\n";
  for (const auto& r : t.rows)
    out += csv_field(r.label) + "," + (r.count ? num(r.mean) : "") + "," + (r.count ? num(r.sd) : "") + "," +
           std::to_string(r.count) + "\n";
  out += "unmatched,,," + std::to_string(t.unmatched) + "\n";
  return out;
}
}  // namespace detail

struct AnalysisInputs {
  std::map<std::string, std::string> tags;
  std::vector<LexiconEntry> lexicon;
  bool case_insensitive = false;
  std::string manifest_hash;
};

/// Writes tokens.csv, words.csv, pos.csv, concreteness_bins.csv,
/// imageability_bins.csv and stats.json under out_dir. Statistics use the
/// word-level records. Returns the stats summary.
inline nlohmann::json analysis_report(const std::vector<GateTraceRecord>& token_records,
                                      const AnalysisInputs& in, const std::string& out_dir) {
  const auto words = group_words(token_records);
  const auto pos = aggregate_by_category(words, in.tags, in.case_insensitive);
  std::vector<std::vector<double>> groups;
  for (const auto& [_, v] : pos.values) groups.push_back(v);
  const auto kw = kruskal_wallis(groups);
  nlohmann::json stats = {
      {"manifest_hash", in.manifest_hash},
      {"tokens", token_records.size()},
      {"words", words.size()},
      {"kruskal_wallis", {{"H", kw.statistic}, {"p", kw.p}, {"groups", groups.size()},
                          {"matched", pos.matched}, {"unmatched", pos.unmatched}}}};
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  atomic_write((dir / "tokens.csv").string(), detail::records_csv(token_records));
  atomic_write((dir / "words.csv").string(), detail::records_csv(words));
  atomic_write((dir / "pos.csv").string(), detail::table_csv(pos));
  for (auto kind : {ScoreKind::concreteness, ScoreKind::imageability}) {
    const auto bins = bin_by_score(words, in.lexicon, kind, in.case_insensitive);
    const auto rho = score_correlation(words, in.lexicon, kind, in.case_insensitive);
    const auto edges = score_edges(in.lexicon, kind);
    atomic_write((dir / (std::string(to_string(kind)) + "_bins.csv")).string(), detail::table_csv(bins));
    stats["spearman_" + std::string(to_string(kind))] = {
        {"rho", rho.statistic}, {"p", rho.p}, {"matched", bins.matched}, {"unmatched", bins.unmatched},
        {"mean", edges.mean}, {"sd", edges.sd}};
  }
  atomic_write((dir / "stats.json").string(), stats.dump(2) + "\n");
  return stats;
}

}  // namespace gatefuse
