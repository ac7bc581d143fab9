#pragma once

// Toy multimodal data. Each image embedding is noise plus one boosted
// coordinate per attribute group; its caption names the argmax of every
// group, so captions are a deterministic function of the embedding.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/data_io.hpp"
#include "gatefuse/rng.hpp"

namespace gatefuse {

struct SyntheticOptions {
  std::uint64_t seed = 42;
  std::size_t n_images = 256;
  std::size_t n_text = 512;
  std::size_t n_minimal_pairs = 200;
  std::size_t n_forced_choice = 100;
  double signal = 3.0;  // boost added to the chosen coordinate of each group
};

namespace synth {

inline constexpr std::array<const char*, 4> kColors{"red", "blue", "green", "yellow"};
inline constexpr std::array<const char*, 4> kNouns{"dog", "cat", "bird", "car"};
inline constexpr std::array<const char*, 4> kNounsPl{"dogs", "cats", "birds", "cars"};
inline constexpr std::array<const char*, 4> kVerbs{"runs", "sleeps", "jumps", "sits"};
inline constexpr std::array<const char*, 4> kVerbsPl{"run", "sleep", "jump", "sit"};
inline constexpr std::array<const char*, 2> kSizes{"big", "small"};
inline constexpr std::array<const char*, 2> kAdverbs{"now", "again"};

// Coordinate layout of an embedding.
inline constexpr std::size_t kColorAt = 0, kNounAt = 4, kVerbAt = 8, kNumberAt = 12, kSizeAt = 14;
inline constexpr std::size_t kImageDim = 16;

struct Scene {
  std::size_t color = 0, noun = 0, verb = 0, size = 0;
  bool plural = false;
};

inline std::size_t argmax(const float* v, std::size_t n) {
  return static_cast<std::size_t>(std::max_element(v, v + n) - v);
}

inline Scene read_scene(std::span<const float> e) {
  return {argmax(e.data() + kColorAt, 4), argmax(e.data() + kNounAt, 4), argmax(e.data() + kVerbAt, 4),
          argmax(e.data() + kSizeAt, 2), e[kNumberAt + 1] > e[kNumberAt]};
}

inline std::string describe(const Scene& s) {
  return std::string("the ") + kSizes[s.size] + " " + kColors[s.color] + " " +
         (s.plural ? kNounsPl[s.noun] : kNouns[s.noun]) + " " + (s.plural ? kVerbsPl[s.verb] : kVerbs[s.verb]);
}

inline Scene random_scene(Rng& rng) {
  return {rng.below(4), rng.below(4), rng.below(4), rng.below(2), rng.below(2) == 1};
}

/// Grammatical text-only sentence over the shared vocabulary.
inline std::string sentence(Rng& rng) {
  const auto s = random_scene(rng);
  const bool indefinite = !s.plural && rng.below(2) == 1;
  std::string out = indefinite ? "a " : "the ";
  if (rng.below(2)) out += std::string(kSizes[s.size]) + " ";
  if (rng.below(2)) out += std::string(kColors[s.color]) + " ";
  out += s.plural ? kNounsPl[s.noun] : kNouns[s.noun];
  out += " ";
  out += s.plural ? kVerbsPl[s.verb] : kVerbs[s.verb];
  if (rng.below(3) == 0) out += std::string(" ") + kAdverbs[rng.below(2)];
  return out + " .";
}

}  // namespace synth

struct SyntheticData {
  std::vector<std::string> text;
  std::vector<CaptionRecord> captions;
  EmbeddingMatrix embeddings;
  nlohmann::json minimal_pairs = nlohmann::json::array();
  nlohmann::json forced_choice = nlohmann::json::array();
  std::string tags_csv;
  std::string lexicon_csv;
};

inline SyntheticData make_synthetic(const SyntheticOptions& o) {
  using namespace synth;
  if (o.n_images == 0) throw std::invalid_argument("make-synthetic: n_images must be >= 1");
  SyntheticData d;

  Rng img(o.seed, "synthetic/images");
  d.embeddings.count = static_cast<std::uint32_t>(o.n_images);
  d.embeddings.dim = static_cast<std::uint32_t>(kImageDim);
  for (std::size_t i = 0; i < o.n_images; ++i) {
    const auto s = random_scene(img);
    std::array<float, kImageDim> e{};
    for (auto& v : e) v = static_cast<float>(img.normal());
    e[kColorAt + s.color] += static_cast<float>(o.signal);
    e[kNounAt + s.noun] += static_cast<float>(o.signal);
    e[kVerbAt + s.verb] += static_cast<float>(o.signal);
    e[kNumberAt + (s.plural ? 1 : 0)] += static_cast<float>(o.signal);
    e[kSizeAt + s.size] += static_cast<float>(o.signal);
    d.embeddings.data.insert(d.embeddings.data.end(), e.begin(), e.end());
  }
  for (std::size_t i = 0; i < o.n_images; ++i)
    d.captions.push_back({describe(read_scene(d.embeddings.row(i))), static_cast<std::uint32_t>(i)});

  Rng text(o.seed, "synthetic/text");
  for (std::size_t i = 0; i < o.n_text; ++i) d.text.push_back(sentence(text));

  Rng mp(o.seed, "synthetic/minimal_pairs");
  for (std::size_t i = 0; i < o.n_minimal_pairs; ++i) {
    const auto s = random_scene(mp);
    const std::string noun = s.plural ? kNounsPl[s.noun] : kNouns[s.noun];
    const std::string verb = s.plural ? kVerbsPl[s.verb] : kVerbs[s.verb];
    const std::string wrong_verb = s.plural ? kVerbs[s.verb] : kVerbsPl[s.verb];
    std::string good, bad, task;
    switch (i % 3) {
      case 0:
        good = "the " + noun + " " + verb + " .";
        bad = "the " + noun + " " + wrong_verb + " .";
        task = "agreement";
        break;
      case 1:
        good = std::string("a ") + kNouns[s.noun] + " " + kVerbs[s.verb] + " .";
        bad = std::string("a ") + kNounsPl[s.noun] + " " + kVerbs[s.verb] + " .";
        task = "determiner_number";
        break;
      default:
        good = std::string("the ") + kColors[s.color] + " " + noun + " " + verb + " .";
        bad = "the " + noun + " " + kColors[s.color] + " " + verb + " .";
        task = "adjective_order";
        break;
    }
    d.minimal_pairs.push_back({{"good", good}, {"bad", bad}, {"subtask", task}});
  }

  Rng fc(o.seed, "synthetic/forced_choice");
  for (std::size_t i = 0; i < o.n_forced_choice; ++i) {
    const auto index = fc.below(o.n_images);
    const auto s = read_scene(d.embeddings.row(index));
    auto foil = s;
    if (fc.below(2)) foil.color = (s.color + 1 + fc.below(3)) % 4;
    else foil.noun = (s.noun + 1 + fc.below(3)) % 4;
    const auto correct = fc.below(2);
    nlohmann::json candidates = nlohmann::json::array();
    candidates.push_back(describe(correct == 0 ? s : foil));
    candidates.push_back(describe(correct == 0 ? foil : s));
    d.forced_choice.push_back({{"image_index", index}, {"candidates", candidates}, {"correct", correct}});
  }

  d.tags_csv = "token,label\nthe,DET\na,DET\n.,PUNCT\n";
  for (auto w : kSizes) d.tags_csv += std::string(w) + ",ADJ\n";
  for (auto w : kColors) d.tags_csv += std::string(w) + ",ADJ\n";
  for (auto w : kNouns) d.tags_csv += std::string(w) + ",NOUN\n";
  for (auto w : kNounsPl) d.tags_csv += std::string(w) + ",NOUN\n";
  for (auto w : kVerbs) d.tags_csv += std::string(w) + ",VERB\n";
  for (auto w : kVerbsPl) d.tags_csv += std::string(w) + ",VERB\n";
  for (auto w : kAdverbs) d.tags_csv += std::string(w) + ",ADV\n";

  // Concreteness / imageability on an MRC-like 100..700 scale: nouns high,
  // function words low, with per-word jitter.
  Rng lex(o.seed, "synthetic/lexicon");
  d.lexicon_csv = "word,concreteness,imageability\n";
  auto add = [&](const char* w, double base) {
    char line[96];
    std::snprintf(line, sizeof line, "%s,%.1f,%.1f\n", w, base + 30.0 * lex.normal(),
                  base + 20.0 + 30.0 * lex.normal());
    d.lexicon_csv += line;
  };
  add("the", 230);
  add("a", 220);
  for (auto w : kSizes) add(w, 380);
  for (auto w : kColors) add(w, 480);
  for (auto w : kNouns) add(w, 610);
  for (auto w : kNounsPl) add(w, 590);
  for (auto w : kVerbs) add(w, 420);
  for (auto w : kVerbsPl) add(w, 410);
  for (auto w : kAdverbs) add(w, 280);
  return d;
}

/// File names written by write_synthetic.
struct SyntheticFiles {
  static constexpr const char* text = "text.txt";
  static constexpr const char* captions = "captions.json";
  static constexpr const char* embeddings = "embeddings.gfem";
  static constexpr const char* minimal_pairs = "minimal_pairs.json";
  static constexpr const char* forced_choice = "forced_choice.json";
  static constexpr const char* tags = "tags.csv";
  static constexpr const char* lexicon = "lexicon.csv";
};

inline void write_synthetic(const SyntheticData& d, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const std::filesystem::path dir(out_dir);
  std::string text;
  for (const auto& line : d.text) text += line + "\n";
  atomic_write((dir / SyntheticFiles::text).string(), text);
  atomic_write((dir / SyntheticFiles::captions).string(), serialize_captions(d.captions));
  write_embeddings((dir / SyntheticFiles::embeddings).string(), d.embeddings);
  atomic_write((dir / SyntheticFiles::minimal_pairs).string(), d.minimal_pairs.dump(1) + "\n");
  atomic_write((dir / SyntheticFiles::forced_choice).string(), d.forced_choice.dump(1) + "\n");
  atomic_write((dir / SyntheticFiles::tags).string(), d.tags_csv);
  atomic_write((dir / SyntheticFiles::lexicon).string(), d.lexicon_csv);
}

}  // namespace gatefuse
