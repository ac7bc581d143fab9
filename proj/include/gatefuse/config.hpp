#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include "json.hpp"

namespace gatefuse {

enum class GateVariant { none, soft_feature, soft_token, hard_feature, hard_token };
enum class Enhancement {
  none,
  film_text,
  film_cross,
  film_image,
  dyintra_text,
  dyintra_cross,
  dyintra_image,
  channel_attention
};
enum class Objective { ntp, ntp_clip, ntp_lcg };
enum class ImageEncoderKind { transformer, mlp, projection_only };

namespace detail {

template <class E, std::size_t N>
using NameTable = std::array<std::pair<E, std::string_view>, N>;

inline constexpr NameTable<GateVariant, 5> kGateNames{{{GateVariant::none, "none"},
                                                       {GateVariant::soft_feature, "soft_feature"},
                                                       {GateVariant::soft_token, "soft_token"},
                                                       {GateVariant::hard_feature, "hard_feature"},
                                                       {GateVariant::hard_token, "hard_token"}}};
inline constexpr NameTable<Enhancement, 8> kEnhancementNames{
    {{Enhancement::none, "none"},
     {Enhancement::film_text, "film_text"},
     {Enhancement::film_cross, "film_cross"},
     {Enhancement::film_image, "film_image"},
     {Enhancement::dyintra_text, "dyintra_text"},
     {Enhancement::dyintra_cross, "dyintra_cross"},
     {Enhancement::dyintra_image, "dyintra_image"},
     {Enhancement::channel_attention, "channel_attention"}}};
inline constexpr NameTable<Objective, 3> kObjectiveNames{{{Objective::ntp, "ntp"},
                                                          {Objective::ntp_clip, "ntp_clip"},
                                                          {Objective::ntp_lcg, "ntp_lcg"}}};
inline constexpr NameTable<ImageEncoderKind, 3> kEncoderNames{
    {{ImageEncoderKind::transformer, "transformer"},
     {ImageEncoderKind::mlp, "mlp"},
     {ImageEncoderKind::projection_only, "projection_only"}}};

template <class E, std::size_t N>
std::string_view name_of(const NameTable<E, N>& table, E value) {
  for (const auto& [e, n] : table)
    if (e == value) return n;
  return "?";
}

template <class E, std::size_t N>
E parse_name(const NameTable<E, N>& table, std::string_view text, std::string_view what) {
  for (const auto& [e, n] : table)
    if (n == text) return e;
  throw std::invalid_argument("unknown " + std::string(what) + " '" + std::string(text) + "'");
}

}  // namespace detail

inline std::string_view to_string(GateVariant v) { return detail::name_of(detail::kGateNames, v); }
inline std::string_view to_string(Enhancement v) {
  return detail::name_of(detail::kEnhancementNames, v);
}
inline std::string_view to_string(Objective v) { return detail::name_of(detail::kObjectiveNames, v); }
inline std::string_view to_string(ImageEncoderKind v) {
  return detail::name_of(detail::kEncoderNames, v);
}
inline GateVariant parse_gate_variant(std::string_view s) {
  return detail::parse_name(detail::kGateNames, s, "gate_variant");
}
inline Enhancement parse_enhancement(std::string_view s) {
  return detail::parse_name(detail::kEnhancementNames, s, "enhancement");
}
inline Objective parse_objective(std::string_view s) {
  return detail::parse_name(detail::kObjectiveNames, s, "objective");
}
inline ImageEncoderKind parse_image_encoder_kind(std::string_view s) {
  return detail::parse_name(detail::kEncoderNames, s, "image_encoder_kind");
}

inline bool is_hard(GateVariant v) {
  return v == GateVariant::hard_feature || v == GateVariant::hard_token;
}

/// Architecture hyperparameters. Defaults are the full-size base model.
struct ModelConfig {
  std::size_t d_model = 768;
  std::size_t hidden_dim = 3072;
  std::size_t n_heads = 8;
  std::size_t n_decoder_layers = 8;
  std::size_t n_image_encoder_layers = 5;
  std::size_t vocab_size = 50260;
  std::size_t max_seq_len = 128;
  double dropout_rate = 0.1;
  double layer_norm_eps = 1e-5;
  std::size_t image_embedding_dim = 768;
  GateVariant gate_variant = GateVariant::soft_feature;
  Enhancement enhancement = Enhancement::none;
  Objective objective = Objective::ntp;
  bool tie_output_weights = false;
  ImageEncoderKind image_encoder_kind = ImageEncoderKind::transformer;
  std::size_t channel_reduction = 16;
  double clip_tau_init = 0.07;
  double lcg_tau_init = 0.07;
  double init_std = 0.02;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      fail("d_model must be a positive multiple of n_heads");
    if (hidden_dim == 0) fail("hidden_dim must be positive");
    if (max_seq_len < 2) fail("max_seq_len must be at least 2");
    if (vocab_size < 4) fail("vocab_size must include the 3 reserved specials plus tokens");
    if (image_embedding_dim == 0) fail("image_embedding_dim must be positive");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must be in [0, 1)");
    if (layer_norm_eps <= 0.0) fail("layer_norm_eps must be positive");
    if (enhancement == Enhancement::channel_attention &&
        (channel_reduction == 0 || d_model % channel_reduction != 0))
      fail("channel_reduction must divide d_model");
    if (clip_tau_init < 0.05 || clip_tau_init > 1.0) fail("clip_tau_init outside [0.05, 1]");
    if (lcg_tau_init < 0.05 || lcg_tau_init > 2.0) fail("lcg_tau_init outside [0.05, 2]");
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},
          {"n_decoder_layers", c.n_decoder_layers},
          {"n_image_encoder_layers", c.n_image_encoder_layers},
          {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len},
          {"dropout_rate", c.dropout_rate},
          {"layer_norm_eps", c.layer_norm_eps},
          {"image_embedding_dim", c.image_embedding_dim},
          {"gate_variant", to_string(c.gate_variant)},
          {"enhancement", to_string(c.enhancement)},
          {"objective", to_string(c.objective)},
          {"tie_output_weights", c.tie_output_weights},
          {"image_encoder_kind", to_string(c.image_encoder_kind)},
          {"channel_reduction", c.channel_reduction},
          {"clip_tau_init", c.clip_tau_init},
          {"lcg_tau_init", c.lcg_tau_init},
          {"init_std", c.init_std}};
}

namespace detail {
inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& section) {
  if (!j.is_object()) throw std::invalid_argument(section + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key))
      throw std::invalid_argument(section + ": unknown key '" + key + "'");
}
}  // namespace detail

/// Parses a model section; missing keys keep their defaults, unknown keys
/// are an error.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  static const std::set<std::string> known{
      "d_model",         "hidden_dim",     "n_heads",          "n_decoder_layers",
      "n_image_encoder_layers", "vocab_size", "max_seq_len",   "dropout_rate",
      "layer_norm_eps",  "image_embedding_dim", "gate_variant", "enhancement",
      "objective",       "tie_output_weights",  "image_encoder_kind", "channel_reduction",
      "clip_tau_init",   "lcg_tau_init",   "init_std"};
  detail::reject_unknown_keys(j, known, "model");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("d_model", c.d_model);
  get("hidden_dim", c.hidden_dim);
  get("n_heads", c.n_heads);
  get("n_decoder_layers", c.n_decoder_layers);
  get("n_image_encoder_layers", c.n_image_encoder_layers);
  get("vocab_size", c.vocab_size);
  get("max_seq_len", c.max_seq_len);
  get("dropout_rate", c.dropout_rate);
  get("layer_norm_eps", c.layer_norm_eps);
  get("image_embedding_dim", c.image_embedding_dim);
  get("tie_output_weights", c.tie_output_weights);
  get("channel_reduction", c.channel_reduction);
  get("clip_tau_init", c.clip_tau_init);
  get("lcg_tau_init", c.lcg_tau_init);
  get("init_std", c.init_std);
  if (j.contains("gate_variant")) c.gate_variant = parse_gate_variant(j.at("gate_variant").get<std::string>());
  if (j.contains("enhancement")) c.enhancement = parse_enhancement(j.at("enhancement").get<std::string>());
  if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
  if (j.contains("image_encoder_kind"))
    c.image_encoder_kind = parse_image_encoder_kind(j.at("image_encoder_kind").get<std::string>());
  c.validate();
  return c;
}

}  // namespace gatefuse
