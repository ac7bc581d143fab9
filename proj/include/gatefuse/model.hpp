#pragma once

// Dual-stream decoder: a causal text stream with learned token/position
// embeddings, an image stream (projection + optional encoder) built from one
// global embedding per sample, and decoder layers that run
//   self-attention -> cross-attention -> dynamic gate -> feed-forward
// with pre-layer-norm residual blocks. Text-only batches skip the
// cross-attention and the gate entirely.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gatefuse/config.hpp"
#include "gatefuse/enhancement.hpp"
#include "gatefuse/gating.hpp"
#include "gatefuse/layers.hpp"
#include "gatefuse/ops.hpp"
#include "gatefuse/rng.hpp"
#include "gatefuse/tokenizer.hpp"

namespace gatefuse {

enum class Modality { text_only, image_caption };

inline std::string_view to_string(Modality m) {
  return m == Modality::text_only ? "text_only" : "image_caption";
}

/// Padded token batch, optionally paired with one global image embedding
/// per row. A text_only batch may still carry an (ignored) image tensor,
/// e.g. the zero-filled placeholders of a pooled data loader.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> token_ids;  // batch_size * seq_len
  std::vector<std::uint8_t> pad_mask;   // 1 = real token
  std::vector<float> image_embedding;   // batch_size * image dim, or empty
  Modality modality = Modality::text_only;

  bool has_image() const noexcept { return !image_embedding.empty(); }

  void validate(const ModelConfig& config) const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("Batch: " + m); };
    if (batch_size == 0 || seq_len == 0) fail("empty batch");
    if (token_ids.size() != batch_size * seq_len || pad_mask.size() != token_ids.size())
      fail("token/mask sizes do not match batch_size x seq_len");
    if (seq_len > config.max_seq_len)
      fail("sequence length " + std::to_string(seq_len) + " exceeds max_seq_len " +
           std::to_string(config.max_seq_len));
    for (std::size_t i = 0; i < token_ids.size(); ++i)
      if (token_ids[i] < 0 || static_cast<std::size_t>(token_ids[i]) >= config.vocab_size)
        fail("token id " + std::to_string(token_ids[i]) + " out of range");
    for (std::size_t b = 0; b < batch_size; ++b) {
      if (!pad_mask[b * seq_len] || token_ids[b * seq_len] != kBosId)
        fail("row " + std::to_string(b) + " does not start with BOS");
      for (std::size_t t = 1; t < seq_len; ++t)
        if (pad_mask[b * seq_len + t] && !pad_mask[b * seq_len + t - 1])
          fail("row " + std::to_string(b) + " has a real token after padding");
    }
    if (modality == Modality::image_caption && !has_image())
      fail("image_caption batch without image embeddings");
    if (has_image() && image_embedding.size() != batch_size * config.image_embedding_dim)
      fail("image embedding size does not match batch_size x image_embedding_dim");
  }

  /// Builds a batch from token sequences (already BOS/EOS framed), padding
  /// to the longest row.
  static Batch from_sequences(const std::vector<std::vector<std::int32_t>>& rows,
                              Modality modality = Modality::text_only,
                              std::vector<float> images = {}) {
    Batch b;
    b.batch_size = rows.size();
    for (const auto& r : rows) b.seq_len = std::max(b.seq_len, r.size());
    b.token_ids.assign(b.batch_size * b.seq_len, kPadId);
    b.pad_mask.assign(b.batch_size * b.seq_len, 0);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t t = 0; t < rows[i].size(); ++t) {
        b.token_ids[i * b.seq_len + t] = rows[i][t];
        b.pad_mask[i * b.seq_len + t] = 1;
      }
    b.modality = modality;
    b.image_embedding = std::move(images);
    return b;
  }
};

/// Per-call knobs that are not part of the architecture.
struct ForwardOptions {
  double tau = 1.0;            // Gumbel temperature for hard gates (training only)
  RngStreams* rng = nullptr;   // dropout / Gumbel substreams, required when training
  std::optional<double> forced_gate;  // replaces every gate with this constant
};

template <class Real>
struct ForwardTrace {
  Tensor<Real> logits;               // [B,T,V]
  Tensor<Real> embedding_output;     // [B,T,d]
  Tensor<Real> first_layer_hidden;   // [B,T,d], h_text of decoder layer 0
  Tensor<Real> pooled_text;          // [B,d], mean of embedding output over real tokens
  Tensor<Real> image_encoding;       // [B,d], undefined for text-only batches
  std::vector<Tensor<Real>> gate_values;  // per decoder layer, image batches with a gate only
  std::vector<Tensor<Real>> enhanced;     // tensors produced by the configured enhancement
};

template <class Real>
struct DecoderLayerParams {
  LayerNorm<Real> ln_self, ln_cross, ln_ffn;
  MultiHeadAttention<Real> self_attn, cross_attn;
  FeedForward<Real> ffn;
  GateParams<Real> gate;
};

template <class Real>
struct EncoderLayerParams {
  LayerNorm<Real> ln_attn, ln_ffn;
  MultiHeadAttention<Real> attn;
  FeedForward<Real> ffn;
};

/// Contrastive heads; only the ones the objective needs are instantiated.
template <class Real>
struct ContrastiveParams {
  Linear<Real> clip_text_proj, clip_image_proj;
  Tensor<Real> clip_log_tau;
  Tensor<Real> lcg_text_map, lcg_image_map;  // [d, d]
  Tensor<Real> lcg_log_tau;
};

template <class Real>
class GatedFusionModel {
 public:
  GatedFusionModel(const ModelConfig& config, std::uint64_t seed)
      : config_(config), params_(seed, config.init_std) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore<Real>& parameters() noexcept { return params_; }
  const ParameterStore<Real>& parameters() const noexcept { return params_; }
  ContrastiveParams<Real>& contrastive() noexcept { return contrastive_; }
  const ContrastiveParams<Real>& contrastive() const noexcept { return contrastive_; }

  void set_training(bool training) noexcept { training_ = training; }
  bool training() const noexcept { return training_; }

  /// Token embedding + learned positional embedding, then dropout.
  Tensor<Real> embed_text(const Batch& batch, const ForwardOptions& opt) const {
    batch.validate(config_);
    const std::size_t B = batch.batch_size, T = batch.seq_len;
    auto tok = ops::embedding(token_embedding_, batch.token_ids, {B, T});
    std::vector<std::int32_t> positions(T);
    for (std::size_t t = 0; t < T; ++t) positions[t] = static_cast<std::int32_t>(t);
    auto pos = ops::embedding(position_embedding_, positions, {T});
    return dropout(ops::add(tok, pos), opt);
  }

  /// Projects [B, image_dim] embeddings to [B,1,d] and runs the image
  /// encoder (plus channel attention when configured).
  Tensor<Real> encode_image(const Tensor<Real>& embedding, const ForwardOptions& opt) const {
    if (embedding.rank() != 2 || embedding.dim(1) != config_.image_embedding_dim)
      throw std::invalid_argument("encode_image: expected [B, " +
                                  std::to_string(config_.image_embedding_dim) + "], got " +
                                  shape_str(embedding.shape()));
    const std::size_t B = embedding.dim(0), d = config_.d_model;
    auto h = ops::reshape(image_projection_(embedding), {B, 1, d});
    switch (config_.image_encoder_kind) {
      case ImageEncoderKind::transformer:
        for (const auto& layer : encoder_layers_) {
          auto normed = layer.ln_attn(h);
          h = ops::add(h, dropout(layer.attn(normed, normed, {}, false), opt));
          h = ops::add(h, dropout(layer.ffn(layer.ln_ffn(h)), opt));
        }
        h = encoder_final_ln_(h);
        break;
      case ImageEncoderKind::mlp:
        h = image_mlp_(h);
        break;
      case ImageEncoderKind::projection_only:
        break;
    }
    if (config_.enhancement == Enhancement::channel_attention)
      h = channel_attention(h, channel_attention_);
    return h;
  }

  struct LayerOutput {
    Tensor<Real> hidden;
    Tensor<Real> text_hidden;  // h_text after the self-attention residual
    Tensor<Real> gate;         // undefined when the gate is skipped
  };

  /// One decoder block. image_enc is [B,1,d] or undefined (text-only).
  LayerOutput decoder_layer(std::size_t index, const Tensor<Real>& h, const Tensor<Real>& image_enc,
                            const std::vector<std::uint8_t>& pad_mask, const ForwardOptions& opt,
                            ForwardTrace<Real>* trace = nullptr) const {
    const auto& L = decoder_layers_.at(index);
    const bool has_image = image_enc.defined();
    auto normed = L.ln_self(h);
    auto h_text = ops::add(h, dropout(L.self_attn(normed, normed, pad_mask, true), opt));
    LayerOutput out;
    out.text_hidden = h_text;
    if (!has_image) {
      out.hidden = ops::add(h_text, dropout(L.ffn(L.ln_ffn(h_text)), opt));
      return out;
    }
    const auto point = integration_point(config_.enhancement);
    const bool modulating = index == 0 && modulation_.kind != Enhancement::none;
    if (modulating && point == IntegrationPoint::text_self_attention) {
      h_text = modulation_(h_text, image_enc);
      if (trace) trace->enhanced.push_back(h_text);
    }
    auto h_cross =
        ops::add(h_text, dropout(L.cross_attn(L.ln_cross(h_text), image_enc, {}, false), opt));
    if (modulating && point == IntegrationPoint::cross_attention) {
      h_cross = modulation_(h_cross, image_enc);
      if (trace) trace->enhanced.push_back(h_cross);
    }
    Tensor<Real> fused = h_cross;
    if (opt.forced_gate) {
      out.gate = Tensor<Real>::full({h_text.dim(0), h_text.dim(1), 1},
                                    static_cast<Real>(*opt.forced_gate));
      fused = fuse(out.gate, h_text, h_cross);
    } else if (config_.gate_variant != GateVariant::none) {
      const GateMode mode = training_ ? GateMode::train : GateMode::infer;
      Rng* gumbel = (training_ && is_hard(config_.gate_variant)) ? &stream(opt, "gumbel") : nullptr;
      auto g = apply_gate(L.gate, h_text, h_cross, opt.tau, mode, gumbel);
      out.gate = g.gate;
      fused = g.fused;
    }
    out.hidden = ops::add(fused, dropout(L.ffn(L.ln_ffn(fused)), opt));
    return out;
  }

  ForwardTrace<Real> forward(const Batch& batch, const ForwardOptions& opt = {}) const {
    ForwardTrace<Real> trace;
    const std::size_t B = batch.batch_size;
    trace.embedding_output = embed_text(batch, opt);
    trace.pooled_text = ops::reshape(masked_mean(trace.embedding_output, batch.pad_mask),
                                     {B, config_.d_model});
    Tensor<Real> image_enc;
    if (batch.modality == Modality::image_caption) {
      std::vector<Real> img(batch.image_embedding.begin(), batch.image_embedding.end());
      image_enc = encode_image(Tensor<Real>({B, config_.image_embedding_dim}, std::move(img)), opt);
      trace.image_encoding = ops::reshape(image_enc, {B, config_.d_model});
      if (config_.enhancement == Enhancement::channel_attention)
        trace.enhanced.push_back(image_enc);
      if (modulation_.kind != Enhancement::none &&
          integration_point(config_.enhancement) == IntegrationPoint::image) {
        image_enc = modulation_(image_enc, masked_mean(trace.embedding_output, batch.pad_mask));
        trace.enhanced.push_back(image_enc);
      }
    }
    auto h = trace.embedding_output;
    for (std::size_t i = 0; i < decoder_layers_.size(); ++i) {
      auto layer = decoder_layer(i, h, image_enc, batch.pad_mask, opt, &trace);
      if (i == 0) trace.first_layer_hidden = layer.text_hidden;
      if (layer.gate.defined()) trace.gate_values.push_back(layer.gate);
      h = layer.hidden;
    }
    h = final_ln_(h);
    if (config_.tie_output_weights) {
      trace.logits = ops::add(ops::matmul_nt(h, token_embedding_), output_bias_);
    } else {
      trace.logits = output_projection_(h);
    }
    return trace;
  }

  /// Mean of x[B,T,d] over positions with mask != 0 -> [B,1,d].
  static Tensor<Real> masked_mean(const Tensor<Real>& x, const std::vector<std::uint8_t>& mask) {
    const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
    if (mask.size() != B * T) throw std::invalid_argument("masked_mean: mask size mismatch");
    std::vector<Real> w(B * T), inv(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t count = 0;
      for (std::size_t t = 0; t < T; ++t) {
        w[b * T + t] = mask[b * T + t] ? Real(1) : Real(0);
        count += mask[b * T + t] ? 1 : 0;
      }
      if (count == 0) throw std::invalid_argument("masked_mean: row with no real tokens");
      inv[b] = Real(1) / Real(count);
    }
    auto summed = ops::sum_axis(ops::mul(x, Tensor<Real>({B, T, 1}, std::move(w))), 1);
    return ops::reshape(ops::mul(summed, Tensor<Real>({B, 1}, std::move(inv))), {B, 1, d});
  }

 private:
  Tensor<Real> dropout(const Tensor<Real>& x, const ForwardOptions& opt) const {
    if (!training_ || config_.dropout_rate <= 0.0) return x;
    return ops::dropout(x, config_.dropout_rate, &stream(opt, "dropout"), true);
  }

  static Rng& stream(const ForwardOptions& opt, const std::string& name) {
    if (!opt.rng) throw std::invalid_argument("forward: training mode requires rng streams");
    return opt.rng->stream(name);
  }

  void build() {
    const auto& c = config_;
    const std::size_t d = c.d_model;
    token_embedding_ = params_.normal("embed.token", {c.vocab_size, d});
    position_embedding_ = params_.normal("embed.position", {c.max_seq_len, d});

    image_projection_ = make_linear(params_, "image.projection", c.image_embedding_dim, d);
    if (c.image_encoder_kind == ImageEncoderKind::transformer) {
      for (std::size_t i = 0; i < c.n_image_encoder_layers; ++i) {
        const std::string p = "image.encoder." + std::to_string(i);
        encoder_layers_.push_back({make_layer_norm(params_, p + ".ln_attn", d, c.layer_norm_eps),
                                   make_layer_norm(params_, p + ".ln_ffn", d, c.layer_norm_eps),
                                   make_attention(params_, p + ".attn", d, c.n_heads),
                                   make_feed_forward(params_, p + ".ffn", d, c.hidden_dim)});
      }
      encoder_final_ln_ = make_layer_norm(params_, "image.encoder.final_ln", d, c.layer_norm_eps);
    } else if (c.image_encoder_kind == ImageEncoderKind::mlp) {
      image_mlp_ = make_feed_forward(params_, "image.mlp", d, c.hidden_dim);
    }
    if (c.enhancement == Enhancement::channel_attention)
      channel_attention_ = make_channel_attention(params_, "image.channel_attention", d,
                                                  c.channel_reduction);

    for (std::size_t i = 0; i < c.n_decoder_layers; ++i) {
      const std::string p = "decoder." + std::to_string(i);
      DecoderLayerParams<Real> L;
      L.ln_self = make_layer_norm(params_, p + ".ln_self", d, c.layer_norm_eps);
      L.self_attn = make_attention(params_, p + ".self_attn", d, c.n_heads);
      L.ln_cross = make_layer_norm(params_, p + ".ln_cross", d, c.layer_norm_eps);
      L.cross_attn = make_attention(params_, p + ".cross_attn", d, c.n_heads);
      L.gate = make_gate(params_, p + ".gate", c.gate_variant, d);
      L.ln_ffn = make_layer_norm(params_, p + ".ln_ffn", d, c.layer_norm_eps);
      L.ffn = make_feed_forward(params_, p + ".ffn", d, c.hidden_dim);
      decoder_layers_.push_back(std::move(L));
    }
    if (is_film(c.enhancement) || is_dyintra(c.enhancement))
      modulation_ = make_modulation(params_, "enhance", c.enhancement, d);
    final_ln_ = make_layer_norm(params_, "decoder.final_ln", d, c.layer_norm_eps);
    if (c.tie_output_weights) {
      output_bias_ = params_.zeros("output.bias", {c.vocab_size});
    } else {
      output_projection_ = make_linear(params_, "output", d, c.vocab_size);
    }

    if (c.objective == Objective::ntp_clip) {
      contrastive_.clip_text_proj = make_linear(params_, "clip.text_proj", d, d);
      contrastive_.clip_image_proj = make_linear(params_, "clip.image_proj", d, d);
      contrastive_.clip_log_tau =
          params_.constant("clip.log_tau", {1}, static_cast<Real>(std::log(c.clip_tau_init)));
    } else if (c.objective == Objective::ntp_lcg) {
      contrastive_.lcg_text_map = params_.normal("lcg.text_map", {d, d});
      contrastive_.lcg_image_map = params_.normal("lcg.image_map", {d, d});
      contrastive_.lcg_log_tau =
          params_.constant("lcg.log_tau", {1}, static_cast<Real>(std::log(c.lcg_tau_init)));
    }
  }

  ModelConfig config_;
  ParameterStore<Real> params_;
  bool training_ = false;

  Tensor<Real> token_embedding_, position_embedding_;
  Linear<Real> image_projection_;
  std::vector<EncoderLayerParams<Real>> encoder_layers_;
  LayerNorm<Real> encoder_final_ln_;
  FeedForward<Real> image_mlp_;
  ChannelAttentionParams<Real> channel_attention_;
  Modulation<Real> modulation_;
  std::vector<DecoderLayerParams<Real>> decoder_layers_;
  LayerNorm<Real> final_ln_;
  Linear<Real> output_projection_;
  Tensor<Real> output_bias_;
  ContrastiveParams<Real> contrastive_;
};

/// Closed-form trainable-scalar count for a configuration; allocates nothing.
inline std::uint64_t count_parameters(const ModelConfig& c) {
  c.validate();
  using u = std::uint64_t;
  const u d = c.d_model, h = c.hidden_dim, V = c.vocab_size;
  const u linear_dd = d * d + d;
  const u attention = 4 * linear_dd;
  const u ffn = d * h + h + h * d + d;
  const u ln = 2 * d;
  u gate = 0;
  if (c.gate_variant != GateVariant::none) {
    const u width = gate_output_width(c.gate_variant, c.d_model);
    gate = 2 * d * width + width;
  }
  u modulation = 0;
  if (is_film(c.enhancement)) modulation = 2 * linear_dd;
  if (is_dyintra(c.enhancement)) modulation = linear_dd;

  u total = V * d + c.max_seq_len * d;                              // embeddings
  total += c.image_embedding_dim * d + d;                          // image projection
  if (c.image_encoder_kind == ImageEncoderKind::transformer)
    total += c.n_image_encoder_layers * (attention + ffn + 2 * ln) + ln;
  else if (c.image_encoder_kind == ImageEncoderKind::mlp)
    total += ffn;
  if (c.enhancement == Enhancement::channel_attention) total += 2 * d * (d / c.channel_reduction);
  total += c.n_decoder_layers * (2 * attention + ffn + 3 * ln + gate) + modulation;
  total += ln;                                                       // final norm
  total += c.tie_output_weights ? V : V * d + V;                     // output head
  if (c.objective == Objective::ntp_clip) total += 2 * linear_dd + 1;
  if (c.objective == Objective::ntp_lcg) total += 2 * d * d + 1;
  return total;
}

}  // namespace gatefuse
