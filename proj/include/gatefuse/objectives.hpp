#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "gatefuse/model.hpp"
#include "gatefuse/ops.hpp"

namespace gatefuse {

inline constexpr double kClipTauMin = 0.05, kClipTauMax = 1.0;
inline constexpr double kLcgTauMin = 0.05, kLcgTauMax = 2.0;

struct LossReport {
  double ntp = 0;
  double auxiliary = 0;
  double total = 0;
  double lambda = 1.0;
};

/// Sum of next-token cross-entropy over real target positions, plus the
/// number of those positions. Position t predicts token t+1.
template <class Real>
std::pair<Tensor<Real>, std::size_t> ntp_loss_sum(const Tensor<Real>& logits, const Batch& batch) {
  const std::size_t B = batch.batch_size, T = batch.seq_len;
  if (logits.rank() != 3 || logits.dim(0) != B || logits.dim(1) != T)
    throw std::invalid_argument("ntp_loss: logits shape " + shape_str(logits.shape()) +
                                " does not match batch");
  std::vector<std::int32_t> targets(B * T, 0);
  std::vector<Real> weights(B * T, Real(0));
  std::size_t count = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t + 1 < T; ++t)
      if (batch.pad_mask[b * T + t + 1]) {
        targets[b * T + t] = batch.token_ids[b * T + t + 1];
        weights[b * T + t] = Real(1);
        ++count;
      }
  if (count == 0) throw std::invalid_argument("ntp_loss: every target position is masked");
  return {ops::weighted_nll_sum(logits, targets, weights), count};
}

/// Mean next-token cross-entropy over real target positions.
template <class Real>
Tensor<Real> ntp_loss(const Tensor<Real>& logits, const Batch& batch) {
  auto [sum, count] = ntp_loss_sum(logits, batch);
  return ops::mul_scalar(sum, Real(1) / Real(count));
}

/// Symmetric InfoNCE on a precomputed [B,B] similarity matrix (already
/// divided by the temperature); the diagonal holds the positives.
template <class Real>
Tensor<Real> clip_loss_from_similarity(const Tensor<Real>& text_to_image,
                                       const Tensor<Real>& image_to_text) {
  if (text_to_image.rank() != 2 || text_to_image.dim(0) != text_to_image.dim(1) ||
      image_to_text.shape() != text_to_image.shape())
    throw std::invalid_argument("clip_loss: similarity must be square");
  const std::size_t B = text_to_image.dim(0);
  if (B == 0) throw std::invalid_argument("clip_loss: empty batch");
  std::vector<std::int32_t> diag(B);
  for (std::size_t i = 0; i < B; ++i) diag[i] = static_cast<std::int32_t>(i);
  const std::vector<Real> ones(B, Real(1));
  auto t2i = ops::weighted_nll_sum(text_to_image, diag, ones);
  auto i2t = ops::weighted_nll_sum(image_to_text, diag, ones);
  return ops::mul_scalar(ops::add(t2i, i2t), Real(0.5) / Real(B));
}

template <class Real>
Tensor<Real> inverse_temperature(const Tensor<Real>& log_tau) {
  return ops::exp(ops::mul_scalar(log_tau, Real(-1)));
}

/// Sentence-level contrastive loss between pooled text [B,d] and image
/// encodings [B,d]: project, L2-normalise, scale by 1/tau, symmetric CE.
template <class Real>
Tensor<Real> clip_loss(const Tensor<Real>& pooled_text, const Tensor<Real>& image_enc,
                       const ContrastiveParams<Real>& p) {
  if (pooled_text.rank() != 2 || pooled_text.dim(0) == 0)
    throw std::invalid_argument("clip_loss: expected non-empty [B,d] text");
  if (image_enc.shape() != pooled_text.shape())
    throw std::invalid_argument("clip_loss: text " + shape_str(pooled_text.shape()) +
                                " vs image " + shape_str(image_enc.shape()));
  auto t = ops::l2_normalize_last(p.clip_text_proj(pooled_text));
  auto i = ops::l2_normalize_last(p.clip_image_proj(image_enc));
  auto inv_tau = inverse_temperature(p.clip_log_tau);
  return clip_loss_from_similarity(ops::mul(ops::matmul_nt(t, i), inv_tau),
                                   ops::mul(ops::matmul_nt(i, t), inv_tau));
}

/// Word-level contrastive grounding. For every real token j of caption i,
/// the loss is 0.5 * (-log l1 - log l2) where l1 contrasts the caption's own
/// image against all images for that token, and l2 contrasts the token
/// against every real token of the other captions for image i. Averaged
/// over real tokens.
template <class Real>
Tensor<Real> lcg_loss(const Tensor<Real>& first_layer_hidden, const Tensor<Real>& image_enc,
                      const std::vector<std::uint8_t>& valid, const ContrastiveParams<Real>& p) {
  if (first_layer_hidden.rank() != 3 || image_enc.rank() != 2 ||
      image_enc.dim(0) != first_layer_hidden.dim(0) ||
      image_enc.dim(1) != first_layer_hidden.dim(2))
    throw std::invalid_argument("lcg_loss: hidden " + shape_str(first_layer_hidden.shape()) +
                                " vs image " + shape_str(image_enc.shape()));
  const std::size_t B = first_layer_hidden.dim(0), T = first_layer_hidden.dim(1),
                    d = first_layer_hidden.dim(2), BT = B * T;
  if (valid.size() != BT) throw std::invalid_argument("lcg_loss: mask size mismatch");
  std::vector<std::size_t> tokens;
  for (std::size_t pos = 0; pos < BT; ++pos)
    if (valid[pos]) tokens.push_back(pos);
  if (tokens.empty()) throw std::invalid_argument("lcg_loss: no valid tokens");
  const std::size_t N = tokens.size();

  auto inv_tau = inverse_temperature(p.lcg_log_tau);
  auto text = ops::matmul_nt(ops::reshape(first_layer_hidden, {BT, d}), p.lcg_text_map);  // [BT,d]
  auto image = ops::matmul_nt(image_enc, p.lcg_image_map);                                // [B,d]
  auto token_by_image = ops::mul(ops::matmul_nt(text, image), inv_tau);   // [BT,B]
  auto image_by_token = ops::mul(ops::matmul_nt(image, text), inv_tau);   // [B,BT]

  std::vector<std::size_t> pos_idx(N), row_idx(N * BT);
  std::vector<std::uint8_t> excluded(N * BT);
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t tok = tokens[n], caption = tok / T;
    pos_idx[n] = tok * B + caption;
    for (std::size_t c = 0; c < BT; ++c) {
      row_idx[n * BT + c] = caption * BT + c;
      const bool negative = c / T != caption && valid[c];
      excluded[n * BT + c] = !(c == tok || negative);
    }
  }
  auto positive = ops::take(token_by_image, pos_idx, {N});
  auto lse_images = ops::take(ops::logsumexp_last(token_by_image), tokens, {N});
  auto candidates = ops::masked_fill(ops::take(image_by_token, row_idx, {N, BT}), excluded,
                                     -std::numeric_limits<Real>::infinity());
  auto lse_tokens = ops::logsumexp_last(candidates);
  auto per_token = ops::sub(ops::add(lse_images, lse_tokens), ops::mul_scalar(positive, Real(2)));
  return ops::mul_scalar(ops::sum_all(per_token), Real(0.5) / Real(N));
}

/// total = ntp + lambda * auxiliary
inline LossReport compose_losses(double ntp, double auxiliary, double lambda) {
  return {ntp, auxiliary, ntp + lambda * auxiliary, lambda};
}

template <class Real>
struct StepLoss {
  Tensor<Real> total;
  Tensor<Real> ntp_sum;      // summed token cross-entropy
  std::size_t ntp_count = 0;
  Tensor<Real> auxiliary;    // undefined when inactive
  LossReport report;
};

/// Auxiliary objectives run only on image-caption batches.
template <class Real>
Tensor<Real> auxiliary_loss(const GatedFusionModel<Real>& model, const Batch& batch,
                            const ForwardTrace<Real>& trace) {
  if (batch.modality != Modality::image_caption) return {};
  switch (model.config().objective) {
    case Objective::ntp_clip:
      return clip_loss(trace.pooled_text, trace.image_encoding, model.contrastive());
    case Objective::ntp_lcg:
      return lcg_loss(trace.first_layer_hidden, trace.image_encoding, batch.pad_mask,
                      model.contrastive());
    case Objective::ntp: break;
  }
  return {};
}

/// NTP (mean over real targets) plus lambda times the active auxiliary loss.
template <class Real>
StepLoss<Real> total_loss(const GatedFusionModel<Real>& model, const Batch& batch,
                          const ForwardTrace<Real>& trace, double lambda) {
  StepLoss<Real> out;
  std::tie(out.ntp_sum, out.ntp_count) = ntp_loss_sum(trace.logits, batch);
  auto ntp = ops::mul_scalar(out.ntp_sum, Real(1) / Real(out.ntp_count));
  out.auxiliary = auxiliary_loss(model, batch, trace);
  out.total = out.auxiliary.defined() && lambda != 0.0
                  ? ops::add(ntp, ops::mul_scalar(out.auxiliary, static_cast<Real>(lambda)))
                  : ntp;
  out.report = compose_losses(static_cast<double>(ntp.item()),
                              out.auxiliary.defined() ? static_cast<double>(out.auxiliary.item()) : 0.0,
                              lambda);
  return out;
}

/// Clamps learnable temperatures back into their ranges (after each step).
template <class Real>
void project_temperatures(ContrastiveParams<Real>& p) {
  auto clamp = [](Tensor<Real>& log_tau, double lo, double hi) {
    if (!log_tau.defined()) return;
    auto& v = log_tau.values()[0];
    v = static_cast<Real>(std::clamp(static_cast<double>(v), std::log(lo), std::log(hi)));
  };
  clamp(p.clip_log_tau, kClipTauMin, kClipTauMax);
  clamp(p.lcg_log_tau, kLcgTauMin, kLcgTauMax);
}

}  // namespace gatefuse
