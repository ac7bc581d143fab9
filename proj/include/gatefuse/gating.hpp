#pragma once

// Token-wise dynamic gates that mix the self-attended text stream with the
// cross-attended stream:  fused = g * h_text + (1 - g) * h_cross.
// g weights the text stream, so lower g means more visual contribution.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "gatefuse/config.hpp"
#include "gatefuse/layers.hpp"
#include "gatefuse/ops.hpp"
#include "gatefuse/rng.hpp"

namespace gatefuse {

enum class GateMode { train, infer };

template <class Real>
struct GateParams {
  GateVariant variant = GateVariant::none;
  Linear<Real> proj;  // [2d] -> d, 1, 2d or 2 depending on variant
};

inline std::size_t gate_output_width(GateVariant v, std::size_t d) {
  switch (v) {
    case GateVariant::soft_feature: return d;
    case GateVariant::soft_token: return 1;
    case GateVariant::hard_feature: return 2 * d;
    case GateVariant::hard_token: return 2;
    case GateVariant::none: return 0;
  }
  return 0;
}

template <class Real>
GateParams<Real> make_gate(ParameterStore<Real>& store, const std::string& name,
                           GateVariant variant, std::size_t d) {
  GateParams<Real> p;
  p.variant = variant;
  if (variant != GateVariant::none)
    p.proj = make_linear(store, name, 2 * d, gate_output_width(variant, d));
  return p;
}

template <class Real>
struct GateOutput {
  Tensor<Real> gate;   // [B,T,d] or [B,T,1], values in [0,1]
  Tensor<Real> fused;  // [B,T,d]
};

namespace detail {

inline void check_gate_inputs(const Shape& a, const Shape& b, const char* op) {
  if (a != b || a.size() != 3)
    throw std::invalid_argument(std::string(op) + ": expected equal [B,T,d] shapes, got " +
                                shape_str(a) + " and " + shape_str(b));
}

template <class Real>
Tensor<Real> gate_logits(const Tensor<Real>& h_text, const Tensor<Real>& h_cross,
                         const GateParams<Real>& params) {
  return params.proj(ops::concat_last(h_text, h_cross));
}

/// Gumbel-softmax over pairs on the last axis of logits [..., 2]; returns
/// the probability of class 0 with the last axis removed.
template <class Real>
Tensor<Real> gumbel_class0(const Tensor<Real>& pair_logits, const Tensor<Real>& noise, double tau) {
  auto perturbed = ops::mul_scalar(ops::add(pair_logits, noise), static_cast<Real>(1.0 / tau));
  return ops::select_last(ops::softmax_last(perturbed), 0);
}

/// One-hot selection of class 0 (text) when its logit is >= the other.
template <class Real>
Tensor<Real> argmax_class0(const Tensor<Real>& pair_logits, Shape out_shape) {
  const auto& l = pair_logits.values();
  std::vector<Real> g(l.size() / 2);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = l[2 * i] >= l[2 * i + 1] ? Real(1) : Real(0);
  return Tensor<Real>(std::move(out_shape), std::move(g));
}

}  // namespace detail

/// g * h_text + (1 - g) * h_cross, broadcasting g over features when needed.
template <class Real>
Tensor<Real> fuse(const Tensor<Real>& g, const Tensor<Real>& h_text, const Tensor<Real>& h_cross) {
  return ops::add(ops::mul(g, h_text), ops::mul(ops::rsub_scalar(Real(1), g), h_cross));
}

template <class Real>
GateOutput<Real> soft_gate_per_feature(const Tensor<Real>& h_text, const Tensor<Real>& h_cross,
                                       const GateParams<Real>& params) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "soft_gate_per_feature");
  auto g = ops::sigmoid(detail::gate_logits(h_text, h_cross, params));
  return {g, fuse(g, h_text, h_cross)};
}

template <class Real>
GateOutput<Real> soft_gate_per_token(const Tensor<Real>& h_text, const Tensor<Real>& h_cross,
                                     const GateParams<Real>& params) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "soft_gate_per_token");
  auto g = ops::sigmoid(detail::gate_logits(h_text, h_cross, params));
  return {g, fuse(g, h_text, h_cross)};
}

/// Draws Gumbel(0,1) noise of the given shape, row-major.
template <class Real>
Tensor<Real> gumbel_noise(Shape shape, Rng& rng) {
  std::vector<Real> z(numel(shape));
  for (auto& v : z) v = static_cast<Real>(rng.gumbel());
  return Tensor<Real>(std::move(shape), std::move(z));
}

/// Hard per-feature gate with caller-supplied noise [B,T,d,2] (train path).
template <class Real>
GateOutput<Real> hard_gate_per_feature_with_noise(const Tensor<Real>& h_text,
                                                  const Tensor<Real>& h_cross,
                                                  const GateParams<Real>& params, double tau,
                                                  const Tensor<Real>& noise) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "hard_gate_per_feature");
  if (!(tau > 0)) throw std::invalid_argument("hard_gate_per_feature: tau must be > 0");
  const auto& s = h_text.shape();
  auto logits = ops::reshape(detail::gate_logits(h_text, h_cross, params), {s[0], s[1], s[2], 2});
  auto g = detail::gumbel_class0(logits, noise, tau);
  return {g, fuse(g, h_text, h_cross)};
}

template <class Real>
GateOutput<Real> hard_gate_per_feature(const Tensor<Real>& h_text, const Tensor<Real>& h_cross,
                                       const GateParams<Real>& params, double tau, GateMode mode,
                                       Rng* rng) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "hard_gate_per_feature");
  const auto& s = h_text.shape();
  if (mode == GateMode::infer) {
    auto logits = detail::gate_logits(h_text, h_cross, params);
    auto g = detail::argmax_class0(logits, s);
    return {g, fuse(g, h_text, h_cross)};
  }
  if (!(tau > 0)) throw std::invalid_argument("hard_gate_per_feature: tau must be > 0");
  if (!rng) throw std::invalid_argument("hard_gate_per_feature: train mode requires an rng");
  return hard_gate_per_feature_with_noise(h_text, h_cross, params, tau,
                                          gumbel_noise<Real>({s[0], s[1], s[2], 2}, *rng));
}

/// Hard per-token gate with caller-supplied noise [B,T,2] (train path).
template <class Real>
GateOutput<Real> hard_gate_per_token_with_noise(const Tensor<Real>& h_text,
                                                const Tensor<Real>& h_cross,
                                                const GateParams<Real>& params, double tau,
                                                const Tensor<Real>& noise) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "hard_gate_per_token");
  if (!(tau > 0)) throw std::invalid_argument("hard_gate_per_token: tau must be > 0");
  const auto& s = h_text.shape();
  auto logits = detail::gate_logits(h_text, h_cross, params);  // [B,T,2]
  auto g = ops::reshape(detail::gumbel_class0(logits, noise, tau), {s[0], s[1], 1});
  return {g, fuse(g, h_text, h_cross)};
}

template <class Real>
GateOutput<Real> hard_gate_per_token(const Tensor<Real>& h_text, const Tensor<Real>& h_cross,
                                     const GateParams<Real>& params, double tau, GateMode mode,
                                     Rng* rng) {
  detail::check_gate_inputs(h_text.shape(), h_cross.shape(), "hard_gate_per_token");
  const auto& s = h_text.shape();
  if (mode == GateMode::infer) {
    auto logits = detail::gate_logits(h_text, h_cross, params);
    auto g = detail::argmax_class0(logits, {s[0], s[1], 1});
    return {g, fuse(g, h_text, h_cross)};
  }
  if (!(tau > 0)) throw std::invalid_argument("hard_gate_per_token: tau must be > 0");
  if (!rng) throw std::invalid_argument("hard_gate_per_token: train mode requires an rng");
  return hard_gate_per_token_with_noise(h_text, h_cross, params, tau,
                                        gumbel_noise<Real>({s[0], s[1], 2}, *rng));
}

/// Dispatches on the configured variant.
template <class Real>
GateOutput<Real> apply_gate(const GateParams<Real>& params, const Tensor<Real>& h_text,
                            const Tensor<Real>& h_cross, double tau, GateMode mode, Rng* rng) {
  switch (params.variant) {
    case GateVariant::soft_feature: return soft_gate_per_feature(h_text, h_cross, params);
    case GateVariant::soft_token: return soft_gate_per_token(h_text, h_cross, params);
    case GateVariant::hard_feature:
      return hard_gate_per_feature(h_text, h_cross, params, tau, mode, rng);
    case GateVariant::hard_token:
      return hard_gate_per_token(h_text, h_cross, params, tau, mode, rng);
    case GateVariant::none: break;
  }
  throw std::invalid_argument("apply_gate: gate variant is none");
}

enum class AnnealDomain { global, per_epoch };

/// Linear temperature decay from tau_start to tau_end over the first
/// anneal_fraction of the image-caption steps, constant afterwards.
struct TemperatureSchedule {
  double tau_start = 1.0;
  double tau_end = 0.1;
  double anneal_fraction = 0.8;
  std::int64_t total_image_caption_steps = 1;
};

inline double tau_at(const TemperatureSchedule& s, std::int64_t image_caption_step) {
  if (image_caption_step < 0) throw std::invalid_argument("tau_at: negative step");
  const double horizon = s.anneal_fraction * static_cast<double>(s.total_image_caption_steps);
  if (horizon <= 0.0) return s.tau_end;
  const double t = static_cast<double>(image_caption_step) / horizon;
  if (t >= 1.0) return s.tau_end;
  return s.tau_start + (s.tau_end - s.tau_start) * t;
}

}  // namespace gatefuse
