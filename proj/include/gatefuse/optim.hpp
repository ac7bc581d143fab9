#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "gatefuse/errors.hpp"
#include "gatefuse/tensor.hpp"

namespace gatefuse {

/// Linear warmup to peak, then cosine decay to zero at total_steps.
struct LrSchedule {
  double peak_lr = 5e-5;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 1;
};

inline double lr_at(const LrSchedule& s, std::int64_t step) {
  if (step < 0 || step > s.total_steps)
    throw std::invalid_argument("lr_at: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(s.total_steps) + "]");
  if (step < s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const std::int64_t decay = s.total_steps - s.warmup_steps;
  if (decay <= 0) return s.peak_lr;
  const double progress =
      static_cast<double>(step - s.warmup_steps) / static_cast<double>(decay);
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// Decoupled-weight-decay Adam state for a fixed parameter list.
template <class Real>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step_count = 0;
  std::vector<std::vector<Real>> first_moment;
  std::vector<std::vector<Real>> second_moment;

  void init(const std::vector<Tensor<Real>>& params) {
    first_moment.clear();
    second_moment.clear();
    for (const auto& p : params) {
      first_moment.emplace_back(p.size(), Real(0));
      second_moment.emplace_back(p.size(), Real(0));
    }
    step_count = 0;
  }

  /// One update. Throws NumericError before touching anything if any grad
  /// is non-finite.
  void step(std::vector<Tensor<Real>>& params, double lr) {
    if (first_moment.size() != params.size()) init(params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].has_grad()) continue;
      for (Real g : params[i].grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("adamw_step: non-finite gradient in parameter " +
                             std::to_string(i));
    }
    ++step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      // Parameters that received no gradient this step are left untouched.
      if (!params[i].has_grad()) continue;
      auto& p = params[i].values();
      const std::vector<Real> g = params[i].grad_copy();
      auto& m = first_moment[i];
      auto& v = second_moment[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = g[j];
        double pj = static_cast<double>(p[j]);
        pj -= lr * weight_decay * pj;
        const double mj = beta1 * m[j] + (1.0 - beta1) * gj;
        const double vj = beta2 * v[j] + (1.0 - beta2) * gj * gj;
        m[j] = static_cast<Real>(mj);
        v[j] = static_cast<Real>(vj);
        const double mhat = mj / bc1;
        const double vhat = vj / bc2;
        pj -= lr * mhat / (std::sqrt(vhat) + eps);
        p[j] = static_cast<Real>(pj);
      }
    }
  }
};

template <class Real>
double global_grad_norm(const std::vector<Tensor<Real>>& params) {
  double ss = 0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (Real g : p.grad_copy()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

/// Rescales all grads so the global L2 norm is at most max_norm. Returns the
/// pre-clip norm.
template <class Real>
double clip_grad_norm(std::vector<Tensor<Real>>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const double scale = max_norm / norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad()) g = static_cast<Real>(static_cast<double>(g) * scale);
    }
  }
  return norm;
}

}  // namespace gatefuse
