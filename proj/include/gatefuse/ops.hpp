#pragma once

// Differentiable primitives. Every function records a tape node when any
// input requires grad and grad mode is on; backward closures only write into
// parents that require grad.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gatefuse/rng.hpp"
#include "gatefuse/tensor.hpp"

namespace gatefuse::ops {

namespace detail {

template <class Real>
std::vector<Real>* parent_grad(TensorNode<Real>& node, std::size_t i) {
  auto& p = *node.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a,
                                     const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

struct BroadcastIndex {
  Shape out;
  bool same = false;
  std::vector<std::size_t> ia, ib;
};

inline BroadcastIndex broadcast_index(const std::string& op, const Shape& a,
                                      const Shape& b) {
  BroadcastIndex bi;
  if (a == b) {
    bi.out = a;
    bi.same = true;
    return bi;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank), sa(rank, 0), sb(rank, 0);
  std::size_t stride_a = 1, stride_b = 1;
  for (std::size_t r = 0; r < rank; ++r) {
    const std::size_t axis = rank - 1 - r;
    const std::size_t da = r < a.size() ? a[a.size() - 1 - r] : 1;
    const std::size_t db = r < b.size() ? b[b.size() - 1 - r] : 1;
    if (da != db && da != 1 && db != 1) shape_error(op, a, b);
    out[axis] = std::max(da, db);
    sa[axis] = da == 1 ? 0 : stride_a;
    sb[axis] = db == 1 ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  const std::size_t n = numel(out);
  bi.ia.resize(n);
  bi.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bi.ia[i] = oa;
    bi.ib[i] = ob;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out[ax]) {
        oa += sa[ax];
        ob += sb[ax];
        break;
      }
      oa -= sa[ax] * (out[ax] - 1);
      ob -= sb[ax] * (out[ax] - 1);
      idx[ax] = 0;
    }
  }
  bi.out = std::move(out);
  return bi;
}

// Elementwise binary op with broadcasting. df returns (d/da, d/db).
template <class Real, class F, class DF>
Tensor<Real> binary(const std::string& op, const Tensor<Real>& a,
                    const Tensor<Real>& b, F f, DF df) {
  auto bi = broadcast_index(op, a.shape(), b.shape());
  const std::size_t n = numel(bi.out);
  std::vector<Real> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (bi.same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bi.ia[i]], bv[bi.ib[i]]);
  }
  auto shape = bi.out;
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), op, {a, b},
      [bi = std::move(bi), df](TensorNode<Real>& node) {
        const auto& av = node.parents[0]->data;
        const auto& bv = node.parents[1]->data;
        auto* ga = parent_grad(node, 0);
        auto* gb = parent_grad(node, 1);
        const auto& g = node.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = bi.same ? i : bi.ia[i];
          const std::size_t ib = bi.same ? i : bi.ib[i];
          const auto [da, db] = df(av[ia], bv[ib]);
          if (ga) (*ga)[ia] += g[i] * da;
          if (gb) (*gb)[ib] += g[i] * db;
        }
      });
}

template <class Real, class F, class DF>
Tensor<Real> unary(const std::string& op, const Tensor<Real>& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), op, {x}, [df](TensorNode<Real>& node) {
        auto* gx = parent_grad(node, 0);
        if (!gx) return;
        const auto& xv = node.parents[0]->data;
        for (std::size_t i = 0; i < xv.size(); ++i)
          (*gx)[i] += node.grad[i] * df(xv[i], node.data[i]);
      });
}

inline std::size_t last_dim(const Shape& s, const std::string& op) {
  if (s.empty()) throw std::invalid_argument(op + ": rank-0 tensor");
  return s.back();
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real) { return std::pair<Real, Real>{1, 1}; });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real) { return std::pair<Real, Real>{1, -1}; });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y) { return std::pair<Real, Real>{y, x}; });
}

template <class Real>
Tensor<Real> mul_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary<Real>(
      "mul_scalar", x, [c](Real v) { return v * c; }, [c](Real, Real) { return c; });
}

template <class Real>
Tensor<Real> add_scalar(const Tensor<Real>& x, Real c) {
  return detail::unary<Real>(
      "add_scalar", x, [c](Real v) { return v + c; }, [](Real, Real) { return Real(1); });
}

/// c - x
template <class Real>
Tensor<Real> rsub_scalar(Real c, const Tensor<Real>& x) {
  return detail::unary<Real>(
      "rsub_scalar", x, [c](Real v) { return c - v; }, [](Real, Real) { return Real(-1); });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "sigmoid", x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
      [](Real, Real y) { return y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "relu", x, [](Real v) { return v > 0 ? v : Real(0); },
      [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

/// Exact (erf-based) GELU.
template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr Real inv_sqrt2 = Real(0.70710678118654752440);
  constexpr Real inv_sqrt_2pi = Real(0.39894228040143267794);
  return detail::unary<Real>(
      "gelu", x, [](Real v) { return Real(0.5) * v * (Real(1) + std::erf(v * inv_sqrt2)); },
      [](Real v, Real) {
        return Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt_2pi * std::exp(Real(-0.5) * v * v);
      });
}

template <class Real>
Tensor<Real> exp(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

template <class Real>
Tensor<Real> log(const Tensor<Real>& x) {
  return detail::unary<Real>(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

/// x[..., k] @ w[k, n] -> [..., n]
template <class Real>
Tensor<Real> matmul(const Tensor<Real>& x, const Tensor<Real>& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
    detail::shape_error("matmul", x.shape(), w.shape());
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.size() / k;
  std::vector<Real> out(rows * n, Real(0));
  const Real* xp = x.values().data();
  const Real* wp = w.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* o = out.data() + r * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const Real a = xp[r * k + kk];
      if (a == Real(0)) continue;
      const Real* wr = wp + kk * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += a * wr[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = n;
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "matmul", {x, w},
      [k, n, rows](TensorNode<Real>& node) {
        const Real* xp = node.parents[0]->data.data();
        const Real* wp = node.parents[1]->data.data();
        const Real* g = node.grad.data();
        if (auto* gx = detail::parent_grad(node, 0)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t kk = 0; kk < k; ++kk) {
              Real acc = 0;
              const Real* wr = wp + kk * n;
              const Real* gr = g + r * n;
              for (std::size_t j = 0; j < n; ++j) acc += gr[j] * wr[j];
              (*gx)[r * k + kk] += acc;
            }
        }
        if (auto* gw = detail::parent_grad(node, 1)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t kk = 0; kk < k; ++kk) {
              const Real a = xp[r * k + kk];
              if (a == Real(0)) continue;
              Real* gwr = gw->data() + kk * n;
              const Real* gr = g + r * n;
              for (std::size_t j = 0; j < n; ++j) gwr[j] += a * gr[j];
            }
        }
      });
}

/// x[..., k] @ w[n, k]^T -> [..., n]
template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& x, const Tensor<Real>& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(1))
    detail::shape_error("matmul_nt", x.shape(), w.shape());
  const std::size_t n = w.dim(0), k = w.dim(1), rows = x.size() / k;
  std::vector<Real> out(rows * n);
  const Real* xp = x.values().data();
  const Real* wp = w.values().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) {
      Real acc = 0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += xp[r * k + kk] * wp[j * k + kk];
      out[r * n + j] = acc;
    }
  Shape shape = x.shape();
  shape.back() = n;
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "matmul_nt", {x, w},
      [k, n, rows](TensorNode<Real>& node) {
        const Real* xp = node.parents[0]->data.data();
        const Real* wp = node.parents[1]->data.data();
        const Real* g = node.grad.data();
        auto* gx = detail::parent_grad(node, 0);
        auto* gw = detail::parent_grad(node, 1);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j) {
            const Real gj = g[r * n + j];
            if (gj == Real(0)) continue;
            if (gx)
              for (std::size_t kk = 0; kk < k; ++kk) (*gx)[r * k + kk] += gj * wp[j * k + kk];
            if (gw)
              for (std::size_t kk = 0; kk < k; ++kk) (*gw)[j * k + kk] += gj * xp[r * k + kk];
          }
      });
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape shape) {
  if (numel(shape) != x.size()) detail::shape_error("reshape", x.shape(), shape);
  return Tensor<Real>::make_result(
      std::move(shape), x.values(), "reshape", {x}, [](TensorNode<Real>& node) {
        if (auto* gx = detail::parent_grad(node, 0))
          for (std::size_t i = 0; i < node.grad.size(); ++i) (*gx)[i] += node.grad[i];
      });
}

template <class Real>
Tensor<Real> concat_last(const Tensor<Real>& a, const Tensor<Real>& b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || sa.empty() ||
      !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    detail::shape_error("concat_last", sa, sb);
  const std::size_t da = sa.back(), db = sb.back(), rows = a.size() / da;
  std::vector<Real> out(rows * (da + db));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().data() + r * da, da, out.data() + r * (da + db));
    std::copy_n(b.values().data() + r * db, db, out.data() + r * (da + db) + da);
  }
  Shape shape = sa;
  shape.back() = da + db;
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "concat_last", {a, b},
      [da, db, rows](TensorNode<Real>& node) {
        auto* ga = detail::parent_grad(node, 0);
        auto* gb = detail::parent_grad(node, 1);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* g = node.grad.data() + r * (da + db);
          if (ga)
            for (std::size_t i = 0; i < da; ++i) (*ga)[r * da + i] += g[i];
          if (gb)
            for (std::size_t i = 0; i < db; ++i) (*gb)[r * db + i] += g[da + i];
        }
      });
}

template <class Real>
Tensor<Real> softmax_last(const Tensor<Real>& x) {
  const std::size_t d = detail::last_dim(x.shape(), "softmax_last"), rows = x.size() / d;
  std::vector<Real> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.values().data() + r * d;
    Real* o = out.data() + r * d;
    const Real m = *std::max_element(xr, xr + d);
    Real s = 0;
    for (std::size_t i = 0; i < d; ++i) s += (o[i] = std::exp(xr[i] - m));
    for (std::size_t i = 0; i < d; ++i) o[i] /= s;
  }
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "softmax_last", {x}, [d, rows](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* y = node.data.data() + r * d;
          const Real* g = node.grad.data() + r * d;
          Real dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += y[i] * g[i];
          for (std::size_t i = 0; i < d; ++i) (*gx)[r * d + i] += y[i] * (g[i] - dot);
        }
      });
}

template <class Real>
Tensor<Real> log_softmax_last(const Tensor<Real>& x) {
  const std::size_t d = detail::last_dim(x.shape(), "log_softmax_last"), rows = x.size() / d;
  std::vector<Real> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.values().data() + r * d;
    const Real m = *std::max_element(xr, xr + d);
    Real s = 0;
    for (std::size_t i = 0; i < d; ++i) s += std::exp(xr[i] - m);
    const Real lse = m + std::log(s);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] - lse;
  }
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "log_softmax_last", {x}, [d, rows](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* y = node.data.data() + r * d;
          const Real* g = node.grad.data() + r * d;
          Real gs = 0;
          for (std::size_t i = 0; i < d; ++i) gs += g[i];
          for (std::size_t i = 0; i < d; ++i) (*gx)[r * d + i] += g[i] - std::exp(y[i]) * gs;
        }
      });
}

/// log(sum(exp(x))) over the last axis; -inf entries contribute nothing.
template <class Real>
Tensor<Real> logsumexp_last(const Tensor<Real>& x) {
  const std::size_t d = detail::last_dim(x.shape(), "logsumexp_last"), rows = x.size() / d;
  std::vector<Real> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.values().data() + r * d;
    const Real m = *std::max_element(xr, xr + d);
    if (m == -std::numeric_limits<Real>::infinity()) {
      out[r] = m;
      continue;
    }
    Real s = 0;
    for (std::size_t i = 0; i < d; ++i) s += std::exp(xr[i] - m);
    out[r] = m + std::log(s);
  }
  Shape shape = x.shape();
  shape.pop_back();
  if (shape.empty()) shape = {1};
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "logsumexp_last", {x}, [d, rows](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        const auto& xv = node.parents[0]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real lse = node.data[r];
          if (lse == -std::numeric_limits<Real>::infinity()) continue;
          for (std::size_t i = 0; i < d; ++i)
            (*gx)[r * d + i] += node.grad[r] * std::exp(xv[r * d + i] - lse);
        }
      });
}

/// Layer normalisation over the last axis with affine gain/bias.
template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain,
                        const Tensor<Real>& bias, Real eps) {
  const std::size_t d = detail::last_dim(x.shape(), "layer_norm");
  if (gain.size() != d || bias.size() != d)
    detail::shape_error("layer_norm", x.shape(), gain.shape());
  const std::size_t rows = x.size() / d;
  std::vector<Real> out(x.size()), xhat(x.size()), inv_std(rows);
  const Real* gp = gain.values().data();
  const Real* bp = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.values().data() + r * d;
    Real mean = 0;
    for (std::size_t i = 0; i < d; ++i) mean += xr[i];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= Real(d);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) {
      xhat[r * d + i] = (xr[i] - mean) * inv_std[r];
      out[r * d + i] = xhat[r * d + i] * gp[i] + bp[i];
    }
  }
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "layer_norm", {x, gain, bias},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        auto* gg = detail::parent_grad(node, 1);
        auto* gb = detail::parent_grad(node, 2);
        const Real* gp = node.parents[1]->data.data();
        std::vector<Real> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* g = node.grad.data() + r * d;
          const Real* xh = xhat.data() + r * d;
          Real mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (std::size_t i = 0; i < d; ++i) {
            if (gg) (*gg)[i] += g[i] * xh[i];
            if (gb) (*gb)[i] += g[i];
            dxhat[i] = g[i] * gp[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
          }
          if (!gx) continue;
          mean_dxhat /= Real(d);
          mean_dxhat_xhat /= Real(d);
          for (std::size_t i = 0; i < d; ++i)
            (*gx)[r * d + i] += inv_std[r] * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
      });
}

/// Inverted dropout. Identity (the same tensor) when not training or p == 0.
template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, Rng* rng, bool training) {
  if (!training || p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  if (!rng) throw std::invalid_argument("dropout: training mode requires an rng");
  const Real scale = Real(1.0 / (1.0 - p));
  std::vector<Real> keep(x.size());
  for (auto& k : keep) k = rng->uniform() >= p ? scale : Real(0);
  std::vector<Real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * keep[i];
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "dropout", {x}, [keep = std::move(keep)](TensorNode<Real>& node) {
        if (auto* gx = detail::parent_grad(node, 0))
          for (std::size_t i = 0; i < keep.size(); ++i) (*gx)[i] += node.grad[i] * keep[i];
      });
}

/// Row lookup: table[V, d] indexed by ids -> prefix_shape + [d].
template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const std::int32_t> ids,
                       Shape prefix_shape) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be rank 2");
  if (numel(prefix_shape) != ids.size())
    throw std::invalid_argument("embedding: id count does not match shape " +
                                shape_str(prefix_shape));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<Real> out(ids.size() * d);
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab)
      throw std::invalid_argument("embedding: id " + std::to_string(idv[i]) +
                                  " out of range for table of " + std::to_string(vocab) +
                                  " rows");
    std::copy_n(table.values().data() + idv[i] * d, d, out.data() + i * d);
  }
  prefix_shape.push_back(d);
  return Tensor<Real>::make_result(
      std::move(prefix_shape), std::move(out), "embedding", {table},
      [idv = std::move(idv), d](TensorNode<Real>& node) {
        auto* gt = detail::parent_grad(node, 0);
        if (!gt) return;
        for (std::size_t i = 0; i < idv.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) (*gt)[idv[i] * d + j] += node.grad[i * d + j];
      });
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& x) {
  Real s = 0;
  for (Real v : x.values()) s += v;
  return Tensor<Real>::make_result({1}, {s}, "sum_all", {x}, [](TensorNode<Real>& node) {
    if (auto* gx = detail::parent_grad(node, 0))
      for (auto& g : *gx) g += node.grad[0];
  });
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& x) {
  return mul_scalar(sum_all(x), Real(1) / Real(x.size()));
}

/// Sum over one axis, removing it.
template <class Real>
Tensor<Real> sum_axis(const Tensor<Real>& x, std::size_t axis) {
  if (axis >= x.rank())
    throw std::invalid_argument("sum_axis: axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<Real> out(outer * inner, Real(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += x.values()[(o * len + l) * inner + i];
  Shape shape = s;
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "sum_axis", {x},
      [outer, inner, len](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i)
              (*gx)[(o * len + l) * inner + i] += node.grad[o * inner + i];
      });
}

template <class Real>
Tensor<Real> mean_axis(const Tensor<Real>& x, std::size_t axis) {
  const Real len = Real(x.shape().at(axis));
  return mul_scalar(sum_axis(x, axis), Real(1) / len);
}

/// x / max(||x||_2, eps) over the last axis.
template <class Real>
Tensor<Real> l2_normalize_last(const Tensor<Real>& x, Real eps = Real(1e-12)) {
  const std::size_t d = detail::last_dim(x.shape(), "l2_normalize_last"), rows = x.size() / d;
  std::vector<Real> out(x.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = x.values().data() + r * d;
    Real ss = 0;
    for (std::size_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = xr[i] / norms[r];
  }
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "l2_normalize_last", {x},
      [d, rows, eps, norms = std::move(norms)](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const Real* y = node.data.data() + r * d;
          const Real* g = node.grad.data() + r * d;
          if (norms[r] <= eps) {
            for (std::size_t i = 0; i < d; ++i) (*gx)[r * d + i] += g[i] / eps;
            continue;
          }
          Real dot = 0;
          for (std::size_t i = 0; i < d; ++i) dot += y[i] * g[i];
          for (std::size_t i = 0; i < d; ++i)
            (*gx)[r * d + i] += (g[i] - y[i] * dot) / norms[r];
        }
      });
}

/// Replaces entries where mask != 0 with value; those entries get zero grad.
template <class Real>
Tensor<Real> masked_fill(const Tensor<Real>& x, const std::vector<std::uint8_t>& mask,
                         Real value) {
  if (mask.size() != x.size())
    throw std::invalid_argument("masked_fill: mask of " + std::to_string(mask.size()) +
                                " entries for tensor of shape " + shape_str(x.shape()));
  std::vector<Real> out = x.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return Tensor<Real>::make_result(
      x.shape(), std::move(out), "masked_fill", {x}, [mask](TensorNode<Real>& node) {
        if (auto* gx = detail::parent_grad(node, 0))
          for (std::size_t i = 0; i < mask.size(); ++i)
            if (!mask[i]) (*gx)[i] += node.grad[i];
      });
}

/// x[..., idx], dropping the last axis.
template <class Real>
Tensor<Real> select_last(const Tensor<Real>& x, std::size_t idx) {
  const std::size_t d = detail::last_dim(x.shape(), "select_last"), rows = x.size() / d;
  if (idx >= d) throw std::invalid_argument("select_last: index out of range");
  std::vector<Real> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = x.values()[r * d + idx];
  Shape shape = x.shape();
  shape.pop_back();
  if (shape.empty()) shape = {1};
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "select_last", {x}, [d, rows, idx](TensorNode<Real>& node) {
        if (auto* gx = detail::parent_grad(node, 0))
          for (std::size_t r = 0; r < rows; ++r) (*gx)[r * d + idx] += node.grad[r];
      });
}

/// Gathers flat element indices into a tensor of the given shape.
template <class Real>
Tensor<Real> take(const Tensor<Real>& x, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size())
    throw std::invalid_argument("take: index count does not match shape " + shape_str(shape));
  std::vector<Real> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.size()) throw std::invalid_argument("take: index out of range");
    out[i] = x.values()[indices[i]];
  }
  return Tensor<Real>::make_result(
      std::move(shape), std::move(out), "take", {x},
      [indices = std::move(indices)](TensorNode<Real>& node) {
        if (auto* gx = detail::parent_grad(node, 0))
          for (std::size_t i = 0; i < indices.size(); ++i) (*gx)[indices[i]] += node.grad[i];
      });
}

/// sum_i w_i * (logsumexp(logits_i) - logits_i[target_i]) over rows of a
/// [..., V] tensor; rows with zero weight are skipped.
template <class Real>
Tensor<Real> weighted_nll_sum(const Tensor<Real>& logits, const std::vector<std::int32_t>& targets,
                              const std::vector<Real>& weights) {
  const std::size_t v = detail::last_dim(logits.shape(), "weighted_nll_sum");
  const std::size_t rows = logits.size() / v;
  if (targets.size() != rows || weights.size() != rows)
    throw std::invalid_argument("weighted_nll_sum: expected " + std::to_string(rows) +
                                " targets/weights");
  std::vector<Real> lse(rows, Real(0));
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == Real(0)) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
      throw std::invalid_argument("weighted_nll_sum: target out of range");
    const Real* x = logits.values().data() + r * v;
    const Real m = *std::max_element(x, x + v);
    Real s = 0;
    for (std::size_t i = 0; i < v; ++i) s += std::exp(x[i] - m);
    lse[r] = m + std::log(s);
    total += weights[r] * (lse[r] - x[targets[r]]);
  }
  return Tensor<Real>::make_result(
      {1}, {total}, "weighted_nll_sum", {logits},
      [v, rows, targets, weights, lse = std::move(lse)](TensorNode<Real>& node) {
        auto* gx = detail::parent_grad(node, 0);
        if (!gx) return;
        const Real g = node.grad[0];
        const auto& xv = node.parents[0]->data;
        for (std::size_t r = 0; r < rows; ++r) {
          if (weights[r] == Real(0)) continue;
          const Real scale = g * weights[r];
          for (std::size_t i = 0; i < v; ++i)
            (*gx)[r * v + i] += scale * std::exp(xv[r * v + i] - lse[r]);
          (*gx)[r * v + targets[r]] -= scale;
        }
      });
}

/// Multi-head scaled dot-product attention over q[B,Tq,d], k/v[B,Tk,d].
/// key_mask (B*Tk entries, nonzero = attendable) may be empty. Queries with
/// no attendable key produce zeros.
template <class Real>
Tensor<Real> attention(const Tensor<Real>& q, const Tensor<Real>& k, const Tensor<Real>& v,
                       const std::vector<std::uint8_t>& key_mask, bool causal,
                       std::size_t heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2))
    detail::shape_error("attention", q.shape(), k.shape());
  const std::size_t B = q.dim(0), Tq = q.dim(1), Tk = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0)
    throw std::invalid_argument("attention: d_model not divisible by head count");
  if (!key_mask.empty() && key_mask.size() != B * Tk)
    throw std::invalid_argument("attention: key mask size mismatch");
  if (causal && Tq != Tk) throw std::invalid_argument("attention: causal requires Tq == Tk");
  const std::size_t dh = d / heads;
  const Real scale = Real(1) / std::sqrt(Real(dh));
  std::vector<Real> probs(B * heads * Tq * Tk, Real(0));
  std::vector<Real> out(B * Tq * d, Real(0));
  const Real* qp = q.values().data();
  const Real* kp = k.values().data();
  const Real* vp = v.values().data();
  auto allowed = [&](std::size_t b, std::size_t i, std::size_t j) {
    if (causal && j > i) return false;
    return key_mask.empty() || key_mask[b * Tk + j] != 0;
  };
  std::vector<Real> row(Tk);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const Real* qi = qp + (b * Tq + i) * d + h * dh;
        Real m = -std::numeric_limits<Real>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          if (!allowed(b, i, j)) continue;
          const Real* kj = kp + (b * Tk + j) * d + h * dh;
          Real s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          row[j] = s * scale;
          m = std::max(m, row[j]);
        }
        if (m == -std::numeric_limits<Real>::infinity()) continue;
        Real* p = probs.data() + ((b * heads + h) * Tq + i) * Tk;
        Real z = 0;
        for (std::size_t j = 0; j < Tk; ++j)
          if (allowed(b, i, j)) z += (p[j] = std::exp(row[j] - m));
        Real* o = out.data() + (b * Tq + i) * d + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (p[j] == Real(0)) continue;
          p[j] /= z;
          const Real* vj = vp + (b * Tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += p[j] * vj[c];
        }
      }
  return Tensor<Real>::make_result(
      q.shape(), std::move(out), "attention", {q, k, v},
      [B, Tq, Tk, d, heads, dh, scale, probs = std::move(probs)](TensorNode<Real>& node) {
        const Real* qp = node.parents[0]->data.data();
        const Real* kp = node.parents[1]->data.data();
        const Real* vp = node.parents[2]->data.data();
        auto* gq = detail::parent_grad(node, 0);
        auto* gk = detail::parent_grad(node, 1);
        auto* gv = detail::parent_grad(node, 2);
        std::vector<Real> dp(Tk);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < Tq; ++i) {
              const Real* p = probs.data() + ((b * heads + h) * Tq + i) * Tk;
              const Real* go = node.grad.data() + (b * Tq + i) * d + h * dh;
              Real dot = 0;
              for (std::size_t j = 0; j < Tk; ++j) {
                dp[j] = 0;
                if (p[j] == Real(0)) continue;
                const Real* vj = vp + (b * Tk + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dp[j] += go[c] * vj[c];
                dot += p[j] * dp[j];
                if (gv)
                  for (std::size_t c = 0; c < dh; ++c)
                    (*gv)[(b * Tk + j) * d + h * dh + c] += p[j] * go[c];
              }
              const Real* qi = qp + (b * Tq + i) * d + h * dh;
              for (std::size_t j = 0; j < Tk; ++j) {
                if (p[j] == Real(0)) continue;
                const Real ds = p[j] * (dp[j] - dot) * scale;
                const Real* kj = kp + (b * Tk + j) * d + h * dh;
                if (gq)
                  for (std::size_t c = 0; c < dh; ++c)
                    (*gq)[(b * Tq + i) * d + h * dh + c] += ds * kj[c];
                if (gk)
                  for (std::size_t c = 0; c < dh; ++c)
                    (*gk)[(b * Tk + j) * d + h * dh + c] += ds * qi[c];
              }
            }
      });
}

}  // namespace gatefuse::ops
