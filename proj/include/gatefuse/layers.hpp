#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gatefuse/ops.hpp"
#include "gatefuse/rng.hpp"
#include "gatefuse/tensor.hpp"

namespace gatefuse {

/// Ordered, named collection of trainable tensors. Initial values are drawn
/// from a per-parameter substream ("init/<name>"), so registering a new
/// parameter never changes the initial value of an existing one.
template <class Real>
class ParameterStore {
 public:
  using Entry = std::pair<std::string, Tensor<Real>>;

  ParameterStore(std::uint64_t seed, double init_std) : seed_(seed), init_std_(init_std) {}

  Tensor<Real> normal(const std::string& name, Shape shape) {
    Rng rng(seed_, "init/" + name);
    std::vector<Real> data(numel(shape));
    for (auto& v : data) v = static_cast<Real>(rng.truncated_normal(init_std_));
    return add(name, Tensor<Real>(std::move(shape), std::move(data), true));
  }

  Tensor<Real> constant(const std::string& name, Shape shape, Real value) {
    return add(name, Tensor<Real>::full(std::move(shape), value, true));
  }

  Tensor<Real> zeros(const std::string& name, Shape shape) {
    return constant(name, std::move(shape), Real(0));
  }

  const std::vector<Entry>& named() const noexcept { return entries_; }

  std::vector<Tensor<Real>> tensors() const {
    std::vector<Tensor<Real>> out;
    out.reserve(entries_.size());
    for (const auto& [_, t] : entries_) out.push_back(t);
    return out;
  }

  Tensor<Real> get(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw std::invalid_argument("no parameter named '" + name + "'");
  }

  bool contains(const std::string& name) const {
    for (const auto& [n, _] : entries_)
      if (n == name) return true;
    return false;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.size();
    return n;
  }

 private:
  Tensor<Real> add(const std::string& name, Tensor<Real> t) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    entries_.emplace_back(name, t);
    return t;
  }

  std::uint64_t seed_;
  double init_std_;
  std::vector<Entry> entries_;
};

template <class Real>
struct Linear {
  Tensor<Real> weight;  // [in, out]
  Tensor<Real> bias;    // [out], may be undefined
  std::string name;

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    auto y = ops::matmul(x, weight);
    y.tag(name);
    return bias.defined() ? ops::add(y, bias) : y;
  }
};

template <class Real>
Linear<Real> make_linear(ParameterStore<Real>& store, const std::string& name, std::size_t in,
                         std::size_t out, bool with_bias = true) {
  Linear<Real> l;
  l.name = name;
  l.weight = store.normal(name + ".weight", {in, out});
  if (with_bias) l.bias = store.zeros(name + ".bias", {out});
  return l;
}

template <class Real>
struct LayerNorm {
  Tensor<Real> gain, bias;
  Real eps;

  Tensor<Real> operator()(const Tensor<Real>& x) const {
    return ops::layer_norm(x, gain, bias, eps);
  }
};

template <class Real>
LayerNorm<Real> make_layer_norm(ParameterStore<Real>& store, const std::string& name,
                                std::size_t d, double eps) {
  return {store.constant(name + ".gain", {d}, Real(1)), store.zeros(name + ".bias", {d}),
          static_cast<Real>(eps)};
}

template <class Real>
struct MultiHeadAttention {
  Linear<Real> q, k, v, o;
  std::size_t heads = 1;

  Tensor<Real> operator()(const Tensor<Real>& x_query, const Tensor<Real>& x_kv,
                          const std::vector<std::uint8_t>& key_mask, bool causal) const {
    auto ctx = ops::attention(q(x_query), k(x_kv), v(x_kv), key_mask, causal, heads);
    return o(ctx);
  }
};

template <class Real>
MultiHeadAttention<Real> make_attention(ParameterStore<Real>& store, const std::string& name,
                                        std::size_t d, std::size_t heads) {
  return {make_linear(store, name + ".q", d, d), make_linear(store, name + ".k", d, d),
          make_linear(store, name + ".v", d, d), make_linear(store, name + ".o", d, d), heads};
}

template <class Real>
struct FeedForward {
  Linear<Real> in, out;
  Tensor<Real> operator()(const Tensor<Real>& x) const { return out(ops::gelu(in(x))); }
};

template <class Real>
FeedForward<Real> make_feed_forward(ParameterStore<Real>& store, const std::string& name,
                                    std::size_t d, std::size_t hidden) {
  return {make_linear(store, name + ".in", d, hidden), make_linear(store, name + ".out", hidden, d)};
}

}  // namespace gatefuse
