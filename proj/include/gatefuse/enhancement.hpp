#pragma once

#include <stdexcept>
#include <string>

#include "gatefuse/config.hpp"
#include "gatefuse/layers.hpp"
#include "gatefuse/ops.hpp"

namespace gatefuse {

template <class Real>
struct FilmParams {
  Linear<Real> gamma, beta;
};

template <class Real>
struct DyIntraParams {
  Linear<Real> mask;
};

/// Squeeze-excitation weights: reduce [d/r, d], expand [d, d/r].
template <class Real>
struct ChannelAttentionParams {
  Tensor<Real> reduce, expand;
};

/// gamma map starts at exactly 1 (zero weight, unit bias) and beta at 0, so a
/// freshly built FiLM block is the identity.
template <class Real>
FilmParams<Real> make_film(ParameterStore<Real>& store, const std::string& name, std::size_t d) {
  FilmParams<Real> p;
  p.gamma = {store.zeros(name + ".gamma.weight", {d, d}),
             store.constant(name + ".gamma.bias", {d}, Real(1)), name + ".gamma"};
  p.beta = {store.zeros(name + ".beta.weight", {d, d}), store.zeros(name + ".beta.bias", {d}),
            name + ".beta"};
  return p;
}

template <class Real>
DyIntraParams<Real> make_dyintra(ParameterStore<Real>& store, const std::string& name,
                                 std::size_t d) {
  return {make_linear(store, name + ".mask", d, d)};
}

template <class Real>
ChannelAttentionParams<Real> make_channel_attention(ParameterStore<Real>& store,
                                                    const std::string& name, std::size_t d,
                                                    std::size_t reduction) {
  if (reduction == 0 || d % reduction != 0)
    throw std::invalid_argument("channel attention: reduction ratio must divide d_model");
  return {store.normal(name + ".reduce", {d / reduction, d}),
          store.normal(name + ".expand", {d, d / reduction})};
}

namespace detail {
inline void check_conditioning(const Shape& primary, const Shape& cond, const char* op) {
  // cond is either the same shape or a length-1 sequence broadcast over T.
  const bool ok = primary.size() == 3 && cond.size() == 3 && primary[0] == cond[0] &&
                  primary[2] == cond[2] && (cond[1] == primary[1] || cond[1] == 1);
  if (!ok)
    throw std::invalid_argument(std::string(op) + ": primary " + shape_str(primary) +
                                " cannot be conditioned on " + shape_str(cond));
}
}  // namespace detail

/// gamma(h_cond) * h_primary + beta(h_cond)
template <class Real>
Tensor<Real> film(const Tensor<Real>& h_primary, const Tensor<Real>& h_cond,
                  const FilmParams<Real>& p) {
  detail::check_conditioning(h_primary.shape(), h_cond.shape(), "film");
  return ops::add(ops::mul(p.gamma(h_cond), h_primary), p.beta(h_cond));
}

/// (1 + sigmoid(mask(h_cond))) * h_primary; per-coordinate scale in (1, 2).
template <class Real>
Tensor<Real> dyintra(const Tensor<Real>& h_primary, const Tensor<Real>& h_cond,
                     const DyIntraParams<Real>& p) {
  detail::check_conditioning(h_primary.shape(), h_cond.shape(), "dyintra");
  return ops::mul(ops::add_scalar(ops::sigmoid(p.mask(h_cond)), Real(1)), h_primary);
}

/// sigmoid(expand · relu(reduce · h)) * h
template <class Real>
Tensor<Real> channel_attention(const Tensor<Real>& h_image, const ChannelAttentionParams<Real>& p) {
  auto squeezed = ops::relu(ops::matmul_nt(h_image, p.reduce));
  auto weights = ops::sigmoid(ops::matmul_nt(squeezed, p.expand));
  return ops::mul(weights, h_image);
}

/// Which stream an enhancement rewrites.
enum class IntegrationPoint { none, text_self_attention, cross_attention, image };

inline IntegrationPoint integration_point(Enhancement e) {
  switch (e) {
    case Enhancement::film_text:
    case Enhancement::dyintra_text: return IntegrationPoint::text_self_attention;
    case Enhancement::film_cross:
    case Enhancement::dyintra_cross: return IntegrationPoint::cross_attention;
    case Enhancement::film_image:
    case Enhancement::dyintra_image:
    case Enhancement::channel_attention: return IntegrationPoint::image;
    case Enhancement::none: return IntegrationPoint::none;
  }
  return IntegrationPoint::none;
}

inline bool is_film(Enhancement e) {
  return e == Enhancement::film_text || e == Enhancement::film_cross || e == Enhancement::film_image;
}
inline bool is_dyintra(Enhancement e) {
  return e == Enhancement::dyintra_text || e == Enhancement::dyintra_cross ||
         e == Enhancement::dyintra_image;
}

/// Per-layer modulation block (FiLM or DyIntra) for one configured point.
template <class Real>
struct Modulation {
  Enhancement kind = Enhancement::none;
  FilmParams<Real> film_params;
  DyIntraParams<Real> dyintra_params;

  Tensor<Real> operator()(const Tensor<Real>& h_primary, const Tensor<Real>& h_cond) const {
    if (is_film(kind)) return film(h_primary, h_cond, film_params);
    if (is_dyintra(kind)) return dyintra(h_primary, h_cond, dyintra_params);
    return h_primary;
  }
};

template <class Real>
Modulation<Real> make_modulation(ParameterStore<Real>& store, const std::string& name,
                                 Enhancement kind, std::size_t d) {
  Modulation<Real> m;
  m.kind = kind;
  if (is_film(kind)) m.film_params = make_film(store, name + ".film", d);
  if (is_dyintra(kind)) m.dyintra_params = make_dyintra(store, name + ".dyintra", d);
  return m;
}

}  // namespace gatefuse
