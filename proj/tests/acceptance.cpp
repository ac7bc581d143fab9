// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>

#include "gatefuse/checkpoint.hpp"
#include "gatefuse/curriculum.hpp"
#include "gatefuse/enhancement.hpp"
#include "gatefuse/evaluation.hpp"
#include "gatefuse/stats.hpp"
#include "gatefuse/synthetic.hpp"
#include "gatefuse/trainer.hpp"
#include "gradcheck.hpp"
#include "toy.hpp"

using namespace gatefuse;
using gatefuse::testing::max_grad_error;
using gatefuse::testing::random_tensor;
using gatefuse::testing::toy_batch;
using gatefuse::testing::toy_config;
using gatefuse::testing::toy_corpora;
using T = Tensor<double>;
using Inputs = std::vector<T>;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kParamBand = 0.02;
constexpr double kParamTarget = 198.5e6;
constexpr double kCountSeconds = 1.0;
constexpr double kOpGradTol = 1e-4;
constexpr double kModelGradTol = 1e-3;
constexpr double kGradSeconds = 120.0;
constexpr double kGumbelBand = 0.01;
constexpr int kGumbelDraws = 100000;
constexpr double kLossTol = 1e-10;
constexpr double kPairedTol = 1e-10;
constexpr double kOverfitNtp = 0.1;
constexpr std::size_t kOverfitMaxSteps = 2000;
constexpr double kOverfitSeconds = 300.0;
constexpr double kStatTol = 1e-12;
constexpr double kPowerP = 1e-3;

/// Collects the first few failed checks of a criterion.
struct Check {
  std::vector<std::string> failures;
  std::string notes;
  void expect(bool ok, const std::string& what) {
    if (!ok && failures.size() < 5) failures.push_back(what);
  }
  bool ok() const { return failures.empty(); }
};

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

T project(const T& y, std::uint64_t seed = 99) { return ops::sum_all(ops::mul(y, random_tensor(y.shape(), seed))); }

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gatefuse_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------------ 1

void criterion_parameter_count(Check& c) {
  ModelConfig m;  // reference configuration
  m.d_model = 768;
  m.hidden_dim = 3072;
  m.n_heads = 8;
  m.n_decoder_layers = 8;
  m.n_image_encoder_layers = 5;
  m.image_encoder_kind = ImageEncoderKind::transformer;
  m.vocab_size = 50260;
  m.gate_variant = GateVariant::soft_feature;
  m.tie_output_weights = false;
  const auto t0 = std::chrono::steady_clock::now();
  const auto n = count_parameters(m);
  const double dt = seconds_since(t0);
  const double rel = std::abs(static_cast<double>(n) - kParamTarget) / kParamTarget;
  c.notes = std::to_string(n) + " params, rel " + fmt("%.4f", rel) + ", " + fmt("%.3fs", dt);
  c.expect(rel < kParamBand, "count outside band");
  c.expect(dt < kCountSeconds, "too slow");
}

// ------------------------------------------------------------------ 2

double worst_op_error() {
  double w = 0;
  auto take = [&](double e) { w = std::max(w, e); };
  take(max_grad_error([](const Inputs& in) { return project(ops::add(ops::mul(in[0], in[1]), ops::sub(in[0], in[1]))); },
                      {random_tensor({2, 3, 4}, 1), random_tensor({3, 1}, 2)}));
  take(max_grad_error(
      [](const Inputs& in) {
        const auto& x = in[0];
        auto a = ops::sigmoid(x), b = ops::gelu(x), e = ops::exp(ops::mul_scalar(x, 0.3));
        auto d = ops::log(ops::add_scalar(ops::mul(x, x), 1.0));
        return project(ops::add(ops::add(ops::add(a, b), ops::add(e, d)), ops::rsub_scalar(2.0, ops::relu(x))));
      },
      {random_tensor({3, 5}, 3)}));
  take(max_grad_error(
      [](const Inputs& in) { return project(ops::add(ops::matmul(in[0], in[1]), ops::matmul_nt(in[0], in[2]))); },
      {random_tensor({2, 3, 4}, 4), random_tensor({4, 5}, 5), random_tensor({5, 4}, 6)}));
  take(max_grad_error(
      [](const Inputs& in) {
        return ops::add(ops::add(project(ops::softmax_last(in[0])), project(ops::log_softmax_last(in[0]), 7)),
                        project(ops::logsumexp_last(in[0]), 8));
      },
      {random_tensor({3, 4}, 9)}));
  take(max_grad_error([](const Inputs& in) { return project(ops::layer_norm(in[0], in[1], in[2], 1e-5)); },
                      {random_tensor({2, 3, 6}, 10), random_tensor({6}, 11), random_tensor({6}, 12)}));
  take(max_grad_error(
      [](const Inputs& in) {
        auto cat = ops::concat_last(in[0], in[1]);
        auto r = ops::reshape(cat, {6, 5});
        auto s = ops::add(project(ops::sum_axis(cat, 1)), project(ops::mean_axis(cat, 2), 13));
        auto n = project(ops::l2_normalize_last(r), 14);
        auto sel = project(ops::select_last(cat, 4), 15);
        auto tk = project(ops::take(r, {0, 7, 7, 29}, {2, 2}), 16);
        auto mf = project(
            ops::masked_fill(in[0], std::vector<std::uint8_t>{1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0}, -3.0), 17);
        return ops::add(ops::add(ops::add(s, n), ops::add(sel, tk)), ops::add(mf, ops::mean_all(cat)));
      },
      {random_tensor({2, 3, 2}, 18), random_tensor({2, 3, 3}, 19)}));
  take(max_grad_error(
      [](const Inputs& in) {
        std::vector<std::int32_t> ids{0, 2, 2, 1}, targets{1, 0, 2, 1};
        auto logits = ops::reshape(ops::embedding(in[0], ids, {2, 2}), {4, 3});
        return ops::weighted_nll_sum(logits, targets, std::vector<double>{1.0, 0.0, 0.5, 2.0});
      },
      {random_tensor({3, 3}, 20)}));
  const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 0, 0};
  take(max_grad_error([&](const Inputs& in) { return project(ops::attention(in[0], in[1], in[2], mask, true, 2)); },
                      {random_tensor({2, 4, 4}, 21), random_tensor({2, 4, 4}, 22), random_tensor({2, 4, 4}, 23)}));
  take(max_grad_error([](const Inputs& in) { return project(ops::attention(in[0], in[1], in[2], {}, false, 2)); },
                      {random_tensor({2, 3, 4}, 24), random_tensor({2, 1, 4}, 25), random_tensor({2, 1, 4}, 26)}));
  take(max_grad_error(
      [](const Inputs& in) {
        Rng rng(5, "dropout");
        return project(ops::dropout(in[0], 0.3, &rng, true));
      },
      {random_tensor({4, 5}, 27)}));
  return w;
}

double worst_gate_error() {
  constexpr std::size_t B = 2, Tn = 3, D = 4;
  double w = 0;
  for (auto v : {GateVariant::soft_feature, GateVariant::soft_token, GateVariant::hard_feature,
                 GateVariant::hard_token}) {
    ParameterStore<double> store(3, 0.5);
    auto p = make_gate(store, "gate", v, D);
    Rng rng(9, "gumbel");
    const auto noise = gumbel_noise<double>(v == GateVariant::hard_feature ? Shape{B, Tn, D, 2} : Shape{B, Tn, 2}, rng);
    auto f = [&](const Inputs& in) {
      switch (v) {
        case GateVariant::soft_feature: return project(soft_gate_per_feature(in[0], in[1], p).fused);
        case GateVariant::soft_token: return project(soft_gate_per_token(in[0], in[1], p).fused);
        case GateVariant::hard_feature:
          return project(hard_gate_per_feature_with_noise(in[0], in[1], p, 0.7, noise).fused);
        default: return project(hard_gate_per_token_with_noise(in[0], in[1], p, 0.5, noise).fused);
      }
    };
    w = std::max(w, max_grad_error(f, {random_tensor({B, Tn, D}, 6), random_tensor({B, Tn, D}, 7), p.proj.weight,
                                       p.proj.bias}));
  }
  return w;
}

double worst_enhancement_error() {
  double w = 0;
  {
    ParameterStore<double> store(1, 0.5);
    auto p = make_film(store, "film", 4);
    for (auto& t : store.tensors())  // leave the identity init so every path carries gradient
      for (auto& v : t.values()) v += 0.3 * std::sin(static_cast<double>(&v - t.values().data()) + 1);
    Inputs in{random_tensor({2, 3, 4}, 1), random_tensor({2, 1, 4}, 2)};
    for (auto& t : store.tensors()) in.push_back(t);
    w = std::max(w, max_grad_error([&](const Inputs& x) { return project(film(x[0], x[1], p)); }, in));
  }
  {
    ParameterStore<double> store(2, 0.5);
    auto p = make_dyintra(store, "dy", 4);
    w = std::max(w, max_grad_error([&](const Inputs& x) { return project(dyintra(x[0], x[1], p)); },
                                   {random_tensor({2, 3, 4}, 5), random_tensor({2, 3, 4}, 6), p.mask.weight,
                                    p.mask.bias}));
  }
  {
    ParameterStore<double> store(3, 0.5);
    auto p = make_channel_attention(store, "ca", 8, 4);
    w = std::max(w, max_grad_error([&](const Inputs& x) { return project(channel_attention(x[0], p)); },
                                   {random_tensor({2, 1, 8}, 8), p.reduce, p.expand}));
  }
  return w;
}

ContrastiveParams<double> contrastive(std::size_t d, double tau, std::uint64_t seed) {
  ParameterStore<double> store(seed, 0.7);
  ContrastiveParams<double> p;
  p.clip_text_proj = make_linear(store, "ct", d, d);
  p.clip_image_proj = make_linear(store, "ci", d, d);
  p.clip_log_tau = store.constant("clt", {1}, std::log(tau));
  p.lcg_text_map = store.normal("lt", {d, d});
  p.lcg_image_map = store.normal("li", {d, d});
  p.lcg_log_tau = store.constant("llt", {1}, std::log(tau));
  return p;
}

double worst_contrastive_error() {
  auto p = contrastive(4, 0.3, 3);
  double w = max_grad_error([&](const Inputs& in) { return clip_loss(in[0], in[1], p); },
                            {random_tensor({3, 4}, 4), random_tensor({3, 4}, 5), p.clip_text_proj.weight,
                             p.clip_text_proj.bias, p.clip_image_proj.weight, p.clip_image_proj.bias,
                             p.clip_log_tau});
  auto q = contrastive(3, 0.4, 6);
  const std::vector<std::uint8_t> valid{1, 1, 1, 1, 0, 0, 1, 1, 0};
  w = std::max(w, max_grad_error([&](const Inputs& in) { return lcg_loss(in[0], in[1], valid, q); },
                                 {random_tensor({3, 3, 3}, 7), random_tensor({3, 3}, 8), q.lcg_text_map,
                                  q.lcg_image_map, q.lcg_log_tau}));
  return w;
}

double model_grad_error(ModelConfig c, Modality modality, bool training) {
  c.n_decoder_layers = 1;
  c.vocab_size = 8;
  GatedFusionModel<double> model(c, 11);
  model.set_training(training);
  auto batch = toy_batch(c, modality, 3);
  for (auto& id : batch.token_ids)
    if (id >= 8) id = 3 + id % 5;
  auto f = [&](const Inputs&) {
    RngStreams rng(21);  // frozen Gumbel noise and dropout masks
    ForwardOptions opt;
    opt.tau = 0.8;
    opt.rng = &rng;
    return total_loss(model, batch, model.forward(batch, opt), 0.7).total;
  };
  return max_grad_error(f, model.parameters().tensors());
}

double worst_model_error() {
  double w = 0;
  auto a = toy_config();
  a.objective = Objective::ntp_clip;
  w = std::max(w, model_grad_error(a, Modality::image_caption, false));
  auto b = toy_config();
  b.gate_variant = GateVariant::hard_token;
  b.objective = Objective::ntp_lcg;
  b.enhancement = Enhancement::film_image;
  w = std::max(w, model_grad_error(b, Modality::image_caption, true));
  auto d = toy_config();
  d.gate_variant = GateVariant::hard_feature;
  d.tie_output_weights = true;
  d.enhancement = Enhancement::channel_attention;
  d.image_encoder_kind = ImageEncoderKind::mlp;
  w = std::max(w, model_grad_error(d, Modality::image_caption, true));
  auto e = toy_config();
  e.enhancement = Enhancement::dyintra_cross;
  e.gate_variant = GateVariant::soft_token;
  w = std::max(w, model_grad_error(e, Modality::image_caption, false));
  return w;
}

void criterion_gradients(Check& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const double ops_e = worst_op_error(), gate_e = worst_gate_error(), enh_e = worst_enhancement_error(),
               con_e = worst_contrastive_error(), model_e = worst_model_error();
  const double dt = seconds_since(t0);
  c.notes = "ops " + fmt("%.1e", ops_e) + ", gates " + fmt("%.1e", gate_e) + ", enhancements " + fmt("%.1e", enh_e) +
            ", clip/lcg " + fmt("%.1e", con_e) + ", model " + fmt("%.1e", model_e) + ", " + fmt("%.1fs", dt);
  c.expect(ops_e < kOpGradTol, "ops");
  c.expect(gate_e < kOpGradTol, "gates");
  c.expect(enh_e < kOpGradTol, "enhancements");
  c.expect(con_e < kOpGradTol, "contrastive losses");
  c.expect(model_e < kModelGradTol, "end-to-end model");
  c.expect(dt < kGradSeconds, "too slow");
}

// ------------------------------------------------------------------ 3

void criterion_gate_invariants(Check& c) {
  constexpr std::size_t B = 2, Tn = 3, D = 4;
  std::size_t convex_checked = 0;
  for (auto v : {GateVariant::soft_feature, GateVariant::soft_token, GateVariant::hard_feature,
                 GateVariant::hard_token}) {
    ParameterStore<double> store(3, 0.5);
    auto p = make_gate(store, "gate", v, D);
    Rng rng(11, "gumbel");
    for (std::uint64_t s = 0; s < 50; ++s) {
      auto ht = random_tensor({B, Tn, D}, 100 + s, 3.0), hc = random_tensor({B, Tn, D}, 200 + s, 3.0);
      const double tau = 0.05 + 2.0 * static_cast<double>(s) / 50.0;
      for (auto mode : {GateMode::train, GateMode::infer}) {
        if (mode == GateMode::infer && is_hard(v)) continue;
        auto out = apply_gate(p, ht, hc, tau, mode, &rng);
        for (std::size_t i = 0; i < out.fused.size(); ++i) {
          const double lo = std::min(ht.values()[i], hc.values()[i]), hi = std::max(ht.values()[i], hc.values()[i]);
          c.expect(out.fused.values()[i] >= lo - 1e-12 && out.fused.values()[i] <= hi + 1e-12, "convex bound");
          ++convex_checked;
        }
        for (double g : out.gate.values()) c.expect(g >= 0.0 && g <= 1.0, "gate outside [0,1]");
      }
    }
    if (is_hard(v)) {
      for (std::uint64_t s = 0; s < 20; ++s) {
        auto ht = random_tensor({B, Tn, D}, 300 + s), hc = random_tensor({B, Tn, D}, 400 + s);
        auto out = apply_gate(p, ht, hc, 0.5, GateMode::infer, nullptr);
        const std::size_t width = out.gate.dim(2);
        for (double g : out.gate.values()) c.expect(g == 0.0 || g == 1.0, "inference gate not one-hot");
        for (std::size_t k = 0; k < out.fused.size(); ++k) {
          const double g = out.gate.values()[(k / D) * width + (width == 1 ? 0 : k % D)];
          c.expect(out.fused.values()[k] == (g == 1.0 ? ht.values()[k] : hc.values()[k]), "inference selection");
        }
      }
    }
  }

  // Schedule driven by the image-caption step count of a real plan.
  CurriculumOptions o;
  o.strategy = Strategy::alternating;
  o.epochs_per_modality = 5;
  o.batch_size = 4;
  const CurriculumSchedule plan(o, 40, 40);
  const auto n_img = static_cast<std::int64_t>(plan.image_caption_steps());
  const TemperatureSchedule ts{1.0, 0.1, 0.8, n_img};
  c.expect(tau_at(ts, 0) == 1.0, "tau(0)");
  c.expect(std::abs(tau_at(ts, 4 * n_img / 5) - 0.1) < 1e-15, "tau at 80%");
  for (std::int64_t s = 4 * n_img / 5; s <= 2 * n_img; ++s) c.expect(std::abs(tau_at(ts, s) - 0.1) < 1e-15, "tau after 80%");
  for (std::int64_t s = 0; s < n_img; ++s) c.expect(tau_at(ts, s + 1) <= tau_at(ts, s), "tau not monotone");

  Rng rng(2024, "gumbel");
  T logits({1, 2}, {0.3, 0.3});
  double sum = 0;
  for (int i = 0; i < kGumbelDraws; ++i) sum += detail::gumbel_class0(logits, gumbel_noise<double>({1, 2}, rng), 1.0).item();
  const double mean = sum / kGumbelDraws;
  c.expect(std::abs(mean - 0.5) <= kGumbelBand, "Gumbel symmetry");
  c.notes = std::to_string(convex_checked) + " convex checks, E[g]=" + fmt("%.4f", mean) + ", tau(0)=1, tau(" +
            std::to_string(4 * n_img / 5) + "/" + std::to_string(n_img) + ")=0.1";
}

// ------------------------------------------------------------------ 4

// Word-level grounding loss by direct enumeration of (image, token, caption)
// triples; shares no code with lcg_loss.
double lcg_brute_force(const std::vector<double>& h, const std::vector<double>& img,
                       const std::vector<std::uint8_t>& valid, const std::vector<double>& m_text,
                       const std::vector<double>& m_image, double tau, std::size_t B, std::size_t T_, std::size_t d) {
  auto apply = [d](const std::vector<double>& M, const double* x) {
    std::vector<double> y(d, 0.0);
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t k = 0; k < d; ++k) y[r] += M[r * d + k] * x[k];
    return y;
  };
  auto s = [&](std::size_t i, std::size_t j, std::size_t k) {
    const auto q = apply(m_image, img.data() + i * d);
    const auto p = apply(m_text, h.data() + (k * T_ + j) * d);
    double dot = 0;
    for (std::size_t r = 0; r < d; ++r) dot += q[r] * p[r];
    return dot / tau;
  };
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < B; ++i)
    for (std::size_t j = 0; j < T_; ++j) {
      if (!valid[i * T_ + j]) continue;
      double denom = 0;
      for (std::size_t k = 0; k < B; ++k) denom += std::exp(s(k, j, i));
      double neg = std::exp(s(i, j, i));
      for (std::size_t k = 0; k < B; ++k) {
        if (k == i) continue;
        for (std::size_t o = 0; o < T_; ++o)
          if (valid[k * T_ + o]) neg += std::exp(s(i, o, k));
      }
      const double pos = std::exp(s(i, j, i));
      total += 0.5 * (-std::log(pos / denom) - std::log(pos / neg));
      ++count;
    }
  return total / static_cast<double>(count);
}

void criterion_loss_oracles(Check& c) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto p = contrastive(3, 0.07, seed);
    c.expect(std::abs(clip_loss(random_tensor({1, 3}, seed), random_tensor({1, 3}, seed + 10), p).item()) <= kLossTol,
             "clip B=1");
  }
  for (std::size_t B : {2u, 3u, 4u, 7u, 16u}) {
    auto S = T::full({B, B}, 0.37);
    c.expect(std::abs(clip_loss_from_similarity(S, S).item() - std::log(static_cast<double>(B))) <= kLossTol,
             "clip constant similarity");
    auto p = contrastive(3, 0.07, B);
    std::vector<double> rep;
    for (std::size_t i = 0; i < B; ++i) rep.insert(rep.end(), {0.3, -1.2, 0.8});
    c.expect(std::abs(clip_loss(T({B, 3}, rep), T({B, 3}, rep), p).item() - std::log(static_cast<double>(B))) <=
                 kLossTol,
             "clip identical embeddings");
  }
  Rng rng(123, "lcg_instances");
  double worst = 0;
  for (int instance = 0; instance < 50; ++instance) {
    const std::size_t B = 1 + rng.below(3), T_ = 1 + rng.below(3), d = 1 + rng.below(4);
    std::vector<std::uint8_t> valid(B * T_);
    for (std::size_t i = 0; i < B; ++i) {
      const std::size_t len = 1 + rng.below(T_);
      for (std::size_t j = 0; j < T_; ++j) valid[i * T_ + j] = j < len;
    }
    const double tau = 0.05 + 1.95 * rng.uniform();
    auto p = contrastive(d, tau, 1000 + instance);
    auto h = random_tensor({B, T_, d}, 2000 + instance);
    auto img = random_tensor({B, d}, 3000 + instance);
    const double got = lcg_loss(h, img, valid, p).item();
    const double want = lcg_brute_force(h.values(), img.values(), valid, p.lcg_text_map.values(),
                                        p.lcg_image_map.values(), tau, B, T_, d);
    worst = std::max(worst, std::abs(got - want));
  }
  c.expect(worst <= kLossTol, "lcg brute force");
  c.notes = "lcg max |diff| " + fmt("%.1e", worst) + " over 50 instances";
}

// ------------------------------------------------------------------ 5

void criterion_architecture(Check& c) {
  std::size_t configs = 0;
  for (auto gate : {GateVariant::none, GateVariant::soft_feature, GateVariant::soft_token, GateVariant::hard_feature,
                    GateVariant::hard_token})
    for (auto enh : {Enhancement::none, Enhancement::film_text, Enhancement::film_cross, Enhancement::dyintra_text,
                     Enhancement::channel_attention}) {
      auto cfg = toy_config();
      cfg.gate_variant = gate;
      cfg.enhancement = enh;
      GatedFusionModel<double> model(cfg, 4);
      auto batch = toy_batch(cfg, Modality::text_only);
      const auto a = model.forward(batch).logits.values();
      for (auto& v : batch.image_embedding) v = v * 3.0f + 1.0f;
      const auto b = model.forward(batch).logits.values();
      batch.image_embedding.clear();
      const auto d = model.forward(batch).logits.values();
      c.expect(a == b && a == d, "text-only depends on images");

      for (auto modality : {Modality::text_only, Modality::image_caption}) {
        auto base_batch = toy_batch(cfg, modality);
        const std::size_t V = cfg.vocab_size;
        const auto base = model.forward(base_batch).logits.values();
        for (std::size_t t = 0; t + 1 < 5; ++t) {
          auto perturbed = base_batch;
          perturbed.token_ids[t + 1] = perturbed.token_ids[t + 1] == 3 ? 4 : 3;
          const auto out = model.forward(perturbed).logits.values();
          bool prefix_same = true, next_changed = false;
          for (std::size_t k = 0; k < (t + 1) * V; ++k) prefix_same &= out[k] == base[k];
          for (std::size_t k = (t + 1) * V; k < (t + 2) * V; ++k) next_changed |= out[k] != base[k];
          c.expect(prefix_same, "future token changed an earlier position");
          c.expect(next_changed, "perturbation had no effect");
        }
      }
      ++configs;
    }

  for (auto gate : {GateVariant::none, GateVariant::soft_feature, GateVariant::hard_token}) {
    auto base_cfg = toy_config();
    base_cfg.gate_variant = gate;
    GatedFusionModel<double> base(base_cfg, 6);
    const auto batch = toy_batch(base_cfg, Modality::image_caption);
    const auto reference = base.forward(batch).logits.values();
    for (auto enh : {Enhancement::none, Enhancement::film_text, Enhancement::film_cross, Enhancement::film_image}) {
      auto cfg = base_cfg;
      cfg.enhancement = enh;
      GatedFusionModel<double> model(cfg, 6);
      c.expect(model.forward(batch).logits.values() == reference, "identity enhancement changed logits");
    }
  }
  c.notes = std::to_string(configs) + " gate x enhancement configs";
}

// ------------------------------------------------------------------ 6

void criterion_curriculum(Check& c) {
  for (std::size_t E : {1u, 2u, 3u, 7u})
    for (bool text_first : {true, false}) {
      CurriculumOptions o;
      o.strategy = Strategy::alternating;
      o.epochs_per_modality = E;
      o.batch_size = 4;
      o.start_with_text = text_first;
      const CurriculumSchedule s(o, 17, 9);
      c.expect(s.epochs().size() == 2 * E, "alternating epoch count");
      for (std::size_t i = 0; i < s.epochs().size(); ++i) {
        const bool text = (i % 2 == 0) == text_first;
        c.expect(s.epochs()[i].kind == (text ? EpochKind::text_only : EpochKind::image_caption),
                 "alternating order");
      }
      std::size_t step = 0;
      for (const auto& e : s.epochs())
        for (std::size_t k = 0; k < e.steps; ++k, ++step) c.expect(s.plan(step).kind == e.kind, "step kind");
      c.expect(step == s.total_steps(), "step total");
    }

  for (auto [n_text, n_img, bs] : {std::tuple{32u, 16u, 4u}, std::tuple{64u, 32u, 8u}, std::tuple{48u, 24u, 2u}}) {
    CurriculumOptions o;
    o.strategy = Strategy::uniform_mixed;
    o.epochs_per_modality = 1;
    o.batch_size = bs;
    const CurriculumSchedule s(o, n_text, n_img);
    std::map<std::size_t, int> count;
    for (std::size_t k = 0; k < s.total_steps(); ++k)
      for (auto i : s.plan(k).captions) ++count[i];
    c.expect(count.size() == n_img, "uniform_mixed missed images");
    for (const auto& [_, n] : count) c.expect(n == 2, "uniform_mixed image not seen twice");
  }

  auto cfg = toy_config();
  cfg.objective = Objective::ntp_clip;
  cfg.gate_variant = GateVariant::soft_feature;
  std::vector<std::vector<std::int32_t>> text;
  CaptionDataset caps;
  toy_corpora(cfg, 4, 4, text, caps);
  GatedFusionModel<double> m(cfg, 9);
  const auto tb = collate_text(text, {0, 1, 2});
  const auto ib = collate_captions(caps, {1, 2, 3});
  const auto params = m.parameters().tensors();
  auto grads = [&](auto&& make_loss) {
    for (auto p : params) p.clear_grad();
    make_loss().backward();
    std::vector<std::vector<double>> g;
    for (const auto& p : params) g.push_back(p.grad_copy());
    return g;
  };
  const auto gt = grads([&] { return total_loss(m, tb, m.forward(tb), 1.0).total; });
  const auto gi = grads([&] { return total_loss(m, ib, m.forward(ib), 1.0).total; });
  const auto gp = grads([&] { return paired_step(m, tb, ib, ForwardOptions{}, 1.0).total; });
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < gp[i].size(); ++j) worst = std::max(worst, std::abs(gp[i][j] - gt[i][j] - gi[i][j]));
  c.expect(worst <= kPairedTol, "paired gradient");
  c.notes = "paired grad max |diff| " + fmt("%.1e", worst);
}

// ------------------------------------------------------------------ 7

std::string swap_number(const synth::Scene& s) {
  auto t = s;
  std::string out = synth::describe(s);
  t.plural = !s.plural;
  const std::string right = s.plural ? synth::kVerbsPl[s.verb] : synth::kVerbs[s.verb];
  const std::string wrong = t.plural ? synth::kVerbsPl[s.verb] : synth::kVerbs[s.verb];
  return out.substr(0, out.size() - right.size()) + wrong;
}

std::string swap_adjectives(const synth::Scene& s) {
  std::string out = synth::describe(s);
  const std::string size = synth::kSizes[s.size], color = synth::kColors[s.color];
  const std::string ordered = size + " " + color, swapped = color + " " + size;
  return out.replace(out.find(ordered), ordered.size(), swapped);
}

void criterion_overfit(Check& c) {
  SyntheticOptions so;
  so.seed = 7;
  so.n_images = 32;
  so.n_text = 0;
  so.n_minimal_pairs = 0;
  so.n_forced_choice = 0;
  const auto syn = make_synthetic(so);

  ModelConfig m;
  m.d_model = 32;
  m.hidden_dim = 64;
  m.n_heads = 4;
  m.n_decoder_layers = 2;
  m.n_image_encoder_layers = 2;
  m.vocab_size = Tokenizer{}.vocab_size();
  m.image_embedding_dim = synth::kImageDim;
  m.max_seq_len = 32;
  m.dropout_rate = 0.0;
  m.gate_variant = GateVariant::soft_feature;
  m.objective = Objective::ntp;

  const Tokenizer tok;
  TrainingData data;
  data.captions = build_caption_dataset(syn.captions, syn.embeddings, tok, m.max_seq_len);
  for (const auto& s : data.captions.samples) data.text.push_back(s.tokens);  // the captions also as plain text
  data.hashes = {{"captions", "synthetic-32"}};

  TrainingConfig tc;
  tc.batch_size = 8;
  tc.peak_lr = 3e-3;
  tc.warmup_fraction = 0.02;
  tc.weight_decay = 0.0;
  tc.strategy = Strategy::alternating;
  tc.epochs_per_modality = kOverfitMaxSteps / (2 * (32 / tc.batch_size));
  tc.checkpoint_interval = 0;
  tc.seed = 42;

  const auto t0 = std::chrono::steady_clock::now();
  Trainer<float> trainer(m, tc, data);
  std::vector<std::size_t> all(32);
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  double caption_ntp = std::nan(""), text_ntp = std::nan("");
  std::size_t reached = 0;
  while (!trainer.finished() && trainer.step() < kOverfitMaxSteps) {
    trainer.train_step();
    if (trainer.step() % 50 == 0 || trainer.finished()) {
      std::tie(text_ntp, caption_ntp) = validation_ntp(trainer.model(), data.text, data.captions, all);
      if (caption_ntp < kOverfitNtp) {
        reached = trainer.step();
        break;
      }
    }
  }

  std::vector<MinimalPair> pairs;
  for (std::size_t i = 0; i < syn.captions.size(); ++i) {
    const auto scene = synth::read_scene(syn.embeddings.row(syn.captions[i].image_index));
    const auto good = encode_sample(tok, syn.captions[i].caption, m.max_seq_len);
    pairs.push_back({good, encode_sample(tok, swap_number(scene), m.max_seq_len), "agreement"});
    pairs.push_back({good, encode_sample(tok, swap_adjectives(scene), m.max_seq_len), "adjective_order"});
  }
  const auto acc = minimal_pair_accuracy(trainer.model(), pairs);
  const double dt = seconds_since(t0);

  c.notes = "caption NTP " + fmt("%.4f", caption_ntp) + " at step " + std::to_string(trainer.step()) +
            ", text NTP " + fmt("%.3f", text_ntp) + ", minimal pairs " + std::to_string(acc.correct) + "/" +
            std::to_string(acc.total) + ", " + fmt("%.1fs", dt);
  c.expect(reached > 0 && reached <= kOverfitMaxSteps, "NTP did not reach threshold");
  c.expect(acc.accuracy == 1.0, "minimal pairs below 1.0");
  c.expect(dt < kOverfitSeconds, "too slow");
}

// ------------------------------------------------------------------ 8

TrainingData determinism_data(const ModelConfig& c, std::size_t n_text = 24, std::size_t n_image = 12) {
  TrainingData d;
  toy_corpora(c, n_text, n_image, d.text, d.captions);
  d.hashes = {{"text", "t"}, {"captions", "c"}};
  return d;
}

void criterion_determinism(Check& c) {
  auto m = toy_config();
  m.gate_variant = GateVariant::hard_token;
  m.objective = Objective::ntp_lcg;
  m.dropout_rate = 0.1;  // exercises the dropout and Gumbel streams
  TrainingConfig tc;
  tc.batch_size = 4;
  tc.peak_lr = 1e-2;
  tc.warmup_fraction = 0.1;
  tc.epochs_per_modality = 2;
  tc.strategy = Strategy::uniform_mixed;
  tc.seed = 13;
  const auto data = determinism_data(m, 64, 32);

  auto log_of = [](Trainer<float>& t, std::size_t steps) {
    std::string log;
    for (std::size_t i = 0; i < steps && !t.finished(); ++i) log += format_metrics_row(t.train_step()) + "\n";
    return log;
  };
  Trainer<float> a(m, tc, data), b(m, tc, data);
  c.expect(a.manifest() == b.manifest(), "manifests differ");
  const std::size_t total = a.planned_steps();
  const auto la = log_of(a, total), lb = log_of(b, total);
  c.expect(!la.empty() && la == lb, "metrics logs differ");

  const auto dir = scratch("determinism");
  std::size_t resumed_checks = 0;
  for (std::size_t k : {std::size_t{1}, total / 3, total - 10}) {
    Trainer<float> first(m, tc, data);
    log_of(first, k);
    const auto path = (dir / ("k" + std::to_string(k) + ".gfck")).string();
    first.save_checkpoint(path);
    const auto reference = log_of(first, 10);
    c.expect(std::count(reference.begin(), reference.end(), '\n') == 10, "fewer than 10 steps after k");
    auto resumed = Trainer<float>::resume(path, data);
    c.expect(resumed.step() == k, "resume step");
    c.expect(log_of(resumed, 10) == reference, "resumed steps differ at k=" + std::to_string(k));
    ++resumed_checks;
  }
  c.notes = std::to_string(total) + " steps bit-identical, resume checked at " + std::to_string(resumed_checks) +
            " points";
}

// ------------------------------------------------------------------ 9

std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r;
  for (double a : x) {
    double less = 0, equal = 0;
    for (double b : x) {
      less += b < a;
      equal += b == a;
    }
    r.push_back(1.0 + less + (equal - 1.0) / 2.0);
  }
  return r;
}

double brute_h(const std::vector<std::vector<double>>& groups) {
  std::vector<double> all;
  for (const auto& g : groups) all.insert(all.end(), g.begin(), g.end());
  const auto r = brute_ranks(all);
  const double n = static_cast<double>(all.size()), rbar = (n + 1) / 2;
  double between = 0, total = 0;
  std::size_t k = 0;
  for (const auto& g : groups) {
    double s = 0;
    for (std::size_t i = 0; i < g.size(); ++i) s += r[k + i];
    const double mean = s / static_cast<double>(g.size());
    between += static_cast<double>(g.size()) * (mean - rbar) * (mean - rbar);
    k += g.size();
  }
  for (double v : r) total += (v - rbar) * (v - rbar);
  return (n - 1) * between / total;
}

void criterion_statistics(Check& c) {
  c.expect(std::abs(kruskal_wallis({{1, 3, 5}, {2, 4, 6}}).statistic - 3.0 / 7.0) <= kStatTol, "hand H");
  Rng rng(5, "kw");
  std::size_t checked = 0;
  for (std::size_t n = 3; n <= 8; ++n)
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t k = 2 + rng.below(std::min<std::size_t>(3, n - 1));
      std::vector<std::vector<double>> groups(k);
      for (std::size_t i = 0; i < n; ++i) groups[i < k ? i : rng.below(k)].push_back(static_cast<double>(rng.below(5)));
      bool degenerate = true;
      for (const auto& g : groups)
        for (double v : g) degenerate &= v == groups[0][0];
      if (degenerate) continue;
      c.expect(std::abs(kruskal_wallis(groups).statistic - brute_h(groups)) <= kStatTol, "brute-force H");
      ++checked;
    }
  c.expect(std::abs(spearman({1, 2, 3, 4, 5}, {2, 1, 4, 3, 5}).statistic - 0.8) <= kStatTol, "spearman 0.8");
  std::vector<double> x, up, down;
  for (int i = 1; i <= 12; ++i) {
    x.push_back(i);
    up.push_back(std::exp(0.3 * i));
    down.push_back(-i * i);
  }
  c.expect(spearman(x, up).statistic == 1.0 && spearman(x, down).statistic == -1.0, "monotone spearman");

  Rng g(9, "kw_power");
  std::vector<double> low, high, lo_score, hi_score;
  for (int i = 0; i < 200; ++i) {
    low.push_back(0.3 + 0.1 * g.normal());
    high.push_back(0.5 + 0.1 * g.normal());
  }
  std::vector<double> gates, scores;
  for (int i = 0; i < 400; ++i) {
    const double s = 100 + 600 * g.uniform();
    scores.push_back(s);
    gates.push_back(0.8 - s / 1000.0 + 0.1 * g.normal());
  }
  const double kw_p = kruskal_wallis({low, high}).p, sp_p = spearman(gates, scores).p;
  c.expect(kw_p < kPowerP, "KW power");
  c.expect(sp_p < kPowerP, "spearman power");
  c.notes = std::to_string(checked) + " brute-force instances, KW p " + fmt("%.1e", kw_p) + ", spearman p " +
            fmt("%.1e", sp_p);
}

// ------------------------------------------------------------------ 10

void criterion_round_trips(Check& c) {
  const auto dir = scratch("formats");
  SyntheticOptions so;
  so.n_images = 40;
  so.n_text = 50;
  so.n_minimal_pairs = 15;
  so.n_forced_choice = 10;
  const auto syn = make_synthetic(so);

  write_embeddings((dir / "e1.gfem").string(), syn.embeddings);
  const auto e_back = read_embeddings((dir / "e1.gfem").string());
  write_embeddings((dir / "e2.gfem").string(), e_back);
  c.expect(e_back == syn.embeddings, "embeddings values");
  c.expect(read_file((dir / "e1.gfem").string()) == read_file((dir / "e2.gfem").string()), "embeddings bytes");

  const auto split = make_split("captions", 97, 42);
  const auto split_bytes = serialize_split(split);
  c.expect(parse_split(split_bytes) == split && serialize_split(parse_split(split_bytes)) == split_bytes, "split");
  c.expect(serialize_split(make_split("captions", 97, 42)) == split_bytes, "split replay");

  auto m = toy_config();
  m.gate_variant = GateVariant::hard_feature;
  TrainingConfig tc;
  tc.batch_size = 4;
  tc.epochs_per_modality = 1;
  const auto data = determinism_data(m);
  Trainer<float> t(m, tc, data);
  for (int i = 0; i < 3; ++i) t.train_step();
  t.save_checkpoint((dir / "a.gfck").string());
  auto resumed = Trainer<float>::resume((dir / "a.gfck").string(), data);
  resumed.save_checkpoint((dir / "b.gfck").string());
  const auto ck = read_file((dir / "a.gfck").string());
  c.expect(ck == read_file((dir / "b.gfck").string()), "checkpoint write/read/write");
  c.expect(serialize_checkpoint(parse_checkpoint<float>(ck)) == ck, "checkpoint parse/serialize");

  write_synthetic(syn, (dir / "s1").string());
  write_synthetic(make_synthetic(so), (dir / "s2").string());
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "s1")) {
    c.expect(read_file(e.path().string()) == read_file((dir / "s2" / e.path().filename()).string()),
             "synthetic " + e.path().filename().string());
    ++files;
  }
  c.expect(files == 7, "synthetic file count");
  c.notes = "embeddings, split, checkpoint and " + std::to_string(files) + " synthetic files";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<void(Check&)>>> criteria{
      {"parameter count", criterion_parameter_count},
      {"gradient suite", criterion_gradients},
      {"gate invariants", criterion_gate_invariants},
      {"loss oracles", criterion_loss_oracles},
      {"architecture invariants", criterion_architecture},
      {"curriculum counting", criterion_curriculum},
      {"trainability", criterion_overfit},
      {"determinism", criterion_determinism},
      {"statistics oracles", criterion_statistics},
      {"format round-trips", criterion_round_trips},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Check c;
    try {
      criteria[i].second(c);
    } catch (const std::exception& e) {
      c.failures.push_back(std::string("exception: ") + e.what());
    }
    std::string line = "criterion " + std::to_string(i + 1) + " (" + criteria[i].first + "): " +
                       (c.ok() ? "PASS" : "FAIL") + " - " + c.notes;
    for (const auto& f : c.failures) line += " [" + f + "]";
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    failed += !c.ok();
  }
  return failed == 0 ? 0 : 1;
}
