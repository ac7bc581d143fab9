#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "gatefuse/checkpoint.hpp"
#include "gatefuse/config.hpp"
#include "gatefuse/curriculum.hpp"
#include "gatefuse/errors.hpp"
#include "gatefuse/gating.hpp"
#include "gatefuse/model.hpp"
#include "gatefuse/objectives.hpp"
#include "gatefuse/optim.hpp"

namespace gatefuse {

struct TrainingConfig {
  std::size_t batch_size = 64;
  double peak_lr = 5e-5;
  double warmup_fraction = 0.01;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda = 1.0;
  std::uint64_t seed = 42;
  Strategy strategy = Strategy::alternating;
  std::size_t epochs_per_modality = 10;
  bool start_with_text = true;
  std::size_t checkpoint_interval = 500;  // 0 disables periodic checkpoints
  std::size_t log_interval = 1;          // metrics row every n steps, plus the last step
  double tau_start = 1.0;
  double tau_end = 0.1;
  double anneal_fraction = 0.8;
  AnnealDomain anneal_domain = AnnealDomain::global;
  std::size_t max_steps = 0;  // stop early after this many steps; 0 runs the whole plan

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("training: " + m); };
    if (batch_size == 0) fail("batch_size must be positive");
    if (!(peak_lr > 0)) fail("peak_lr must be positive");
    if (warmup_fraction < 0 || warmup_fraction >= 1) fail("warmup_fraction must be in [0, 1)");
    if (!(grad_clip > 0)) fail("grad_clip must be positive");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (lambda < 0) fail("lambda must be >= 0");
    if (epochs_per_modality == 0) fail("epochs_per_modality must be >= 1");
    if (log_interval == 0) fail("log_interval must be >= 1");
    if (!(tau_start > 0) || !(tau_end > 0)) fail("gate temperatures must be positive");
    if (anneal_fraction <= 0 || anneal_fraction > 1) fail("anneal_fraction must be in (0, 1]");
  }
};

inline nlohmann::json to_json(const TrainingConfig& c) {
  return {{"batch_size", c.batch_size},
          {"peak_lr", c.peak_lr},
          {"warmup_fraction", c.warmup_fraction},
          {"grad_clip", c.grad_clip},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"strategy", to_string(c.strategy)},
          {"epochs_per_modality", c.epochs_per_modality},
          {"start_with_text", c.start_with_text},
          {"checkpoint_interval", c.checkpoint_interval},
          {"log_interval", c.log_interval},
          {"tau_start", c.tau_start},
          {"tau_end", c.tau_end},
          {"anneal_fraction", c.anneal_fraction},
          {"anneal_domain", c.anneal_domain == AnnealDomain::global ? "global" : "per_epoch"},
          {"max_steps", c.max_steps}};
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j, TrainingConfig c = {}) {
  static const std::set<std::string> known{
      "batch_size", "peak_lr",  "warmup_fraction", "grad_clip",       "weight_decay",
      "beta1",      "beta2",    "adam_eps",        "lambda",          "seed",
      "strategy",   "epochs_per_modality", "start_with_text", "checkpoint_interval", "log_interval", "tau_start",
      "tau_end",    "anneal_fraction", "anneal_domain", "max_steps"};
  detail::reject_unknown_keys(j, known, "training");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("batch_size", c.batch_size);
  get("peak_lr", c.peak_lr);
  get("warmup_fraction", c.warmup_fraction);
  get("grad_clip", c.grad_clip);
  get("weight_decay", c.weight_decay);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("lambda", c.lambda);
  get("seed", c.seed);
  get("epochs_per_modality", c.epochs_per_modality);
  get("start_with_text", c.start_with_text);
  get("checkpoint_interval", c.checkpoint_interval);
  get("log_interval", c.log_interval);
  get("tau_start", c.tau_start);
  get("tau_end", c.tau_end);
  get("anneal_fraction", c.anneal_fraction);
  get("max_steps", c.max_steps);
  if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  if (j.contains("anneal_domain")) {
    const auto d = j.at("anneal_domain").get<std::string>();
    if (d == "global") c.anneal_domain = AnnealDomain::global;
    else if (d == "per_epoch") c.anneal_domain = AnnealDomain::per_epoch;
    else throw std::invalid_argument("training: unknown anneal_domain '" + d + "'");
  }
  c.validate();
  return c;
}

struct TrainingData {
  std::vector<std::vector<std::int32_t>> text;
  CaptionDataset captions;
  std::map<std::string, std::string> hashes;  // dataset name -> content hash
};

struct MetricsRow {
  std::size_t step = 0;  // updates completed, including this one
  std::size_t epoch = 0;
  std::string modality;
  double ntp = 0, aux = 0, total = 0;
  double lr = 0, tau = 0, grad_norm = 0;
};

inline constexpr const char* kMetricsHeader = "step,epoch,modality,ntp,aux,total,lr,tau,grad_norm";

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.epoch,
                r.modality.c_str(), r.ntp, r.aux, r.total, r.lr, r.tau, r.grad_norm);
  return buf;
}

template <class Real>
constexpr const char* precision_name() {
  return sizeof(Real) == 4 ? "float32" : "float64";
}

/// Drives the curriculum: forward, loss, backward, clip, AdamW, temperature
/// projection, then the lr / tau schedules advance with the step counters.
template <class Real>
class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainingConfig& config, const TrainingData& data)
      : config_(config),
        data_(&data),
        model_(model_config, config.seed),
        schedule_(CurriculumOptions{config.strategy, config.epochs_per_modality, config.batch_size,
                                    config.start_with_text, config.seed},
                  data.text.size(), data.captions.samples.size()),
        rng_(config.seed) {
    config_.validate();
    if (data.captions.images.dim != model_config.image_embedding_dim)
      throw std::invalid_argument("image embeddings have dim " + std::to_string(data.captions.images.dim) +
                                  " but the model expects " +
                                  std::to_string(model_config.image_embedding_dim));
    params_ = model_.parameters().tensors();
    optimizer_.beta1 = config.beta1;
    optimizer_.beta2 = config.beta2;
    optimizer_.eps = config.adam_eps;
    optimizer_.weight_decay = config.weight_decay;
    optimizer_.init(params_);
    const auto total = static_cast<std::int64_t>(schedule_.total_steps());
    lr_schedule_ = {config.peak_lr,
                    static_cast<std::int64_t>(std::llround(config.warmup_fraction * static_cast<double>(total))),
                    total};
    std::size_t acc = 0;
    for (const auto& e : schedule_.epochs()) {
      image_steps_before_epoch_.push_back(acc);
      acc += e.image_steps;
    }
  }

  GatedFusionModel<Real>& model() noexcept { return model_; }
  const CurriculumSchedule& schedule() const noexcept { return schedule_; }
  const TrainingConfig& config() const noexcept { return config_; }
  const AdamW<Real>& optimizer() const noexcept { return optimizer_; }
  const LrSchedule& lr_schedule() const noexcept { return lr_schedule_; }
  std::size_t step() const noexcept { return step_; }
  std::size_t image_step() const noexcept { return image_step_; }
  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

  /// Steps this run executes (the plan, capped by max_steps).
  std::size_t planned_steps() const noexcept {
    const auto total = schedule_.total_steps();
    return config_.max_steps ? std::min(config_.max_steps, total) : total;
  }
  /// Changes the stopping point (0 = end of plan); the plan itself is fixed.
  void set_max_steps(std::size_t n) noexcept { config_.max_steps = n; }
  bool finished() const noexcept { return step_ >= planned_steps(); }

  /// Gate temperature for the next step.
  double current_tau() const {
    const auto& e = schedule_.epoch_at(step_);
    TemperatureSchedule ts{config_.tau_start, config_.tau_end, config_.anneal_fraction, 1};
    if (config_.anneal_domain == AnnealDomain::global) {
      ts.total_image_caption_steps = static_cast<std::int64_t>(schedule_.image_caption_steps());
      return tau_at(ts, static_cast<std::int64_t>(image_step_));
    }
    ts.total_image_caption_steps = static_cast<std::int64_t>(e.image_steps);
    return tau_at(ts, static_cast<std::int64_t>(image_step_ - image_steps_before_epoch_[e.index]));
  }

  MetricsRow train_step() {
    if (finished()) throw std::out_of_range("train_step: plan already complete");
    const auto plan = schedule_.plan(step_);
    const auto batches = collate_step(plan, data_->text, data_->captions);
    const double tau = current_tau();
    const double lr = lr_at(lr_schedule_, static_cast<std::int64_t>(step_));

    for (auto& p : params_) p.clear_grad();
    model_.set_training(true);
    ForwardOptions opt;
    opt.tau = tau;
    opt.rng = &rng_;
    auto loss = step_loss(model_, batches, opt, config_.lambda);
    model_.set_training(false);
    if (!std::isfinite(loss.report.total))
      throw NumericError("non-finite loss at step " + std::to_string(step_ + 1) +
                         "; last good checkpoint: " +
                         (last_checkpoint_.empty() ? std::string("none") : last_checkpoint_));
    loss.total.backward();
    const double norm = clip_grad_norm(params_, config_.grad_clip);
    try {
      optimizer_.step(params_, lr);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at step " + std::to_string(step_ + 1) +
                         "; last good checkpoint: " +
                         (last_checkpoint_.empty() ? std::string("none") : last_checkpoint_));
    }
    project_temperatures(model_.contrastive());

    ++step_;
    if (plan.has_images()) ++image_step_;
    return {step_, plan.epoch, std::string(to_string(plan.kind)), loss.report.ntp, loss.report.auxiliary,
            loss.report.total, lr, tau, norm};
  }

  /// Runs to the end of the plan (or max_steps). Rows are passed to on_row
  /// every log_interval steps and at the last step. Periodic checkpoints go
  /// to checkpoint_dir when it is non-empty, followed by on_checkpoint.
  void run(const std::function<void(const MetricsRow&)>& on_row = {},
           const std::string& checkpoint_dir = {},
           const std::function<void(const std::string&)>& on_checkpoint = {}) {
    while (!finished()) {
      const auto row = train_step();
      if (on_row && (step_ % config_.log_interval == 0 || finished())) on_row(row);
      if (!checkpoint_dir.empty() && config_.checkpoint_interval &&
          step_ % config_.checkpoint_interval == 0) {
        char name[64];
        std::snprintf(name, sizeof name, "step_%08zu.gfck", step_);
        save_checkpoint((std::filesystem::path(checkpoint_dir) / name).string());
        if (on_checkpoint) on_checkpoint(last_checkpoint_);
      }
    }
  }

  nlohmann::json manifest() const {
    nlohmann::json rng = nlohmann::json::object();
    for (const auto& [name, counter] : rng_.counters()) rng[name] = counter;
    return {{"format", "gatefuse-run"},
            {"model", to_json(model_.config())},
            {"training", to_json(config_)},
            {"seed", config_.seed},
            {"datasets", data_->hashes},
            {"dataset_sizes", {{"text", schedule_.text_size()}, {"captions", schedule_.image_size()}}},
            {"plan", {{"total_steps", schedule_.total_steps()},
                      {"image_caption_steps", schedule_.image_caption_steps()},
                      {"warmup_steps", lr_schedule_.warmup_steps}}},
            {"state", {{"step", step_}, {"image_step", image_step_},
                       {"optimizer_step", optimizer_.step_count}, {"rng", rng}}},
            {"precision", precision_name<Real>()},
            {"threads", 1}};
  }

  void save_checkpoint(const std::string& path) {
    CheckpointFile<Real> ck;
    ck.manifest = manifest();
    const auto& named = model_.parameters().named();
    for (const auto& [name, t] : named) ck.blocks.push_back({"param/" + name, t.shape(), t.values()});
    for (std::size_t i = 0; i < named.size(); ++i) {
      ck.blocks.push_back({"adam.m/" + named[i].first, named[i].second.shape(), optimizer_.first_moment[i]});
      ck.blocks.push_back({"adam.v/" + named[i].first, named[i].second.shape(), optimizer_.second_moment[i]});
    }
    write_checkpoint(path, ck);
    last_checkpoint_ = path;
  }

  /// Rebuilds a trainer mid-run. The data must hash to what the checkpoint
  /// was trained on.
  static Trainer resume(const std::string& path, const TrainingData& data) {
    auto ck = read_checkpoint<Real>(path);
    const auto& m = ck.manifest;
    if (m.value("format", "") != "gatefuse-run") throw FormatError(path + ": not a training checkpoint");
    if (m.at("precision").template get<std::string>() != precision_name<Real>())
      throw std::invalid_argument(path + ": precision mismatch");
    const auto want = m.at("datasets").template get<std::map<std::string, std::string>>();
    if (want != data.hashes)
      throw std::invalid_argument(path + ": training data differs from the data this checkpoint was trained on");
    Trainer t(model_config_from_json(m.at("model")), training_config_from_json(m.at("training")), data);
    t.load_state(ck, path);
    return t;
  }

 private:
  void load_state(const CheckpointFile<Real>& ck, const std::string& path) {
    const auto& named = model_.parameters().named();
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& [name, tensor] = named[i];
      auto restore = [&](const std::string& key, std::vector<Real>& dst) {
        const auto& b = ck.block(key);
        if (b.shape != tensor.shape())
          throw FormatError(path + ": block '" + key + "' has shape " + shape_str(b.shape) +
                            ", model expects " + shape_str(tensor.shape()));
        dst = b.data;
      };
      auto t = tensor;
      restore("param/" + name, t.values());
      restore("adam.m/" + name, optimizer_.first_moment[i]);
      restore("adam.v/" + name, optimizer_.second_moment[i]);
    }
    const auto& s = ck.manifest.at("state");
    step_ = s.at("step").template get<std::size_t>();
    image_step_ = s.at("image_step").template get<std::size_t>();
    optimizer_.step_count = s.at("optimizer_step").template get<std::int64_t>();
    rng_.restore(s.at("rng").template get<std::map<std::string, std::uint64_t>>());
    last_checkpoint_ = path;
  }

  TrainingConfig config_;
  const TrainingData* data_;
  GatedFusionModel<Real> model_;
  CurriculumSchedule schedule_;
  RngStreams rng_;
  std::vector<Tensor<Real>> params_;
  AdamW<Real> optimizer_;
  LrSchedule lr_schedule_;
  std::vector<std::size_t> image_steps_before_epoch_;
  std::size_t step_ = 0;
  std::size_t image_step_ = 0;
  std::string last_checkpoint_;
};

/// Token-level NTP over held-out samples in eval mode. Either set may be
/// empty; the result for an empty set is NaN.
template <class Real>
std::pair<double, double> validation_ntp(const GatedFusionModel<Real>& model,
                                         const std::vector<std::vector<std::int32_t>>& text,
                                         const CaptionDataset& captions,
                                         const std::vector<std::size_t>& caption_indices,
                                         std::size_t batch_size = 32) {
  if (model.training()) throw std::logic_error("validation_ntp: model must be in eval mode");
  NoGradGuard no_grad;
  auto mean = [&](std::size_t n, auto&& collate) {
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
      std::vector<std::size_t> idx;
      for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
      const auto batch = collate(idx);
      const auto [s, c] = ntp_loss_sum(model.forward(batch).logits, batch);
      sum += static_cast<double>(s.item());
      count += c;
    }
    return count ? sum / static_cast<double>(count) : std::nan("");
  };
  const double t = mean(text.size(), [&](const std::vector<std::size_t>& idx) { return collate_text(text, idx); });
  const double c = mean(caption_indices.size(), [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> sel;
    for (auto i : idx) sel.push_back(caption_indices[i]);
    return collate_captions(captions, sel);
  });
  return {t, c};
}

/// Loads model weights from any checkpoint written by Trainer, in eval mode.
/// When `expected` is given, the stored model config must match it exactly.
template <class Real>
GatedFusionModel<Real> load_model(const std::string& path,
                                  const std::optional<ModelConfig>& expected = std::nullopt) {
  auto ck = read_checkpoint<Real>(path);
  const auto config = model_config_from_json(ck.manifest.at("model"));
  if (expected && to_json(*expected) != to_json(config))
    throw std::invalid_argument(path + ": model config in checkpoint does not match the requested config");
  GatedFusionModel<Real> model(config, ck.manifest.value("seed", std::uint64_t{42}));
  for (const auto& [name, tensor] : model.parameters().named()) {
    const auto& b = ck.block("param/" + name);
    if (b.shape != tensor.shape())
      throw std::invalid_argument(path + ": parameter '" + name + "' has shape " + shape_str(b.shape) +
                                  ", config implies " + shape_str(tensor.shape()));
    auto t = tensor;
    t.values() = b.data;
  }
  model.set_training(false);
  return model;
}

}  // namespace gatefuse
