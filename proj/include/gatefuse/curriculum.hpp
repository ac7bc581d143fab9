#pragma once

// Epoch plans over a text-only corpus and an image-caption dataset, and the
// batches each optimizer step consumes.
//
//   alternating       text, image, text, image, ... (2E epochs)
//   text_first        E text epochs, then E image epochs
//   image_first       E image epochs, then E text epochs
//   nonuniform_mixed  E epochs over the shuffled union of both datasets
//   uniform_mixed     E text epochs; each step also draws one image-caption
//                     batch from a cycling stream and the two losses are summed

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gatefuse/data_io.hpp"
#include "gatefuse/model.hpp"
#include "gatefuse/objectives.hpp"

namespace gatefuse {

enum class Strategy { alternating, text_first, image_first, nonuniform_mixed, uniform_mixed };
enum class EpochKind { text_only, image_caption, mixed, paired };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::alternating: return "alternating";
    case Strategy::text_first: return "text_first";
    case Strategy::image_first: return "image_first";
    case Strategy::nonuniform_mixed: return "nonuniform_mixed";
    case Strategy::uniform_mixed: return "uniform_mixed";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  for (auto v : {Strategy::alternating, Strategy::text_first, Strategy::image_first,
                 Strategy::nonuniform_mixed, Strategy::uniform_mixed})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown curriculum strategy '" + std::string(s) + "'");
}

inline std::string_view to_string(EpochKind k) {
  switch (k) {
    case EpochKind::text_only: return "text_only";
    case EpochKind::image_caption: return "image_caption";
    case EpochKind::mixed: return "mixed";
    case EpochKind::paired: return "paired";
  }
  return "?";
}

struct CurriculumOptions {
  Strategy strategy = Strategy::alternating;
  std::size_t epochs_per_modality = 10;
  std::size_t batch_size = 64;
  bool start_with_text = true;  // alternating only
  std::uint64_t seed = 42;
};

struct EpochPlan {
  std::size_t index = 0;
  EpochKind kind = EpochKind::text_only;
  std::size_t ordinal = 0;      // index among epochs of the same kind
  std::size_t first_step = 0;
  std::size_t steps = 0;
  std::size_t image_steps = 0;  // steps that include image-caption samples
};

/// Sample indices for one optimizer step.
struct StepPlan {
  std::size_t step = 0;
  std::size_t epoch = 0;
  EpochKind kind = EpochKind::text_only;
  std::vector<std::size_t> text;      // into the text corpus
  std::vector<std::size_t> captions;  // into the caption dataset
  bool has_images() const noexcept { return !captions.empty(); }
};

class CurriculumSchedule {
 public:
  CurriculumSchedule(const CurriculumOptions& options, std::size_t n_text, std::size_t n_image)
      : options_(options), n_text_(n_text), n_image_(n_image) {
    if (options.epochs_per_modality == 0) throw std::invalid_argument("curriculum: epochs must be >= 1");
    if (options.batch_size == 0) throw std::invalid_argument("curriculum: batch_size must be >= 1");
    if (n_text == 0 || n_image == 0)
      throw std::invalid_argument("curriculum: both datasets must be non-empty");
    build();
  }

  const CurriculumOptions& options() const noexcept { return options_; }
  const std::vector<EpochPlan>& epochs() const noexcept { return epochs_; }
  std::size_t total_steps() const noexcept { return total_steps_; }
  std::size_t image_caption_steps() const noexcept { return image_steps_; }
  std::size_t text_size() const noexcept { return n_text_; }
  std::size_t image_size() const noexcept { return n_image_; }

  const EpochPlan& epoch_at(std::size_t step) const {
    if (step >= total_steps_)
      throw std::out_of_range("curriculum: step " + std::to_string(step) + " past end of plan (" +
                              std::to_string(total_steps_) + " steps)");
    auto it = std::upper_bound(epochs_.begin(), epochs_.end(), step,
                               [](std::size_t s, const EpochPlan& e) { return s < e.first_step; });
    return *std::prev(it);
  }

  /// Which samples step `step` consumes. Throws std::out_of_range once the
  /// plan is exhausted.
  StepPlan plan(std::size_t step) const {
    const auto& e = epoch_at(step);
    const std::size_t bs = options_.batch_size, k = step - e.first_step;
    StepPlan p{step, e.index, e.kind, {}, {}};
    switch (e.kind) {
      case EpochKind::text_only: {
        const auto perm = permutation("shuffle/text/" + std::to_string(e.ordinal), n_text_);
        p.text.assign(perm.begin() + k * bs, perm.begin() + (k + 1) * bs);
        break;
      }
      case EpochKind::image_caption: {
        const auto perm = permutation("shuffle/image/" + std::to_string(e.ordinal), n_image_);
        p.captions.assign(perm.begin() + k * bs, perm.begin() + (k + 1) * bs);
        break;
      }
      case EpochKind::mixed: {
        const auto perm = permutation("shuffle/mixed/" + std::to_string(e.ordinal), n_text_ + n_image_);
        for (std::size_t i = k * bs; i < (k + 1) * bs; ++i) {
          if (perm[i] < n_text_) p.text.push_back(perm[i]);
          else p.captions.push_back(perm[i] - n_text_);
        }
        break;
      }
      case EpochKind::paired: {
        const auto perm = permutation("shuffle/text/" + std::to_string(e.ordinal), n_text_);
        p.text.assign(perm.begin() + k * bs, perm.begin() + (k + 1) * bs);
        // The image stream runs across epoch boundaries, one batch per step,
        // reshuffled at the start of every pass.
        const std::size_t per_pass = n_image_ / bs;
        const std::size_t pass = step / per_pass, offset = step % per_pass;
        const auto img = permutation("shuffle/image_pass/" + std::to_string(pass), n_image_);
        p.captions.assign(img.begin() + offset * bs, img.begin() + (offset + 1) * bs);
        break;
      }
    }
    return p;
  }

 private:
  // Returned by value: a later call may evict the cache entry.
  std::vector<std::size_t> permutation(const std::string& name, std::size_t n) const {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    if (cache_.size() > 8) cache_.clear();
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    Rng rng(options_.seed, name);
    rng.shuffle(v);
    return cache_.emplace(name, std::move(v)).first->second;
  }

  void add_epoch(EpochKind kind, std::size_t ordinal) {
    EpochPlan e;
    e.index = epochs_.size();
    e.kind = kind;
    e.ordinal = ordinal;
    e.first_step = total_steps_;
    const std::size_t bs = options_.batch_size;
    switch (kind) {
      case EpochKind::text_only: e.steps = n_text_ / bs; break;
      case EpochKind::image_caption: e.steps = e.image_steps = n_image_ / bs; break;
      case EpochKind::paired: e.steps = e.image_steps = n_text_ / bs; break;
      case EpochKind::mixed: {
        e.steps = (n_text_ + n_image_) / bs;
        const auto perm = permutation("shuffle/mixed/" + std::to_string(ordinal), n_text_ + n_image_);
        for (std::size_t s = 0; s < e.steps; ++s)
          for (std::size_t i = s * bs; i < (s + 1) * bs; ++i)
            if (perm[i] >= n_text_) {
              ++e.image_steps;
              break;
            }
        break;
      }
    }
    if (e.steps == 0)
      throw std::invalid_argument("curriculum: batch_size " + std::to_string(bs) + " exceeds the " +
                                  std::string(to_string(kind)) + " dataset; no full batch exists");
    total_steps_ += e.steps;
    image_steps_ += e.image_steps;
    epochs_.push_back(e);
  }

  void build() {
    const std::size_t E = options_.epochs_per_modality;
    switch (options_.strategy) {
      case Strategy::alternating:
        for (std::size_t i = 0; i < E; ++i) {
          const auto first = options_.start_with_text ? EpochKind::text_only : EpochKind::image_caption;
          const auto second = options_.start_with_text ? EpochKind::image_caption : EpochKind::text_only;
          add_epoch(first, i);
          add_epoch(second, i);
        }
        break;
      case Strategy::text_first:
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::text_only, i);
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::image_caption, i);
        break;
      case Strategy::image_first:
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::image_caption, i);
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::text_only, i);
        break;
      case Strategy::nonuniform_mixed:
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::mixed, i);
        break;
      case Strategy::uniform_mixed:
        if (n_image_ < options_.batch_size)
          throw std::invalid_argument("curriculum: batch_size exceeds the image_caption dataset");
        for (std::size_t i = 0; i < E; ++i) add_epoch(EpochKind::paired, i);
        break;
    }
  }

  CurriculumOptions options_;
  std::size_t n_text_, n_image_;
  std::vector<EpochPlan> epochs_;
  std::size_t total_steps_ = 0;
  std::size_t image_steps_ = 0;
  mutable std::map<std::string, std::vector<std::size_t>> cache_;
};

// ---------------------------------------------------------------- batching

/// Text rows; when image_dim > 0 the batch carries zero-filled image slots
/// but stays text_only (the cross-modal path is still skipped).
inline Batch collate_text(const std::vector<std::vector<std::int32_t>>& corpus,
                          const std::vector<std::size_t>& indices, std::size_t image_dim = 0) {
  std::vector<std::vector<std::int32_t>> rows;
  rows.reserve(indices.size());
  for (auto i : indices) rows.push_back(corpus.at(i));
  return Batch::from_sequences(rows, Modality::text_only,
                               std::vector<float>(indices.size() * image_dim, 0.0f));
}

inline Batch collate_captions(const CaptionDataset& data, const std::vector<std::size_t>& indices) {
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<float> images;
  for (auto i : indices) {
    const auto& s = data.samples.at(i);
    rows.push_back(s.tokens);
    const auto r = data.images.row(s.image_index);
    images.insert(images.end(), r.begin(), r.end());
  }
  return Batch::from_sequences(rows, Modality::image_caption, std::move(images));
}

struct StepBatches {
  EpochKind kind = EpochKind::text_only;
  std::optional<Batch> text;
  std::optional<Batch> image;
};

inline StepBatches collate_step(const StepPlan& plan,
                                const std::vector<std::vector<std::int32_t>>& corpus,
                                const CaptionDataset& captions) {
  StepBatches b;
  b.kind = plan.kind;
  const std::size_t zero_images = plan.kind == EpochKind::mixed ? captions.images.dim : 0;
  if (!plan.text.empty()) b.text = collate_text(corpus, plan.text, zero_images);
  if (!plan.captions.empty()) b.image = collate_captions(captions, plan.captions);
  return b;
}

// ----------------------------------------------------------------- losses

/// Two forwards (text batch, image-caption batch) whose losses are summed
/// so one backward pass covers both.
template <class Real>
StepLoss<Real> paired_step(const GatedFusionModel<Real>& model, const Batch& text,
                           const Batch& image, const ForwardOptions& opt, double lambda) {
  auto a = total_loss(model, text, model.forward(text, opt), lambda);
  auto b = total_loss(model, image, model.forward(image, opt), lambda);
  StepLoss<Real> out;
  out.total = ops::add(a.total, b.total);
  out.ntp_sum = ops::add(a.ntp_sum, b.ntp_sum);
  out.ntp_count = a.ntp_count + b.ntp_count;
  out.auxiliary = b.auxiliary;
  out.report = compose_losses(a.report.ntp + b.report.ntp, b.report.auxiliary, lambda);
  return out;
}

/// Loss of one scheduled step. A mixed step is split by modality; its NTP
/// term is the mean over every target token of both parts.
template <class Real>
StepLoss<Real> step_loss(const GatedFusionModel<Real>& model, const StepBatches& batches,
                         const ForwardOptions& opt, double lambda) {
  switch (batches.kind) {
    case EpochKind::text_only:
      return total_loss(model, *batches.text, model.forward(*batches.text, opt), lambda);
    case EpochKind::image_caption:
      return total_loss(model, *batches.image, model.forward(*batches.image, opt), lambda);
    case EpochKind::paired:
      return paired_step(model, *batches.text, *batches.image, opt, lambda);
    case EpochKind::mixed: break;
  }
  std::vector<StepLoss<Real>> parts;
  if (batches.text) parts.push_back(total_loss(model, *batches.text, model.forward(*batches.text, opt), lambda));
  if (batches.image) parts.push_back(total_loss(model, *batches.image, model.forward(*batches.image, opt), lambda));
  StepLoss<Real> out;
  out.ntp_sum = parts.front().ntp_sum;
  out.ntp_count = parts.front().ntp_count;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    out.ntp_sum = ops::add(out.ntp_sum, parts[i].ntp_sum);
    out.ntp_count += parts[i].ntp_count;
  }
  auto ntp = ops::mul_scalar(out.ntp_sum, Real(1) / Real(out.ntp_count));
  out.auxiliary = parts.back().auxiliary;
  out.total = out.auxiliary.defined() && lambda != 0.0
                  ? ops::add(ntp, ops::mul_scalar(out.auxiliary, static_cast<Real>(lambda)))
                  : ntp;
  out.report = compose_losses(static_cast<double>(ntp.item()),
                              out.auxiliary.defined() ? static_cast<double>(out.auxiliary.item()) : 0.0,
                              lambda);
  return out;
}

}  // namespace gatefuse
