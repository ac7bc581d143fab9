#include <gtest/gtest.h>

#include <filesystem>

#include "gatefuse/trainer.hpp"
#include "toy.hpp"

using namespace gatefuse;
using gatefuse::testing::toy_config;
using gatefuse::testing::toy_corpora;

namespace {

TrainingData toy_data(const ModelConfig& c, std::size_t n_text = 16, std::size_t n_image = 8) {
  TrainingData d;
  toy_corpora(c, n_text, n_image, d.text, d.captions);
  d.hashes = {{"text", "t"}, {"captions", "c"}};
  return d;
}

ModelConfig trained_config() {
  auto c = toy_config();
  c.gate_variant = GateVariant::hard_token;
  c.objective = Objective::ntp_clip;
  c.dropout_rate = 0.1;
  return c;
}

TrainingConfig trained_options(Strategy s = Strategy::alternating) {
  TrainingConfig t;
  t.batch_size = 4;
  t.peak_lr = 1e-2;
  t.warmup_fraction = 0.1;
  t.epochs_per_modality = 2;
  t.strategy = s;
  t.seed = 7;
  return t;
}

std::vector<MetricsRow> run_all(Trainer<float>& t) {
  std::vector<MetricsRow> rows;
  t.run([&](const MetricsRow& r) { rows.push_back(r); });
  return rows;
}

void expect_same(const MetricsRow& a, const MetricsRow& b) {
  EXPECT_EQ(format_metrics_row(a), format_metrics_row(b));
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("gatefuse_trainer_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(TrainingConfig, JsonRoundTripAndUnknownKeys) {
  auto t = trained_options(Strategy::uniform_mixed);
  t.anneal_domain = AnnealDomain::per_epoch;
  const auto back = training_config_from_json(to_json(t));
  EXPECT_EQ(to_json(back), to_json(t));
  EXPECT_THROW(training_config_from_json({{"batchsize", 3}}), std::invalid_argument);
  EXPECT_THROW(training_config_from_json({{"batch_size", 0}}), std::invalid_argument);
  EXPECT_THROW(training_config_from_json({{"anneal_domain", "x"}}), std::invalid_argument);
}

TEST(Trainer, SameSeedGivesIdenticalRuns) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  Trainer<float> a(c, trained_options(), data), b(c, trained_options(), data);
  const auto ra = run_all(a), rb = run_all(b);
  ASSERT_EQ(ra.size(), a.schedule().total_steps());
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) expect_same(ra[i], rb[i]);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  Trainer<float> full(c, trained_options(), data);
  const auto reference = run_all(full);

  const auto dir = temp_dir("resume");
  Trainer<float> first(c, trained_options(), data);
  for (int i = 0; i < 7; ++i) first.train_step();
  const auto path = (dir / "mid.gfck").string();
  first.save_checkpoint(path);

  auto resumed = Trainer<float>::resume(path, data);
  EXPECT_EQ(resumed.step(), 7u);
  std::vector<MetricsRow> rest;
  resumed.run([&](const MetricsRow& r) { rest.push_back(r); });
  ASSERT_EQ(rest.size(), reference.size() - 7);
  for (std::size_t i = 0; i < rest.size(); ++i) expect_same(rest[i], reference[7 + i]);

  const auto& pa = full.model().parameters().named();
  const auto& pb = resumed.model().parameters().named();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
}

TEST(Trainer, ResumeRejectsDifferentData) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  Trainer<float> t(c, trained_options(), data);
  t.train_step();
  const auto path = (temp_dir("hash") / "a.gfck").string();
  t.save_checkpoint(path);
  auto other = data;
  other.hashes["text"] = "different";
  EXPECT_THROW(Trainer<float>::resume(path, other), std::invalid_argument);
  EXPECT_THROW(Trainer<double>::resume(path, data), std::invalid_argument);
}

TEST(Trainer, SchedulesFollowTheirStepCounters) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  auto opts = trained_options();
  Trainer<float> t(c, opts, data);
  const auto rows = run_all(t);
  const auto total = static_cast<std::int64_t>(t.schedule().total_steps());
  const TemperatureSchedule ts{opts.tau_start, opts.tau_end, opts.anneal_fraction,
                               static_cast<std::int64_t>(t.schedule().image_caption_steps())};
  std::int64_t image_steps = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_DOUBLE_EQ(rows[i].lr, lr_at(t.lr_schedule(), static_cast<std::int64_t>(i)));
    EXPECT_DOUBLE_EQ(rows[i].tau, tau_at(ts, image_steps));
    if (rows[i].modality == "image_caption") ++image_steps;
    EXPECT_TRUE(std::isfinite(rows[i].total));
    EXPECT_LE(rows[i].lr, opts.peak_lr);
  }
  EXPECT_EQ(t.lr_schedule().total_steps, total);
  EXPECT_EQ(rows.front().lr, 0.0);
  EXPECT_EQ(image_steps, static_cast<std::int64_t>(t.schedule().image_caption_steps()));
  EXPECT_THROW(t.train_step(), std::out_of_range);
}

TEST(Trainer, MaxStepsStopsEarlyAndCheckpointsPeriodically) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  auto opts = trained_options();
  opts.max_steps = 5;
  opts.checkpoint_interval = 2;
  Trainer<float> t(c, opts, data);
  const auto dir = temp_dir("periodic");
  std::size_t n = 0;
  t.run([&](const MetricsRow&) { ++n; }, dir.string());
  EXPECT_EQ(n, 5u);
  EXPECT_TRUE(std::filesystem::exists(dir / "step_00000002.gfck"));
  EXPECT_TRUE(std::filesystem::exists(dir / "step_00000004.gfck"));
  EXPECT_EQ(t.last_checkpoint(), (dir / "step_00000004.gfck").string());
}

TEST(Trainer, NonFiniteLossNamesLastCheckpoint) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  Trainer<float> t(c, trained_options(), data);
  const auto path = (temp_dir("nan") / "good.gfck").string();
  t.save_checkpoint(path);
  auto w = t.model().parameters().get("output.weight");
  w.values()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    t.train_step();
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("good.gfck"), std::string::npos) << e.what();
  }
}

TEST(Trainer, LoadModelRestoresWeightsAndChecksConfig) {
  const auto c = trained_config();
  const auto data = toy_data(c);
  Trainer<float> t(c, trained_options(), data);
  t.train_step();
  const auto path = (temp_dir("load") / "m.gfck").string();
  t.save_checkpoint(path);
  const auto m = load_model<float>(path, c);
  EXPECT_FALSE(m.training());
  const auto& pa = t.model().parameters().named();
  const auto& pb = m.parameters().named();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i].second.values(), pb[i].second.values());
  auto other = c;
  other.d_model = 4;
  EXPECT_THROW(load_model<float>(path, other), std::invalid_argument);
}
