#pragma once

// Hour-by-hour evaluation on the test day, AUC, period summaries, report
// files, online metrics and the ablation runner.

#include "lsttm/datasim.hpp"
#include "lsttm/model.hpp"
#include "lsttm/trainer.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lsttm {

// Pairwise AUC (ties count one half) via the rank-sum form with average
// ranks. Throws std::invalid_argument unless both classes are present.
double auc(std::span<const double> scores, std::span<const double> labels);

using HourlyAuc = std::array<std::optional<double>, 24>;

// Hour windows [0,8), [8,16), [16,24).
constexpr std::array<std::array<int, 2>, 3> kPeriods{{{0, 8}, {8, 16}, {16, 24}}};

// Mean over the non-omitted hours in [first, last); nullopt if none.
std::optional<double> hour_mean(const HourlyAuc& hours, int first, int last);

struct SeedAuc {
  std::uint64_t seed = 0;
  HourlyAuc hours{};
  bool operator==(const SeedAuc&) const = default;
};

struct HourlyReport {
  std::string model;
  std::string config_hash;
  std::vector<SeedAuc> seeds;

  // Per-hour median across seeds (hours omitted by every seed stay empty).
  HourlyAuc median_hours() const;
  // Median across seeds of each seed's mean over [first, last).
  std::optional<double> median_mean(int first, int last) const;
  std::array<std::optional<double>, 3> periods() const;
  bool operator==(const HourlyReport&) const = default;
};

// Machine-readable rows: "model\tseed\thour\tauc" with NA for omitted hours.
std::string report_to_text(const HourlyReport& report);
HourlyReport parse_report(const std::string& text);

// Comparison table over several reports: one row per model, the three
// periods and the hour 8-23 mean (all seed medians).
std::string report_table(std::span<const HourlyReport> reports);
std::string report_rows(std::span<const HourlyReport> reports);

// Something that can score hour t of the test day after adapting on the
// instances of hours < t.
class HourScorer {
 public:
  virtual ~HourScorer() = default;
  virtual std::vector<double> score_hour(int hour, std::span<const EventRecord> support,
                                         std::span<const EventRecord> query) = 0;
};

class ConstantScorer : public HourScorer {
 public:
  explicit ConstantScorer(double value = 0.5) : value_(value) {}
  std::vector<double> score_hour(int, std::span<const EventRecord>, std::span<const EventRecord> query) override {
    return std::vector<double>(query.size(), value_);
  }

 private:
  double value_;
};

// Adapts a copy of the day checkpoint with one gradient step on all former
// test hours (optionally subsampled to eval.support_cap), then scores.
class LsttmScorer : public HourScorer {
 public:
  LsttmScorer(const Checkpoint& ckpt, std::span<const EventRecord> test_rows);
  std::vector<double> score_hour(int hour, std::span<const EventRecord> support,
                                 std::span<const EventRecord> query) override;

 private:
  const Checkpoint& ckpt_;
  CheckpointScorer scorer_;
  // summed support gradient per test-day hour
  std::vector<std::optional<std::vector<ad::Array>>> hour_grad_;
  std::vector<std::size_t> hour_count_;
};

// Internal rows of one day, evaluated hour by hour. Hours with a single
// class (or no rows) get no AUC.
HourlyAuc temporal_eval(HourScorer& scorer, std::span<const EventRecord> test_rows);
HourlyAuc temporal_eval(const Checkpoint& ckpt, std::span<const EventRecord> test_rows);

struct OnlineMetrics {
  double ctr = 0, acn = 0, hcr = 0, dt = 0;
};

// Over internal rows: CTR = clicks/impressions, ACN = clicks/users,
// HCR = users with a click / users, DT = total dwell / users.
OnlineMetrics online_metrics(std::span<const EventRecord> rows);

struct AblationSetup {
  ModelConfig model;      // dims; the variant is set per run
  TrainerConfig trainer;  // the seed is set per run
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

// Splits at the boundary day (default: the last day), trains one checkpoint
// per seed and evaluates each on the test day.
HourlyReport run_ablation(Variant variant, const EventLog& log, const AblationSetup& setup);

}  // namespace lsttm
