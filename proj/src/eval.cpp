#include "lsttm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace lsttm {

using ad::Array;

double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positives = 0, negatives = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) {
        positives += 1;
        rank_sum += avg_rank;
      } else {
        negatives += 1;
      }
    }
    i = j;
  }
  if (positives == 0 || negatives == 0) throw std::invalid_argument("auc: needs both positive and negative labels");
  return (rank_sum - positives * (positives + 1) / 2) / (positives * negatives);
}

std::optional<double> hour_mean(const HourlyAuc& hours, int first, int last) {
  double sum = 0;
  int n = 0;
  for (int h = first; h < last; ++h) {
    if (const auto& v = hours[static_cast<std::size_t>(h)]) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

namespace {

std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::string show(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

constexpr std::string_view kReportMagic = "# lsttm-report 1";
constexpr std::string_view kReportColumns = "model\tseed\thour\tauc";

}  // namespace

HourlyAuc HourlyReport::median_hours() const {
  HourlyAuc out{};
  for (std::size_t h = 0; h < 24; ++h) {
    std::vector<double> v;
    for (const SeedAuc& s : seeds) {
      if (s.hours[h]) v.push_back(*s.hours[h]);
    }
    out[h] = median(std::move(v));
  }
  return out;
}

std::optional<double> HourlyReport::median_mean(int first, int last) const {
  std::vector<double> v;
  for (const SeedAuc& s : seeds) {
    if (auto m = hour_mean(s.hours, first, last)) v.push_back(*m);
  }
  return median(std::move(v));
}

std::array<std::optional<double>, 3> HourlyReport::periods() const {
  std::array<std::optional<double>, 3> out{};
  for (std::size_t p = 0; p < 3; ++p) out[p] = median_mean(kPeriods[p][0], kPeriods[p][1]);
  return out;
}

std::string report_to_text(const HourlyReport& report) {
  if (report.model.find_first_of("\t\n") != std::string::npos) {
    throw std::invalid_argument("report: model name contains a tab or newline");
  }
  std::string out(kReportMagic);
  out += "\n# config_hash " + report.config_hash + "\n";
  out += kReportColumns;
  out += '\n';
  for (const SeedAuc& s : report.seeds) {
    for (std::size_t h = 0; h < 24; ++h) {
      out += report.model + '\t' + std::to_string(s.seed) + '\t' + std::to_string(h) + '\t' +
             (s.hours[h] ? format_number(*s.hours[h]) : "NA") + '\n';
    }
  }
  return out;
}

HourlyReport parse_report(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument("report line " + std::to_string(n) + ": " + what);
  };
  HourlyReport r;
  bool header = false;
  bool have_model = false;
  while (std::getline(in, line)) {
    ++n;
    if (n == 1) {
      if (line != kReportMagic) fail("not a report file");
      continue;
    }
    if (line.rfind("# config_hash ", 0) == 0) {
      r.config_hash = line.substr(14);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != kReportColumns) fail("expected the column header");
      header = true;
      continue;
    }
    std::vector<std::string> cols;
    std::istringstream fields(line);
    for (std::string f; std::getline(fields, f, '\t');) cols.push_back(f);
    if (cols.size() != 4) fail("expected 4 columns");
    if (!have_model) {
      r.model = cols[0];
      have_model = true;
    } else if (cols[0] != r.model) {
      fail("mixed models in one report");
    }
    std::uint64_t seed = 0;
    int hour = 0;
    try {
      std::size_t used = 0;
      seed = std::stoull(cols[1], &used);
      if (used != cols[1].size()) fail("bad seed");
      hour = std::stoi(cols[2], &used);
      if (used != cols[2].size()) fail("bad hour");
    } catch (const std::logic_error&) {
      fail("bad number");
    }
    if (hour < 0 || hour > 23) fail("hour out of range");
    if (r.seeds.empty() || r.seeds.back().seed != seed) r.seeds.push_back({seed, {}});
    if (cols[3] != "NA") {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(cols[3], &used);
      } catch (const std::logic_error&) {
        fail("bad auc");
      }
      if (used != cols[3].size() || !(v >= 0 && v <= 1)) fail("auc must be in [0, 1]");
      r.seeds.back().hours[static_cast<std::size_t>(hour)] = v;
    }
  }
  if (!header) fail("missing column header");
  return r;
}

std::string report_table(std::span<const HourlyReport> reports) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-14s %9s %9s %9s %11s %6s\n", "model", "period1", "period2", "period3",
                "hours8-23", "seeds");
  out << buf;
  for (const HourlyReport& r : reports) {
    const auto p = r.periods();
    std::snprintf(buf, sizeof(buf), "%-14s %9s %9s %9s %11s %6zu\n", r.model.c_str(), show(p[0]).c_str(),
                  show(p[1]).c_str(), show(p[2]).c_str(), show(r.median_mean(8, 24)).c_str(), r.seeds.size());
    out << buf;
  }
  return out.str();
}

std::string report_rows(std::span<const HourlyReport> reports) {
  std::string out(kReportColumns);
  out += '\n';
  for (const HourlyReport& r : reports) {
    const std::string text = report_to_text(r);
    const std::size_t body = text.find(kReportColumns) + kReportColumns.size() + 1;
    out += text.substr(body);
  }
  return out;
}

// --- temporal protocol --------------------------------------------------------

LsttmScorer::LsttmScorer(const Checkpoint& ckpt, std::span<const EventRecord> test_rows)
    : ckpt_(ckpt), scorer_(ckpt), hour_grad_(24), hour_count_(24, 0) {
  for (const EventRecord& e : test_rows) scorer_.graph().append(e);
}

std::vector<double> LsttmScorer::score_hour(int hour, std::span<const EventRecord> support,
                                            std::span<const EventRecord> query) {
  ParamSet params = ckpt_.params;
  if (!support.empty()) {
    const TrainerConfig& tc = ckpt_.trainer;
    std::vector<Array> total;
    double count = 0;
    if (tc.eval_support_cap > 0 && support.size() > tc.eval_support_cap) {
      std::vector<std::size_t> pick(support.size());
      std::iota(pick.begin(), pick.end(), 0);
      std::mt19937_64 rng(mix_seed(tc.seed, 0xe7a1000000ULL + static_cast<std::uint64_t>(hour)));
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(tc.eval_support_cap);
      std::sort(pick.begin(), pick.end());
      std::vector<EventRecord> rows;
      for (std::size_t i : pick) rows.push_back(support[i]);
      total = scorer_.gradient_sum(ckpt_.params, rows);
      count = static_cast<double>(rows.size());
    } else {
      std::vector<std::vector<EventRecord>> by_hour(24);
      for (const EventRecord& e : support) by_hour[static_cast<std::size_t>(global_hour_of(e.ts) % 24)].push_back(e);
      for (std::size_t h = 0; h < 24; ++h) {
        if (by_hour[h].empty()) continue;
        if (!hour_grad_[h] || hour_count_[h] != by_hour[h].size()) {
          hour_grad_[h] = scorer_.gradient_sum(ckpt_.params, by_hour[h]);
          hour_count_[h] = by_hour[h].size();
        }
        if (total.empty()) {
          total = *hour_grad_[h];
        } else {
          for (std::size_t i = 0; i < total.size(); ++i) total[i] += (*hour_grad_[h])[i];
        }
        count += static_cast<double>(by_hour[h].size());
      }
    }
    for (Array& g : total) g /= count;
    apply_inner_step(params, total, tc.inner_lr, tc.inner_rule, tc.adagrad_eps);
  }
  return scorer_.score(params, query);
}

HourlyAuc temporal_eval(HourScorer& scorer, std::span<const EventRecord> test_rows) {
  std::vector<EventRecord> rows(test_rows.begin(), test_rows.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.ts < b.ts; });
  if (!rows.empty()) {
    const int day = day_of(rows.front().ts);
    for (const EventRecord& e : rows) {
      if (e.source != Source::kInternal) throw std::invalid_argument("temporal_eval: test rows must be internal");
      if (day_of(e.ts) != day) throw std::invalid_argument("temporal_eval: test rows span more than one day");
    }
  }
  HourlyAuc out{};
  std::size_t begin = 0;
  for (int t = 0; t < 24; ++t) {
    std::size_t end = begin;
    while (end < rows.size() && global_hour_of(rows[end].ts) % 24 == t) ++end;
    const std::span<const EventRecord> support(rows.data(), begin);
    const std::span<const EventRecord> query(rows.data() + begin, end - begin);
    if (!query.empty()) {
      const std::vector<double> scores = scorer.score_hour(t, support, query);
      if (scores.size() != query.size()) throw std::logic_error("temporal_eval: scorer returned a wrong count");
      std::vector<double> labels;
      labels.reserve(query.size());
      for (const EventRecord& e : query) labels.push_back(e.clicked ? 1.0 : 0.0);
      const bool both = std::any_of(labels.begin(), labels.end(), [](double l) { return l > 0.5; }) &&
                        std::any_of(labels.begin(), labels.end(), [](double l) { return l < 0.5; });
      if (both) out[static_cast<std::size_t>(t)] = auc(scores, labels);
    }
    begin = end;
  }
  return out;
}

HourlyAuc temporal_eval(const Checkpoint& ckpt, std::span<const EventRecord> test_rows) {
  LsttmScorer scorer(ckpt, test_rows);
  return temporal_eval(scorer, test_rows);
}

OnlineMetrics online_metrics(std::span<const EventRecord> rows) {
  std::set<NodeId> users, clickers;
  double impressions = 0, clicks = 0, dwell = 0;
  for (const EventRecord& e : rows) {
    if (e.source != Source::kInternal) continue;
    users.insert(e.user);
    impressions += 1;
    if (e.clicked) {
      clicks += 1;
      dwell += e.dwell;
      clickers.insert(e.user);
    }
  }
  if (impressions == 0 || users.empty()) throw std::invalid_argument("online_metrics: no impressions");
  const auto n = static_cast<double>(users.size());
  return {clicks / impressions, clicks / n, static_cast<double>(clickers.size()) / n, dwell / n};
}

HourlyReport run_ablation(Variant variant, const EventLog& log, const AblationSetup& setup) {
  if (setup.seeds.empty()) throw std::invalid_argument("run_ablation: no seeds");
  const int boundary = setup.trainer.boundary_day < 0 ? last_day(log) : setup.trainer.boundary_day;
  const SplitResult parts = split(log, boundary);

  ModelConfig mc = setup.model;
  mc.variant = variant;
  TrainerConfig tc = setup.trainer;
  tc.seed = 0;
  HourlyReport report;
  report.model = std::string(variant_name(variant));
  report.config_hash = config_hash(mc, tc);
  for (std::uint64_t seed : setup.seeds) {
    tc.seed = seed;
    const Checkpoint ckpt = daily_full_train(parts.train, mc, tc);
    report.seeds.push_back({seed, temporal_eval(ckpt, parts.test.rows)});
  }
  return report;
}

}  // namespace lsttm
