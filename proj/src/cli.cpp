#include "lsttm/cli.hpp"

#include "CLI11.hpp"
#include "lsttm/checkpoint.hpp"
#include "lsttm/datasim.hpp"
#include "lsttm/eval.hpp"

#include <optional>
#include <ostream>

namespace lsttm {

namespace {

struct GlobalFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> meta_mode;
  std::optional<std::size_t> negatives_per_pair;
};

KeyValueConfig load_config(const std::string& path, const GlobalFlags& flags) {
  KeyValueConfig cfg = KeyValueConfig::load(path);
  if (flags.meta_mode) cfg.set("train.meta_mode", *flags.meta_mode);
  if (flags.negatives_per_pair) cfg.set("train.negatives_per_pair", std::to_string(*flags.negatives_per_pair));
  return cfg;
}

struct TrainingSetup {
  ModelConfig model;
  TrainerConfig trainer;
};

TrainingSetup training_setup(const KeyValueConfig& cfg, const LogHeader& header) {
  TrainingSetup s{ModelConfig::from_header(header), TrainerConfig::from_config(cfg)};
  s.model.apply(cfg);
  return s;
}

void reject_unused(const KeyValueConfig& cfg) {
  for (const char* prefix : {"model.", "train.", "eval."}) cfg.reject_unused(prefix);
}

EventLog rows_before(const EventLog& log, int boundary) {
  EventLog out;
  out.header = log.header;
  for (const EventRecord& e : log.rows) {
    if (day_of(e.ts) < boundary) out.rows.push_back(e);
  }
  if (out.rows.empty()) throw std::invalid_argument("no events before day " + std::to_string(boundary));
  return out;
}

std::vector<EventRecord> last_day_internal(const EventLog& log) {
  if (log.rows.empty()) throw std::invalid_argument("test log is empty");
  const int day = last_day(log);
  std::vector<EventRecord> out;
  for (const EventRecord& e : log.rows) {
    if (day_of(e.ts) == day && e.source == Source::kInternal) out.push_back(e);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string item = text.substr(start, comma - start);
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("train.seeds: bad seed '" + item + "'");
    seeds.push_back(v);
    start = comma + 1;
  }
  return seeds;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Long- and short-term temporal meta-learning recommender on synthetic logs"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags flags;
  std::uint64_t seed = 0;
  std::string meta_mode;
  std::size_t negatives = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for generation (sim.seed) or training (train.seed)");
  auto* meta_opt = app.add_option("--meta-mode", meta_mode, "Meta-gradient mode")
                       ->check(CLI::IsMember({"first-order", "exact"}));
  auto* neg_opt = app.add_option("--negatives-per-pair", negatives, "Negative samples per positive pair");

  std::string config_path, events_path, out_path, ckpt_path, test_path, variant_name_arg, rows_out;
  std::vector<std::string> report_paths;

  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic event log");
  gen->add_option("config", config_path)->required();
  gen->add_option("out", out_path)->required();

  auto* train = app.add_subcommand("train", "Daily full training on every day before the test day");
  train->add_option("events", events_path)->required();
  train->add_option("config", config_path)->required();
  train->add_option("ckpt-out", out_path)->required();

  auto* evaluate = app.add_subcommand("eval-temporal", "Hour-by-hour evaluation on the last day of a log");
  evaluate->add_option("ckpt", ckpt_path)->required();
  evaluate->add_option("test-log", test_path)->required();
  evaluate->add_option("report-out", out_path)->required();

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate one variant over the configured seeds");
  ablate->add_option("variant", variant_name_arg)->required();
  ablate->add_option("events", events_path)->required();
  ablate->add_option("config", config_path)->required();
  ablate->add_option("report-out", out_path)->required();

  auto* report = app.add_subcommand("report", "Merge reports into a comparison table");
  report->add_option("reports", report_paths)->required();
  report->add_option("--rows-out", rows_out, "Also write the merged machine-readable rows here");

  auto* metrics = app.add_subcommand("online-metrics", "CTR, ACN, HCR and DT of a log's internal rows");
  metrics->add_option("events", events_path)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  if (*seed_opt) flags.seed = seed;
  if (*meta_opt) flags.meta_mode = meta_mode;
  if (*neg_opt) flags.negatives_per_pair = negatives;

  try {
    if (*gen) {
      KeyValueConfig cfg = KeyValueConfig::load(config_path);
      if (flags.seed) cfg.set("sim.seed", std::to_string(*flags.seed));
      const SimConfig sc = SimConfig::from_config(cfg);
      cfg.reject_unused("sim.");
      const EventLog log = generate(sc);
      store(log, out_path);
      out << "wrote " << log.rows.size() << " events to " << out_path << '\n';
    } else if (*train) {
      KeyValueConfig cfg = load_config(config_path, flags);
      if (flags.seed) cfg.set("train.seed", std::to_string(*flags.seed));
      const EventLog log = load(events_path);
      TrainingSetup s = training_setup(cfg, log.header);
      (void)cfg.get_string("train.seeds", "");  // shared with ablate
      reject_unused(cfg);
      const int boundary = s.trainer.boundary_day < 0 ? last_day(log) : s.trainer.boundary_day;
      const Checkpoint ckpt = daily_full_train(rows_before(log, boundary), s.model, s.trainer);
      save_checkpoint(ckpt, out_path);
      out << "trained " << variant_name(s.model.variant) << " on days [0, " << boundary << "), checkpoint "
          << out_path << " (config " << ckpt.config_hash << ")\n";
    } else if (*evaluate) {
      const Checkpoint ckpt = load_checkpoint(ckpt_path);
      const EventLog log = load(test_path);
      HourlyReport r;
      r.model = std::string(variant_name(ckpt.model.variant));
      r.config_hash = ckpt.config_hash;
      r.seeds.push_back({ckpt.trainer.seed, temporal_eval(ckpt, last_day_internal(log))});
      write_file_atomic(out_path, report_to_text(r));
      out << report_table(std::span<const HourlyReport>(&r, 1));
    } else if (*ablate) {
      const Variant variant = parse_variant(variant_name_arg);
      KeyValueConfig cfg = load_config(config_path, flags);
      const EventLog log = load(events_path);
      AblationSetup setup;
      TrainingSetup s = training_setup(cfg, log.header);
      setup.model = s.model;
      setup.trainer = s.trainer;
      setup.seeds = parse_seeds(cfg.get_string("train.seeds", "1,2,3"));
      if (flags.seed) setup.seeds = {*flags.seed};
      reject_unused(cfg);
      const HourlyReport r = run_ablation(variant, log, setup);
      write_file_atomic(out_path, report_to_text(r));
      out << report_table(std::span<const HourlyReport>(&r, 1));
    } else if (*report) {
      std::vector<HourlyReport> reports;
      for (const std::string& p : report_paths) reports.push_back(parse_report(read_file(p)));
      const std::string rows = report_rows(reports);
      if (!rows_out.empty()) write_file_atomic(rows_out, rows);
      out << report_table(reports) << '\n' << rows;
    } else if (*metrics) {
      const EventLog log = load(events_path);
      const OnlineMetrics m = online_metrics(log.rows);
      out << "ctr\t" << format_number(m.ctr) << "\nacn\t" << format_number(m.acn) << "\nhcr\t"
          << format_number(m.hcr) << "\ndt\t" << format_number(m.dt) << '\n';
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace lsttm
