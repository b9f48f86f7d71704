#include "doctest.h"
#include "lsttm/checkpoint.hpp"
#include "lsttm/cli.hpp"
#include "lsttm/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <sstream>

using namespace lsttm;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int status = run_cli(args, out, err);
  return {status, out.str(), err.str()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

constexpr const char* kTinyConfig = R"(# tiny world for end-to-end tests
sim.users = 40
sim.internal_items = 25
sim.external_items = 30
sim.days = 2
sim.internal_rate = 0.5
sim.external_rate = 0.2
model.dim = 4
model.tower = 6,4
model.short_k = 5
model.long_k = 5
train.tasks_per_batch = 4
train.support_size = 32
train.query_size = 32
train.meta_epochs = 1
train.ln_epochs = 1
train.ln_path_length = 4
train.ln_batch_paths = 16
train.seeds = 1,2
)";

}  // namespace

TEST_CASE("report over five variants gives a five-row table") {
  TempDir dir("lsttm_test_cli_report");
  std::vector<std::string> args{"report"};
  const std::vector<std::string> names{"full", "no-meta", "no-external", "no-gating", "no-gat-ln"};
  for (std::size_t v = 0; v < names.size(); ++v) {
    HourlyReport r;
    r.model = names[v];
    r.config_hash = "00000000000000a" + std::to_string(v);
    for (std::uint64_t seed : {1, 2, 3}) {
      SeedAuc s{seed, {}};
      for (std::size_t h = 0; h < 24; ++h) s.hours[h] = 0.8 + 0.01 * static_cast<double>(v) + 0.001 * static_cast<double>(seed);
      r.seeds.push_back(s);
    }
    write_file_atomic(dir / (names[v] + ".tsv"), report_to_text(r));
    args.push_back(dir / (names[v] + ".tsv"));
  }
  args.push_back("--rows-out");
  args.push_back(dir / "rows.tsv");
  const Run run = cli(args);
  REQUIRE(run.status == 0);
  std::istringstream lines(run.out);
  std::vector<std::string> table;
  for (std::string line; std::getline(lines, line) && !line.empty();) table.push_back(line);
  REQUIRE(table.size() == 6);
  CHECK(table[0].find("period1") != std::string::npos);
  CHECK(table[0].find("period3") != std::string::npos);
  for (std::size_t v = 0; v < names.size(); ++v) {
    std::istringstream row(table[v + 1]);
    std::string model, p1, p2, p3;
    row >> model >> p1 >> p2 >> p3;
    CHECK(model == names[v]);
    char expect[16];
    std::snprintf(expect, sizeof(expect), "%.4f", 0.802 + 0.01 * static_cast<double>(v));
    CHECK(p1 == expect);
    CHECK(p2 == expect);
    CHECK(p3 == expect);
  }
  const std::string rows = read_file(dir / "rows.tsv");
  CHECK(std::count(rows.begin(), rows.end(), '\n') == 1 + 5 * 3 * 24);
}

TEST_CASE("failures exit nonzero and write nothing") {
  TempDir dir("lsttm_test_cli_fail");
  fs::path cfg = dir / "tiny.cfg";
  write_file_atomic(cfg, kTinyConfig);

  Run run = cli({"train", dir / "missing.log", cfg.string(), dir / "out.ckpt"});
  CHECK(run.status != 0);
  CHECK(run.err.find("error:") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "out.ckpt"));

  run = cli({"eval-temporal", dir / "missing.ckpt", dir / "missing.log", dir / "r.tsv"});
  CHECK(run.status != 0);
  CHECK_FALSE(fs::exists(dir / "r.tsv"));

  run = cli({"report", dir / "missing.tsv", "--rows-out", dir / "rows.tsv"});
  CHECK(run.status != 0);
  CHECK_FALSE(fs::exists(dir / "rows.tsv"));

  run = cli({"frobnicate"});
  CHECK(run.status != 0);
  run = cli({});
  CHECK(run.status != 0);
  run = cli({"--meta-mode", "third-order", "generate-data", cfg.string(), dir / "x.log"});
  CHECK(run.status != 0);
  CHECK_FALSE(fs::exists(dir / "x.log"));

  SUBCASE("unknown keys are rejected") {
    write_file_atomic(dir / "typo.cfg", std::string(kTinyConfig) + "sim.userz = 3\n");
    run = cli({"generate-data", dir / "typo.cfg", dir / "x.log"});
    CHECK(run.status != 0);
    CHECK(run.err.find("sim.userz") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "x.log"));
  }
  SUBCASE("unknown variant") {
    run = cli({"ablate", "no-such", dir / "x.log", cfg.string(), dir / "r.tsv"});
    CHECK(run.status != 0);
    CHECK_FALSE(fs::exists(dir / "r.tsv"));
  }
  for (const auto& entry : fs::directory_iterator(dir.path)) {
    const std::string name = entry.path().filename().string();
    CHECK_MESSAGE((name == "tiny.cfg" || name == "typo.cfg"), "left behind: " << name);
  }
}

TEST_CASE("generate, train, evaluate and report") {
  TempDir dir("lsttm_test_cli_e2e");
  const std::string cfg = dir / "tiny.cfg";
  write_file_atomic(cfg, kTinyConfig);

  Run run = cli({"--seed", "3", "generate-data", cfg, dir / "events.log"});
  REQUIRE_MESSAGE(run.status == 0, run.err);
  run = cli({"generate-data", cfg, dir / "again.log", "--seed", "3"});
  REQUIRE(run.status == 0);
  CHECK(read_file(dir / "events.log") == read_file(dir / "again.log"));
  const EventLog log = load(dir / "events.log");
  CHECK(last_day(log) == 1);

  run = cli({"train", dir / "events.log", cfg, dir / "a.ckpt", "--seed", "5"});
  REQUIRE_MESSAGE(run.status == 0, run.err);
  const Checkpoint ckpt = load_checkpoint(dir / "a.ckpt");
  CHECK(ckpt.trainer.seed == 5);
  CHECK(ckpt.model.dim == 4);
  CHECK(ckpt.last_full_train_day == 0);

  run = cli({"--seed", "5", "train", dir / "events.log", cfg, dir / "b.ckpt"});
  REQUIRE(run.status == 0);
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));

  run = cli({"eval-temporal", dir / "a.ckpt", dir / "events.log", dir / "full.tsv"});
  REQUIRE_MESSAGE(run.status == 0, run.err);
  const HourlyReport r = parse_report(read_file(dir / "full.tsv"));
  CHECK(r.model == "full");
  CHECK(r.config_hash == ckpt.config_hash);
  REQUIRE(r.seeds.size() == 1);
  CHECK(r.seeds[0].seed == 5);

  run = cli({"ablate", "no-gating", dir / "events.log", cfg, dir / "no-gating.tsv"});
  REQUIRE_MESSAGE(run.status == 0, run.err);
  const HourlyReport a = parse_report(read_file(dir / "no-gating.tsv"));
  CHECK(a.model == "no-gating");
  CHECK(a.seeds.size() == 2);

  run = cli({"report", dir / "full.tsv", dir / "no-gating.tsv"});
  REQUIRE(run.status == 0);
  CHECK(run.out.find("no-gating") != std::string::npos);

  run = cli({"online-metrics", dir / "events.log"});
  REQUIRE(run.status == 0);
  CHECK(run.out.rfind("ctr\t", 0) == 0);

  run = cli({"--meta-mode", "exact", "--negatives-per-pair", "0", "train", dir / "events.log", cfg, dir / "c.ckpt"});
  REQUIRE_MESSAGE(run.status == 0, run.err);
  const Checkpoint exact = load_checkpoint(dir / "c.ckpt");
  CHECK(exact.trainer.meta_mode == MetaMode::kExact);
  CHECK(exact.trainer.negatives_per_pair == 0);
  CHECK(exact.config_hash != ckpt.config_hash);
}
