#pragma once

// Synthetic multi-source interaction logs with static user preferences and an
// hourly drifting global hot topic, plus the on-disk event-log format.

#include "lsttm/config.hpp"
#include "lsttm/events.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsttm {

inline constexpr int kFieldCount = 6;
using FieldSizes = std::array<int, kFieldCount>;
using Fields = std::array<int, kFieldCount>;

struct SimConfig {
  int users = 2000;
  int internal_items = 500;
  int external_items = 1500;
  int days = 9;
  double internal_rate = 40.0 / 24.0;  // internal impressions per user-hour
  double external_rate = 1.0;          // external impressions per user-hour; only clicks are logged
  int latent_dim = 8;
  double drift = 0.1;  // hot-topic innovation share per hour; 0 keeps it constant
  double noise = 0.3;  // std of per-impression logit noise
  double affinity_weight = 4.0;
  double topic_weight = 4.0;
  double base_logit = -1.5;
  double feature_signal = 0.7;  // loading of the first two fields' prototypes in each latent
  double activity_shape = 2.0;
  int positions = 10;
  double dwell_mean = 45.0;
  std::uint64_t seed = 1;
  FieldSizes user_field_sizes{8, 3, 10, 6, 12, 5};
  FieldSizes item_field_sizes{20, 10, 8, 6, 12, 4};

  void validate() const;
  static SimConfig from_config(const KeyValueConfig& cfg);
};

struct LogHeader {
  int version = 1;
  int users = 0;
  int internal_items = 0;
  int external_items = 0;
  int positions = 1;
  FieldSizes user_field_sizes{1, 1, 1, 1, 1, 1};
  FieldSizes item_field_sizes{1, 1, 1, 1, 1, 1};
  std::uint64_t field_salt = 0;

  int item_count() const { return internal_items + external_items; }
  bool is_internal_item(NodeId item) const { return item >= 0 && item < internal_items; }
  bool operator==(const LogHeader&) const = default;
};

// Categorical fields of an entity; a pure function of the header salt and id.
Fields user_fields(const LogHeader& h, NodeId user);
Fields item_fields(const LogHeader& h, NodeId item);

struct EventLog {
  LogHeader header;
  std::vector<EventRecord> rows;
  bool operator==(const EventLog&) const = default;
};

class LogFormatError : public std::runtime_error {
 public:
  LogFormatError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Latent state behind a generated log.
struct World {
  SimConfig config;
  LogHeader header;
  Eigen::MatrixXd user_latent;  // users x dim
  Eigen::MatrixXd item_latent;  // (internal + external) x dim
  Eigen::MatrixXd topic;        // (days * 24) x dim, one row per global hour
  std::vector<double> activity;

  double logit(NodeId user, NodeId item, Timestamp global_hour) const;
  double click_probability(NodeId user, NodeId item, Timestamp global_hour) const;
};

World make_world(const SimConfig& config);
EventLog generate(const World& world);
EventLog generate(const SimConfig& config);

std::string to_text(const EventLog& log);
EventLog parse_log(const std::string& text);
void store(const EventLog& log, const std::filesystem::path& path);
EventLog load(const std::filesystem::path& path);

struct SplitResult {
  EventLog train;
  EventLog test;
  std::size_t discarded = 0;
};

// train: every row before `boundary_day`; test: internal rows of the last day.
SplitResult split(const EventLog& log, int boundary_day);

int last_day(const EventLog& log);

// Writes `contents` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace lsttm
