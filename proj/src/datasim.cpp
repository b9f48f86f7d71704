#include "lsttm/datasim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <tuple>
#include <unistd.h>

namespace lsttm {

std::string_view source_name(Source s) { return s == Source::kInternal ? "internal" : "external"; }

// --- config ---------------------------------------------------------------

void SimConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("sim config: ") + what);
  };
  require(users >= 1, "users must be >= 1");
  require(internal_items >= 1, "internal_items must be >= 1");
  require(external_items >= 1, "external_items must be >= 1");
  require(days >= 1, "days must be >= 1");
  require(internal_rate >= 0.0 && external_rate >= 0.0, "rates must be >= 0");
  require(latent_dim >= 1, "latent_dim must be >= 1");
  require(drift >= 0.0 && drift <= 1.0, "drift must be in [0, 1]");
  require(noise >= 0.0, "noise must be >= 0");
  require(feature_signal >= 0.0 && feature_signal <= 1.0, "feature_signal must be in [0, 1]");
  require(activity_shape > 0.0, "activity_shape must be > 0");
  require(positions >= 1, "positions must be >= 1");
  require(dwell_mean > 0.0, "dwell_mean must be > 0");
  for (int s : user_field_sizes) require(s >= 1, "field vocabularies must be >= 1");
  for (int s : item_field_sizes) require(s >= 1, "field vocabularies must be >= 1");
}

namespace {

FieldSizes parse_sizes(const std::string& key, const std::string& text) {
  FieldSizes out{};
  std::istringstream in(text);
  std::string tok;
  int i = 0;
  while (std::getline(in, tok, ',')) {
    if (i >= kFieldCount) throw ConfigError(key + ": expected " + std::to_string(kFieldCount) + " sizes");
    out[static_cast<std::size_t>(i++)] = std::stoi(tok);
  }
  if (i != kFieldCount) throw ConfigError(key + ": expected " + std::to_string(kFieldCount) + " sizes");
  return out;
}

std::string join_sizes(const FieldSizes& s) {
  std::string out;
  for (int i = 0; i < kFieldCount; ++i) {
    if (i) out += ',';
    out += std::to_string(s[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace

SimConfig SimConfig::from_config(const KeyValueConfig& cfg) {
  SimConfig c;
  c.users = static_cast<int>(cfg.get_int("sim.users", c.users));
  c.internal_items = static_cast<int>(cfg.get_int("sim.internal_items", c.internal_items));
  c.external_items = static_cast<int>(cfg.get_int("sim.external_items", c.external_items));
  c.days = static_cast<int>(cfg.get_int("sim.days", c.days));
  c.internal_rate = cfg.get_double("sim.internal_rate", c.internal_rate);
  c.external_rate = cfg.get_double("sim.external_rate", c.external_rate);
  c.latent_dim = static_cast<int>(cfg.get_int("sim.latent_dim", c.latent_dim));
  c.drift = cfg.get_double("sim.drift", c.drift);
  c.noise = cfg.get_double("sim.noise", c.noise);
  c.affinity_weight = cfg.get_double("sim.affinity_weight", c.affinity_weight);
  c.topic_weight = cfg.get_double("sim.topic_weight", c.topic_weight);
  c.base_logit = cfg.get_double("sim.base_logit", c.base_logit);
  c.feature_signal = cfg.get_double("sim.feature_signal", c.feature_signal);
  c.activity_shape = cfg.get_double("sim.activity_shape", c.activity_shape);
  c.positions = static_cast<int>(cfg.get_int("sim.positions", c.positions));
  c.dwell_mean = cfg.get_double("sim.dwell_mean", c.dwell_mean);
  c.seed = cfg.get_uint("sim.seed", c.seed);
  if (cfg.has("sim.user_field_sizes")) {
    c.user_field_sizes = parse_sizes("sim.user_field_sizes", cfg.get_string("sim.user_field_sizes", ""));
  }
  if (cfg.has("sim.item_field_sizes")) {
    c.item_field_sizes = parse_sizes("sim.item_field_sizes", cfg.get_string("sim.item_field_sizes", ""));
  }
  cfg.reject_unused("sim.");
  c.validate();
  return c;
}

// --- entity fields --------------------------------------------------------

namespace {

Fields hashed_fields(std::uint64_t salt, std::uint64_t side, NodeId id, const FieldSizes& sizes) {
  Fields f{};
  for (int k = 0; k < kFieldCount; ++k) {
    const std::uint64_t h = mix_seed(salt, (side << 60) ^ (static_cast<std::uint64_t>(k) << 52) ^
                                               static_cast<std::uint64_t>(id));
    f[static_cast<std::size_t>(k)] = static_cast<int>(h % static_cast<std::uint64_t>(sizes[static_cast<std::size_t>(k)]));
  }
  return f;
}

}  // namespace

Fields user_fields(const LogHeader& h, NodeId user) { return hashed_fields(h.field_salt, 1, user, h.user_field_sizes); }
Fields item_fields(const LogHeader& h, NodeId item) { return hashed_fields(h.field_salt, 2, item, h.item_field_sizes); }

// --- world ----------------------------------------------------------------

double World::logit(NodeId user, NodeId item, Timestamp global_hour) const {
  const auto u = user_latent.row(user);
  const auto q = item_latent.row(item);
  return config.base_logit + config.affinity_weight * u.dot(q) + config.topic_weight * topic.row(global_hour).dot(q);
}

double World::click_probability(NodeId user, NodeId item, Timestamp global_hour) const {
  return 1.0 / (1.0 + std::exp(-logit(user, item, global_hour)));
}

namespace {

Eigen::MatrixXd normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

// latent = signal * (P0[f0] + P1[f1]) / sqrt(2) + sqrt(1 - signal^2) * z
Eigen::MatrixXd entity_latents(std::mt19937_64& rng, int count, int dim, double signal, const FieldSizes& sizes,
                               const std::function<Fields(NodeId)>& fields_of) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  const Eigen::MatrixXd p0 = normal_matrix(rng, sizes[0], dim, sd);
  const Eigen::MatrixXd p1 = normal_matrix(rng, sizes[1], dim, sd);
  const Eigen::MatrixXd z = normal_matrix(rng, count, dim, sd);
  const double rest = std::sqrt(1.0 - signal * signal);
  Eigen::MatrixXd out(count, dim);
  for (int i = 0; i < count; ++i) {
    const Fields f = fields_of(i);
    out.row(i) = signal * (p0.row(f[0]) + p1.row(f[1])) / std::sqrt(2.0) + rest * z.row(i);
  }
  return out;
}

}  // namespace

World make_world(const SimConfig& config) {
  config.validate();
  World w;
  w.config = config;
  w.header.users = config.users;
  w.header.internal_items = config.internal_items;
  w.header.external_items = config.external_items;
  w.header.positions = config.positions;
  w.header.user_field_sizes = config.user_field_sizes;
  w.header.item_field_sizes = config.item_field_sizes;
  w.header.field_salt = mix_seed(config.seed, 0xf1e1d5);

  std::mt19937_64 rng(mix_seed(config.seed, 0x3017d));
  const int dim = config.latent_dim;
  const LogHeader& h = w.header;
  w.user_latent = entity_latents(rng, config.users, dim, config.feature_signal, config.user_field_sizes,
                                 [&](NodeId id) { return user_fields(h, id); });
  w.item_latent = entity_latents(rng, h.item_count(), dim, config.feature_signal, config.item_field_sizes,
                                 [&](NodeId id) { return item_fields(h, id); });

  const int hours = config.days * 24;
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  const double keep = 1.0 - config.drift;
  const double innovate = std::sqrt(1.0 - keep * keep);
  w.topic.resize(hours, dim);
  w.topic.row(0) = normal_matrix(rng, 1, dim, sd);
  for (int t = 1; t < hours; ++t) {
    w.topic.row(t) = keep * w.topic.row(t - 1) + innovate * normal_matrix(rng, 1, dim, sd);
  }

  std::gamma_distribution<double> act(config.activity_shape, 1.0 / config.activity_shape);
  w.activity.resize(static_cast<std::size_t>(config.users));
  for (auto& a : w.activity) a = act(rng);
  return w;
}

EventLog generate(const World& world) {
  const SimConfig& c = world.config;
  EventLog log;
  log.header = world.header;
  const int hours = c.days * 24;

  for (NodeId u = 0; u < c.users; ++u) {
    std::mt19937_64 rng(mix_seed(c.seed, 0x05e5000000ULL + static_cast<std::uint64_t>(u)));
    const double activity = world.activity[static_cast<std::size_t>(u)];
    std::uniform_int_distribution<NodeId> internal_item(0, c.internal_items - 1);
    std::uniform_int_distribution<NodeId> external_item(c.internal_items, c.internal_items + c.external_items - 1);
    std::uniform_int_distribution<int> position(0, c.positions - 1);
    std::uniform_int_distribution<Timestamp> offset(0, kSecondsPerHour - 1);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::exponential_distribution<double> dwell(1.0 / c.dwell_mean);

    auto draw_count = [&](double mean) {
      if (mean <= 0.0) return 0;
      std::poisson_distribution<int> p(mean);
      return p(rng);
    };
    auto clicked = [&](NodeId item, Timestamp hour) {
      const double z = world.logit(u, item, hour) + c.noise * noise(rng);
      return coin(rng) < 1.0 / (1.0 + std::exp(-z));
    };

    for (Timestamp gh = 0; gh < hours; ++gh) {
      const int n_internal = draw_count(c.internal_rate * activity);
      for (int i = 0; i < n_internal; ++i) {
        EventRecord e;
        e.user = u;
        e.item = internal_item(rng);
        e.ts = hour_start(gh) + offset(rng);
        e.source = Source::kInternal;
        e.hour = static_cast<int>(gh % 24);
        e.position = position(rng);
        e.clicked = clicked(e.item, gh);
        e.dwell = e.clicked ? dwell(rng) : 0.0;
        log.rows.push_back(e);
      }
      const int n_external = draw_count(c.external_rate * activity);
      for (int i = 0; i < n_external; ++i) {
        const NodeId item = external_item(rng);
        const Timestamp ts = hour_start(gh) + offset(rng);
        if (!clicked(item, gh)) continue;
        EventRecord e;
        e.user = u;
        e.item = item;
        e.ts = ts;
        e.source = Source::kExternal;
        e.hour = static_cast<int>(gh % 24);
        e.clicked = true;
        e.dwell = dwell(rng);
        log.rows.push_back(e);
      }
    }
  }
  std::sort(log.rows.begin(), log.rows.end(), [](const EventRecord& a, const EventRecord& b) {
    return std::tie(a.ts, a.user, a.item, a.source, a.position, a.clicked, a.dwell) <
           std::tie(b.ts, b.user, b.item, b.source, b.position, b.clicked, b.dwell);
  });
  return log;
}

EventLog generate(const SimConfig& config) { return generate(make_world(config)); }

// --- text format ----------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "# lsttm-events";
constexpr std::string_view kColumns = "user\titem\tts\tsource\tlabel\thour\tposition\tdwell";

template <typename T>
void append_number(std::string& out, T v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.append(buf, res.ptr);
}

template <typename T>
T parse_field(std::size_t line, std::string_view text, const char* column) {
  T v{};
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size()) {
    throw LogFormatError(line, std::string("bad ") + column + " '" + std::string(text) + "'");
  }
  return v;
}

}  // namespace

std::string to_text(const EventLog& log) {
  const LogHeader& h = log.header;
  std::string out;
  out.reserve(64 * log.rows.size() + 256);
  out += std::string(kMagic) + " " + std::to_string(h.version) + "\n";
  out += "# users " + std::to_string(h.users) + "\n";
  out += "# internal_items " + std::to_string(h.internal_items) + "\n";
  out += "# external_items " + std::to_string(h.external_items) + "\n";
  out += "# positions " + std::to_string(h.positions) + "\n";
  out += "# user_field_sizes " + join_sizes(h.user_field_sizes) + "\n";
  out += "# item_field_sizes " + join_sizes(h.item_field_sizes) + "\n";
  out += "# field_salt " + std::to_string(h.field_salt) + "\n";
  out += kColumns;
  out += '\n';
  for (const auto& e : log.rows) {
    append_number(out, e.user);
    out += '\t';
    append_number(out, e.item);
    out += '\t';
    append_number(out, e.ts);
    out += '\t';
    out += source_name(e.source);
    out += e.clicked ? "\t1\t" : "\t0\t";
    append_number(out, e.hour);
    out += '\t';
    append_number(out, e.position);
    out += '\t';
    append_number(out, e.dwell);
    out += '\n';
  }
  return out;
}

EventLog parse_log(const std::string& text) {
  EventLog log;
  LogHeader& h = log.header;
  std::size_t pos = 0;
  std::size_t lineno = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    line = std::string_view(text).substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    return true;
  };

  std::string_view line;
  if (!next_line(line) || line.substr(0, kMagic.size()) != kMagic) {
    throw LogFormatError(1, "missing '# lsttm-events' header");
  }
  h.version = parse_field<int>(lineno, line.substr(std::min(line.size(), kMagic.size() + 1)), "version");
  if (h.version != 1) throw LogFormatError(lineno, "unsupported version " + std::to_string(h.version));

  const std::vector<std::string> keys{"users", "internal_items", "external_items", "positions",
                                      "user_field_sizes", "item_field_sizes", "field_salt"};
  for (const auto& key : keys) {
    if (!next_line(line)) throw LogFormatError(lineno + 1, "missing header '" + key + "'");
    const std::string prefix = "# " + key + " ";
    if (line.substr(0, prefix.size()) != prefix) throw LogFormatError(lineno, "expected header '" + key + "'");
    const std::string_view value = line.substr(prefix.size());
    if (key == "users") h.users = parse_field<int>(lineno, value, "users");
    if (key == "internal_items") h.internal_items = parse_field<int>(lineno, value, "internal_items");
    if (key == "external_items") h.external_items = parse_field<int>(lineno, value, "external_items");
    if (key == "positions") h.positions = parse_field<int>(lineno, value, "positions");
    if (key == "field_salt") h.field_salt = parse_field<std::uint64_t>(lineno, value, "field_salt");
    if (key == "user_field_sizes" || key == "item_field_sizes") {
      try {
        (key == "user_field_sizes" ? h.user_field_sizes : h.item_field_sizes) = parse_sizes(key, std::string(value));
      } catch (const std::exception& e) {
        throw LogFormatError(lineno, e.what());
      }
    }
  }
  if (h.users < 0 || h.internal_items < 0 || h.external_items < 0 || h.positions < 1) {
    throw LogFormatError(lineno, "invalid header counts");
  }
  if (!next_line(line) || line != kColumns) throw LogFormatError(lineno, "expected column header");

  Timestamp previous = 0;
  std::array<std::string_view, 8> cols;
  while (next_line(line)) {
    if (line.empty() && pos >= text.size()) break;
    std::size_t n = 0;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      if (n == cols.size()) throw LogFormatError(lineno, "too many columns");
      cols[n++] = line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start);
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (n != cols.size()) throw LogFormatError(lineno, "expected 8 columns, got " + std::to_string(n));

    EventRecord e;
    e.user = parse_field<NodeId>(lineno, cols[0], "user");
    e.item = parse_field<NodeId>(lineno, cols[1], "item");
    e.ts = parse_field<Timestamp>(lineno, cols[2], "ts");
    if (cols[3] == "internal") {
      e.source = Source::kInternal;
    } else if (cols[3] == "external") {
      e.source = Source::kExternal;
    } else {
      throw LogFormatError(lineno, "unknown source '" + std::string(cols[3]) + "'");
    }
    if (cols[4] == "1") {
      e.clicked = true;
    } else if (cols[4] == "0") {
      e.clicked = false;
    } else {
      throw LogFormatError(lineno, "label must be 0 or 1");
    }
    e.hour = parse_field<int>(lineno, cols[5], "hour");
    e.position = parse_field<int>(lineno, cols[6], "position");
    e.dwell = parse_field<double>(lineno, cols[7], "dwell");

    if (e.user < 0 || e.user >= h.users) throw LogFormatError(lineno, "user id out of range");
    if (e.item < 0 || e.item >= h.item_count()) throw LogFormatError(lineno, "item id out of range");
    if (e.ts < 0) throw LogFormatError(lineno, "negative timestamp");
    if (e.ts < previous) throw LogFormatError(lineno, "rows not sorted by timestamp");
    if (e.hour != static_cast<int>(global_hour_of(e.ts) % 24)) throw LogFormatError(lineno, "hour does not match ts");
    if (e.position < 0 || e.position >= h.positions) throw LogFormatError(lineno, "position out of range");
    if (!(e.dwell >= 0.0) || !std::isfinite(e.dwell)) throw LogFormatError(lineno, "invalid dwell");
    if (e.source == Source::kExternal && !e.clicked) throw LogFormatError(lineno, "external rows must be clicks");
    if ((e.source == Source::kInternal) != h.is_internal_item(e.item)) {
      throw LogFormatError(lineno, "item id does not match source");
    }
    previous = e.ts;
    log.rows.push_back(e);
  }
  return log;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw std::runtime_error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw std::runtime_error("cannot move output into place at " + path.string() + ": " + ec.message());
  }
}

void store(const EventLog& log, const std::filesystem::path& path) { write_file_atomic(path, to_text(log)); }

EventLog load(const std::filesystem::path& path) { return parse_log(read_file(path)); }

// --- split ----------------------------------------------------------------

int last_day(const EventLog& log) {
  if (log.rows.empty()) return -1;
  return static_cast<int>(day_of(log.rows.back().ts));
}

SplitResult split(const EventLog& log, int boundary_day) {
  const int last = last_day(log);
  if (boundary_day < 1 || boundary_day > last) {
    throw std::invalid_argument("split: boundary day " + std::to_string(boundary_day) + " outside (0, " +
                                std::to_string(last) + "]");
  }
  SplitResult r;
  r.train.header = log.header;
  r.test.header = log.header;
  for (const auto& e : log.rows) {
    const auto day = day_of(e.ts);
    if (day < boundary_day) {
      r.train.rows.push_back(e);
    } else if (day == last && e.source == Source::kInternal) {
      r.test.rows.push_back(e);
    } else {
      ++r.discarded;
    }
  }
  if (r.train.rows.empty()) throw std::invalid_argument("split: empty train side");
  if (r.test.rows.empty()) throw std::invalid_argument("split: empty test side");
  return r;
}

}  // namespace lsttm
