#include "lsttm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace lsttm {

using ad::Array;
using ad::Var;

std::string_view meta_mode_name(MetaMode m) { return m == MetaMode::kExact ? "exact" : "first-order"; }

MetaMode parse_meta_mode(std::string_view s) {
  if (s == "first-order") return MetaMode::kFirstOrder;
  if (s == "exact") return MetaMode::kExact;
  throw std::invalid_argument("unknown meta mode '" + std::string(s) + "' (expected first-order or exact)");
}

std::string_view inner_rule_name(InnerRule r) { return r == InnerRule::kAdagrad ? "adagrad" : "sgd"; }

InnerRule parse_inner_rule(std::string_view s) {
  if (s == "sgd") return InnerRule::kSgd;
  if (s == "adagrad") return InnerRule::kAdagrad;
  throw std::invalid_argument("unknown inner rule '" + std::string(s) + "' (expected sgd or adagrad)");
}

namespace {

std::string_view online_mode_name(OnlineMode m) { return m == OnlineMode::kPrefix ? "prefix" : "cumulative"; }

OnlineMode parse_online_mode(std::string_view s) {
  if (s == "cumulative") return OnlineMode::kCumulative;
  if (s == "prefix") return OnlineMode::kPrefix;
  throw std::invalid_argument("unknown online mode '" + std::string(s) + "' (expected cumulative or prefix)");
}

std::size_t get_size(const KeyValueConfig& cfg, const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(cfg.get_uint(key, fallback));
}

}  // namespace

void TrainerConfig::validate() const {
  auto positive = [](double v) { return std::isfinite(v) && v > 0; };
  if (!positive(inner_lr) || !positive(outer_lr) || !positive(ln_lr)) throw ConfigError("train: learning rates must be positive");
  if (!positive(adagrad_eps)) throw ConfigError("train.adagrad_eps must be positive");
  if (!(lambda_t >= 0) || !(lambda_n >= 0)) throw ConfigError("train: loss weights must be >= 0");
  if (tasks_per_batch == 0 || support_size == 0 || query_size == 0) {
    throw ConfigError("train: task batch, support and query sizes must be >= 1");
  }
  if (meta_epochs < 0 || ln_epochs < 0) throw ConfigError("train: epoch counts must be >= 0");
  if (ln_path_length < 2 || ln_paths_per_node == 0 || ln_batch_paths == 0) {
    throw ConfigError("train: DeepWalk paths need length >= 2 and positive counts");
  }
  if (user_groups < 0) throw ConfigError("train.user_groups must be >= 0");
  if (eval_chunk == 0) throw ConfigError("eval.chunk must be >= 1");
  if (meta_mode == MetaMode::kExact && inner_rule == InnerRule::kAdagrad) {
    throw ConfigError("train: exact meta-gradients need inner_rule = sgd");
  }
}

TrainerConfig TrainerConfig::from_config(const KeyValueConfig& cfg) {
  TrainerConfig c;
  c.inner_lr = cfg.get_double("train.inner_lr", c.inner_lr);
  c.outer_lr = cfg.get_double("train.outer_lr", c.outer_lr);
  c.ln_lr = cfg.get_double("train.ln_lr", c.ln_lr);
  c.tasks_per_batch = get_size(cfg, "train.tasks_per_batch", c.tasks_per_batch);
  c.support_size = get_size(cfg, "train.support_size", c.support_size);
  c.query_size = get_size(cfg, "train.query_size", c.query_size);
  c.adagrad_eps = cfg.get_double("train.adagrad_eps", c.adagrad_eps);
  c.lambda_t = cfg.get_double("train.lambda_t", c.lambda_t);
  c.lambda_n = cfg.get_double("train.lambda_n", c.lambda_n);
  c.meta_mode = parse_meta_mode(cfg.get_string("train.meta_mode", std::string(meta_mode_name(c.meta_mode))));
  c.inner_rule = parse_inner_rule(cfg.get_string("train.inner_rule", std::string(inner_rule_name(c.inner_rule))));
  c.seed = cfg.get_uint("train.seed", c.seed);
  c.meta_epochs = static_cast<int>(cfg.get_int("train.meta_epochs", c.meta_epochs));
  c.ln_epochs = static_cast<int>(cfg.get_int("train.ln_epochs", c.ln_epochs));
  c.ln_paths_per_node = get_size(cfg, "train.ln_paths_per_node", c.ln_paths_per_node);
  c.ln_path_length = get_size(cfg, "train.ln_path_length", c.ln_path_length);
  c.ln_batch_paths = get_size(cfg, "train.ln_batch_paths", c.ln_batch_paths);
  c.negatives_per_pair = get_size(cfg, "train.negatives_per_pair", c.negatives_per_pair);
  c.user_groups = static_cast<int>(cfg.get_int("train.user_groups", c.user_groups));
  c.boundary_day = static_cast<int>(cfg.get_int("train.boundary_day", c.boundary_day));
  c.online_mode = parse_online_mode(cfg.get_string("eval.online_mode", std::string(online_mode_name(c.online_mode))));
  c.eval_support_cap = get_size(cfg, "eval.support_cap", c.eval_support_cap);
  c.eval_chunk = get_size(cfg, "eval.chunk", c.eval_chunk);
  c.validate();
  return c;
}

std::string TrainerConfig::canonical() const {
  std::ostringstream out;
  out << "train.inner_lr=" << format_number(inner_lr) << "\ntrain.outer_lr=" << format_number(outer_lr)
      << "\ntrain.ln_lr=" << format_number(ln_lr)
      << "\ntrain.tasks_per_batch=" << tasks_per_batch << "\ntrain.support_size=" << support_size
      << "\ntrain.query_size=" << query_size << "\ntrain.adagrad_eps=" << format_number(adagrad_eps)
      << "\ntrain.lambda_t=" << format_number(lambda_t) << "\ntrain.lambda_n=" << format_number(lambda_n)
      << "\ntrain.meta_mode=" << meta_mode_name(meta_mode) << "\ntrain.inner_rule=" << inner_rule_name(inner_rule)
      << "\ntrain.seed=" << seed << "\ntrain.meta_epochs=" << meta_epochs << "\ntrain.ln_epochs=" << ln_epochs
      << "\ntrain.ln_paths_per_node=" << ln_paths_per_node << "\ntrain.ln_path_length=" << ln_path_length
      << "\ntrain.ln_batch_paths=" << ln_batch_paths << "\ntrain.negatives_per_pair=" << negatives_per_pair
      << "\ntrain.user_groups=" << user_groups << "\ntrain.boundary_day=" << boundary_day
      << "\neval.online_mode=" << online_mode_name(online_mode) << "\neval.support_cap=" << eval_support_cap
      << "\neval.chunk=" << eval_chunk << '\n';
  return out.str();
}

// --- meta-learning primitives -------------------------------------------------

namespace {

void require_finite(const Var& loss, const char* where) {
  const double v = loss.item();
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << where << ": loss is " << v;
    throw NonFiniteError(msg.str());
  }
}

void require_finite(std::span<const Var> grads, const char* where) {
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].value().allFinite()) {
      throw NonFiniteError(std::string(where) + ": gradient of tensor " + std::to_string(i) + " is not finite");
    }
  }
}

Array step_direction(const Array& g, InnerRule rule, double eps) {
  if (rule == InnerRule::kSgd) return g;
  return g.array() / (g.array().abs() + eps);
}

std::vector<Var> leaves_of(std::span<const Array> values) {
  std::vector<Var> out;
  out.reserve(values.size());
  for (const Array& v : values) out.push_back(ad::leaf(v));
  return out;
}

}  // namespace

std::vector<Var> inner_update(std::span<const Var> theta, const LossFn& support_loss, double alpha, InnerRule rule,
                              bool create_graph, double eps) {
  if (create_graph && rule != InnerRule::kSgd) {
    throw std::invalid_argument("inner_update: a differentiable step needs the sgd rule");
  }
  const Var loss = support_loss(theta);
  require_finite(loss, "inner update");
  const std::vector<Var> g = ad::grad(loss, theta, create_graph);
  require_finite(g, "inner update");
  std::vector<Var> out;
  out.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (create_graph) {
      out.push_back(ad::sub(theta[i], ad::scale(g[i], alpha)));
    } else {
      out.push_back(ad::constant(theta[i].value() - alpha * step_direction(g[i].value(), rule, eps)));
    }
  }
  return out;
}

std::vector<Array> inner_update(std::span<const Array> theta, const LossFn& support_loss, double alpha,
                                InnerRule rule, double eps) {
  const std::vector<Var> leaves = leaves_of(theta);
  std::vector<Array> out;
  for (const Var& v : inner_update(leaves, support_loss, alpha, rule, false, eps)) out.push_back(v.value());
  return out;
}

MetaGradient meta_gradient(std::span<const Array> theta, const LossFn& support_loss, const LossFn& query_loss,
                           double alpha, MetaMode mode, InnerRule rule, double eps) {
  MetaGradient out;
  const std::vector<Var> leaves = leaves_of(theta);
  const bool exact = mode == MetaMode::kExact;
  if (exact && rule != InnerRule::kSgd) throw std::invalid_argument("meta_gradient: exact mode needs the sgd rule");

  const Var ls = support_loss(leaves);
  require_finite(ls, "inner update");
  out.support_loss = ls.item();
  const std::vector<Var> gs = ad::grad(ls, leaves, exact);
  require_finite(gs, "inner update");

  std::vector<Var> adapted;
  adapted.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    if (exact) {
      adapted.push_back(ad::sub(leaves[i], ad::scale(gs[i], alpha)));
    } else {
      adapted.push_back(ad::leaf(theta[i] - alpha * step_direction(gs[i].value(), rule, eps)));
    }
  }
  const Var lq = query_loss(adapted);
  require_finite(lq, "meta gradient");
  out.query_loss = lq.item();
  const std::vector<Var> gq = ad::grad(lq, exact ? std::span<const Var>(leaves) : std::span<const Var>(adapted));
  require_finite(gq, "meta gradient");
  out.grad.reserve(gq.size());
  for (const Var& g : gq) out.grad.push_back(g.value());
  return out;
}

void adagrad_step(Array& param, const Array& grad, Array& acc, double lr, double eps) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() || acc.rows() != grad.rows() ||
      acc.cols() != grad.cols()) {
    throw ad::ShapeError("adagrad_step: param " + ad::shape_string(param) + ", grad " + ad::shape_string(grad) +
                         ", accumulator " + ad::shape_string(acc));
  }
  acc.array() += grad.array().square();
  param.array() -= lr * grad.array() / (acc.array().sqrt() + eps);
}

void outer_update(std::vector<Array>& theta, std::span<const MetaGradient> tasks, double beta,
                  OuterOptimizer optimizer, std::vector<Array>* accumulators, double eps) {
  if (tasks.empty()) throw std::invalid_argument("outer_update: no tasks");
  if (optimizer == OuterOptimizer::kAdagrad && (accumulators == nullptr || accumulators->size() != theta.size())) {
    throw std::invalid_argument("outer_update: Adagrad needs one accumulator per tensor");
  }
  const double inv = 1.0 / static_cast<double>(tasks.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    Array g = Array::Zero(theta[i].rows(), theta[i].cols());
    for (const MetaGradient& t : tasks) g += t.grad.at(i);
    g *= inv;
    if (optimizer == OuterOptimizer::kAdagrad) {
      adagrad_step(theta[i], g, (*accumulators)[i], beta, eps);
    } else {
      theta[i] -= beta * g;
    }
  }
}

// --- temporal tasks -------------------------------------------------------------

std::vector<TemporalTask> build_tasks(std::span<const EventRecord> instances, const GroupFn& group_of) {
  std::map<std::pair<Timestamp, int>, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const int g = group_of ? group_of(instances[i].user) : 0;
    buckets[{global_hour_of(instances[i].ts), g}].push_back(i);
  }
  std::vector<TemporalTask> tasks;
  for (const auto& [key, rows] : buckets) {
    const auto next = buckets.find({key.first + 1, key.second});
    if (next == buckets.end()) continue;
    TemporalTask t;
    t.support = rows;
    t.query = next->second;
    t.support_hour = key.first;
    t.day = static_cast<int>(key.first / 24);
    t.hour = static_cast<int>(key.first % 24);
    if (group_of) t.group = key.second;
    tasks.push_back(std::move(t));
  }
  return tasks;
}

TaskBatch sample_task_batch(std::span<const TemporalTask> pool, std::size_t n, std::uint64_t seed) {
  if (n == 0 || n > pool.size()) {
    throw std::invalid_argument("sample_task_batch: cannot draw " + std::to_string(n) + " tasks from a pool of " +
                                std::to_string(pool.size()));
  }
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  TaskBatch out;
  std::vector<bool> taken(pool.size(), false);
  std::vector<bool> hour_used(24, false);
  std::vector<int> days_used;
  auto day_used = [&](int d) { return std::find(days_used.begin(), days_used.end(), d) != days_used.end(); };
  auto take = [&](std::size_t i) {
    taken[i] = true;
    hour_used[static_cast<std::size_t>(pool[i].hour)] = true;
    days_used.push_back(pool[i].day);
    out.tasks.push_back(i);
  };

  // Distinct hours; days cycle so they spread as evenly as the pool allows.
  while (out.tasks.size() < n) {
    bool found = false;
    for (std::size_t i : order) {
      if (taken[i] || hour_used[static_cast<std::size_t>(pool[i].hour)] || day_used(pool[i].day)) continue;
      take(i);
      found = true;
      break;
    }
    if (found) continue;
    if (days_used.empty()) break;
    const bool any_hour_left = std::any_of(order.begin(), order.end(), [&](std::size_t i) {
      return !taken[i] && !hour_used[static_cast<std::size_t>(pool[i].hour)];
    });
    if (!any_hour_left) break;
    days_used.clear();
  }
  for (std::size_t i : order) {
    if (out.tasks.size() >= n) break;
    if (taken[i]) continue;
    taken[i] = true;
    out.tasks.push_back(i);
    out.relaxed = true;
  }
  return out;
}

// --- LSTTM training ---------------------------------------------------------------

bool Checkpoint::operator==(const Checkpoint& o) const {
  if (accumulators.size() != o.accumulators.size()) return false;
  for (std::size_t i = 0; i < accumulators.size(); ++i) {
    if (accumulators[i].rows() != o.accumulators[i].rows() || accumulators[i].cols() != o.accumulators[i].cols() ||
        accumulators[i] != o.accumulators[i]) {
      return false;
    }
  }
  const bool cache_equal = long_user_cache.rows() == o.long_user_cache.rows() &&
                           long_user_cache.cols() == o.long_user_cache.cols() &&
                           long_user_cache == o.long_user_cache;
  return cache_equal && model == o.model && trainer == o.trainer && params == o.params &&
         short_edges == o.short_edges && last_full_train_day == o.last_full_train_day &&
         last_online_hour == o.last_online_hour && config_hash == o.config_hash;
}

std::string config_hash(const ModelConfig& model, const TrainerConfig& trainer) {
  // FNV-1a over the canonical text of both configs
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : model.canonical() + trainer.canonical()) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 15];
  return out;
}

std::vector<EventRecord> internal_instances(std::span<const EventRecord> rows) {
  std::vector<EventRecord> out;
  for (const auto& e : rows) {
    if (e.source == Source::kInternal) out.push_back(e);
  }
  return out;
}

namespace {

constexpr std::uint64_t kLnPathSalt = 0x4c4e500000ULL;
constexpr std::uint64_t kLnOrderSalt = 0x4c4e4f0000ULL;
constexpr std::uint64_t kLnPairSalt = 0x4c4e5a0000ULL;
constexpr std::uint64_t kLnSampleSalt = 0x4c4e530000ULL;
constexpr std::uint64_t kCacheSalt = 0xcac4e00000ULL;
constexpr std::uint64_t kBatchSalt = 0x7a5c000000ULL;
constexpr std::uint64_t kSubsetSalt = 0x5b5e000000ULL;

std::vector<Array> zeros_like(const ParamSet& params) {
  std::vector<Array> out;
  out.reserve(params.size());
  for (const Array& v : params.values) out.push_back(Array::Zero(v.rows(), v.cols()));
  return out;
}

// Positions of the short-term and fusion tensors inside a ParamSet.
std::vector<int> adaptive_indices(const ParamSet& params) {
  std::vector<int> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.groups[i] != ParamGroup::kLong) out.push_back(static_cast<int>(i));
  }
  return out;
}

// Full parameter list with `theta` substituted at `indices` and constants
// everywhere else.
std::vector<Var> assemble(const ParamSet& params, const std::vector<int>& indices, std::span<const Var> theta) {
  std::vector<Var> p;
  p.reserve(params.size());
  for (const Array& v : params.values) p.push_back(ad::constant(v));
  for (std::size_t k = 0; k < indices.size(); ++k) p[static_cast<std::size_t>(indices[k])] = theta[k];
  return p;
}

std::vector<std::size_t> subsample(const std::vector<std::size_t>& rows, std::size_t cap, std::uint64_t seed) {
  if (rows.size() <= cap) return rows;
  std::vector<std::size_t> pick(rows);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, pick.size() - 1);
    std::swap(pick[i], pick[d(rng)]);
  }
  pick.resize(cap);
  std::sort(pick.begin(), pick.end());
  return pick;
}

Batch make_batch(std::span<const EventRecord> instances, const std::vector<std::size_t>& rows) {
  Batch b;
  for (std::size_t i : rows) b.push(instances[i]);
  return b;
}

LogHeader header_of(const ModelConfig& m) {
  LogHeader h;
  h.users = m.users;
  h.internal_items = m.internal_items;
  h.external_items = m.items - m.internal_items;
  h.positions = m.positions;
  h.user_field_sizes = m.user_field_sizes;
  h.item_field_sizes = m.item_field_sizes;
  h.field_salt = m.field_salt;
  return h;
}

}  // namespace

std::vector<double> train_long_term(const Model& model, const GraphSnapshot& graph, ParamSet& params,
                                    std::vector<Array>& accumulators, int epochs, const TrainerConfig& config) {
  const std::vector<int> long_idx = params.indices(ParamGroup::kLong);
  // negatives are uniform over every user and item of the model
  std::vector<NodeRef> pool;
  for (NodeId u = 0; u < model.config().users; ++u) pool.push_back({Side::kUser, u});
  for (NodeId d = 0; d < model.config().items; ++d) pool.push_back({Side::kItem, d});

  std::vector<double> epoch_loss;
  for (int e = 0; e < epochs; ++e) {
    const std::uint64_t epoch_seed = mix_seed(config.seed, static_cast<std::uint64_t>(e));
    const PathSet paths =
        graph.deepwalk_paths(config.ln_paths_per_node, config.ln_path_length, mix_seed(epoch_seed, kLnPathSalt));
    std::vector<std::size_t> order(paths.paths.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(epoch_seed, kLnOrderSalt));
    std::shuffle(order.begin(), order.end(), rng);

    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.ln_batch_paths) {
      const std::size_t end = std::min(order.size(), start + config.ln_batch_paths);
      PathSet sub;
      sub.length = paths.length;
      sub.seed = paths.seed;
      for (std::size_t i = start; i < end; ++i) sub.paths.push_back(paths.paths[order[i]]);
      const std::uint64_t batch_seed = mix_seed(epoch_seed, start);
      const PairPlan plan = plan_pairs(sub, config.negatives_per_pair, pool, mix_seed(batch_seed, kLnPairSalt));
      if (plan.pair_count == 0) continue;

      const std::vector<Var> vars = make_vars(params, {ParamGroup::kLong});
      const Var reps = model.long_term_nodes(vars, graph, plan.nodes, mix_seed(batch_seed, kLnSampleSalt));
      const Var loss = ad::scale(neighbor_similarity_loss(plan, reps), config.lambda_n);
      require_finite(loss, "neighbor-similarity loss");
      std::vector<Var> wrt;
      for (int i : long_idx) wrt.push_back(vars[static_cast<std::size_t>(i)]);
      const std::vector<Var> grads = ad::grad(loss, wrt);
      require_finite(grads, "neighbor-similarity loss");
      for (std::size_t k = 0; k < long_idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(long_idx[k]);
        adagrad_step(params.values[i], grads[k].value(), accumulators[i], config.ln_lr, config.adagrad_eps);
      }
      total += loss.item();
      ++batches;
    }
    epoch_loss.push_back(batches == 0 ? 0.0 : total / static_cast<double>(batches));
  }
  return epoch_loss;
}

Checkpoint daily_full_train(const EventLog& train_log, const ModelConfig& model_config, const TrainerConfig& config,
                            TrainStats* stats) {
  config.validate();
  if (train_log.rows.empty()) throw std::invalid_argument("daily_full_train: empty training log");
  const Model model(model_config);
  const Variant variant = model_config.variant;

  InteractionGraph short_graph(GraphKind::kShortTerm);
  InteractionGraph long_graph(GraphKind::kLongTerm);
  for (const EventRecord& e : train_log.rows) {
    short_graph.append(e);
    if (variant == Variant::kNoExternal && e.source == Source::kExternal) continue;
    long_graph.append(e);
  }

  Checkpoint ckpt;
  ckpt.model = model_config;
  ckpt.trainer = config;
  ckpt.config_hash = config_hash(model_config, config);
  ckpt.params = model.init_params(config.seed);
  ckpt.accumulators = zeros_like(ckpt.params);
  ParamSet& params = ckpt.params;

  const GraphSnapshot long_full = long_graph.full();
  if (variant != Variant::kNoGatLn) {
    std::vector<double> ln = train_long_term(model, long_full, params, ckpt.accumulators, config.ln_epochs, config);
    if (stats != nullptr) stats->ln_epoch_loss = std::move(ln);
  }
  ckpt.long_user_cache = model.long_term_table(params, long_full, mix_seed(config.seed, kCacheSalt));
  const LongTermInput long_input{&ckpt.long_user_cache, nullptr, 0};

  const std::vector<EventRecord> instances = internal_instances(train_log.rows);
  GroupFn group_of;
  if (config.user_groups > 0) {
    const LogHeader h = header_of(model_config);
    group_of = [h, g = config.user_groups](NodeId u) { return user_fields(h, u)[0] % g; };
  }
  const std::vector<TemporalTask> pool = build_tasks(instances, group_of);
  if (pool.empty()) throw std::invalid_argument("daily_full_train: no pair of adjacent hours to build tasks from");

  const std::vector<int> theta_idx = adaptive_indices(params);
  const std::size_t n = std::min(config.tasks_per_batch, pool.size());
  const std::size_t steps_per_epoch = (pool.size() + n - 1) / n;

  for (int epoch = 0; epoch < config.meta_epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::uint64_t step_seed = mix_seed(config.seed, kBatchSalt + epoch * steps_per_epoch + s);
      const TaskBatch batch = sample_task_batch(pool, n, step_seed);
      if (batch.relaxed && stats != nullptr) ++stats->relaxed_batches;

      std::vector<Array> theta;
      theta.reserve(theta_idx.size());
      for (int i : theta_idx) theta.push_back(params.values[static_cast<std::size_t>(i)]);

      std::vector<MetaGradient> grads;
      grads.reserve(batch.tasks.size());
      for (std::size_t t : batch.tasks) {
        const TemporalTask& task = pool[t];
        const std::uint64_t task_seed = mix_seed(mix_seed(config.seed, kSubsetSalt + epoch), t);
        const Batch support = make_batch(instances, subsample(task.support, config.support_size, task_seed));
        const Batch query = make_batch(instances, subsample(task.query, config.query_size, task_seed + 1));
        const GraphSnapshot support_graph = short_graph.snapshot(hour_start(task.support_hour) - 1);
        const GraphSnapshot query_graph = short_graph.snapshot(hour_start(task.support_hour + 1) - 1);

        const LossFn support_loss = [&](std::span<const Var> th) {
          return ad::scale(model.task_loss(assemble(params, theta_idx, th), support, support_graph, long_input),
                           config.lambda_t);
        };
        const LossFn query_loss = [&](std::span<const Var> th) {
          return ad::scale(model.task_loss(assemble(params, theta_idx, th), query, query_graph, long_input),
                           config.lambda_t);
        };

        if (variant == Variant::kNoMeta) {
          // plain training on the same instances, no inner step
          const std::vector<Var> leaves = leaves_of(theta);
          const double ns = static_cast<double>(support.size());
          const double nq = static_cast<double>(query.size());
          const Var ls = support_loss(leaves);
          const Var lq = query_loss(leaves);
          const Var loss = ad::add(ad::scale(ls, ns / (ns + nq)), ad::scale(lq, nq / (ns + nq)));
          require_finite(loss, "training loss");
          MetaGradient g;
          g.support_loss = ls.item();
          g.query_loss = lq.item();
          for (const Var& v : ad::grad(loss, leaves)) g.grad.push_back(v.value());
          grads.push_back(std::move(g));
        } else {
          grads.push_back(meta_gradient(theta, support_loss, query_loss, config.inner_lr, config.meta_mode,
                                        config.inner_rule, config.adagrad_eps));
        }
      }

      std::vector<Array> acc;
      acc.reserve(theta_idx.size());
      for (int i : theta_idx) acc.push_back(ckpt.accumulators[static_cast<std::size_t>(i)]);
      outer_update(theta, grads, config.outer_lr, OuterOptimizer::kAdagrad, &acc, config.adagrad_eps);
      for (std::size_t k = 0; k < theta_idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(theta_idx[k]);
        params.values[i] = std::move(theta[k]);
        ckpt.accumulators[i] = std::move(acc[k]);
      }

      if (stats != nullptr) {
        double q = 0.0, sup = 0.0;
        for (const MetaGradient& g : grads) {
          q += g.query_loss;
          sup += g.support_loss;
        }
        stats->meta_query_loss.push_back(q / static_cast<double>(grads.size()));
        stats->meta_support_loss.push_back(sup / static_cast<double>(grads.size()));
      }
    }
  }

  ckpt.short_edges = short_graph.edges();
  ckpt.last_full_train_day = day_of(train_log.rows.back().ts);
  return ckpt;
}

// --- serving ------------------------------------------------------------------------

CheckpointScorer::CheckpointScorer(const Checkpoint& ckpt)
    : ckpt_(ckpt), model_(ckpt.model), graph_(GraphKind::kShortTerm) {
  model_.check_layout(ckpt.params);
  if (ckpt.long_user_cache.rows() != ckpt.model.users || ckpt.long_user_cache.cols() != ckpt.model.dim) {
    throw std::invalid_argument("checkpoint: long-term cache has shape " + ad::shape_string(ckpt.long_user_cache));
  }
  for (const Edge& e : ckpt.short_edges) graph_.append_edge(e);
}

namespace {

// Row positions grouped by global hour, each group cut into chunks.
std::vector<std::vector<std::size_t>> hour_chunks(std::span<const EventRecord> rows, std::size_t chunk) {
  std::map<Timestamp, std::vector<std::size_t>> by_hour;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].source != Source::kInternal) {
      throw std::invalid_argument("scoring: row " + std::to_string(i) + " is not an internal impression");
    }
    by_hour[global_hour_of(rows[i].ts)].push_back(i);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [hour, idx] : by_hour) {
    for (std::size_t s = 0; s < idx.size(); s += chunk) {
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + chunk)));
    }
  }
  return out;
}

}  // namespace

std::vector<Array> CheckpointScorer::gradient_sum(const ParamSet& params, std::span<const EventRecord> rows,
                                                  double* loss_sum) const {
  std::vector<Array> total = zeros_like(params);
  const std::vector<int> theta_idx = adaptive_indices(params);
  const LongTermInput long_input{&ckpt_.long_user_cache, nullptr, 0};
  double loss_total = 0.0;
  for (const auto& chunk : hour_chunks(rows, ckpt_.trainer.eval_chunk)) {
    const Batch batch = make_batch(rows, chunk);
    const GraphSnapshot snap = graph_.snapshot(hour_start(global_hour_of(rows[chunk.front()].ts)) - 1);
    const std::vector<Var> vars = make_vars(params, {ParamGroup::kShort, ParamGroup::kFusion});
    const Var loss = ad::scale(model_.task_loss(vars, batch, snap, long_input), ckpt_.trainer.lambda_t);
    require_finite(loss, "adaptation loss");
    std::vector<Var> wrt;
    for (int i : theta_idx) wrt.push_back(vars[static_cast<std::size_t>(i)]);
    const std::vector<Var> g = ad::grad(loss, wrt);
    require_finite(g, "adaptation loss");
    const double count = static_cast<double>(chunk.size());
    for (std::size_t k = 0; k < theta_idx.size(); ++k) {
      total[static_cast<std::size_t>(theta_idx[k])] += count * g[k].value();
    }
    loss_total += count * loss.item();
  }
  if (loss_sum != nullptr) *loss_sum = loss_total;
  return total;
}

std::vector<double> CheckpointScorer::score(const ParamSet& params, std::span<const EventRecord> rows) const {
  ad::NoGradGuard guard;
  std::vector<double> out(rows.size(), 0.0);
  std::vector<Var> vars;
  for (const Array& v : params.values) vars.push_back(ad::constant(v));
  const LongTermInput long_input{&ckpt_.long_user_cache, nullptr, 0};
  for (const auto& chunk : hour_chunks(rows, ckpt_.trainer.eval_chunk)) {
    const Batch batch = make_batch(rows, chunk);
    const GraphSnapshot snap = graph_.snapshot(hour_start(global_hour_of(rows[chunk.front()].ts)) - 1);
    const Array p = model_.predict(vars, batch, snap, long_input).value();
    for (std::size_t k = 0; k < chunk.size(); ++k) out[chunk[k]] = p(static_cast<ad::Index>(k), 0);
  }
  return out;
}

void apply_inner_step(ParamSet& params, const std::vector<Array>& grad, double alpha, InnerRule rule, double eps) {
  if (grad.size() != params.size()) throw std::invalid_argument("apply_inner_step: gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.groups[i] == ParamGroup::kLong) continue;
    params.values[i] -= alpha * step_direction(grad[i], rule, eps);
  }
}

namespace {

void check_hour(std::span<const EventRecord> events, Timestamp global_hour) {
  for (const EventRecord& e : events) {
    if (global_hour_of(e.ts) != global_hour) {
      throw std::invalid_argument("online step: event at ts " + std::to_string(e.ts) + " is outside hour " +
                                  std::to_string(global_hour));
    }
  }
}

void append_clicks(Checkpoint& ckpt, std::span<const EventRecord> events) {
  InteractionGraph filter(GraphKind::kShortTerm);
  for (const EventRecord& e : events) {
    if (!filter.accepts(e)) ckpt.short_edges.push_back({e.user, e.item, e.ts});
  }
}

void adapt_from(Checkpoint& target, const Checkpoint& source, std::span<const EventRecord> support) {
  const std::vector<EventRecord> instances = internal_instances(support);
  if (instances.empty()) return;
  const CheckpointScorer scorer(source);
  std::vector<Array> g = scorer.gradient_sum(source.params, instances);
  const double inv = 1.0 / static_cast<double>(instances.size());
  for (Array& a : g) a *= inv;
  target.params = source.params;
  apply_inner_step(target.params, g, source.trainer.inner_lr, source.trainer.inner_rule, source.trainer.adagrad_eps);
}

}  // namespace

Checkpoint online_step(const Checkpoint& ckpt, std::span<const EventRecord> hour_events, Timestamp global_hour) {
  if (global_hour <= ckpt.last_online_hour) {
    throw std::invalid_argument("online step: hour " + std::to_string(global_hour) + " is not after hour " +
                                std::to_string(ckpt.last_online_hour));
  }
  check_hour(hour_events, global_hour);
  Checkpoint next = ckpt;
  append_clicks(next, hour_events);
  adapt_from(next, next, hour_events);
  next.last_online_hour = global_hour;
  return next;
}

OnlineSession::OnlineSession(Checkpoint day_checkpoint) : base_(std::move(day_checkpoint)), current_(base_) {}

void OnlineSession::step(std::span<const EventRecord> hour_events, Timestamp global_hour) {
  if (base_.trainer.online_mode == OnlineMode::kCumulative) {
    current_ = online_step(current_, hour_events, global_hour);
    return;
  }
  if (global_hour <= current_.last_online_hour) {
    throw std::invalid_argument("online step: hour " + std::to_string(global_hour) + " is not after hour " +
                                std::to_string(current_.last_online_hour));
  }
  check_hour(hour_events, global_hour);
  day_events_.insert(day_events_.end(), hour_events.begin(), hour_events.end());
  append_clicks(current_, hour_events);
  Checkpoint source = base_;
  source.short_edges = current_.short_edges;
  adapt_from(current_, source, day_events_);
  current_.last_online_hour = global_hour;
}

}  // namespace lsttm
