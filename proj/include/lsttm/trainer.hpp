#pragma once

// Temporal MAML over the short-term + fusion parameters, neighbor-similarity
// training of the long-term parameters, and the simulated daily/hourly
// serving schedule.

#include "lsttm/autodiff.hpp"
#include "lsttm/config.hpp"
#include "lsttm/graph.hpp"
#include "lsttm/model.hpp"
#include "lsttm/params.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lsttm {

enum class MetaMode : std::uint8_t { kFirstOrder, kExact };
// kAdagrad is a single Adagrad step from a fresh accumulator:
// theta - alpha * g / (|g| + eps).
enum class InnerRule : std::uint8_t { kSgd, kAdagrad };
enum class OnlineMode : std::uint8_t { kCumulative, kPrefix };

std::string_view meta_mode_name(MetaMode m);
MetaMode parse_meta_mode(std::string_view s);
std::string_view inner_rule_name(InnerRule r);
InnerRule parse_inner_rule(std::string_view s);

struct TrainerConfig {
  double inner_lr = 0.01;
  double outer_lr = 0.01;
  double ln_lr = 0.01;  // Adagrad step size of the long-term phase
  std::size_t tasks_per_batch = 8;
  std::size_t support_size = 128;
  std::size_t query_size = 128;
  double adagrad_eps = 1e-8;
  double lambda_t = 1.0;
  double lambda_n = 1.0;
  MetaMode meta_mode = MetaMode::kFirstOrder;
  InnerRule inner_rule = InnerRule::kSgd;
  std::uint64_t seed = 1;
  int meta_epochs = 4;
  int ln_epochs = 3;
  std::size_t ln_paths_per_node = 1;
  std::size_t ln_path_length = 10;
  std::size_t ln_batch_paths = 256;
  std::size_t negatives_per_pair = 2;
  int user_groups = 0;  // 0 disables per-group tasks
  int boundary_day = -1;  // -1: train on every day before the log's last day
  OnlineMode online_mode = OnlineMode::kCumulative;
  std::size_t eval_support_cap = 0;  // 0: whole former-hours support
  std::size_t eval_chunk = 4096;

  void validate() const;
  static TrainerConfig from_config(const KeyValueConfig& cfg);
  // Canonical key=value text of every field, used for hashing and for
  // embedding in checkpoints.
  std::string canonical() const;
  bool operator==(const TrainerConfig&) const = default;
};

// --- generic meta-learning primitives -----------------------------------------

using LossFn = std::function<ad::Var(std::span<const ad::Var>)>;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// theta' = theta - alpha * grad L(theta) (or the fresh-Adagrad step). With
// create_graph the result stays differentiable w.r.t. theta.
std::vector<ad::Var> inner_update(std::span<const ad::Var> theta, const LossFn& support_loss, double alpha,
                                  InnerRule rule = InnerRule::kSgd, bool create_graph = false,
                                  double eps = 1e-8);
std::vector<ad::Array> inner_update(std::span<const ad::Array> theta, const LossFn& support_loss, double alpha,
                                    InnerRule rule = InnerRule::kSgd, double eps = 1e-8);

struct MetaGradient {
  std::vector<ad::Array> grad;
  double support_loss = 0.0;
  double query_loss = 0.0;
};

// Gradient of the query loss at the adapted parameters: taken w.r.t. theta'
// in first-order mode, or through the inner step in exact mode.
MetaGradient meta_gradient(std::span<const ad::Array> theta, const LossFn& support_loss, const LossFn& query_loss,
                           double alpha, MetaMode mode, InnerRule rule = InnerRule::kSgd, double eps = 1e-8);

// acc += g^2; param -= lr * g / (sqrt(acc) + eps)
void adagrad_step(ad::Array& param, const ad::Array& grad, ad::Array& acc, double lr, double eps = 1e-8);

enum class OuterOptimizer : std::uint8_t { kAdagrad, kSgd };

// theta <- optimizer step with g = mean of the per-task meta-gradients.
void outer_update(std::vector<ad::Array>& theta, std::span<const MetaGradient> tasks, double beta,
                  OuterOptimizer optimizer, std::vector<ad::Array>* accumulators, double eps = 1e-8);

// --- temporal tasks ------------------------------------------------------------

struct TemporalTask {
  std::vector<std::size_t> support;  // indices into the instance list
  std::vector<std::size_t> query;
  Timestamp support_hour = 0;  // global hour of the support set; query is the next hour
  int day = 0;
  int hour = 0;  // hour of day of the support set
  std::optional<int> group;
};

// Groups users by their first feature field modulo `groups`.
using GroupFn = std::function<int(NodeId user)>;

std::vector<TemporalTask> build_tasks(std::span<const EventRecord> instances, const GroupFn& group_of = {});

struct TaskBatch {
  std::vector<std::size_t> tasks;  // indices into the pool
  bool relaxed = false;            // distinct hours were not available
};

TaskBatch sample_task_batch(std::span<const TemporalTask> pool, std::size_t n, std::uint64_t seed);

// --- LSTTM training ------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  TrainerConfig trainer;
  ParamSet params;
  std::vector<ad::Array> accumulators;  // aligned with params
  ad::Array long_user_cache;            // users x dim
  std::vector<Edge> short_edges;
  int last_full_train_day = -1;
  Timestamp last_online_hour = -1;
  std::string config_hash;

  bool operator==(const Checkpoint&) const;
};

struct TrainStats {
  std::vector<double> ln_epoch_loss;
  std::vector<double> meta_query_loss;  // per outer step, mean over tasks
  std::vector<double> meta_support_loss;
  std::size_t relaxed_batches = 0;
};

std::string config_hash(const ModelConfig& model, const TrainerConfig& trainer);

// Internal training instances (both labels) from a log.
std::vector<EventRecord> internal_instances(std::span<const EventRecord> rows);

// Adagrad descent on lambda_N * L_N over fresh DeepWalk paths per epoch;
// only long-term parameters move. Returns the mean loss of each epoch.
std::vector<double> train_long_term(const Model& model, const GraphSnapshot& graph, ParamSet& params,
                                    std::vector<ad::Array>& accumulators, int epochs, const TrainerConfig& config);

// Long-term phase, then temporal MAML (or plain training for no-meta) over
// the task pool built from `rows` (every event before the boundary day).
Checkpoint daily_full_train(const EventLog& train_log, const ModelConfig& model_config, const TrainerConfig& config,
                            TrainStats* stats = nullptr);

// Scores rows with the checkpoint's parameters; graph snapshot at each row's
// hour start minus one.
class CheckpointScorer {
 public:
  explicit CheckpointScorer(const Checkpoint& ckpt);
  const Model& model() const { return model_; }
  InteractionGraph& graph() { return graph_; }

  // Sum over rows of the L_T gradient (i.e. count * mean gradient) w.r.t.
  // every parameter, rows grouped by hour; also returns the loss sum.
  std::vector<ad::Array> gradient_sum(const ParamSet& params, std::span<const EventRecord> rows,
                                      double* loss_sum = nullptr) const;
  std::vector<double> score(const ParamSet& params, std::span<const EventRecord> rows) const;

 private:
  const Checkpoint& ckpt_;
  Model model_;
  InteractionGraph graph_;
};

// Applies one step theta - alpha * step(g) to the short + fusion parameters.
void apply_inner_step(ParamSet& params, const std::vector<ad::Array>& grad, double alpha, InnerRule rule, double eps);

// One online update on an hour of new behaviors. Appends the hour's internal
// clicks to the short-term graph and takes one inner-rule step on the
// short-term + fusion parameters; long-term state is untouched.
Checkpoint online_step(const Checkpoint& ckpt, std::span<const EventRecord> hour_events, Timestamp global_hour);

// Hour-by-hour serving within one day in either online mode.
class OnlineSession {
 public:
  explicit OnlineSession(Checkpoint day_checkpoint);
  void step(std::span<const EventRecord> hour_events, Timestamp global_hour);
  const Checkpoint& current() const { return current_; }

 private:
  Checkpoint base_;
  Checkpoint current_;
  std::vector<EventRecord> day_events_;
};

}  // namespace lsttm
