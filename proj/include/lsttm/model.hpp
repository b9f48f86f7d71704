#pragma once

// The LSTTM network: feature-field inputs, two-layer GAT encoders over the
// short-term (temporal neighbors) and long-term (uniform neighbors) graphs,
// item-conditioned gating fusion and a DeepFM scorer, plus both losses.
//
// Everything is batched: a GAT layer over many centers is one segment softmax
// and one scatter-add over the concatenated neighbor rows.

#include "lsttm/autodiff.hpp"
#include "lsttm/config.hpp"
#include "lsttm/datasim.hpp"
#include "lsttm/graph.hpp"
#include "lsttm/params.hpp"

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lsttm {

enum class Variant : std::uint8_t { kFull, kNoMeta, kNoExternal, kNoGating, kNoGatLn };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);  // throws std::invalid_argument

struct ModelConfig {
  int dim = 16;
  int users = 0;
  int items = 0;  // internal + external
  int internal_items = 0;
  int positions = 1;
  FieldSizes user_field_sizes{1, 1, 1, 1, 1, 1};
  FieldSizes item_field_sizes{1, 1, 1, 1, 1, 1};
  std::uint64_t field_salt = 0;
  std::size_t short_k = 30;
  std::size_t long_k = 30;
  double slope = 0.2;
  double embed_init = 0.05;
  std::array<int, 2> tower{64, 32};
  Variant variant = Variant::kFull;

  static ModelConfig from_header(const LogHeader& header);
  void apply(const KeyValueConfig& cfg);  // reads model.* keys
  std::string canonical() const;
  bool operator==(const ModelConfig&) const = default;
};

// --- batched building blocks ----------------------------------------------

struct GatWeights {
  ad::Var w_center;    // dim x dim, applied to the center's previous-layer vector
  ad::Var w_neighbor;  // dim x dim, applied to neighbor vectors
  ad::Var attention;   // 2*dim x 1
};

// Neighbor rows grouped by center: neighbors.row(r) belongs to center
// segments[r]. Returns one attention weight per neighbor row.
ad::Var gat_attention(const ad::Var& centers, const ad::Var& neighbors, const ad::IndexList& segments,
                      const GatWeights& w, double slope);
// leaky(sum_j alpha_j W_d x_j) per center; centers without neighbors return
// their own row unchanged.
ad::Var gat_layer(const ad::Var& centers, const ad::Var& neighbors, const ad::IndexList& segments,
                  const GatWeights& w, double slope);

struct GateResult {
  ad::Var fused;    // B x dim
  ad::Var weights;  // B x 2: [short, long]
};

GateResult gate_fuse(const ad::Var& short_rep, const ad::Var& long_rep, const ad::Var& item, const ad::Var& gate_short,
                     const ad::Var& gate_long);

struct DeepFmWeights {
  std::array<ad::Var, 3> tower_w;  // out x in
  std::array<ad::Var, 3> tower_b;  // 1 x out
};

// first_order + FM pairwise dots over the field list + tower(concat(fields)).
ad::Var deepfm_logit(std::span<const ad::Var> fields, const ad::Var& first_order, const DeepFmWeights& w, double slope);

// -(1/N)(sum_pos log p + sum_neg log(1 - p)); rejects p outside (0, 1).
ad::Var ce_loss(const ad::Var& probabilities, const std::vector<double>& labels);

// Positive (co-path) and sampled negative node pairs for the neighbor
// similarity loss. Indices refer to `nodes`.
struct PairPlan {
  std::vector<NodeRef> nodes;
  std::vector<ad::Index> pos_a, pos_b;
  std::vector<ad::Index> neg_a, neg_b;
  std::size_t pair_count = 0;
};

PairPlan plan_pairs(const PathSet& paths, std::size_t negatives_per_pair, std::span<const NodeRef> negative_pool,
                    std::uint64_t seed);

// -(sum log sigma(a.b) + sum log sigma(-a.n)) / pair_count; reps rows align
// with plan.nodes.
ad::Var neighbor_similarity_loss(const PairPlan& plan, const ad::Var& reps);

using NeighborFn = std::function<std::vector<NodeId>(NodeRef)>;
using InputFn = std::function<ad::Var(Side, const std::vector<NodeId>&)>;

struct TwoHopWeights {
  GatWeights center_l1;  // layer 1 for centers (center side)
  GatWeights other_l1;   // layer 1 for their neighbors (other side)
  GatWeights center_l2;  // layer 2 for centers
};

// Two GAT layers over a bipartite neighborhood. Output rows follow `centers`.
ad::Var encode_two_hop(Side side, const std::vector<NodeId>& centers, const NeighborFn& neighbors,
                       const InputFn& input, const TwoHopWeights& w, double slope);

// --- the model --------------------------------------------------------------

struct Batch {
  std::vector<NodeId> users;
  std::vector<NodeId> items;
  std::vector<int> hours;
  std::vector<int> positions;
  std::vector<double> labels;

  std::size_t size() const { return users.size(); }
  void push(const EventRecord& e);
};

// Where ū^l comes from: a precomputed table (rows = users) or an in-graph
// encoding of the long-term snapshot with the given sampling seed.
struct LongTermInput {
  const ad::Array* cache = nullptr;
  const GraphSnapshot* graph = nullptr;
  std::uint64_t seed = 0;
};

class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ParamSet init_params(std::uint64_t seed) const;
  // Number of parameters and their layout must match init_params.
  void check_layout(const ParamSet& params) const;

  ad::Var node_input(std::span<const ad::Var> p, Side side, const std::vector<NodeId>& ids) const;
  ad::Var id_input(std::span<const ad::Var> p, Side side, const std::vector<NodeId>& ids) const;

  ad::Var short_term(std::span<const ad::Var> p, const GraphSnapshot& graph, const std::vector<NodeId>& users) const;
  ad::Var long_term(std::span<const ad::Var> p, const GraphSnapshot& graph, Side side, const std::vector<NodeId>& ids,
                    std::uint64_t seed) const;
  // Rows aligned with `nodes` (mixed sides).
  ad::Var long_term_nodes(std::span<const ad::Var> p, const GraphSnapshot& graph, const std::vector<NodeRef>& nodes,
                          std::uint64_t seed) const;

  GateResult fuse(std::span<const ad::Var> p, const ad::Var& short_rep, const ad::Var& long_rep,
                  const ad::Var& item) const;
  ad::Var score_logits(std::span<const ad::Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                       const LongTermInput& long_input) const;
  ad::Var predict(std::span<const ad::Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                  const LongTermInput& long_input) const;
  ad::Var task_loss(std::span<const ad::Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                    const LongTermInput& long_input) const;

  // ū^l for every user, computed without recording gradients.
  ad::Array long_term_table(const ParamSet& params, const GraphSnapshot& graph, std::uint64_t seed) const;

  bool uses_graphs() const { return config_.variant != Variant::kNoGatLn; }

 private:
  struct Layer {
    int w_center, w_neighbor, attention;
  };
  GatWeights gat(std::span<const ad::Var> p, const Layer& l) const;

  ModelConfig config_;
  std::vector<Fields> user_fields_;
  std::vector<Fields> item_fields_;

  // parameter indices, resolved from the fixed layout
  std::array<int, kFieldCount> user_field_{}, item_field_{};
  int user_proj_ = -1, item_proj_ = -1;
  Layer short_user_l1_{}, short_item_l1_{}, short_user_l2_{};
  int long_user_id_ = -1, long_item_id_ = -1;
  Layer long_user_l1_{}, long_item_l1_{}, long_user_l2_{}, long_item_l2_{};
  int gate_short_ = -1, gate_long_ = -1, concat_proj_ = -1;
  int item_id_ = -1, bias_ = -1, item_weight_ = -1, hour_weight_ = -1, position_weight_ = -1;
  int hour_emb_ = -1, position_emb_ = -1;
  std::array<int, 3> tower_w_{}, tower_b_{};
  ParamSet layout_;
};

}  // namespace lsttm
