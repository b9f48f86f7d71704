#include "lsttm/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace lsttm {

using ad::Array;
using ad::Index;
using ad::IndexList;
using ad::Var;

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoMeta: return "no-meta";
    case Variant::kNoExternal: return "no-external";
    case Variant::kNoGating: return "no-gating";
    case Variant::kNoGatLn: return "no-gat-ln";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::kFull, Variant::kNoMeta, Variant::kNoExternal, Variant::kNoGating, Variant::kNoGatLn}) {
    if (variant_name(v) == name) return v;
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected full, no-meta, no-external, no-gating or no-gat-ln)");
}

ModelConfig ModelConfig::from_header(const LogHeader& h) {
  ModelConfig c;
  c.users = h.users;
  c.items = h.item_count();
  c.internal_items = h.internal_items;
  c.positions = h.positions;
  c.user_field_sizes = h.user_field_sizes;
  c.item_field_sizes = h.item_field_sizes;
  c.field_salt = h.field_salt;
  return c;
}

void ModelConfig::apply(const KeyValueConfig& cfg) {
  dim = static_cast<int>(cfg.get_int("model.dim", dim));
  short_k = static_cast<std::size_t>(cfg.get_int("model.short_k", static_cast<std::int64_t>(short_k)));
  long_k = static_cast<std::size_t>(cfg.get_int("model.long_k", static_cast<std::int64_t>(long_k)));
  slope = cfg.get_double("model.slope", slope);
  embed_init = cfg.get_double("model.embed_init", embed_init);
  if (cfg.has("model.tower")) {
    const std::string t = cfg.get_string("model.tower", "");
    const auto comma = t.find(',');
    if (comma == std::string::npos) throw ConfigError("model.tower: expected two widths like 64,32");
    tower = {std::stoi(t.substr(0, comma)), std::stoi(t.substr(comma + 1))};
  }
  if (cfg.has("model.variant")) variant = parse_variant(cfg.get_string("model.variant", "full"));
  if (dim < 1 || short_k < 1 || long_k < 1 || tower[0] < 1 || tower[1] < 1) {
    throw ConfigError("model config: dimensions and K must be >= 1");
  }
}

std::string ModelConfig::canonical() const {
  std::ostringstream out;
  auto sizes = [](const FieldSizes& f) {
    std::string s;
    for (std::size_t i = 0; i < f.size(); ++i) s += (i ? "," : "") + std::to_string(f[i]);
    return s;
  };
  out << "model.dim=" << dim << "\nmodel.users=" << users << "\nmodel.items=" << items
      << "\nmodel.internal_items=" << internal_items << "\nmodel.positions=" << positions
      << "\nmodel.user_field_sizes=" << sizes(user_field_sizes) << "\nmodel.item_field_sizes=" << sizes(item_field_sizes)
      << "\nmodel.field_salt=" << field_salt << "\nmodel.short_k=" << short_k << "\nmodel.long_k=" << long_k
      << "\nmodel.slope=" << format_number(slope) << "\nmodel.embed_init=" << format_number(embed_init)
      << "\nmodel.tower=" << tower[0] << ',' << tower[1] << "\nmodel.variant=" << variant_name(variant) << '\n';
  return out.str();
}

// --- building blocks --------------------------------------------------------

namespace {

struct Attention {
  Var alpha;
  Var projected;  // W_d x_j per neighbor row
};

Attention attend(const Var& centers, const Var& neighbors, const IndexList& segments, const GatWeights& w,
                 double slope) {
  const Index d = w.w_center.rows();
  const Var hc = ad::matmul(centers, w.w_center, false, true);
  const Var hn = ad::matmul(neighbors, w.w_neighbor, false, true);
  const Var ac = ad::slice(w.attention, 0, 0, d);
  const Var an = ad::slice(w.attention, 0, d, d);
  const Var logits = ad::add(ad::gather(ad::matmul(hc, ac), segments), ad::matmul(hn, an));
  return {ad::segment_softmax(ad::leaky_relu(logits, slope), segments, centers.rows()), hn};
}

}  // namespace

Var gat_attention(const Var& centers, const Var& neighbors, const IndexList& segments, const GatWeights& w,
                  double slope) {
  if (neighbors.rows() == 0) throw std::invalid_argument("gat_attention: empty neighbor list");
  return attend(centers, neighbors, segments, w, slope).alpha;
}

Var gat_layer(const Var& centers, const Var& neighbors, const IndexList& segments, const GatWeights& w,
              double slope) {
  const Index m = centers.rows();
  if (neighbors.rows() == 0) return centers;
  const Attention att = attend(centers, neighbors, segments, w, slope);
  const Var agg = ad::scatter_add(ad::mul(att.projected, att.alpha), segments, m);
  Var out = ad::leaky_relu(agg, slope);

  Array cold = Array::Ones(m, 1);
  for (Index s : *segments) cold(s, 0) = 0.0;
  if (cold.sum() > 0.0) out = ad::add(out, ad::mul(centers, ad::constant(std::move(cold))));
  return out;
}

GateResult gate_fuse(const Var& short_rep, const Var& long_rep, const Var& item, const Var& gate_short,
                     const Var& gate_long) {
  const Index b = short_rep.rows();
  const Var ls = ad::matmul(ad::concat({short_rep, item}, 1), gate_short);
  const Var ll = ad::matmul(ad::concat({long_rep, item}, 1), gate_long);
  std::vector<Index> seg(static_cast<std::size_t>(2 * b));
  for (Index i = 0; i < b; ++i) {
    seg[static_cast<std::size_t>(i)] = i;
    seg[static_cast<std::size_t>(b + i)] = i;
  }
  const Var w = ad::segment_softmax(ad::concat({ls, ll}, 0), ad::make_indices(std::move(seg)), b);
  const Var ws = ad::slice(w, 0, 0, b);
  const Var wl = ad::slice(w, 0, b, b);
  return {ad::add(ad::mul(short_rep, ws), ad::mul(long_rep, wl)), ad::concat({ws, wl}, 1)};
}

Var deepfm_logit(std::span<const Var> fields, const Var& first_order, const DeepFmWeights& w, double slope) {
  Var logit = first_order;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    for (std::size_t j = i + 1; j < fields.size(); ++j) logit = ad::add(logit, ad::row_dot(fields[i], fields[j]));
  }
  Var h = ad::concat(fields, 1);
  for (std::size_t l = 0; l < 3; ++l) {
    h = ad::add(ad::matmul(h, w.tower_w[l], false, true), w.tower_b[l]);
    if (l < 2) h = ad::leaky_relu(h, slope);
  }
  return ad::add(logit, h);
}

Var ce_loss(const Var& p, const std::vector<double>& labels) {
  if (p.cols() != 1 || static_cast<std::size_t>(p.rows()) != labels.size()) {
    throw ad::ShapeError("ce_loss: predictions " + ad::shape_string(p.value()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw std::invalid_argument("ce_loss: empty batch");
  for (Index i = 0; i < p.rows(); ++i) {
    const double v = p.value()(i, 0);
    if (!(v > 0.0 && v < 1.0)) {
      std::ostringstream msg;
      msg << "ce_loss: prediction " << v << " at row " << i << " outside (0, 1)";
      throw std::domain_error(msg.str());
    }
  }
  Array y(p.rows(), 1);
  for (Index i = 0; i < p.rows(); ++i) {
    const double l = labels[static_cast<std::size_t>(i)];
    if (l != 0.0 && l != 1.0) throw std::invalid_argument("ce_loss: labels must be 0 or 1");
    y(i, 0) = l;
  }
  const Array not_y = Array::Ones(p.rows(), 1) - y;
  const Var one_minus_p = ad::add(ad::neg(p), ad::scalar(1.0));
  const Var total = ad::add(ad::dot(ad::constant(y), ad::log(p)), ad::dot(ad::constant(not_y), ad::log(one_minus_p)));
  return ad::scale(total, -1.0 / static_cast<double>(labels.size()));
}

PairPlan plan_pairs(const PathSet& paths, std::size_t negatives_per_pair, std::span<const NodeRef> negative_pool,
                    std::uint64_t seed) {
  PairPlan plan;
  std::map<NodeRef, Index> pos;
  auto intern = [&](NodeRef n) {
    const auto [it, inserted] = pos.emplace(n, static_cast<Index>(plan.nodes.size()));
    if (inserted) plan.nodes.push_back(n);
    return it->second;
  };
  if (negatives_per_pair > 0 && negative_pool.empty()) {
    throw std::invalid_argument("plan_pairs: negatives requested but the pool is empty");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, negative_pool.empty() ? 0 : negative_pool.size() - 1);
  for (const auto& path : paths.paths) {
    for (std::size_t i = 0; i < path.size(); ++i) {
      for (std::size_t j = i + 1; j < path.size(); ++j) {
        if (path[i] == path[j]) continue;
        const Index a = intern(path[i]);
        plan.pos_a.push_back(a);
        plan.pos_b.push_back(intern(path[j]));
        for (std::size_t n = 0; n < negatives_per_pair; ++n) {
          plan.neg_a.push_back(a);
          plan.neg_b.push_back(intern(negative_pool[pick(rng)]));
        }
      }
    }
  }
  plan.pair_count = plan.pos_a.size();
  return plan;
}

Var neighbor_similarity_loss(const PairPlan& plan, const Var& reps) {
  if (plan.pair_count == 0) return ad::scalar(0.0);
  if (static_cast<std::size_t>(reps.rows()) != plan.nodes.size()) {
    throw ad::ShapeError("neighbor_similarity_loss: reps " + ad::shape_string(reps.value()) + " for " +
                         std::to_string(plan.nodes.size()) + " nodes");
  }
  const Var pa = ad::gather(reps, ad::make_indices(plan.pos_a));
  const Var pb = ad::gather(reps, ad::make_indices(plan.pos_b));
  Var total = ad::sum(ad::log(ad::sigmoid(ad::row_dot(pa, pb))));
  if (!plan.neg_a.empty()) {
    const Var na = ad::gather(reps, ad::make_indices(plan.neg_a));
    const Var nb = ad::gather(reps, ad::make_indices(plan.neg_b));
    total = ad::add(total, ad::sum(ad::log(ad::sigmoid(ad::neg(ad::row_dot(na, nb))))));
  }
  return ad::scale(total, -1.0 / static_cast<double>(plan.pair_count));
}

namespace {

// Insertion-ordered id set.
struct Interner {
  std::vector<NodeId> ids;
  std::unordered_map<NodeId, Index> pos;
  Index operator()(NodeId id) {
    const auto [it, inserted] = pos.emplace(id, static_cast<Index>(ids.size()));
    if (inserted) ids.push_back(id);
    return it->second;
  }
};

}  // namespace

Var encode_two_hop(Side side, const std::vector<NodeId>& centers, const NeighborFn& neighbors, const InputFn& input,
                   const TwoHopWeights& w, double slope) {
  const Side other = other_side(side);
  Interner a;  // center-side nodes
  Interner b;  // other-side nodes
  std::vector<Index> center_rows;
  center_rows.reserve(centers.size());
  for (NodeId c : centers) center_rows.push_back(a(c));

  std::vector<Index> c_nb, c_seg;
  for (std::size_t ci = 0; ci < centers.size(); ++ci) {
    for (NodeId n : neighbors({side, centers[ci]})) {
      c_nb.push_back(b(n));
      c_seg.push_back(static_cast<Index>(ci));
    }
  }
  if (b.ids.empty()) return ad::gather(input(side, a.ids), ad::make_indices(center_rows));

  std::vector<Index> b_nb, b_seg;
  for (std::size_t bi = 0; bi < b.ids.size(); ++bi) {
    for (NodeId n : neighbors({other, b.ids[bi]})) {
      b_nb.push_back(a(n));
      b_seg.push_back(static_cast<Index>(bi));
    }
  }
  const Var xa = input(side, a.ids);
  const Var xb = input(other, b.ids);
  const IndexList c_nb_idx = ad::make_indices(std::move(c_nb));
  const IndexList c_seg_idx = ad::make_indices(std::move(c_seg));

  const Var c0 = ad::gather(xa, ad::make_indices(center_rows));
  const Var c1 = gat_layer(c0, ad::gather(xb, c_nb_idx), c_seg_idx, w.center_l1, slope);
  Var b1 = xb;
  if (!b_nb.empty()) {
    b1 = gat_layer(xb, ad::gather(xa, ad::make_indices(std::move(b_nb))), ad::make_indices(std::move(b_seg)),
                   w.other_l1, slope);
  }
  return gat_layer(c1, ad::gather(b1, c_nb_idx), c_seg_idx, w.center_l2, slope);
}

void Batch::push(const EventRecord& e) {
  users.push_back(e.user);
  items.push_back(e.item);
  hours.push_back(e.hour);
  positions.push_back(e.position);
  labels.push_back(e.clicked ? 1.0 : 0.0);
}

// --- model --------------------------------------------------------------------

namespace {

// Builds the fixed parameter layout; with rng, values are initialized,
// otherwise left zero.
ParamSet build_layout(const ModelConfig& c, std::mt19937_64* rng) {
  ParamSet ps;
  const Index d = c.dim;
  auto embed = [&](Index rows, Index cols) {
    return rng ? uniform_array(*rng, rows, cols, c.embed_init) : Array(Array::Zero(rows, cols));
  };
  auto weight = [&](Index rows, Index cols, Index fan_in) {
    return rng ? uniform_array(*rng, rows, cols, std::sqrt(3.0 / static_cast<double>(fan_in)))
               : Array(Array::Zero(rows, cols));
  };
  auto zeros = [](Index rows, Index cols) { return Array(Array::Zero(rows, cols)); };
  auto layer = [&](const std::string& prefix, ParamGroup g) {
    ps.add(prefix + "/w_center", g, weight(d, d, d));
    ps.add(prefix + "/w_neighbor", g, weight(d, d, d));
    ps.add(prefix + "/attention", g, weight(2 * d, 1, 2 * d));
  };

  const auto S = ParamGroup::kShort;
  for (int f = 0; f < kFieldCount; ++f) {
    ps.add("short/user_field_" + std::to_string(f), S, embed(c.user_field_sizes[static_cast<std::size_t>(f)], d));
  }
  for (int f = 0; f < kFieldCount; ++f) {
    ps.add("short/item_field_" + std::to_string(f), S, embed(c.item_field_sizes[static_cast<std::size_t>(f)], d));
  }
  ps.add("short/user_proj", S, weight(d, kFieldCount * d, kFieldCount * d));
  ps.add("short/item_proj", S, weight(d, kFieldCount * d, kFieldCount * d));
  layer("short/user_l1", S);
  layer("short/item_l1", S);
  layer("short/user_l2", S);

  const auto L = ParamGroup::kLong;
  ps.add("long/user_id", L, embed(c.users, d));
  ps.add("long/item_id", L, embed(c.items, d));
  layer("long/user_l1", L);
  layer("long/item_l1", L);
  layer("long/user_l2", L);
  layer("long/item_l2", L);

  const auto F = ParamGroup::kFusion;
  if (c.variant == Variant::kNoGating) {
    ps.add("fusion/concat_proj", F, weight(d, 2 * d, 2 * d));
  } else {
    ps.add("fusion/gate_short", F, weight(2 * d, 1, 2 * d));
    ps.add("fusion/gate_long", F, weight(2 * d, 1, 2 * d));
  }
  ps.add("fusion/item_id", F, embed(c.internal_items, d));
  ps.add("fusion/bias", F, zeros(1, 1));
  ps.add("fusion/item_weight", F, zeros(c.internal_items, 1));
  ps.add("fusion/hour_weight", F, zeros(24, 1));
  ps.add("fusion/position_weight", F, zeros(c.positions, 1));
  ps.add("fusion/hour_emb", F, embed(24, d));
  ps.add("fusion/position_emb", F, embed(c.positions, d));
  const Index fields_width = 4 * d;
  const Index h1 = c.tower[0];
  const Index h2 = c.tower[1];
  ps.add("fusion/tower_w1", F, weight(h1, fields_width, fields_width));
  ps.add("fusion/tower_b1", F, zeros(1, h1));
  ps.add("fusion/tower_w2", F, weight(h2, h1, h1));
  ps.add("fusion/tower_b2", F, zeros(1, h2));
  ps.add("fusion/tower_w3", F, weight(1, h2, h2));
  ps.add("fusion/tower_b3", F, zeros(1, 1));
  return ps;
}

}  // namespace

Model::Model(ModelConfig config) : config_(std::move(config)) {
  if (config_.users < 1 || config_.internal_items < 1 || config_.items < config_.internal_items) {
    throw std::invalid_argument("model: invalid entity counts");
  }
  LogHeader h;
  h.user_field_sizes = config_.user_field_sizes;
  h.item_field_sizes = config_.item_field_sizes;
  h.field_salt = config_.field_salt;
  user_fields_.reserve(static_cast<std::size_t>(config_.users));
  for (NodeId u = 0; u < config_.users; ++u) user_fields_.push_back(lsttm::user_fields(h, u));
  item_fields_.reserve(static_cast<std::size_t>(config_.internal_items));
  for (NodeId i = 0; i < config_.internal_items; ++i) item_fields_.push_back(lsttm::item_fields(h, i));

  layout_ = build_layout(config_, nullptr);
  const ParamSet& ps = layout_;
  for (int f = 0; f < kFieldCount; ++f) {
    user_field_[static_cast<std::size_t>(f)] = ps.index("short/user_field_" + std::to_string(f));
    item_field_[static_cast<std::size_t>(f)] = ps.index("short/item_field_" + std::to_string(f));
  }
  user_proj_ = ps.index("short/user_proj");
  item_proj_ = ps.index("short/item_proj");
  auto layer = [&](const std::string& prefix) {
    return Layer{ps.index(prefix + "/w_center"), ps.index(prefix + "/w_neighbor"), ps.index(prefix + "/attention")};
  };
  short_user_l1_ = layer("short/user_l1");
  short_item_l1_ = layer("short/item_l1");
  short_user_l2_ = layer("short/user_l2");
  long_user_id_ = ps.index("long/user_id");
  long_item_id_ = ps.index("long/item_id");
  long_user_l1_ = layer("long/user_l1");
  long_item_l1_ = layer("long/item_l1");
  long_user_l2_ = layer("long/user_l2");
  long_item_l2_ = layer("long/item_l2");
  if (config_.variant == Variant::kNoGating) {
    concat_proj_ = ps.index("fusion/concat_proj");
  } else {
    gate_short_ = ps.index("fusion/gate_short");
    gate_long_ = ps.index("fusion/gate_long");
  }
  item_id_ = ps.index("fusion/item_id");
  bias_ = ps.index("fusion/bias");
  item_weight_ = ps.index("fusion/item_weight");
  hour_weight_ = ps.index("fusion/hour_weight");
  position_weight_ = ps.index("fusion/position_weight");
  hour_emb_ = ps.index("fusion/hour_emb");
  position_emb_ = ps.index("fusion/position_emb");
  for (int l = 0; l < 3; ++l) {
    tower_w_[static_cast<std::size_t>(l)] = ps.index("fusion/tower_w" + std::to_string(l + 1));
    tower_b_[static_cast<std::size_t>(l)] = ps.index("fusion/tower_b" + std::to_string(l + 1));
  }
}

ParamSet Model::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  return build_layout(config_, &rng);
}

void Model::check_layout(const ParamSet& params) const {
  if (params.size() != layout_.size()) {
    throw std::invalid_argument("parameter set has " + std::to_string(params.size()) + " tensors, model expects " +
                                std::to_string(layout_.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.names[i] != layout_.names[i] || params.groups[i] != layout_.groups[i] ||
        params.values[i].rows() != layout_.values[i].rows() || params.values[i].cols() != layout_.values[i].cols()) {
      throw std::invalid_argument("parameter " + params.names[i] + " does not match the model layout (" +
                                  layout_.names[i] + " " + ad::shape_string(layout_.values[i]) + ")");
    }
  }
}

GatWeights Model::gat(std::span<const Var> p, const Layer& l) const {
  return {p[static_cast<std::size_t>(l.w_center)], p[static_cast<std::size_t>(l.w_neighbor)],
          p[static_cast<std::size_t>(l.attention)]};
}

Var Model::node_input(std::span<const Var> p, Side side, const std::vector<NodeId>& ids) const {
  const bool user = side == Side::kUser;
  const auto& table = user ? user_fields_ : item_fields_;
  std::vector<Var> parts;
  parts.reserve(kFieldCount);
  for (int f = 0; f < kFieldCount; ++f) {
    std::vector<Index> rows;
    rows.reserve(ids.size());
    for (NodeId id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= table.size()) {
        throw std::out_of_range(std::string("node_input: ") + (user ? "user " : "item ") + std::to_string(id) +
                                " has no feature fields");
      }
      rows.push_back(table[static_cast<std::size_t>(id)][static_cast<std::size_t>(f)]);
    }
    const int field = (user ? user_field_ : item_field_)[static_cast<std::size_t>(f)];
    parts.push_back(ad::gather(p[static_cast<std::size_t>(field)], ad::make_indices(std::move(rows))));
  }
  const Var proj = p[static_cast<std::size_t>(user ? user_proj_ : item_proj_)];
  return ad::matmul(ad::concat(parts, 1), proj, false, true);
}

Var Model::id_input(std::span<const Var> p, Side side, const std::vector<NodeId>& ids) const {
  const int table = side == Side::kUser ? long_user_id_ : long_item_id_;
  return ad::gather(p[static_cast<std::size_t>(table)], ad::make_indices(std::vector<Index>(ids.begin(), ids.end())));
}

Var Model::short_term(std::span<const Var> p, const GraphSnapshot& graph, const std::vector<NodeId>& users) const {
  if (!uses_graphs()) return node_input(p, Side::kUser, users);
  const std::size_t k = config_.short_k;
  const NeighborFn nbrs = [&](NodeRef n) { return graph.temporal_neighbors(n, k); };
  const InputFn input = [&](Side s, const std::vector<NodeId>& ids) { return node_input(p, s, ids); };
  const TwoHopWeights w{gat(p, short_user_l1_), gat(p, short_item_l1_), gat(p, short_user_l2_)};
  return encode_two_hop(Side::kUser, users, nbrs, input, w, config_.slope);
}

Var Model::long_term(std::span<const Var> p, const GraphSnapshot& graph, Side side, const std::vector<NodeId>& ids,
                     std::uint64_t seed) const {
  if (!uses_graphs()) return id_input(p, side, ids);
  const std::size_t k = config_.long_k;
  const NeighborFn nbrs = [&](NodeRef n) { return graph.uniform_neighbors(n, k, seed); };
  const InputFn input = [&](Side s, const std::vector<NodeId>& xs) { return id_input(p, s, xs); };
  const TwoHopWeights w = side == Side::kUser
                              ? TwoHopWeights{gat(p, long_user_l1_), gat(p, long_item_l1_), gat(p, long_user_l2_)}
                              : TwoHopWeights{gat(p, long_item_l1_), gat(p, long_user_l1_), gat(p, long_item_l2_)};
  return encode_two_hop(side, ids, nbrs, input, w, config_.slope);
}

Var Model::long_term_nodes(std::span<const Var> p, const GraphSnapshot& graph, const std::vector<NodeRef>& nodes,
                           std::uint64_t seed) const {
  std::vector<NodeId> users, items;
  for (const auto& n : nodes) (n.side == Side::kUser ? users : items).push_back(n.id);
  auto unique_sorted = [](std::vector<NodeId>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  };
  unique_sorted(users);
  unique_sorted(items);
  std::vector<Var> parts;
  if (!users.empty()) parts.push_back(long_term(p, graph, Side::kUser, users, seed));
  if (!items.empty()) parts.push_back(long_term(p, graph, Side::kItem, items, seed));
  if (parts.empty()) throw std::invalid_argument("long_term_nodes: no nodes");
  const Var all = parts.size() == 1 ? parts[0] : ad::concat(parts, 0);
  std::vector<Index> rows;
  rows.reserve(nodes.size());
  for (const auto& n : nodes) {
    if (n.side == Side::kUser) {
      rows.push_back(std::lower_bound(users.begin(), users.end(), n.id) - users.begin());
    } else {
      rows.push_back(static_cast<Index>(users.size()) + (std::lower_bound(items.begin(), items.end(), n.id) - items.begin()));
    }
  }
  return ad::gather(all, ad::make_indices(std::move(rows)));
}

GateResult Model::fuse(std::span<const Var> p, const Var& short_rep, const Var& long_rep, const Var& item) const {
  if (config_.variant == Variant::kNoGating) {
    const Var proj = p[static_cast<std::size_t>(concat_proj_)];
    return {ad::matmul(ad::concat({short_rep, long_rep}, 1), proj, false, true), Var()};
  }
  return gate_fuse(short_rep, long_rep, item, p[static_cast<std::size_t>(gate_short_)],
                   p[static_cast<std::size_t>(gate_long_)]);
}

Var Model::score_logits(std::span<const Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                        const LongTermInput& long_input) const {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("score: empty batch");
  if (batch.items.size() != n || batch.hours.size() != n || batch.positions.size() != n) {
    throw std::invalid_argument("score: ragged batch");
  }
  std::vector<Index> items, hours, positions;
  items.reserve(n);
  hours.reserve(n);
  positions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (batch.items[i] < 0 || batch.items[i] >= config_.internal_items) {
      throw std::out_of_range("score: item " + std::to_string(batch.items[i]) + " is not an internal item");
    }
    if (batch.hours[i] < 0 || batch.hours[i] > 23) throw std::out_of_range("score: hour out of range");
    if (batch.positions[i] < 0 || batch.positions[i] >= config_.positions) {
      throw std::out_of_range("score: position out of range");
    }
    if (batch.users[i] < 0 || batch.users[i] >= config_.users) throw std::out_of_range("score: user out of range");
    items.push_back(batch.items[i]);
    hours.push_back(batch.hours[i]);
    positions.push_back(batch.positions[i]);
  }

  std::vector<NodeId> users(batch.users);
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  std::vector<Index> inverse;
  inverse.reserve(n);
  for (NodeId u : batch.users) inverse.push_back(std::lower_bound(users.begin(), users.end(), u) - users.begin());
  const IndexList inv = ad::make_indices(std::move(inverse));

  const Var u_short = ad::gather(short_term(p, short_graph, users), inv);
  Var u_long;
  if (long_input.cache != nullptr) {
    u_long = ad::gather(ad::constant(*long_input.cache),
                        ad::make_indices(std::vector<Index>(batch.users.begin(), batch.users.end())));
  } else if (long_input.graph != nullptr) {
    u_long = ad::gather(long_term(p, *long_input.graph, Side::kUser, users, long_input.seed), inv);
  } else {
    throw std::invalid_argument("score: no long-term input");
  }

  const IndexList item_idx = ad::make_indices(std::move(items));
  const IndexList hour_idx = ad::make_indices(std::move(hours));
  const IndexList pos_idx = ad::make_indices(std::move(positions));
  auto param = [&](int i) { return p[static_cast<std::size_t>(i)]; };

  const Var d = ad::gather(param(item_id_), item_idx);
  const Var user = fuse(p, u_short, u_long, d).fused;
  const std::array<Var, 4> fields{user, d, ad::gather(param(hour_emb_), hour_idx),
                                  ad::gather(param(position_emb_), pos_idx)};
  Var first = ad::add(ad::gather(param(item_weight_), item_idx), param(bias_));
  first = ad::add(first, ad::gather(param(hour_weight_), hour_idx));
  first = ad::add(first, ad::gather(param(position_weight_), pos_idx));
  DeepFmWeights tower;
  for (std::size_t l = 0; l < 3; ++l) {
    tower.tower_w[l] = param(tower_w_[l]);
    tower.tower_b[l] = param(tower_b_[l]);
  }
  return deepfm_logit(fields, first, tower, config_.slope);
}

Var Model::predict(std::span<const Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                   const LongTermInput& long_input) const {
  return ad::sigmoid(score_logits(p, batch, short_graph, long_input));
}

Var Model::task_loss(std::span<const Var> p, const Batch& batch, const GraphSnapshot& short_graph,
                     const LongTermInput& long_input) const {
  return ce_loss(predict(p, batch, short_graph, long_input), batch.labels);
}

Array Model::long_term_table(const ParamSet& params, const GraphSnapshot& graph, std::uint64_t seed) const {
  ad::NoGradGuard guard;
  std::vector<Var> p;
  p.reserve(params.size());
  for (const auto& v : params.values) p.push_back(ad::constant(v));
  std::vector<NodeId> users(static_cast<std::size_t>(config_.users));
  for (std::size_t i = 0; i < users.size(); ++i) users[i] = static_cast<NodeId>(i);
  return long_term(p, graph, Side::kUser, users, seed).value();
}

}  // namespace lsttm
