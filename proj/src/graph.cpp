#include "lsttm/graph.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace lsttm {

std::string_view skip_reason_name(SkipReason r) {
  switch (r) {
    case SkipReason::kNotClicked: return "unclicked event";
    case SkipReason::kExternalSource: return "external event on the short-term graph";
    case SkipReason::kNegativeTimestamp: return "negative timestamp";
    case SkipReason::kNegativeId: return "negative node id";
  }
  return "unknown";
}

// --- snapshot -------------------------------------------------------------

GraphSnapshot::GraphSnapshot(std::shared_ptr<const GraphData> data, Timestamp cutoff)
    : data_(std::move(data)), cutoff_(cutoff) {}

const std::vector<Adjacent>* GraphSnapshot::adjacency(NodeRef n) const {
  const auto& adj = n.side == Side::kUser ? data_->user_adj : data_->item_adj;
  const auto& reg = n.side == Side::kUser ? data_->user_registered : data_->item_registered;
  if (n.id < 0 || static_cast<std::size_t>(n.id) >= adj.size() || !reg[static_cast<std::size_t>(n.id)]) {
    return nullptr;
  }
  return &adj[static_cast<std::size_t>(n.id)];
}

bool GraphSnapshot::registered(NodeRef n) const { return adjacency(n) != nullptr; }

std::span<const Adjacent> GraphSnapshot::visible(NodeRef n) const {
  const auto* adj = adjacency(n);
  if (adj == nullptr) return {};
  const auto end = std::upper_bound(adj->begin(), adj->end(), cutoff_,
                                    [](Timestamp t, const Adjacent& a) { return t < a.ts; });
  return {adj->data(), static_cast<std::size_t>(end - adj->begin())};
}

std::vector<NodeId> GraphSnapshot::temporal_neighbors(NodeRef n, std::size_t k) const {
  const auto vis = visible(n);
  const std::size_t take = std::min(k, vis.size());
  std::vector<NodeId> out;
  out.reserve(take);
  for (std::size_t i = vis.size() - take; i < vis.size(); ++i) out.push_back(vis[i].other);
  return out;
}

std::vector<NodeId> GraphSnapshot::uniform_neighbors(NodeRef n, std::size_t k, std::uint64_t seed) const {
  const auto vis = visible(n);
  if (vis.size() <= k) {
    std::vector<NodeId> out;
    out.reserve(vis.size());
    for (const auto& a : vis) out.push_back(a.other);
    return out;
  }
  const std::uint64_t salt = (static_cast<std::uint64_t>(n.side) << 62) ^ static_cast<std::uint64_t>(n.id);
  std::mt19937_64 rng(mix_seed(seed, salt));
  std::vector<std::size_t> pos(vis.size());
  std::iota(pos.begin(), pos.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pos.size() - 1);
    std::swap(pos[i], pos[pick(rng)]);
  }
  pos.resize(k);
  std::sort(pos.begin(), pos.end());
  std::vector<NodeId> out;
  out.reserve(k);
  for (std::size_t p : pos) out.push_back(vis[p].other);
  return out;
}

std::size_t GraphSnapshot::id_bound(Side side) const {
  return side == Side::kUser ? data_->user_adj.size() : data_->item_adj.size();
}

std::vector<NodeId> GraphSnapshot::active_nodes(Side side) const {
  std::vector<NodeId> out;
  const std::size_t bound = id_bound(side);
  for (std::size_t i = 0; i < bound; ++i) {
    const NodeRef n{side, static_cast<NodeId>(i)};
    if (degree(n) > 0) out.push_back(n.id);
  }
  return out;
}

PathSet GraphSnapshot::deepwalk_paths(std::size_t paths_per_node, std::size_t length, std::uint64_t seed) const {
  if (length < 2) throw std::invalid_argument("deepwalk_paths: path length must be at least 2");
  PathSet set;
  set.length = length;
  set.seed = seed;
  std::mt19937_64 rng(seed);
  for (Side side : {Side::kUser, Side::kItem}) {
    for (NodeId start : active_nodes(side)) {
      for (std::size_t r = 0; r < paths_per_node; ++r) {
        std::vector<NodeRef> path;
        path.reserve(length);
        NodeRef cur{side, start};
        path.push_back(cur);
        while (path.size() < length) {
          const auto vis = visible(cur);
          std::uniform_int_distribution<std::size_t> pick(0, vis.size() - 1);
          cur = NodeRef{other_side(cur.side), vis[pick(rng)].other};
          path.push_back(cur);
        }
        set.paths.push_back(std::move(path));
      }
    }
  }
  return set;
}

bool GraphSnapshot::is_edge(NodeRef a, NodeRef b) const {
  if (a.side == b.side) return false;
  const auto vis = visible(a);
  return std::any_of(vis.begin(), vis.end(), [&](const Adjacent& x) { return x.other == b.id; });
}

// --- graph ----------------------------------------------------------------

InteractionGraph::InteractionGraph(GraphKind kind) : kind_(kind), data_(std::make_shared<GraphData>()) {}

GraphData& InteractionGraph::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<GraphData>(*data_);
  return *data_;
}

std::optional<SkipReason> InteractionGraph::accepts(const EventRecord& e) const {
  if (e.ts < 0) return SkipReason::kNegativeTimestamp;
  if (e.user < 0 || e.item < 0) return SkipReason::kNegativeId;
  if (!e.clicked) return SkipReason::kNotClicked;
  if (kind_ == GraphKind::kShortTerm && e.source != Source::kInternal) return SkipReason::kExternalSource;
  return std::nullopt;
}

std::optional<SkipReason> InteractionGraph::append(const EventRecord& e) {
  if (auto reason = accepts(e)) return reason;
  append_edge(Edge{e.user, e.item, e.ts});
  return std::nullopt;
}

std::size_t InteractionGraph::append_all(std::span<const EventRecord> events) {
  std::size_t accepted = 0;
  for (const auto& e : events) {
    if (!accepts(e)) {
      append_edge(Edge{e.user, e.item, e.ts});
      ++accepted;
    }
  }
  return accepted;
}

namespace {

void insert_sorted(std::vector<Adjacent>& adj, Adjacent a) {
  // Equal timestamps keep arrival order: insert after every entry with ts <= a.ts.
  if (adj.empty() || adj.back().ts <= a.ts) {
    adj.push_back(a);
    return;
  }
  const auto at =
      std::upper_bound(adj.begin(), adj.end(), a.ts, [](Timestamp t, const Adjacent& x) { return t < x.ts; });
  adj.insert(at, a);
}

void ensure(std::vector<std::vector<Adjacent>>& adj, std::vector<bool>& reg, NodeId id) {
  const auto need = static_cast<std::size_t>(id) + 1;
  if (adj.size() < need) {
    adj.resize(need);
    reg.resize(need, false);
  }
  reg[static_cast<std::size_t>(id)] = true;
}

}  // namespace

void InteractionGraph::append_edge(const Edge& e) {
  if (e.ts < 0 || e.user < 0 || e.item < 0) throw std::invalid_argument("append_edge: negative id or timestamp");
  GraphData& d = mutable_data();
  ensure(d.user_adj, d.user_registered, e.user);
  ensure(d.item_adj, d.item_registered, e.item);
  const std::uint64_t seq = d.next_seq++;
  insert_sorted(d.user_adj[static_cast<std::size_t>(e.user)], Adjacent{e.item, e.ts, seq});
  insert_sorted(d.item_adj[static_cast<std::size_t>(e.item)], Adjacent{e.user, e.ts, seq});
  d.edges.push_back(e);
}

GraphSnapshot InteractionGraph::snapshot(Timestamp cutoff) const { return GraphSnapshot(data_, cutoff); }

GraphSnapshot InteractionGraph::full() const {
  return GraphSnapshot(data_, std::numeric_limits<Timestamp>::max());
}

}  // namespace lsttm
