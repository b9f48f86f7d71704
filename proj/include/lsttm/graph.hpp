#pragma once

// Bipartite user-item interaction graphs with time-cutoff snapshots.
//
// Graph data is shared copy-on-write: a snapshot holds the data it was taken
// from, and the next append on the graph detaches onto a private copy, so
// snapshots never observe later edges or registrations.

#include "lsttm/events.hpp"

#include <compare>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace lsttm {

enum class GraphKind : std::uint8_t { kShortTerm, kLongTerm };
enum class Side : std::uint8_t { kUser, kItem };

inline Side other_side(Side s) { return s == Side::kUser ? Side::kItem : Side::kUser; }

struct NodeRef {
  Side side = Side::kUser;
  NodeId id = 0;
  auto operator<=>(const NodeRef&) const = default;
};

enum class SkipReason : std::uint8_t { kNotClicked, kExternalSource, kNegativeTimestamp, kNegativeId };

std::string_view skip_reason_name(SkipReason r);

struct Edge {
  NodeId user = 0;
  NodeId item = 0;
  Timestamp ts = 0;
  bool operator==(const Edge&) const = default;
};

struct Adjacent {
  NodeId other = 0;
  Timestamp ts = 0;
  std::uint64_t seq = 0;
};

struct GraphData {
  std::vector<std::vector<Adjacent>> user_adj;
  std::vector<std::vector<Adjacent>> item_adj;
  std::vector<bool> user_registered;
  std::vector<bool> item_registered;
  std::vector<Edge> edges;  // insertion order
  std::uint64_t next_seq = 0;
};

struct PathSet {
  std::vector<std::vector<NodeRef>> paths;
  std::size_t length = 0;
  std::uint64_t seed = 0;
};

class GraphSnapshot {
 public:
  GraphSnapshot(std::shared_ptr<const GraphData> data, Timestamp cutoff);

  Timestamp cutoff() const { return cutoff_; }
  bool registered(NodeRef n) const;
  // Adjacency entries with ts <= cutoff, oldest first.
  std::span<const Adjacent> visible(NodeRef n) const;
  std::size_t degree(NodeRef n) const { return visible(n).size(); }

  // The k most recent neighbors, oldest first. Ids are on the other side.
  std::vector<NodeId> temporal_neighbors(NodeRef n, std::size_t k) const;
  // min(k, degree) neighbors drawn without replacement, in adjacency order.
  std::vector<NodeId> uniform_neighbors(NodeRef n, std::size_t k, std::uint64_t seed) const;

  // Registered ids on one side with at least one visible edge, ascending.
  std::vector<NodeId> active_nodes(Side side) const;
  std::size_t id_bound(Side side) const;

  // paths_per_node walks of `length` nodes from every active node, users
  // first, then items, ascending ids.
  PathSet deepwalk_paths(std::size_t paths_per_node, std::size_t length, std::uint64_t seed) const;
  bool is_edge(NodeRef a, NodeRef b) const;

 private:
  const std::vector<Adjacent>* adjacency(NodeRef n) const;

  std::shared_ptr<const GraphData> data_;
  Timestamp cutoff_;
};

class InteractionGraph {
 public:
  explicit InteractionGraph(GraphKind kind);

  GraphKind kind() const { return kind_; }
  std::optional<SkipReason> accepts(const EventRecord& e) const;
  // Returns the skip reason when the kind filter rejects the event.
  std::optional<SkipReason> append(const EventRecord& e);
  // Appends every accepted event; returns how many were accepted.
  std::size_t append_all(std::span<const EventRecord> events);
  void append_edge(const Edge& e);

  GraphSnapshot snapshot(Timestamp cutoff) const;
  GraphSnapshot full() const;
  std::size_t edge_count() const { return data_->edges.size(); }
  const std::vector<Edge>& edges() const { return data_->edges; }

 private:
  GraphData& mutable_data();

  GraphKind kind_;
  std::shared_ptr<GraphData> data_;
};

}  // namespace lsttm
