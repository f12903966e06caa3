#pragma once

// Multi-domain bipartite interaction graphs, the overlap registry and the
// degree/id node priority used by butterfly sampling.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <utility>
#include <vector>

#include "mop/errors.hpp"

namespace mop {

using node_t = std::uint32_t;
inline constexpr std::uint32_t kNoGlobalId = 0xffffffffu;

enum class NodeKind : std::uint8_t { user, item };

const char* to_string(NodeKind kind);

/// A node as seen from one domain. `local` is the domain-wide node index:
/// users occupy [0, |U|) and items [|U|, |U|+|I|), each block ordered by
/// external id.
struct NodeRef {
  NodeKind kind = NodeKind::user;
  std::uint32_t global_id = kNoGlobalId;
  node_t local = 0;

  friend bool operator==(const NodeRef&, const NodeRef&) = default;
};

/// One domain's user-item graph. Immutable once built; adjacency lists are
/// sorted by local id and contain no duplicates.
class DomainGraph {
 public:
  DomainGraph() = default;

  /// Builds a graph from (external user, external item) pairs. Duplicate pairs
  /// collapse. `extra_users` / `extra_items` declare nodes that may have no
  /// edges (kept as isolated nodes).
  static DomainGraph from_edges(int domain_id,
                                std::span<const std::pair<std::uint64_t, std::uint64_t>> edges,
                                std::span<const std::uint64_t> extra_users = {},
                                std::span<const std::uint64_t> extra_items = {});

  int domain_id() const noexcept { return domain_id_; }
  std::size_t num_users() const noexcept { return user_ext_.size(); }
  std::size_t num_items() const noexcept { return item_ext_.size(); }
  std::size_t num_nodes() const noexcept { return num_users() + num_items(); }
  std::size_t num_edges() const noexcept { return num_edges_; }

  bool is_user(node_t n) const noexcept { return n < num_users(); }
  NodeKind kind(node_t n) const noexcept { return is_user(n) ? NodeKind::user : NodeKind::item; }
  node_t user_node(std::size_t user_index) const noexcept { return static_cast<node_t>(user_index); }
  node_t item_node(std::size_t item_index) const noexcept {
    return static_cast<node_t>(num_users() + item_index);
  }
  /// Index of an item node inside the item block.
  std::size_t item_index(node_t n) const noexcept { return n - num_users(); }

  std::span<const node_t> neighbors(node_t n) const;
  std::size_t degree(node_t n) const { return neighbors(n).size(); }
  bool has_edge(node_t a, node_t b) const;

  std::uint64_t external_id(node_t n) const;
  std::optional<node_t> find(NodeKind kind, std::uint64_t external) const;
  node_t lookup(NodeKind kind, std::uint64_t external) const;

  NodeRef ref(node_t n) const;
  std::uint32_t global_id(node_t n) const { return global_[check(n)]; }
  bool overlapped(node_t n) const { return overlapped_[check(n)] != 0; }

  /// Rank in [1, num_nodes()] ordering nodes by (degree, local id).
  std::size_t priority(node_t n) const { return priority_[check(n)]; }
  std::size_t priority(const NodeRef& n) const;
  std::span<const std::size_t> priorities() const noexcept { return priority_; }

  /// Ingestion-time mutation; called by assign_global_ids.
  void set_global(node_t n, std::uint32_t global_id, bool overlapped);

  /// (external user, external item) pairs in local order.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edge_list() const;
  std::vector<std::uint64_t> user_ids() const { return user_ext_; }
  std::vector<std::uint64_t> item_ids() const { return item_ext_; }

 private:
  node_t check(node_t n) const;
  void compute_priority();

  int domain_id_ = 0;
  std::vector<std::uint64_t> user_ext_;
  std::vector<std::uint64_t> item_ext_;
  std::vector<std::size_t> offsets_{0};
  std::vector<node_t> adjacency_;
  std::size_t num_edges_ = 0;
  std::vector<std::size_t> priority_;
  std::vector<std::uint32_t> global_;
  std::vector<std::uint8_t> overlapped_;
};

/// Reads `user<TAB>item` lines. Blank lines are ignored.
DomainGraph load_interactions(const std::filesystem::path& path, int domain_id);

/// Priority of a node (Definition of the butterfly ordering): a higher degree
/// wins, equal degrees are broken by the larger local id.
std::size_t priority(const DomainGraph& graph, const NodeRef& n);

/// Cross-domain identity of a single overlapped node.
struct OverlapLink {
  std::uint64_t a_external = 0;
  std::uint64_t b_external = 0;
  std::uint64_t global_label = 0;
};

/// Overlapped nodes per domain pair. A registry holds one overlap role.
class OverlapRegistry {
 public:
  explicit OverlapRegistry(NodeKind role = NodeKind::user) : role_(role) {}

  NodeKind role() const noexcept { return role_; }

  /// Validates every link against both graphs, then records it. The registry
  /// is unchanged when validation fails.
  void register_overlap(const DomainGraph& a, const DomainGraph& b,
                        std::span<const OverlapLink> links);
  /// Shorthand where the same external id names the node in both domains.
  void register_overlap(const DomainGraph& a, const DomainGraph& b,
                        const std::set<std::uint64_t>& ids);

  /// Global labels shared by the two domains (order of arguments irrelevant).
  std::set<std::uint64_t> intersection(int domain_a, int domain_b) const;
  /// Label of a domain-local external id, if it is overlapped.
  std::optional<std::uint64_t> label_of(int domain, std::uint64_t external) const;

  std::vector<std::pair<std::pair<int, int>, OverlapLink>> links() const;

 private:
  NodeKind role_;
  std::map<std::pair<int, int>, std::vector<OverlapLink>> links_;
  std::map<std::pair<int, std::uint64_t>, std::uint64_t> label_by_node_;
};

/// Free-function form of OverlapRegistry::register_overlap.
OverlapRegistry register_overlap(OverlapRegistry registry, const DomainGraph& a,
                                 const DomainGraph& b, const std::set<std::uint64_t>& ids);

/// Reads `kind<TAB>a_local<TAB>b_local<TAB>global_id` lines for the domain
/// pair (a, b). All lines must carry the same kind.
OverlapRegistry load_overlap(const std::filesystem::path& path, const DomainGraph& a,
                             const DomainGraph& b);

/// Dense global numbering of users and items across domains. Overlapped nodes
/// share a global id; everything else gets a fresh one.
struct Universe {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  /// For each global user / item: the (domain, local node) pairs it appears in.
  std::vector<std::vector<std::pair<int, node_t>>> user_members;
  std::vector<std::vector<std::pair<int, node_t>>> item_members;

  std::size_t num_nodes() const noexcept { return num_users + num_items; }
  /// Row of a node in a table spanning every global user then every global item.
  std::size_t shared_row(NodeKind kind, std::uint32_t global_id) const {
    return kind == NodeKind::user ? global_id : num_users + global_id;
  }
};

/// Assigns global ids in domain order and marks overlapped nodes. Registry
/// labels are mapped to dense ids in order of first appearance.
Universe assign_global_ids(std::span<DomainGraph> domains, const OverlapRegistry& registry);

}  // namespace mop
