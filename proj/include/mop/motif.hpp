#pragma once

// Motif sampling: random walks, priority-based butterfly enumeration and the
// three triangle families, plus the EASE^R item-item matrix that gates T3.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mop/graph.hpp"

namespace mop {

enum class MotifKind : std::uint8_t { walk, butterfly, t1, t2, t3 };
enum class Context : std::uint8_t { shared, specific };

const char* to_string(MotifKind kind);
MotifKind parse_motif_kind(const std::string& s);
const char* to_string(Context ctx);

struct MotifInstance {
  MotifKind kind = MotifKind::walk;
  std::vector<node_t> nodes;  // local node ids of the domain
  std::uint32_t central = 0;  // index into nodes
  int domain_id = 0;
  Context context = Context::specific;

  node_t central_node() const { return nodes.at(central); }
};

/// Checks a motif's structural rule using only graph adjacency. Returns an
/// empty string when valid, otherwise a description of the violation.
std::string validate_motif(const DomainGraph& graph, const MotifInstance& motif,
                           std::size_t expected_walk_length = 0);

// ---------------------------------------------------------------------------
// Random walks

/// One uniform random walk of `length` nodes starting at `start`.
MotifInstance sample_random_walk(const DomainGraph& graph, node_t start, std::size_t length,
                                 std::uint64_t seed);

// ---------------------------------------------------------------------------
// Butterflies

/// Key of the butterfly dictionary: the anchor n (highest priority node of
/// every butterfly filed under the key) and its same-side partner n''.
struct ButterflyKey {
  node_t anchor = 0;
  node_t partner = 0;
  auto operator<=>(const ButterflyKey&) const = default;
};

using ButterflyDict = std::map<ButterflyKey, std::vector<std::array<node_t, 2>>>;

/// Priority-based butterfly enumeration. Every butterfly is filed exactly once,
/// under its highest-priority node.
ButterflyDict sample_butterflies(const DomainGraph& graph);

std::size_t count_butterflies(const ButterflyDict& dict);

// ---------------------------------------------------------------------------
// Item similarity and triangles

/// Dense row-major |I| x |I| matrix; entry (j, k) is item j's weight for item k.
struct ItemSimMatrix {
  std::size_t size = 0;
  double lambda_f = 0.0;
  std::vector<double> values;

  double operator()(std::size_t j, std::size_t k) const { return values[j * size + k]; }
  double& operator()(std::size_t j, std::size_t k) { return values[j * size + k]; }
};

/// Closed-form EASE^R: B = I - P diag(1 / diag(P)), P = (A^T A + lambda I)^-1.
ItemSimMatrix ease_item_matrix(const DomainGraph& graph, double lambda_f);

struct TriangleThresholds {
  std::size_t a1 = 0;
  std::size_t a2 = 0;
  double a3 = 0.0;
};

/// a1 = a2 = lower median of user degrees, a3 = 0.
TriangleThresholds compute_thresholds(const DomainGraph& graph);

enum class TriangleKind : std::uint8_t { t1, t2, t3 };

/// Streams every qualifying triangle to `emit` in a deterministic order.
void for_each_triangle(const DomainGraph& graph, TriangleKind kind,
                       const TriangleThresholds& thresholds, const ItemSimMatrix* sim,
                       const std::function<void(MotifInstance&&)>& emit);

std::vector<MotifInstance> sample_triangles(const DomainGraph& graph, TriangleKind kind,
                                            const TriangleThresholds& thresholds,
                                            const ItemSimMatrix* sim = nullptr);

// ---------------------------------------------------------------------------
// Budgeted motif pools

enum class MotifSelection : std::uint8_t { walk, butterfly, triangle, all };

const char* to_string(MotifSelection s);
MotifSelection parse_motif_selection(const std::string& s);

struct MotifPoolConfig {
  MotifSelection selection = MotifSelection::butterfly;
  std::vector<std::size_t> walk_lengths{3, 6, 9};
  std::size_t budget = 8;  // per central node and motif kind
  double lambda_f = 1.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

/// All motifs sampled for one domain, indexed by central node.
struct MotifPool {
  int domain_id = 0;
  std::vector<MotifInstance> motifs;
  std::vector<std::vector<std::uint32_t>> by_central;  // node -> motif indices
  TriangleThresholds thresholds;

  std::size_t count(MotifKind kind) const;
};

MotifPool build_motif_pool(const DomainGraph& graph, const MotifPoolConfig& config);

/// Writes `kind<TAB>central<TAB>node,node,...`; nodes are written as
/// u<external id> or i<external id>.
void write_motifs(const std::filesystem::path& path, const DomainGraph& graph,
                  const std::vector<MotifInstance>& motifs);

}  // namespace mop
