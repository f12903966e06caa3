#pragma once

// Motif-induced hypergraph and its convolution
//   X^(l+1) = Dv^-1 H W De^-1 H^T X^(l),   X^L = mean(X^(0), ..., X^(L)).

#include <filesystem>
#include <span>
#include <vector>

#include "mop/graph.hpp"
#include "mop/matrix.hpp"
#include "mop/motif.hpp"

namespace mop {

/// Sparse binary incidence stored twice: nodes per hyperedge and hyperedges
/// per node. Rows cover every node of the domain.
struct HypergraphIncidence {
  std::size_t num_nodes = 0;
  std::vector<std::size_t> edge_offsets{0};
  std::vector<node_t> edge_nodes;  // sorted, distinct within an edge
  std::vector<std::size_t> node_offsets{0};
  std::vector<std::uint32_t> node_edges;
  std::vector<double> edge_weight;  // W
  std::vector<double> node_degree;  // Dv_ii = sum_e W_ee H_ie
  std::vector<double> edge_degree;  // De_ee = sum_i H_ie

  std::size_t num_edges() const noexcept { return edge_weight.size(); }
  std::span<const node_t> nodes_of(std::size_t e) const {
    return {edge_nodes.data() + edge_offsets[e], edge_offsets[e + 1] - edge_offsets[e]};
  }
  std::span<const std::uint32_t> edges_of(node_t v) const {
    return {node_edges.data() + node_offsets[v], node_offsets[v + 1] - node_offsets[v]};
  }
  /// Dense |nodes| x |edges| copy of H (tests and debugging).
  Matrix dense() const;
};

struct IncidenceOptions {
  /// Merge motifs whose first two nodes coincide (as an unordered pair) into a
  /// single hyperedge holding the union of their nodes.
  bool merge_shared_pairs = false;
};

/// One hyperedge per motif instance, W = I.
HypergraphIncidence build_incidence(std::span<const MotifInstance> motifs, const DomainGraph& domain,
                                    const IncidenceOptions& options = {});

enum class ZeroDegreePolicy { error, passthrough };

/// Linear propagation operator of a fixed incidence. With `passthrough`, nodes
/// that belong to no hyperedge keep their row unchanged at every layer.
class HypergraphOperator {
 public:
  HypergraphOperator(HypergraphIncidence incidence, std::size_t layers,
                     ZeroDegreePolicy policy = ZeroDegreePolicy::error);

  const HypergraphIncidence& incidence() const noexcept { return inc_; }
  std::size_t layers() const noexcept { return layers_; }

  /// One step G X with G = Dv^-1 H W De^-1 H^T.
  Matrix step(const Matrix& x) const;
  /// One step G^T X.
  Matrix step_transpose(const Matrix& x) const;
  /// Layer average (1 / (L+1)) sum_l G^l X.
  Matrix apply(const Matrix& x) const;
  /// Adjoint of apply.
  Matrix apply_transpose(const Matrix& x) const;

 private:
  HypergraphIncidence inc_;
  std::size_t layers_;
  std::vector<std::uint8_t> active_;
};

/// Layer-averaged convolution; throws when a node belongs to no hyperedge.
Matrix convolve(const HypergraphIncidence& inc, const Matrix& x0, std::size_t layers);

/// Coordinate-list dump `node<TAB>edge<TAB>1` for debugging.
void write_incidence_coo(const std::filesystem::path& path, const HypergraphIncidence& inc);

}  // namespace mop
