#include "mop/hypergraph.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace mop {

Matrix HypergraphIncidence::dense() const {
  Matrix h(num_nodes, num_edges());
  for (std::size_t e = 0; e < num_edges(); ++e) {
    for (node_t v : nodes_of(e)) h(v, e) = 1.0;
  }
  return h;
}

HypergraphIncidence build_incidence(std::span<const MotifInstance> motifs, const DomainGraph& domain,
                                    const IncidenceOptions& options) {
  if (motifs.empty()) throw ValidationError("empty hypergraph: no motifs");
  const std::size_t n = domain.num_nodes();

  std::vector<std::vector<node_t>> edges;
  std::map<std::pair<node_t, node_t>, std::size_t> merged;
  for (const auto& m : motifs) {
    if (m.domain_id != domain.domain_id()) {
      throw ValidationError("motif from domain " + std::to_string(m.domain_id) +
                            " used in domain " + std::to_string(domain.domain_id()));
    }
    for (node_t v : m.nodes) {
      if (v >= n) throw ValidationError("motif references unknown node " + std::to_string(v));
    }
    std::vector<node_t> members(m.nodes.begin(), m.nodes.end());
    if (options.merge_shared_pairs && m.nodes.size() >= 2) {
      auto key = std::minmax(m.nodes[0], m.nodes[1]);
      auto [it, fresh] = merged.emplace(key, edges.size());
      if (!fresh) {
        auto& target = edges[it->second];
        target.insert(target.end(), members.begin(), members.end());
        continue;
      }
    }
    edges.push_back(std::move(members));
  }

  HypergraphIncidence inc;
  inc.num_nodes = n;
  std::vector<std::vector<std::uint32_t>> per_node(n);
  for (auto& members : edges) {
    std::sort(members.begin(), members.end());
    members.erase(std::unique(members.begin(), members.end()), members.end());
    if (members.size() < 2) throw ValidationError("hyperedge with fewer than two nodes");
    const auto e = static_cast<std::uint32_t>(inc.edge_weight.size());
    for (node_t v : members) per_node[v].push_back(e);
    inc.edge_nodes.insert(inc.edge_nodes.end(), members.begin(), members.end());
    inc.edge_offsets.push_back(inc.edge_nodes.size());
    inc.edge_weight.push_back(1.0);
    inc.edge_degree.push_back(static_cast<double>(members.size()));
  }
  inc.node_degree.assign(n, 0.0);
  for (std::size_t v = 0; v < n; ++v) {
    for (auto e : per_node[v]) inc.node_degree[v] += inc.edge_weight[e];
    inc.node_edges.insert(inc.node_edges.end(), per_node[v].begin(), per_node[v].end());
    inc.node_offsets.push_back(inc.node_edges.size());
  }
  return inc;
}

HypergraphOperator::HypergraphOperator(HypergraphIncidence incidence, std::size_t layers,
                                       ZeroDegreePolicy policy)
    : inc_(std::move(incidence)), layers_(layers), active_(inc_.num_nodes, 0) {
  for (std::size_t v = 0; v < inc_.num_nodes; ++v) {
    active_[v] = inc_.node_degree[v] > 0.0;
    if (!active_[v] && policy == ZeroDegreePolicy::error) {
      throw ValidationError("node " + std::to_string(v) + " has zero hypergraph degree");
    }
  }
  for (std::size_t e = 0; e < inc_.num_edges(); ++e) {
    if (!(inc_.edge_degree[e] > 0.0)) throw ValidationError("hyperedge with zero degree");
  }
}

Matrix HypergraphOperator::step(const Matrix& x) const {
  require_shape(x.rows() == inc_.num_nodes, "convolution input rows " + x.shape_string());
  const std::size_t d = x.cols();
  Matrix edge(inc_.num_edges(), d);
  for (std::size_t e = 0; e < inc_.num_edges(); ++e) {
    auto out = edge.row(e);
    for (node_t v : inc_.nodes_of(e)) {
      auto in = x.row(v);
      for (std::size_t c = 0; c < d; ++c) out[c] += in[c];
    }
    const double s = inc_.edge_weight[e] / inc_.edge_degree[e];
    for (auto& val : out) val *= s;
  }
  Matrix y(x.rows(), d);
  for (std::size_t v = 0; v < inc_.num_nodes; ++v) {
    auto out = y.row(v);
    if (!active_[v]) {
      auto in = x.row(v);
      std::copy(in.begin(), in.end(), out.begin());
      continue;
    }
    for (auto e : inc_.edges_of(static_cast<node_t>(v))) {
      auto in = edge.row(e);
      for (std::size_t c = 0; c < d; ++c) out[c] += in[c];
    }
    const double s = 1.0 / inc_.node_degree[v];
    for (auto& val : out) val *= s;
  }
  return y;
}

Matrix HypergraphOperator::step_transpose(const Matrix& x) const {
  require_shape(x.rows() == inc_.num_nodes, "convolution input rows " + x.shape_string());
  const std::size_t d = x.cols();
  Matrix edge(inc_.num_edges(), d);
  for (std::size_t e = 0; e < inc_.num_edges(); ++e) {
    auto out = edge.row(e);
    for (node_t v : inc_.nodes_of(e)) {
      auto in = x.row(v);
      const double s = 1.0 / inc_.node_degree[v];
      for (std::size_t c = 0; c < d; ++c) out[c] += s * in[c];
    }
    const double s = inc_.edge_weight[e] / inc_.edge_degree[e];
    for (auto& val : out) val *= s;
  }
  Matrix y(x.rows(), d);
  for (std::size_t v = 0; v < inc_.num_nodes; ++v) {
    auto out = y.row(v);
    if (!active_[v]) {
      auto in = x.row(v);
      std::copy(in.begin(), in.end(), out.begin());
      continue;
    }
    for (auto e : inc_.edges_of(static_cast<node_t>(v))) {
      auto in = edge.row(e);
      for (std::size_t c = 0; c < d; ++c) out[c] += in[c];
    }
  }
  return y;
}

namespace {

template <class Step>
Matrix layer_average(const Matrix& x, std::size_t layers, Step step) {
  Matrix sum = x;
  Matrix cur = x;
  for (std::size_t l = 0; l < layers; ++l) {
    cur = step(cur);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += cur[i];
  }
  const double s = 1.0 / static_cast<double>(layers + 1);
  for (auto& v : sum.values()) v *= s;
  return sum;
}

}  // namespace

Matrix HypergraphOperator::apply(const Matrix& x) const {
  return layer_average(x, layers_, [this](const Matrix& m) { return step(m); });
}

Matrix HypergraphOperator::apply_transpose(const Matrix& x) const {
  return layer_average(x, layers_, [this](const Matrix& m) { return step_transpose(m); });
}

Matrix convolve(const HypergraphIncidence& inc, const Matrix& x0, std::size_t layers) {
  return HypergraphOperator(inc, layers, ZeroDegreePolicy::error).apply(x0);
}

void write_incidence_coo(const std::filesystem::path& path, const HypergraphIncidence& inc) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (std::size_t e = 0; e < inc.num_edges(); ++e) {
    for (node_t v : inc.nodes_of(e)) out << v << '\t' << e << "\t1\n";
  }
}

}  // namespace mop
