#include "mop/motif.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "mop/util.hpp"

namespace mop {

const char* to_string(MotifKind kind) {
  switch (kind) {
    case MotifKind::walk: return "walk";
    case MotifKind::butterfly: return "butterfly";
    case MotifKind::t1: return "t1";
    case MotifKind::t2: return "t2";
    case MotifKind::t3: return "t3";
  }
  return "?";
}

MotifKind parse_motif_kind(const std::string& s) {
  if (s == "walk") return MotifKind::walk;
  if (s == "butterfly") return MotifKind::butterfly;
  if (s == "t1") return MotifKind::t1;
  if (s == "t2") return MotifKind::t2;
  if (s == "t3") return MotifKind::t3;
  throw ConfigError("unknown motif kind '" + s + "'");
}

const char* to_string(Context ctx) { return ctx == Context::shared ? "shared" : "specific"; }

const char* to_string(MotifSelection s) {
  switch (s) {
    case MotifSelection::walk: return "walk";
    case MotifSelection::butterfly: return "butterfly";
    case MotifSelection::triangle: return "triangle";
    case MotifSelection::all: return "all";
  }
  return "?";
}

MotifSelection parse_motif_selection(const std::string& s) {
  if (s == "walk") return MotifSelection::walk;
  if (s == "butterfly") return MotifSelection::butterfly;
  if (s == "triangle") return MotifSelection::triangle;
  if (s == "all") return MotifSelection::all;
  throw ConfigError("unknown motif selection '" + s + "' (walk|butterfly|triangle|all)");
}

namespace {

std::size_t common_count(const DomainGraph& g, node_t a, node_t b) {
  auto na = g.neighbors(a), nb = g.neighbors(b);
  std::size_t c = 0;
  auto i = na.begin(), j = nb.begin();
  while (i != na.end() && j != nb.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++c, ++i, ++j;
    }
  }
  return c;
}

Context context_of(const DomainGraph& g, node_t central) {
  return g.overlapped(central) ? Context::shared : Context::specific;
}

}  // namespace

std::string validate_motif(const DomainGraph& g, const MotifInstance& m,
                           std::size_t expected_walk_length) {
  const auto& v = m.nodes;
  if (m.central >= v.size()) return "central index out of range";
  for (node_t n : v) {
    if (n >= g.num_nodes()) return "node outside domain";
  }
  auto distinct = [&] { return std::set<node_t>(v.begin(), v.end()).size() == v.size(); };
  switch (m.kind) {
    case MotifKind::walk:
      if (v.size() < 2) return "walk shorter than 2";
      if (expected_walk_length && v.size() != expected_walk_length) return "walk length mismatch";
      for (std::size_t k = 1; k < v.size(); ++k) {
        if (g.is_user(v[k]) == g.is_user(v[k - 1])) return "walk does not alternate";
        if (!g.has_edge(v[k - 1], v[k])) return "walk step is not an edge";
      }
      return {};
    case MotifKind::butterfly: {
      if (v.size() != 4 || !distinct()) return "butterfly needs 4 distinct nodes";
      std::vector<node_t> users, items;
      for (node_t n : v) (g.is_user(n) ? users : items).push_back(n);
      if (users.size() != 2) return "butterfly needs two nodes per side";
      for (node_t u : users) {
        for (node_t i : items) {
          if (!g.has_edge(u, i)) return "butterfly edge missing";
        }
      }
      return {};
    }
    case MotifKind::t1:
      if (v.size() != 3 || !distinct()) return "T1 needs 3 distinct nodes";
      for (node_t n : v) {
        if (!g.is_user(n)) return "T1 holds users only";
      }
      return {};
    case MotifKind::t2:
      if (v.size() != 3 || !distinct()) return "T2 needs 3 distinct nodes";
      if (!g.is_user(v[0]) || !g.is_user(v[1]) || g.is_user(v[2])) return "T2 is (user, user, item)";
      if (!g.has_edge(v[0], v[2]) || !g.has_edge(v[1], v[2])) return "T2 item not shared";
      return {};
    case MotifKind::t3:
      if (v.size() != 3 || !distinct()) return "T3 needs 3 distinct nodes";
      if (!g.is_user(v[0]) || g.is_user(v[1]) || g.is_user(v[2])) return "T3 is (user, item, item)";
      if (!g.has_edge(v[0], v[1]) || !g.has_edge(v[0], v[2])) return "T3 item not interacted";
      return {};
  }
  return "unknown kind";
}

MotifInstance sample_random_walk(const DomainGraph& graph, node_t start, std::size_t length,
                                 std::uint64_t seed) {
  if (length < 2) throw SamplingError("walk length must be at least 2");
  if (graph.degree(start) == 0) {
    throw SamplingError("random walk from isolated node " + std::to_string(start));
  }
  Rng rng(seed);
  MotifInstance m;
  m.kind = MotifKind::walk;
  m.domain_id = graph.domain_id();
  m.context = context_of(graph, start);
  m.nodes.reserve(length);
  m.nodes.push_back(start);
  node_t cur = start;
  for (std::size_t step = 1; step < length; ++step) {
    auto nb = graph.neighbors(cur);
    cur = nb[uniform_index(rng, nb.size())];
    m.nodes.push_back(cur);
  }
  return m;
}

ButterflyDict sample_butterflies(const DomainGraph& graph) {
  ButterflyDict dict;
  const std::size_t n_nodes = graph.num_nodes();
  auto prio = graph.priorities();
  std::vector<node_t> order(n_nodes);
  for (node_t n = 0; n < n_nodes; ++n) order[prio[n] - 1] = n;

  std::vector<std::uint8_t> seen(n_nodes, 0);
  std::vector<node_t> partners;
  std::vector<node_t> common;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const node_t n = *it;
    const std::size_t pn = prio[n];
    partners.clear();
    for (node_t mid : graph.neighbors(n)) {
      if (prio[mid] >= pn) continue;
      for (node_t far : graph.neighbors(mid)) {
        if (far == n || prio[far] >= pn || seen[far]) continue;
        seen[far] = 1;
        partners.push_back(far);
      }
    }
    std::sort(partners.begin(), partners.end());
    for (node_t far : partners) {
      seen[far] = 0;
      common.clear();
      auto na = graph.neighbors(n), nb = graph.neighbors(far);
      std::set_intersection(na.begin(), na.end(), nb.begin(), nb.end(), std::back_inserter(common));
      std::erase_if(common, [&](node_t w) { return prio[w] >= pn; });
      if (common.size() < 2) continue;
      auto& wedges = dict[ButterflyKey{n, far}];
      for (std::size_t a = 0; a < common.size(); ++a) {
        for (std::size_t b = a + 1; b < common.size(); ++b) wedges.push_back({common[a], common[b]});
      }
    }
  }
  return dict;
}

std::size_t count_butterflies(const ButterflyDict& dict) {
  std::size_t c = 0;
  for (const auto& [key, wedges] : dict) c += wedges.size();
  return c;
}

ItemSimMatrix ease_item_matrix(const DomainGraph& graph, double lambda_f) {
  if (!(lambda_f > 0.0)) throw ConfigError("lambda_f must be positive");
  const std::size_t n_items = graph.num_items();
  if (n_items == 0) throw ValidationError("EASE needs at least one item");
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(n_items, n_items);
  for (node_t u = 0; u < graph.num_users(); ++u) {
    auto nb = graph.neighbors(u);
    for (node_t a : nb) {
      for (node_t b : nb) gram(graph.item_index(a), graph.item_index(b)) += 1.0;
    }
  }
  gram.diagonal().array() += lambda_f;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (ldlt.info() != Eigen::Success) throw NumericalError("EASE Gram matrix factorisation failed");
  Eigen::MatrixXd p = ldlt.solve(Eigen::MatrixXd::Identity(n_items, n_items));
  if (!p.allFinite()) throw NumericalError("EASE inverse is not finite");

  ItemSimMatrix b;
  b.size = n_items;
  b.lambda_f = lambda_f;
  b.values.assign(n_items * n_items, 0.0);
  for (std::size_t j = 0; j < n_items; ++j) {
    for (std::size_t k = 0; k < n_items; ++k) {
      if (j != k) b(j, k) = -p(j, k) / p(k, k);
    }
  }
  return b;
}

TriangleThresholds compute_thresholds(const DomainGraph& graph) {
  if (graph.num_users() == 0) throw ValidationError("thresholds need at least one user");
  std::vector<std::size_t> deg(graph.num_users());
  for (node_t u = 0; u < graph.num_users(); ++u) deg[u] = graph.degree(u);
  std::sort(deg.begin(), deg.end());
  const std::size_t median = deg[(deg.size() - 1) / 2];
  return {median, median, 0.0};
}

void for_each_triangle(const DomainGraph& g, TriangleKind kind, const TriangleThresholds& th,
                       const ItemSimMatrix* sim,
                       const std::function<void(MotifInstance&&)>& emit) {
  auto make = [&](MotifKind mk, std::vector<node_t> nodes) {
    MotifInstance m;
    m.kind = mk;
    m.nodes = std::move(nodes);
    m.central = 0;
    m.domain_id = g.domain_id();
    m.context = context_of(g, m.nodes[0]);
    emit(std::move(m));
  };
  const node_t n_users = static_cast<node_t>(g.num_users());

  if (kind == TriangleKind::t3) {
    if (!sim || sim->size != g.num_items()) throw ValidationError("T3 needs the domain's item matrix");
    for (node_t u = 0; u < n_users; ++u) {
      auto nb = g.neighbors(u);
      for (std::size_t a = 0; a < nb.size(); ++a) {
        for (std::size_t b = a + 1; b < nb.size(); ++b) {
          const auto ia = g.item_index(nb[a]), ib = g.item_index(nb[b]);
          if (std::min((*sim)(ia, ib), (*sim)(ib, ia)) > th.a3) make(MotifKind::t3, {u, nb[a], nb[b]});
        }
      }
    }
    return;
  }

  // Users are friends when they share at least `need` items; at least one.
  const std::size_t need = std::max<std::size_t>(kind == TriangleKind::t1 ? th.a1 : th.a2, 1);
  std::vector<std::vector<node_t>> friends(n_users);  // higher-id friends, ascending
  std::vector<std::size_t> counts(n_users, 0);
  std::vector<node_t> touched;
  for (node_t u = 0; u < n_users; ++u) {
    touched.clear();
    for (node_t i : g.neighbors(u)) {
      for (node_t v : g.neighbors(i)) {
        if (v <= u) continue;
        if (counts[v]++ == 0) touched.push_back(v);
      }
    }
    std::sort(touched.begin(), touched.end());
    for (node_t v : touched) {
      if (counts[v] >= need) friends[u].push_back(v);
      counts[v] = 0;
    }
  }

  if (kind == TriangleKind::t2) {
    std::vector<node_t> common;
    for (node_t u = 0; u < n_users; ++u) {
      for (node_t v : friends[u]) {
        common.clear();
        auto nu = g.neighbors(u), nv = g.neighbors(v);
        std::set_intersection(nu.begin(), nu.end(), nv.begin(), nv.end(), std::back_inserter(common));
        for (node_t i : common) make(MotifKind::t2, {u, v, i});
      }
    }
    return;
  }

  for (node_t u = 0; u < n_users; ++u) {
    const auto& fu = friends[u];
    for (std::size_t a = 0; a < fu.size(); ++a) {
      const auto& fv = friends[fu[a]];
      for (std::size_t b = a + 1; b < fu.size(); ++b) {
        if (std::binary_search(fv.begin(), fv.end(), fu[b])) make(MotifKind::t1, {u, fu[a], fu[b]});
      }
    }
  }
}

std::vector<MotifInstance> sample_triangles(const DomainGraph& graph, TriangleKind kind,
                                            const TriangleThresholds& thresholds,
                                            const ItemSimMatrix* sim) {
  std::vector<MotifInstance> out;
  for_each_triangle(graph, kind, thresholds, sim, [&](MotifInstance&& m) { out.push_back(std::move(m)); });
  return out;
}

std::size_t MotifPool::count(MotifKind kind) const {
  return static_cast<std::size_t>(
      std::count_if(motifs.begin(), motifs.end(), [&](const MotifInstance& m) { return m.kind == kind; }));
}

namespace {

/// Keeps at most `budget` candidates per central node by reservoir sampling
/// with a per-node stream, so the result does not depend on emission order
/// across nodes.
class Reservoir {
 public:
  Reservoir(std::size_t nodes, std::size_t budget, std::uint64_t seed, MotifKind kind)
      : budget_(budget), seed_(seed), kind_(kind), slots_(nodes), seen_(nodes, 0) {}

  void offer(MotifInstance&& m) {
    const node_t c = m.central_node();
    auto& slot = slots_[c];
    const std::size_t k = seen_[c]++;
    if (slot.size() < budget_) {
      slot.push_back(std::move(m));
      return;
    }
    if (!rngs_.contains(c)) {
      rngs_.emplace(c, Rng(stream_seed(seed_, {static_cast<std::uint64_t>(kind_), c})));
    }
    const std::size_t j = uniform_index(rngs_.at(c), k + 1);
    if (j < budget_) slot[j] = std::move(m);
  }

  std::vector<std::vector<MotifInstance>>& slots() { return slots_; }

 private:
  std::size_t budget_;
  std::uint64_t seed_;
  MotifKind kind_;
  std::vector<std::vector<MotifInstance>> slots_;
  std::vector<std::size_t> seen_;
  std::map<node_t, Rng> rngs_;
};

}  // namespace

MotifPool build_motif_pool(const DomainGraph& graph, const MotifPoolConfig& config) {
  if (config.budget == 0) throw ConfigError("motif budget must be positive");
  MotifPool pool;
  pool.domain_id = graph.domain_id();
  const std::size_t n = graph.num_nodes();
  const std::uint64_t seed = stream_seed(config.seed, {static_cast<std::uint64_t>(graph.domain_id())});
  std::vector<std::vector<MotifInstance>> per_node(n);
  auto merge = [&](std::vector<std::vector<MotifInstance>>& slots) {
    for (std::size_t v = 0; v < n; ++v) {
      for (auto& m : slots[v]) per_node[v].push_back(std::move(m));
    }
  };
  const auto sel = config.selection;

  if (sel == MotifSelection::walk || sel == MotifSelection::all) {
    if (config.walk_lengths.empty()) throw ConfigError("no walk lengths configured");
    std::vector<std::vector<MotifInstance>> walks(n);
    parallel_for(n, config.threads, [&](std::size_t v) {
      const node_t start = static_cast<node_t>(v);
      if (graph.degree(start) == 0) return;
      for (std::size_t j = 0; j < config.budget; ++j) {
        const auto len = config.walk_lengths[j % config.walk_lengths.size()];
        walks[v].push_back(sample_random_walk(
            graph, start, len, stream_seed(seed, {static_cast<std::uint64_t>(MotifKind::walk), v, j})));
      }
    });
    merge(walks);
  }

  if (sel == MotifSelection::butterfly || sel == MotifSelection::all) {
    Reservoir res(n, config.budget, seed, MotifKind::butterfly);
    for (const auto& [key, wedges] : sample_butterflies(graph)) {
      for (const auto& w : wedges) {
        MotifInstance m;
        m.kind = MotifKind::butterfly;
        m.nodes = {key.anchor, key.partner, w[0], w[1]};
        m.central = 0;
        m.domain_id = graph.domain_id();
        m.context = context_of(graph, key.anchor);
        res.offer(std::move(m));
      }
    }
    merge(res.slots());
  }

  pool.thresholds = graph.num_users() ? compute_thresholds(graph) : TriangleThresholds{};
  if ((sel == MotifSelection::triangle || sel == MotifSelection::all) && graph.num_users() > 0) {
    for (auto [tk, mk] : {std::pair{TriangleKind::t1, MotifKind::t1}, std::pair{TriangleKind::t2, MotifKind::t2},
                          std::pair{TriangleKind::t3, MotifKind::t3}}) {
      ItemSimMatrix sim;
      if (tk == TriangleKind::t3) {
        if (graph.num_items() == 0) continue;
        sim = ease_item_matrix(graph, config.lambda_f);
      }
      Reservoir res(n, config.budget, seed, mk);
      for_each_triangle(graph, tk, pool.thresholds, tk == TriangleKind::t3 ? &sim : nullptr,
                        [&](MotifInstance&& m) { res.offer(std::move(m)); });
      merge(res.slots());
    }
  }

  pool.by_central.assign(n, {});
  for (std::size_t v = 0; v < n; ++v) {
    for (auto& m : per_node[v]) {
      pool.by_central[v].push_back(static_cast<std::uint32_t>(pool.motifs.size()));
      pool.motifs.push_back(std::move(m));
    }
  }
  return pool;
}

void write_motifs(const std::filesystem::path& path, const DomainGraph& graph,
                  const std::vector<MotifInstance>& motifs) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot write " + tmp.string());
    auto name = [&](node_t v) {
      return (graph.is_user(v) ? "u" : "i") + std::to_string(graph.external_id(v));
    };
    for (const auto& m : motifs) {
      out << to_string(m.kind) << '\t' << name(m.central_node()) << '\t';
      for (std::size_t k = 0; k < m.nodes.size(); ++k) out << (k ? "," : "") << name(m.nodes[k]);
      out << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mop
