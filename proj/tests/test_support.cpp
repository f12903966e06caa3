#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace mop::testing {

DomainGraph random_bipartite(Rng& rng, std::size_t nu, std::size_t ni, double p, int domain) {
  std::bernoulli_distribution coin(p);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
  for (std::size_t u = 0; u < nu; ++u) {
    for (std::size_t i = 0; i < ni; ++i) {
      if (coin(rng)) edges.emplace_back(u, i);
    }
  }
  std::vector<std::uint64_t> users(nu), items(ni);
  for (std::size_t u = 0; u < nu; ++u) users[u] = u;
  for (std::size_t i = 0; i < ni; ++i) items[i] = i;
  return DomainGraph::from_edges(domain, edges, users, items);
}

std::vector<std::array<node_t, 4>> brute_force_butterflies(const DomainGraph& g) {
  std::vector<std::array<node_t, 4>> out;
  const auto nu = g.num_users(), ni = g.num_items();
  for (std::size_t u1 = 0; u1 < nu; ++u1) {
    for (std::size_t u2 = u1 + 1; u2 < nu; ++u2) {
      for (std::size_t i1 = 0; i1 < ni; ++i1) {
        for (std::size_t i2 = i1 + 1; i2 < ni; ++i2) {
          const node_t a = g.user_node(u1), b = g.user_node(u2), x = g.item_node(i1), y = g.item_node(i2);
          if (g.has_edge(a, x) && g.has_edge(a, y) && g.has_edge(b, x) && g.has_edge(b, y)) {
            out.push_back({a, b, x, y});
          }
        }
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::array<node_t, 4>> flatten_butterflies(const ButterflyDict& dict) {
  std::vector<std::array<node_t, 4>> out;
  for (const auto& [key, wedges] : dict) {
    for (const auto& w : wedges) {
      std::array<node_t, 4> q{key.anchor, key.partner, w[0], w[1]};
      std::sort(q.begin(), q.end());
      out.push_back(q);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::vector<double>> invert(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> inv(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) inv[i][i] = 1.0;
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r) {
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    }
    if (a[piv][c] == 0.0) throw std::runtime_error("singular");
    std::swap(a[c], a[piv]);
    std::swap(inv[c], inv[piv]);
    const double d = a[c][c];
    for (std::size_t j = 0; j < n; ++j) {
      a[c][j] /= d;
      inv[c][j] /= d;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == c || a[r][c] == 0.0) continue;
      const double f = a[r][c];
      for (std::size_t j = 0; j < n; ++j) {
        a[r][j] -= f * a[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  return inv;
}

Matrix dense_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += a(i, k) * b(k, j);
    }
  }
  return c;
}

Matrix dense_propagation(std::size_t n, const std::vector<std::vector<node_t>>& edges) {
  const std::size_t m = edges.size();
  Matrix h(n, m);
  for (std::size_t e = 0; e < m; ++e) {
    for (node_t v : edges[e]) h(v, e) = 1.0;
  }
  Matrix dv_inv_h(n, m), de_inv_ht(m, n);
  for (std::size_t v = 0; v < n; ++v) {
    double dv = 0.0;
    for (std::size_t e = 0; e < m; ++e) dv += h(v, e);
    for (std::size_t e = 0; e < m; ++e) dv_inv_h(v, e) = h(v, e) / dv;
  }
  for (std::size_t e = 0; e < m; ++e) {
    double de = 0.0;
    for (std::size_t v = 0; v < n; ++v) de += h(v, e);
    for (std::size_t v = 0; v < n; ++v) de_inv_ht(e, v) = h(v, e) / de;
  }
  return dense_matmul(dv_inv_h, de_inv_ht);
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix m(r, c);
  for (auto& v : m.values()) v = g(rng);
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) return INFINITY;
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

TinyWorld tiny_world(std::uint64_t seed, std::size_t users, std::size_t items) {
  Rng rng(seed);
  std::bernoulli_distribution strong(0.6), weak(0.08);
  TinyWorld w;
  for (int d = 0; d < 2; ++d) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> edges;
    for (std::size_t u = 0; u < users; ++u) {
      for (std::size_t i = 0; i < items; ++i) {
        const bool same = (u % 2) == (i % 2);
        if (same ? strong(rng) : weak(rng)) edges.emplace_back(u, i);
      }
      edges.emplace_back(u, u % items);
    }
    w.graphs.push_back(DomainGraph::from_edges(d, edges));
  }
  w.registry.register_overlap(w.graphs[0], w.graphs[1], std::set<std::uint64_t>{0, 1, 2});
  w.universe = assign_global_ids(w.graphs, w.registry);
  return w;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.hyper_layers = 2;
  cfg.mode_layers = 1;
  cfg.batch = 8;
  cfg.motif = MotifSelection::walk;
  cfg.walk_lengths = {3, 4};
  cfg.motif_budget = 2;
  cfg.pretrain_epochs = 2;
  cfg.tune_epochs = 3;
  cfg.gt_epochs = 3;
  cfg.seed = 5;
  return cfg;
}

MopModel tiny_model(const TrainConfig& cfg, std::uint64_t world_seed) {
  auto w = tiny_world(world_seed);
  MopModel model(std::move(w.graphs), std::move(w.universe), cfg);
  model.init_params();
  return model;
}

}  // namespace mop::testing

namespace mop::testing {

ad::GradCheckResult composite_grad_check(std::uint64_t seed, PromptMode mode, std::size_t coords_per_tensor) {
  auto cfg = tiny_config();
  cfg.seed = seed;
  cfg.prompt = mode;
  auto model = tiny_model(cfg, seed + 100);
  auto& store = model.params();
  Rng rng(stream_seed(seed, {0x6763}));
  for (Context ctx : {Context::shared, Context::specific}) {
    for (const auto& name : prompt_names(0, ctx)) {
      store.unfreeze(name);
      auto& v = store.at(name).value;
      for (auto& x : v.values()) x += std::normal_distribution<double>(0.0, 0.3)(rng);
    }
  }
  std::vector<node_t> nodes;
  for (node_t v = 0; v < model.graph(0).num_nodes() && nodes.size() < 6; ++v) {
    if (!model.pool(0).by_central[v].empty()) nodes.push_back(v);
  }
  const auto batch = model.pool_batch(0, nodes);
  return ad::grad_check(
      [&](ad::Tape& t) {
        auto mask = t.param(store, MopModel::mask_token());
        auto xs = model.convolved(t, 0, Context::shared);
        auto xd = model.convolved(t, 0, Context::specific);
        auto ps = prompt_vars(t, store, 0, Context::shared, mode);
        auto pd = prompt_vars(t, store, 0, Context::specific, mode);
        auto es = model.embed(t, 0, Context::shared, xs, mask, batch, ps);
        auto ed = model.embed(t, 0, Context::specific, xd, mask, batch, pd);
        std::vector<std::size_t> pos(nodes.size());
        for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
        return infonce(MSLBatch{ed, es, pos, {}, 0.5, Denominator::with_pos});
      },
      store, 1e-5, 1e-6, coords_per_tensor);
}

}  // namespace mop::testing
