#include <doctest.h>

#include <cmath>
#include <set>

#include "mop/motif.hpp"
#include "support.hpp"

using namespace mop;
using Edges = std::vector<std::pair<std::uint64_t, std::uint64_t>>;

namespace {

DomainGraph complete(std::size_t nu, std::size_t ni) {
  Edges e;
  for (std::size_t u = 0; u < nu; ++u) {
    for (std::size_t i = 0; i < ni; ++i) e.emplace_back(u, i);
  }
  return DomainGraph::from_edges(0, e);
}

std::set<std::array<node_t, 3>> as_triples(const std::vector<MotifInstance>& ms) {
  std::set<std::array<node_t, 3>> out;
  for (const auto& m : ms) {
    REQUIRE(m.nodes.size() == 3);
    std::array<node_t, 3> t{m.nodes[0], m.nodes[1], m.nodes[2]};
    std::sort(t.begin(), t.end());
    CHECK(out.insert(t).second);
  }
  return out;
}

std::size_t common(const DomainGraph& g, node_t a, node_t b) {
  std::size_t c = 0;
  for (node_t i : g.neighbors(a)) c += g.has_edge(b, i);
  return c;
}

}  // namespace

TEST_SUITE("motif") {
  TEST_CASE("walk on a single edge bounces") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}});
    auto m = sample_random_walk(g, g.user_node(0), 3, 11);
    CHECK(m.nodes == std::vector<node_t>{0, 1, 0});
  }

  TEST_CASE("walk second node is a neighbour") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}, {1, 1}});
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto m = sample_random_walk(g, 0, 2, s);
      CHECK(g.has_edge(m.nodes[0], m.nodes[1]));
    }
  }

  TEST_CASE("walks are valid motifs") {
    Rng rng(5);
    auto g = testing::random_bipartite(rng, 8, 8, 0.4);
    for (node_t v = 0; v < g.num_nodes(); ++v) {
      if (g.degree(v) == 0) {
        CHECK_THROWS_AS(sample_random_walk(g, v, 4, 1), SamplingError);
        continue;
      }
      auto m = sample_random_walk(g, v, 6, v);
      CHECK(validate_motif(g, m, 6).empty());
    }
  }

  TEST_CASE("walk position distribution matches transition powers") {
    // Small connected graph; distribution after 5 steps from node 0.
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 0}, {2, 2}, {2, 3}, {3, 3}});
    const std::size_t n = g.num_nodes(), steps = 5, walks = 100000;
    std::vector<double> p(n, 0.0);
    p[0] = 1.0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<double> q(n, 0.0);
      for (node_t v = 0; v < n; ++v) {
        for (node_t w : g.neighbors(v)) q[w] += p[v] / static_cast<double>(g.degree(v));
      }
      p = q;
    }
    std::vector<double> freq(n, 0.0);
    for (std::size_t w = 0; w < walks; ++w) freq[sample_random_walk(g, 0, steps + 1, w).nodes.back()] += 1.0;
    for (node_t v = 0; v < n; ++v) CHECK(std::abs(freq[v] / walks - p[v]) < 0.01);
  }

  TEST_CASE("butterfly counts of complete graphs") {
    CHECK(count_butterflies(sample_butterflies(complete(2, 2))) == 1);
    CHECK(count_butterflies(sample_butterflies(complete(3, 3))) == 9);
    CHECK(sample_butterflies(DomainGraph{}).empty());
  }

  TEST_CASE("butterflies match brute force and are filed under their top node") {
    Rng rng(17);
    for (int t = 0; t < 100; ++t) {
      const std::size_t nu = 2 + uniform_index(rng, 14), ni = 2 + uniform_index(rng, 14);
      auto g = testing::random_bipartite(rng, nu, ni, 0.3);
      auto dict = sample_butterflies(g);
      auto got = testing::flatten_butterflies(dict);
      CHECK(got == testing::brute_force_butterflies(g));
      for (const auto& [key, wedges] : dict) {
        for (const auto& w : wedges) {
          for (node_t v : {key.partner, w[0], w[1]}) CHECK(g.priority(key.anchor) > g.priority(v));
        }
      }
    }
  }

  TEST_CASE("EASE on a single item and on an all-zero matrix") {
    auto one = ease_item_matrix(DomainGraph::from_edges(0, Edges{{0, 0}, {1, 0}}), 1.0);
    REQUIRE(one.size == 1);
    CHECK(one(0, 0) == 0.0);

    std::vector<std::uint64_t> users{0, 1}, items{0, 1, 2};
    auto zero = ease_item_matrix(DomainGraph::from_edges(0, {}, users, items), 2.0);
    for (double v : zero.values) CHECK(v == 0.0);
  }

  TEST_CASE("EASE on a 2x2 matrix matches a dense solve") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}, {1, 0}});
    auto b = ease_item_matrix(g, 1.0);
    // A^T A + I = [[3,1],[1,2]]
    auto p = testing::invert({{3.0, 1.0}, {1.0, 2.0}});
    for (std::size_t j = 0; j < 2; ++j) {
      for (std::size_t k = 0; k < 2; ++k) {
        const double want = j == k ? 0.0 : -p[j][k] / p[k][k];
        CHECK(std::abs(b(j, k) - want) < 1e-10);
      }
    }
  }

  TEST_CASE("EASE rejects a non-positive regulariser") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}});
    CHECK_THROWS(ease_item_matrix(g, 0.0));
  }

  TEST_CASE("thresholds use the lower median") {
    auto odd = DomainGraph::from_edges(0, Edges{{0, 0}, {1, 0}, {1, 1}, {1, 2}, {2, 0}, {2, 1}, {2, 2}, {2, 3}, {2, 4}});
    auto t = compute_thresholds(odd);
    CHECK(t.a1 == 3);
    CHECK(t.a2 == 3);
    CHECK(t.a3 == 0.0);
    auto even = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}, {1, 0}, {1, 1}, {1, 2}, {1, 3}});
    CHECK(compute_thresholds(even).a1 == 2);
  }

  TEST_CASE("T2 on two users sharing three items") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}, {1, 2}});
    auto t2 = sample_triangles(g, TriangleKind::t2, {2, 2, 0.0});
    CHECK(t2.size() == 3);
    for (const auto& m : t2) CHECK(validate_motif(g, m).empty());
  }

  TEST_CASE("T1 threshold above every degree gives nothing") {
    auto g = complete(3, 3);
    CHECK(sample_triangles(g, TriangleKind::t1, {4, 4, 0.0}).empty());
    CHECK(sample_triangles(g, TriangleKind::t1, {3, 3, 0.0}).size() == 1);
  }

  TEST_CASE("T3 with one similar pair") {
    auto g = DomainGraph::from_edges(0, Edges{{0, 0}, {0, 1}});
    ItemSimMatrix sim{2, 1.0, {0.0, 0.4, 0.4, 0.0}};
    auto t3 = sample_triangles(g, TriangleKind::t3, {1, 1, 0.0}, &sim);
    REQUIRE(t3.size() == 1);
    CHECK(t3[0].nodes == std::vector<node_t>{0, 1, 2});
  }

  TEST_CASE("triangle families match brute-force triple enumeration") {
    Rng rng(23);
    for (int t = 0; t < 20; ++t) {
      auto g = testing::random_bipartite(rng, 8, 7, 0.45);
      if (g.num_edges() == 0) continue;
      const auto th = compute_thresholds(g);
      const std::size_t need1 = std::max<std::size_t>(th.a1, 1), need2 = std::max<std::size_t>(th.a2, 1);
      auto sim = ease_item_matrix(g, 1.0);
      std::set<std::array<node_t, 3>> t1, t2, t3;
      const node_t nu = static_cast<node_t>(g.num_users());
      for (node_t a = 0; a < nu; ++a) {
        for (node_t b = a + 1; b < nu; ++b) {
          for (node_t c = b + 1; c < nu; ++c) {
            if (common(g, a, b) >= need1 && common(g, a, c) >= need1 && common(g, b, c) >= need1) t1.insert({a, b, c});
          }
          if (common(g, a, b) < need2) continue;
          for (node_t i = nu; i < g.num_nodes(); ++i) {
            if (g.has_edge(a, i) && g.has_edge(b, i)) t2.insert({a, b, i});
          }
        }
        for (node_t i = nu; i < g.num_nodes(); ++i) {
          for (node_t j = i + 1; j < g.num_nodes(); ++j) {
            const auto ii = g.item_index(i), jj = g.item_index(j);
            if (g.has_edge(a, i) && g.has_edge(a, j) && sim(ii, jj) > th.a3 && sim(jj, ii) > th.a3) t3.insert({a, i, j});
          }
        }
      }
      CHECK(as_triples(sample_triangles(g, TriangleKind::t1, th)) == t1);
      CHECK(as_triples(sample_triangles(g, TriangleKind::t2, th)) == t2);
      CHECK(as_triples(sample_triangles(g, TriangleKind::t3, th, &sim)) == t3);
    }
  }

  TEST_CASE("motif pools respect the budget and validate") {
    Rng rng(29);
    auto g = testing::random_bipartite(rng, 12, 10, 0.35);
    for (auto sel : {MotifSelection::walk, MotifSelection::butterfly, MotifSelection::triangle, MotifSelection::all}) {
      MotifPoolConfig cfg;
      cfg.selection = sel;
      cfg.budget = 3;
      cfg.seed = 4;
      auto pool = build_motif_pool(g, cfg);
      REQUIRE(pool.by_central.size() == g.num_nodes());
      std::map<std::pair<node_t, MotifKind>, std::size_t> per;
      for (std::size_t v = 0; v < g.num_nodes(); ++v) {
        for (auto m : pool.by_central[v]) {
          const auto& motif = pool.motifs[m];
          CHECK(motif.central_node() == v);
          CHECK(validate_motif(g, motif).empty());
          ++per[{static_cast<node_t>(v), motif.kind}];
        }
      }
      for (const auto& [key, count] : per) CHECK(count <= 3);
      auto again = build_motif_pool(g, cfg);
      CHECK(again.motifs.size() == pool.motifs.size());
    }
  }

  TEST_CASE("validate_motif catches broken structures") {
    auto g = complete(2, 2);
    MotifInstance bad;
    bad.kind = MotifKind::butterfly;
    bad.nodes = {0, 1, 2};
    CHECK_FALSE(validate_motif(g, bad).empty());
    MotifInstance walk;
    walk.kind = MotifKind::walk;
    walk.nodes = {0, 1};
    CHECK_FALSE(validate_motif(g, walk).empty());  // two users are not adjacent
    walk.nodes = {0, 2, 1};
    CHECK(validate_motif(g, walk).empty());
    CHECK_FALSE(validate_motif(g, walk, 4).empty());
  }
}
