#include <doctest.h>

#include <cmath>

#include "mop/mode.hpp"
#include "mop/objectives.hpp"
#include "support.hpp"

using namespace mop;

namespace {

ModeSpec spec(std::size_t layers = 1) {
  ModeSpec s;
  s.dim = 8;
  s.heads = 2;
  s.hidden = 12;
  s.layers = layers;
  s.domains = {0, 1};
  return s;
}

Matrix ln(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mu = 0.0, var = 0.0;
    for (double v : x.row(r)) mu += v;
    mu /= static_cast<double>(x.cols());
    for (double v : x.row(r)) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

Matrix plus_row(Matrix a, const Matrix& row) {
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) a(r, c) += row[c];
  return a;
}

Matrix plus(Matrix a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

TEST_SUITE("mode") {
  TEST_CASE("zero projections give a residual pass-through") {
    ad::ParamStore store;
    Rng rng(1);
    auto s = spec();
    init_mode_params(store, s, rng);
    for (auto& [name, t] : store.tensors()) {
      if (name.find("ln") == std::string::npos) t.value.fill(0.0);
    }
    auto x = testing::random_matrix(rng, 4, 8);
    CHECK(encode_motif(store, s, x, RouteTag::shared()) == x);
  }

  TEST_CASE("routing selects the expert") {
    ad::ParamStore store;
    Rng rng(2);
    auto s = spec();
    init_mode_params(store, s, rng);
    auto x = testing::random_matrix(rng, 3, 8);
    auto shared = encode_motif(store, s, x, RouteTag::shared());
    CHECK(testing::max_abs_diff(shared, encode_motif(store, s, x, RouteTag::specific(1))) > 1e-6);
    for (const char* part : {"w1", "b1", "w2", "b2"}) {
      store.at(s.expert(0, RouteTag::specific(1), part)).value = store.at(s.expert(0, RouteTag::shared(), part)).value;
    }
    CHECK(encode_motif(store, s, x, RouteTag::specific(1)) == shared);
    CHECK_THROWS_AS(encode_motif(store, s, x, RouteTag::specific(7)), RoutingError);
  }

  TEST_CASE("routes touch disjoint experts") {
    ad::ParamStore store;
    Rng rng(3);
    auto s = spec();
    init_mode_params(store, s, rng);
    auto x = testing::random_matrix(rng, 3, 8);
    auto before = encode_motif(store, s, x, RouteTag::specific(0));
    for (const char* part : {"w1", "w2"}) store.at(s.expert(0, RouteTag::specific(1), part)).value.fill(3.0);
    store.at(s.expert(0, RouteTag::shared(), "w1")).value.fill(-2.0);
    CHECK(encode_motif(store, s, x, RouteTag::specific(0)) == before);
  }

  TEST_CASE("one token matches the closed form") {
    ad::ParamStore store;
    Rng rng(4);
    auto s = spec();
    init_mode_params(store, s, rng);
    for (auto& [name, t] : store.tensors()) t.value = testing::random_matrix(rng, t.value.rows(), t.value.cols(), 0.5);
    auto x = testing::random_matrix(rng, 1, 8);
    auto P = [&](const std::string& part) { return store.at(s.name(0, part)).value; };
    auto E = [&](const std::string& part) { return store.at(s.expert(0, RouteTag::specific(0), part)).value; };
    // Attention over a single token puts weight 1 on its own value row.
    auto v = testing::dense_matmul(ln(x, P("ln1.g"), P("ln1.b")), P("wv"));
    auto mid = plus(plus_row(testing::dense_matmul(v, P("wo")), P("bo")), x);
    auto h = plus_row(testing::dense_matmul(ln(mid, P("ln2.g"), P("ln2.b")), E("w1")), E("b1"));
    for (auto& z : h.values()) z = 0.5 * z * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (z + 0.044715 * z * z * z)));
    auto want = plus(plus_row(testing::dense_matmul(h, E("w2")), E("b2")), mid);
    CHECK(testing::max_abs_diff(encode_motif(store, s, x, RouteTag::specific(0)), want) < 1e-12);
  }

  TEST_CASE("one layer stack equals the layer") {
    ad::ParamStore store;
    Rng rng(5);
    auto s = spec(1);
    init_mode_params(store, s, rng);
    auto x = testing::random_matrix(rng, 4, 8);
    ad::Tape tape;
    auto t0 = tape.constant(x);
    auto one = mode_layer_forward(tape, store, s, 0, t0, {0, 4}, RouteTag::shared());
    CHECK(one.value() == encode_motif(store, s, x, RouteTag::shared()));
  }

  TEST_CASE("permutation equivariance within a motif") {
    ad::ParamStore store;
    Rng rng(6);
    auto s = spec(2);
    init_mode_params(store, s, rng);
    auto x = testing::random_matrix(rng, 5, 8);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Matrix xp(5, 8);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 8; ++c) xp(r, c) = x(perm[r], c);
    auto y = encode_motif(store, s, x, RouteTag::specific(1));
    auto yp = encode_motif(store, s, xp, RouteTag::specific(1));
    double worst = 0.0;
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 8; ++c) worst = std::max(worst, std::abs(yp(r, c) - y(perm[r], c)));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("motifs in one stack do not interact") {
    ad::ParamStore store;
    Rng rng(7);
    auto s = spec(2);
    init_mode_params(store, s, rng);
    auto a = testing::random_matrix(rng, 3, 8), b = testing::random_matrix(rng, 4, 8);
    Matrix ab(7, 8);
    for (std::size_t i = 0; i < a.size(); ++i) ab[i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) ab[a.size() + i] = b[i];
    ad::Tape tape;
    auto y = encode_motif(tape, store, s, tape.constant(ab), {0, 3, 7}, RouteTag::shared()).value();
    auto ya = encode_motif(store, s, a, RouteTag::shared()), yb = encode_motif(store, s, b, RouteTag::shared());
    double worst = 0.0;
    for (std::size_t i = 0; i < ya.size(); ++i) worst = std::max(worst, std::abs(y[i] - ya[i]));
    for (std::size_t i = 0; i < yb.size(); ++i) worst = std::max(worst, std::abs(y[ya.size() + i] - yb[i]));
    CHECK(worst < 1e-12);
  }

  TEST_CASE("encoder plus InfoNCE passes a gradient check") {
    ad::ParamStore store;
    Rng rng(8);
    auto s = spec(2);
    init_mode_params(store, s, rng);
    store.add("t0", testing::random_matrix(rng, 8, 8));
    auto r = ad::grad_check(
        [&](ad::Tape& t) {
          auto x = t.param(store, "t0");
          std::vector<std::size_t> off{0, 4, 8};
          auto y = encode_motif(t, store, s, x, off, RouteTag::specific(0));
          auto z = ad::segment_mean(y, off);
          auto w = ad::segment_mean(encode_motif(t, store, s, x, off, RouteTag::shared()), off);
          MSLBatch b{z, w, {0, 1}, {}, 0.5, Denominator::with_pos};
          return infonce(b);
        },
        store, 1e-5, 1e-6, 24);
    INFO(r.worst_param << "[" << r.worst_index << "]");
    CHECK(r.max_rel_error < 1e-4);
  }

  TEST_CASE("head count must divide the width") {
    ad::ParamStore store;
    Rng rng(9);
    auto s = spec();
    s.heads = 3;
    CHECK_THROWS_AS(init_mode_params(store, s, rng), ConfigError);
  }
}
