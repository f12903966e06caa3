#include <doctest.h>

#include <cmath>

#include "mop/readout.hpp"
#include "support.hpp"

using namespace mop;

TEST_SUITE("readout") {
  TEST_CASE("plain readout") {
    CHECK(readout_plain(Matrix(3, 2, std::vector<double>{1, 5, 1, 5, 1, 5})) == Matrix::row_vector({1, 5}));
    CHECK(readout_plain(Matrix(2, 2, std::vector<double>{0, 2, 2, 0})) == Matrix::row_vector({1, 1}));
    CHECK_THROWS_AS(readout_plain(Matrix(0, 3)), ValidationError);
    Rng rng(1);
    auto t = testing::random_matrix(rng, 4, 3);
    Matrix swapped = t;
    for (std::size_t c = 0; c < 3; ++c) std::swap(swapped(0, c), swapped(3, c));
    CHECK(testing::max_abs_diff(readout_plain(t), readout_plain(swapped)) < 1e-15);
  }

  TEST_CASE("identity prompts reproduce the plain readout") {
    Rng rng(2);
    auto t = testing::random_matrix(rng, 5, 4);
    auto plain = readout_plain(t);
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::elementwise, Matrix(1, 4, 1.0)), plain) < 1e-15);
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::matrix, Matrix::identity(4)), plain) < 1e-15);
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::attention, Matrix(1, 4)), plain) < 1e-15);
  }

  TEST_CASE("prompted readouts against direct formulas") {
    Rng rng(3);
    auto t = testing::random_matrix(rng, 3, 4);
    auto p = testing::random_matrix(rng, 1, 4);
    auto P = testing::random_matrix(rng, 4, 4);
    auto w = testing::random_matrix(rng, 1, 4);
    Matrix ew(1, 4), mx(1, 4), at(1, 4);
    std::vector<double> score(3);
    double zsum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      score[j] = 0.0;
      for (std::size_t c = 0; c < 4; ++c) score[j] += w[c] * t(j, c);
      zsum += std::exp(score[j]);
    }
    for (std::size_t j = 0; j < 3; ++j) {
      for (std::size_t r = 0; r < 4; ++r) {
        ew[r] += p[r] * t(j, r) / 3.0;
        for (std::size_t c = 0; c < 4; ++c) mx[r] += P(r, c) * t(j, c) / 3.0;
        at[r] += std::exp(score[j]) / zsum * t(j, r);
      }
    }
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::elementwise, p), ew) < 1e-14);
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::matrix, P), mx) < 1e-14);
    CHECK(testing::max_abs_diff(readout_prompted(t, PromptMode::attention, w), at) < 1e-14);
  }

  TEST_CASE("output gate") {
    auto z = Matrix::row_vector({1, 2}), c = Matrix::row_vector({3, 4});
    CHECK(assemble_node_embedding(z, c, Matrix(1, 4, 1.0)) == Matrix::row_vector({1, 2, 3, 4}));
    CHECK(assemble_node_embedding(z, c, Matrix::row_vector({1, 1, 0, 0})) == Matrix::row_vector({1, 2, 0, 0}));
    CHECK_THROWS(assemble_node_embedding(z, c, Matrix(1, 3, 1.0)));
  }

  TEST_CASE("prompt initialisation is identity and frozen") {
    ad::ParamStore store;
    init_prompt_params(store, 3, {0, 2});
    for (int d : {0, 2}) {
      for (Context ctx : {Context::shared, Context::specific}) {
        for (const auto& n : prompt_names(d, ctx)) CHECK(store.frozen(n));
        CHECK(store.at(prompt_name(d, ctx, "mat")).value == Matrix::identity(3));
        CHECK(store.at(prompt_name(d, ctx, "out")).value == Matrix(1, 6, 1.0));
      }
    }
  }

  TEST_CASE("node embedding pools motifs and falls back without motifs") {
    Rng rng(4);
    auto enc = testing::random_matrix(rng, 5, 3);  // motifs [0,2) [2,5)
    auto central = testing::random_matrix(rng, 3, 3);
    ad::ParamStore store;
    init_prompt_params(store, 3, {0});
    store.at(prompt_name(0, Context::specific, "vec")).value = testing::random_matrix(rng, 1, 3);
    ad::Tape tape;
    auto pv = prompt_vars(tape, store, 0, Context::specific, PromptMode::elementwise);
    // node 0: motif 0; node 1: motifs 0 and 1; node 2: nothing.
    Matrix stacked(7, 3);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 3; ++c) stacked(r, c) = enc(r, c);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 3; ++c) stacked(2 + r, c) = enc(r, c);
    auto out = node_embedding(tape.constant(stacked), {0, 2, 4, 7}, {0, 1, 3, 3}, tape.constant(central), pv).value();
    const auto& p = store.at(prompt_name(0, Context::specific, "vec")).value;
    Matrix m0(2, 3), m1(3, 3);
    for (std::size_t c = 0; c < 3; ++c) {
      m0(0, c) = enc(0, c), m0(1, c) = enc(1, c);
      for (std::size_t r = 0; r < 3; ++r) m1(r, c) = enc(2 + r, c);
    }
    auto r0 = readout_prompted(m0, PromptMode::elementwise, p), r1 = readout_prompted(m1, PromptMode::elementwise, p);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(out(0, c) - r0[c]) < 1e-14);
      CHECK(std::abs(out(1, c) - 0.5 * (r0[c] + r1[c])) < 1e-14);
      CHECK(out(2, c) == 0.0);
      for (std::size_t n = 0; n < 3; ++n) CHECK(out(n, 3 + c) == central(n, c));
    }
  }

  TEST_CASE("prompt gradients pass a finite-difference check") {
    Rng rng(5);
    for (PromptMode mode : {PromptMode::elementwise, PromptMode::matrix, PromptMode::attention}) {
      ad::ParamStore store;
      init_prompt_params(store, 4, {0});
      for (const auto& n : prompt_names(0, Context::shared)) {
        store.unfreeze(n);
        auto& v = store.at(n).value;
        v = testing::random_matrix(rng, v.rows(), v.cols());
      }
      auto enc = testing::random_matrix(rng, 6, 4), central = testing::random_matrix(rng, 2, 4);
      auto proj = testing::random_matrix(rng, 2, 8);
      auto r = ad::grad_check(
          [&](ad::Tape& t) {
            auto pv = prompt_vars(t, store, 0, Context::shared, mode);
            auto e = node_embedding(t.constant(enc), {0, 3, 6}, {0, 1, 2}, t.constant(central), pv);
            return ad::sum(ad::mul(e, t.constant(proj)));
          },
          store);
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}
