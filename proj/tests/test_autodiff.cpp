#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "mop/autodiff.hpp"
#include "support.hpp"

using namespace mop;
using namespace mop::ad;

namespace {

struct Fixture {
  Rng rng{42};
  ParamStore store;
  Matrix weight;  // random projection that turns any output into a scalar

  Var reduce(Tape& tape, Var out) {
    if (!weight.same_shape(out.value())) weight = testing::random_matrix(rng, out.rows(), out.cols());
    return sum(mul(out, tape.constant(weight)));
  }

  double check(const std::function<Var(Tape&)>& body) {
    weight = Matrix();
    auto r = grad_check([&](Tape& t) { return reduce(t, body(t)); }, store);
    INFO("worst " << r.worst_param << "[" << r.worst_index << "]");
    return r.max_rel_error;
  }
};

constexpr double kTol = 1e-6;

}  // namespace

TEST_SUITE("autodiff") {
  TEST_CASE("gradient of a sum of squares") {
    ParamStore store;
    store.add("x", Matrix::row_vector({1.0, 2.0, 3.0}));
    Tape tape;
    auto x = tape.param(store, "x");
    tape.backward(sum(mul(x, x)));
    CHECK(store.at("x").grad == Matrix::row_vector({2.0, 4.0, 6.0}));
    auto r = grad_check([&](Tape& t) { auto v = t.param(store, "x"); return sum(mul(v, v)); }, store, 1e-5);
    CHECK(r.max_rel_error < 1e-8);
  }

  TEST_CASE("forward identities") {
    Tape tape;
    auto s = softmax_rows(tape.constant(Matrix(1, 5, 0.3)));
    for (double v : s.value().values()) CHECK(std::abs(v - 0.2) < 1e-15);
    auto v = tape.constant(Matrix::row_vector({0.3, -2.0, 5.0}));
    CHECK(std::abs(cosine_rows(v, v).value()[0] - 1.0) < 1e-15);
    auto ln = layer_norm_rows(tape.constant(Matrix(2, 1, 4.0)), tape.constant(Matrix(1, 1, 1.0)),
                              tape.constant(Matrix(1, 1, 0.0)));
    for (double x : ln.value().values()) CHECK(std::isfinite(x));
    CHECK_THROWS_AS(normalize_rows(tape.constant(Matrix(1, 3, 0.0))), NumericalError);
    CHECK_THROWS_AS(add(tape.constant(Matrix(2, 2)), tape.constant(Matrix(2, 3))), DimensionError);
    CHECK_THROWS_AS(matmul(tape.constant(Matrix(2, 2)), tape.constant(Matrix(3, 2))), DimensionError);
  }

  TEST_CASE("every op passes a central-difference check") {
    Fixture f;
    auto& st = f.store;
    st.add("a", testing::random_matrix(f.rng, 4, 3));
    st.add("b", testing::random_matrix(f.rng, 4, 3));
    st.add("c", testing::random_matrix(f.rng, 3, 5));
    st.add("row", testing::random_matrix(f.rng, 1, 3));
    st.add("col", testing::random_matrix(f.rng, 4, 1));
    Matrix pos = testing::random_matrix(f.rng, 4, 3);
    for (auto& v : pos.values()) v = std::abs(v) + 0.5;
    st.add("pos", pos);
    auto P = [&](Tape& t, const char* n) { return t.param(st, n); };

    CHECK(f.check([&](Tape& t) { return matmul(P(t, "a"), P(t, "c")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return matmul_bt(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return add(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return sub(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return mul(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return add_row(P(t, "a"), P(t, "row")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return mul_row(P(t, "a"), P(t, "row")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return mul_col(P(t, "a"), P(t, "col")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return scale(add_scalar(P(t, "a"), 0.7), -1.3); }) < kTol);
    CHECK(f.check([&](Tape& t) { return concat_cols(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return concat_rows(P(t, "a"), P(t, "row")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return gather_rows(P(t, "a"), {3, 0, 0, 2}); }) < kTol);
    CHECK(f.check([&](Tape& t) { return mul(sum(P(t, "a")), sum(P(t, "b"))); }) < kTol);
    CHECK(f.check([&](Tape& t) { return mean_rows(P(t, "a")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return exp(P(t, "a")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return log(P(t, "pos")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return gelu(P(t, "a")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return softmax_rows(P(t, "a")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return layer_norm_rows(P(t, "a"), P(t, "row"), mul_row(P(t, "row"), P(t, "row"))); }) < kTol);
    CHECK(f.check([&](Tape& t) { return normalize_rows(P(t, "a")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return cosine_rows(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return cosine_matrix(P(t, "a"), P(t, "b")); }) < kTol);
    CHECK(f.check([&](Tape& t) { return segment_sum(P(t, "a"), {0, 1, 1, 4}); }) < kTol);
    CHECK(f.check([&](Tape& t) { return segment_mean(P(t, "a"), {0, 3, 3, 4}); }) < kTol);
    CHECK(f.check([&](Tape& t) { return segment_softmax(P(t, "col"), {0, 2, 4}); }) < kTol);
    CHECK(f.check([&](Tape& t) {
      return segment_attention(concat_cols(P(t, "a"), P(t, "col")), concat_cols(P(t, "b"), P(t, "col")),
                               concat_cols(P(t, "pos"), P(t, "col")), {0, 3, 4}, 2);
    }) < kTol);
    const Matrix m = testing::random_matrix(f.rng, 4, 4);
    CHECK(f.check([&](Tape& t) {
      return linear_map(P(t, "a"), [&](const Matrix& x) { return testing::dense_matmul(m, x); },
                        [&](const Matrix& y) {
                          Matrix mt(4, 4);
                          for (std::size_t i = 0; i < 4; ++i)
                            for (std::size_t j = 0; j < 4; ++j) mt(i, j) = m(j, i);
                          return testing::dense_matmul(mt, y);
                        });
    }) < kTol);
    CHECK(f.check([&](Tape& t) { return info_nce(matmul_bt(P(t, "a"), P(t, "b")), {0, 1, 2, 3}); }) < kTol);
    CHECK(f.check([&](Tape& t) {
      return info_nce(matmul_bt(P(t, "a"), P(t, "b")), {1, 0, 3, 2},
                      {1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1});
    }) < kTol);
  }

  TEST_CASE("frozen tensors receive no gradient and do not move") {
    ParamStore store;
    store.add("w", Matrix::row_vector({1.0, 2.0}));
    store.add("v", Matrix::row_vector({3.0, 4.0}));
    store.freeze("v");
    Tape tape;
    tape.backward(sum(mul(tape.param(store, "w"), tape.param(store, "v"))));
    CHECK(store.at("v").grad == Matrix(1, 2));
    CHECK(store.at("w").grad == Matrix::row_vector({3.0, 4.0}));
    store.at("v").grad = Matrix::row_vector({9.0, 9.0});
    sgd_step(store, 0.5);
    CHECK(store.at("v").value == Matrix::row_vector({3.0, 4.0}));
    CHECK(store.at("w").value == Matrix::row_vector({-0.5, 0.0}));
  }

  TEST_CASE("sgd arithmetic and zero learning rate") {
    ParamStore store;
    store.add("v", Matrix(1, 1, 1.0));
    store.at("v").grad(0, 0) = 2.0;
    auto before = store;
    sgd_step(before, 0.0);
    CHECK(before.at("v").value(0, 0) == 1.0);
    sgd_step(store, 0.1);
    CHECK(std::abs(store.at("v").value(0, 0) - 0.8) < 1e-15);
    CHECK(store.at("v").grad(0, 0) == 0.0);
  }

  TEST_CASE("adam first step moves by the learning rate") {
    ParamStore store;
    store.add("v", Matrix::row_vector({1.0, -1.0}));
    store.at("v").grad = Matrix::row_vector({0.3, -7.0});
    Adam adam(0.01);
    adam.step(store);
    CHECK(std::abs(store.at("v").value[0] - 0.99) < 1e-9);
    CHECK(std::abs(store.at("v").value[1] + 0.99) < 1e-9);
  }

  TEST_CASE("grad_check aborts on a non-finite objective") {
    ParamStore store;
    store.add("x", Matrix(1, 1, -1.0));
    CHECK_THROWS_AS(grad_check([&](Tape& t) { return log(t.param(store, "x")); }, store), NumericalError);
  }

  TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(9);
    ParamStore store;
    store.add("a", testing::random_matrix(rng, 3, 4));
    store.add("b", testing::random_matrix(rng, 1, 7, 1e-300));
    store.add("c", Matrix());
    store.freeze("b");
    auto path = std::filesystem::temp_directory_path() / "mop_ad_roundtrip.ckpt";
    save_params(path, store, {{"stage", "pretrained"}, {"note", "x y"}});
    std::map<std::string, std::string> meta;
    auto back = load_params(path, &meta);
    CHECK(back.identical(store));
    CHECK(meta.at("stage") == "pretrained");
    CHECK(meta.at("note") == "x y");
    back.at("a").value[5] = std::nextafter(back.at("a").value[5], 1e9);
    CHECK_FALSE(back.identical(store));
  }

  TEST_CASE("truncated checkpoint is rejected") {
    ParamStore store;
    store.add("a", Matrix(2, 2, 1.0));
    auto path = std::filesystem::temp_directory_path() / "mop_ad_trunc.ckpt";
    save_params(path, store);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    CHECK_THROWS(load_params(path));
  }
}
