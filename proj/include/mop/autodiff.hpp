#pragma once

// Reverse-mode differentiation over dense 2-D tensors.
//
// A Tape records every operation of one forward pass in creation order, which
// is already a topological order; backward() walks it in reverse and
// accumulates into the gradients of trainable parameter tensors.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mop/matrix.hpp"

namespace mop::ad {

/// Trainable (or constant) tensor. Shape is {rows, cols}.
struct Tensor {
  Matrix value;
  Matrix grad;
  bool requires_grad = true;

  Tensor() = default;
  explicit Tensor(Matrix v, bool trainable = true)
      : value(std::move(v)), grad(value.rows(), value.cols()), requires_grad(trainable) {}

  std::vector<std::size_t> shape() const { return {value.rows(), value.cols()}; }
  void zero_grad() { grad.fill(0.0); }
};

/// Named tensors plus the set of names excluded from updates.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Matrix value);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.contains(name); }

  void freeze(const std::string& name);
  void unfreeze(const std::string& name);
  void freeze_all();
  bool frozen(const std::string& name) const { return frozen_.contains(name); }
  const std::set<std::string>& frozen_names() const noexcept { return frozen_; }
  bool frozen(const Tensor& t) const;

  void zero_grad();
  std::size_t num_scalars() const;

  std::map<std::string, Tensor>& tensors() noexcept { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const noexcept { return tensors_; }

  /// True when names, shapes, values and freeze masks are bit-identical.
  bool identical(const ParamStore& other) const;

 private:
  std::map<std::string, Tensor> tensors_;
  std::set<std::string> frozen_;
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Reads a parameter. Frozen or non-trainable tensors act as constants and
  /// never receive gradient.
  Var param(Tensor& tensor, bool frozen = false);
  Var param(ParamStore& store, const std::string& name);

  /// Appends an op node. `parents` decide whether the node needs gradient.
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward);
  Var push(Matrix value, std::span<const Var> parents, Backward backward);

  const Matrix& value(std::uint32_t id) const { return nodes_[id].value; }
  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  /// Gradient slot of a node; allocated on first use.
  Matrix& grad(std::uint32_t id);
  Matrix& grad(Var v) { return grad(v.id); }

  /// Seeds d(loss)/d(loss) = 1 on a 1x1 node and back-propagates.
  void backward(Var loss);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    Tensor* param = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Shapes are checked; mismatches throw DimensionError.

Var matmul(Var a, Var b);                       // (n x k)(k x m)
Var matmul_bt(Var a, Var b);                    // a * b^T
Var add(Var a, Var b);                          // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                          // elementwise
Var add_row(Var a, Var row);                    // a + broadcast 1 x c
Var mul_row(Var a, Var row);                    // a * broadcast 1 x c
Var mul_col(Var a, Var col);                    // a * broadcast r x 1
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var concat_cols(Var a, Var b);
Var concat_rows(Var a, Var b);
Var gather_rows(Var a, std::vector<std::uint32_t> index);
Var sum(Var a);                                 // 1 x 1
Var mean_rows(Var a);                           // 1 x c
Var exp(Var a);
Var log(Var a);                                 // requires a > 0
Var gelu(Var a);                                // tanh approximation
Var softmax_rows(Var a);
Var layer_norm_rows(Var a, Var gain, Var bias, double eps = 1e-5);
Var normalize_rows(Var a);                      // throws NumericalError on zero rows
Var cosine_rows(Var a, Var b);                  // r x 1, row-wise cosine
Var cosine_matrix(Var a, Var b);                // (n x d),(m x d) -> n x m

/// Segments are given by offsets: segment s spans rows [offsets[s], offsets[s+1]).
Var segment_mean(Var a, std::vector<std::size_t> offsets);   // empty segment -> zero row
Var segment_sum(Var a, std::vector<std::size_t> offsets);
Var segment_softmax(Var scores, std::vector<std::size_t> offsets);  // scores r x 1
/// Multi-head scaled dot-product self-attention restricted to each segment.
Var segment_attention(Var q, Var k, Var v, std::vector<std::size_t> offsets, std::size_t heads);

/// Linear map with user-supplied adjoint (e.g. a sparse propagation operator).
Var linear_map(Var a, std::function<Matrix(const Matrix&)> forward,
               std::function<Matrix(const Matrix&)> adjoint);

/// InfoNCE over a logits matrix: -sum_r [L(r, pos_r) - log sum_{c in include_r} exp L(r, c)].
/// `include` is row-major r x c (1 = in the denominator); empty means all.
Var info_nce(Var logits, std::vector<std::size_t> positive, std::vector<std::uint8_t> include = {});

// ---------------------------------------------------------------------------
// Optimisation

/// Plain SGD: unfrozen tensors move by -lr * grad; all gradients are zeroed.
void sgd_step(ParamStore& store, double lr);

/// Adam with bias correction; state is keyed by tensor name.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& store);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of f against central differences
/// (f(x+h) - f(x-h)) / 2h for every coordinate of every unfrozen tensor (or at
/// most `max_coords_per_tensor`, evenly strided). Relative error per
/// coordinate is |a - n| / max(|a|, |n|, floor).
GradCheckResult grad_check(const std::function<Var(Tape&)>& f, ParamStore& store, double h = 1e-5,
                           double floor = 1e-6, std::size_t max_coords_per_tensor = 0);

// ---------------------------------------------------------------------------
// Checkpoint serialisation

/// Binary dump of (name, shape, values) triples, the freeze mask and string
/// metadata. Values are written as raw IEEE-754 doubles, so a round trip is
/// bit-exact.
void save_params(const std::filesystem::path& path, const ParamStore& store,
                 const std::map<std::string, std::string>& metadata = {});
ParamStore load_params(const std::filesystem::path& path,
                       std::map<std::string, std::string>* metadata = nullptr);

}  // namespace mop::ad
