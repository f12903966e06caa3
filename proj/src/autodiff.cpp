#include "mop/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>

namespace mop::ad {

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::add(const std::string& name, Matrix value) {
  auto [it, fresh] = tensors_.insert_or_assign(name, Tensor(std::move(value)));
  (void)fresh;
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LookupError("unknown parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw LookupError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::freeze(const std::string& name) {
  at(name);
  frozen_.insert(name);
}

void ParamStore::unfreeze(const std::string& name) { frozen_.erase(name); }

void ParamStore::freeze_all() {
  for (const auto& [name, t] : tensors_) frozen_.insert(name);
}

bool ParamStore::frozen(const Tensor& t) const {
  for (const auto& name : frozen_) {
    if (&tensors_.at(name) == &t) return true;
  }
  return false;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : tensors_) t.zero_grad();
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.value.size();
  return n;
}

bool ParamStore::identical(const ParamStore& other) const {
  if (frozen_ != other.frozen_ || tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [name, t] : tensors_) {
    auto it = other.tensors_.find(name);
    if (it == other.tensors_.end()) return false;
    const Matrix& a = t.value;
    const Matrix& b = it->second.value;
    if (!a.same_shape(b)) return false;
    if (std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Tape

const Matrix& Var::value() const { return tape->value(*this); }

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(Tensor& tensor, bool frozen) {
  Node n;
  n.value = tensor.value;
  if (tensor.requires_grad && !frozen) {
    n.needs_grad = true;
    n.param = &tensor;
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::param(ParamStore& store, const std::string& name) {
  return param(store.at(name), store.frozen(name));
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward backward) {
  for (double v : value.values()) {
    if (!std::isfinite(v)) throw NumericalError("non-finite value produced on tape");
  }
  Node n;
  n.value = std::move(value);
  for (auto p : parents) n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
  if (n.needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Matrix& Tape::grad(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.size() != n.value.size() || n.grad.rows() != n.value.rows()) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  require_shape(value(loss).size() == 1, "backward needs a scalar loss");
  if (!nodes_[loss.id].needs_grad) return;
  grad(loss)[0] = 1.0;
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.needs_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param) {
      auto& g = n.param->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void check_same(const Matrix& a, const Matrix& b, const char* op) {
  require_shape(a.same_shape(b), std::string(op) + ": shapes " + a.shape_string() + " and " +
                                     b.shape_string() + " differ");
}

void acc(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void check_offsets(const std::vector<std::size_t>& offsets, std::size_t rows, const char* op) {
  require_shape(!offsets.empty() && offsets.front() == 0 && offsets.back() == rows,
                std::string(op) + ": segment offsets do not cover the rows");
  for (std::size_t s = 1; s < offsets.size(); ++s) {
    require_shape(offsets[s - 1] <= offsets[s], std::string(op) + ": offsets must be ascending");
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  Matrix out = mop::matmul(av, bv);
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) gemm_nt_acc(g, t.value(b), t.grad(a));
    if (t.needs_grad(b)) gemm_tn_acc(t.value(a), g, t.grad(b));
  });
}

Var matmul_bt(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require_shape(av.cols() == bv.cols(), "matmul_bt " + av.shape_string() + " * " + bv.shape_string() + "^T");
  Matrix out(av.rows(), bv.rows());
  gemm_nt_acc(av, bv, out);
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) gemm_nn_acc(g, t.value(b), t.grad(a));
    if (t.needs_grad(b)) gemm_tn_acc(g, t.value(a), t.grad(b));
  });
}

Var add(Var a, Var b) {
  check_same(a.value(), b.value(), "add");
  Matrix out = a.value();
  acc(out, b.value());
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) acc(t.grad(a), g);
    if (t.needs_grad(b)) acc(t.grad(b), g);
  });
}

Var sub(Var a, Var b) {
  check_same(a.value(), b.value(), "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) acc(t.grad(a), g);
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same(a.value(), b.value(), "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->push(std::move(out), {a, b}, [a, b](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      const Matrix& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad(b);
      const Matrix& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  require_shape(rv.rows() == 1 && rv.cols() == av.cols(), "add_row: row " + rv.shape_string() +
                                                              " vs " + av.shape_string());
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += rv[c];
  }
  return a.tape->push(std::move(out), {a, row}, [a, row](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) acc(t.grad(a), g);
    if (t.needs_grad(row)) {
      Matrix& gr = t.grad(row);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gi = g.row(r);
        for (std::size_t c = 0; c < gi.size(); ++c) gr[c] += gi[c];
      }
    }
  });
}

Var mul_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  require_shape(rv.rows() == 1 && rv.cols() == av.cols(), "mul_row: row " + rv.shape_string() +
                                                              " vs " + av.shape_string());
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] *= rv[c];
  }
  return a.tape->push(std::move(out), {a, row}, [a, row](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(a);
    const Matrix& rv = t.value(row);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * rv[c];
      }
    }
    if (t.needs_grad(row)) {
      Matrix& gr = t.grad(row);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gr[c] += g(r, c) * av(r, c);
      }
    }
  });
}

Var mul_col(Var a, Var col) {
  const Matrix& av = a.value();
  const Matrix& cv = col.value();
  require_shape(cv.cols() == 1 && cv.rows() == av.rows(), "mul_col: column " + cv.shape_string() +
                                                              " vs " + av.shape_string());
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (auto& v : out.row(r)) v *= cv[r];
  }
  return a.tape->push(std::move(out), {a, col}, [a, col](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& av = t.value(a);
    const Matrix& cv = t.value(col);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * cv[r];
      }
    }
    if (t.needs_grad(col)) {
      Matrix& gc = t.grad(col);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < g.cols(); ++c) s += g(r, c) * av(r, c);
        gc[r] += s;
      }
    }
  });
}

Var scale(Var a, double s) {
  Matrix out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape->push(std::move(out), {a}, [a, s](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value();
  for (auto& v : out.values()) v += s;
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) { acc(t.grad(a), t.grad(self)); });
}

Var concat_cols(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require_shape(av.rows() == bv.rows(), "concat_cols: " + av.shape_string() + " and " + bv.shape_string());
  const std::size_t ca = av.cols(), cb = bv.cols();
  Matrix out(av.rows(), ca + cb);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    std::copy_n(av.row(r).data(), ca, out.row(r).data());
    std::copy_n(bv.row(r).data(), cb, out.row(r).data() + ca);
  }
  return a.tape->push(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < ca; ++c) ga(r, c) += g(r, c);
      }
    }
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad(b);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < cb; ++c) gb(r, c) += g(r, ca + c);
      }
    }
  });
}

Var concat_rows(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require_shape(av.cols() == bv.cols(), "concat_rows: " + av.shape_string() + " and " + bv.shape_string());
  Matrix out(av.rows() + bv.rows(), av.cols());
  std::copy(av.values().begin(), av.values().end(), out.values().begin());
  std::copy(bv.values().begin(), bv.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(av.size()));
  const std::size_t na = av.size();
  return a.tape->push(std::move(out), {a, b}, [a, b, na](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
    }
    if (t.needs_grad(b)) {
      Matrix& gb = t.grad(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[na + i];
    }
  });
}

Var gather_rows(Var a, std::vector<std::uint32_t> index) {
  const Matrix& av = a.value();
  const std::size_t c = av.cols();
  Matrix out(index.size(), c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= av.rows()) throw LookupError("gather_rows: row " + std::to_string(index[r]) + " out of range");
    std::copy_n(av.row(index[r]).data(), c, out.row(r).data());
  }
  auto idx = std::make_shared<std::vector<std::uint32_t>>(std::move(index));
  return a.tape->push(std::move(out), {a}, [a, idx, c](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a);
    for (std::size_t r = 0; r < idx->size(); ++r) {
      double* dst = ga.row((*idx)[r]).data();
      const double* src = g.row(r).data();
      for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
    }
  });
}

Var sum(Var a) {
  const auto& v = a.value().values();
  Matrix out(1, 1, std::accumulate(v.begin(), v.end(), 0.0));
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    for (auto& x : t.grad(a).values()) x += g;
  });
}

Var mean_rows(Var a) {
  const Matrix& av = a.value();
  require_shape(av.rows() > 0, "mean_rows of an empty matrix");
  Matrix out(1, av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < av.cols(); ++c) out[c] += av(r, c);
  }
  const double inv = 1.0 / static_cast<double>(av.rows());
  for (auto& v : out.values()) v *= inv;
  return a.tape->push(std::move(out), {a}, [a, inv](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[c] * inv;
    }
  });
}

Var exp(Var a) {
  Matrix out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  Matrix out = a.value();
  for (auto& v : out.values()) {
    if (!(v > 0.0)) throw NumericalError("log of a non-positive value");
    v = std::log(v);
  }
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(a);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Matrix out = a.value();
  for (auto& x : out.values()) x = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& xv = t.value(a);
    Matrix& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = xv[i];
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga[i] += g[i] * d;
    }
  });
}

Var softmax_rows(Var a) {
  Matrix out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    const double m = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (auto& v : row) z += (v = std::exp(v - m));
    for (auto& v : row) v /= z;
  }
  return a.tape->push(std::move(out), {a}, [a](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - dot);
    }
  });
}

Var layer_norm_rows(Var a, Var gain, Var bias, double eps) {
  const Matrix& x = a.value();
  const std::size_t n = x.cols();
  require_shape(gain.value().rows() == 1 && gain.value().cols() == n && bias.value().rows() == 1 &&
                    bias.value().cols() == n,
                "layer_norm: gain/bias must be 1 x " + std::to_string(n));
  auto xhat = std::make_shared<Matrix>(x.rows(), n);
  auto inv_std = std::make_shared<std::vector<double>>(x.rows());
  Matrix out(x.rows(), n);
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (row[c] - mu) * is;
      (*xhat)(r, c) = h;
      out(r, c) = h * gv[c] + bv[c];
    }
  }
  return a.tape->push(std::move(out), {a, gain, bias}, [a, gain, bias, xhat, inv_std, n](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& gv = t.value(gain);
    if (t.needs_grad(gain)) {
      Matrix& gg = t.grad(gain);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * (*xhat)(r, c);
      }
    }
    if (t.needs_grad(bias)) {
      Matrix& gb = t.grad(bias);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
      }
    }
    if (t.needs_grad(a)) {
      Matrix& ga = t.grad(a);
      std::vector<double> dh(n);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
          dh[c] = g(r, c) * gv[c];
          m1 += dh[c];
          m2 += dh[c] * (*xhat)(r, c);
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) ga(r, c) += (*inv_std)[r] * (dh[c] - m1 - (*xhat)(r, c) * m2);
      }
    }
  });
}

Var normalize_rows(Var a) {
  const Matrix& x = a.value();
  Matrix out = x;
  auto norms = std::make_shared<std::vector<double>>(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double s = 0.0;
    for (double v : x.row(r)) s += v * v;
    const double nrm = std::sqrt(s);
    if (!(nrm > 0.0)) throw NumericalError("cosine similarity of a zero-norm embedding");
    (*norms)[r] = nrm;
    for (auto& v : out.row(r)) v /= nrm;
  }
  return a.tape->push(std::move(out), {a}, [a, norms](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(a);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < g.cols(); ++c) dot += g(r, c) * y(r, c);
      const double inv = 1.0 / (*norms)[r];
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += (g(r, c) - y(r, c) * dot) * inv;
    }
  });
}

Var cosine_rows(Var a, Var b) {
  check_same(a.value(), b.value(), "cosine_rows");
  Var prod = mul(normalize_rows(a), normalize_rows(b));
  Var ones = a.tape->constant(Matrix(a.value().cols(), 1, 1.0));
  return matmul(prod, ones);
}

Var cosine_matrix(Var a, Var b) {
  require_shape(a.value().cols() == b.value().cols(), "cosine_matrix: widths differ");
  return matmul_bt(normalize_rows(a), normalize_rows(b));
}

Var segment_sum(Var a, std::vector<std::size_t> offsets) {
  const Matrix& x = a.value();
  check_offsets(offsets, x.rows(), "segment_sum");
  const std::size_t segs = offsets.size() - 1, c = x.cols();
  Matrix out(segs, c);
  for (std::size_t s = 0; s < segs; ++s) {
    auto o = out.row(s);
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
      auto in = x.row(r);
      for (std::size_t k = 0; k < c; ++k) o[k] += in[k];
    }
  }
  auto off = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return a.tape->push(std::move(out), {a}, [a, off, c](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a);
    for (std::size_t s = 0; s + 1 < off->size(); ++s) {
      auto gs = g.row(s);
      for (std::size_t r = (*off)[s]; r < (*off)[s + 1]; ++r) {
        auto dst = ga.row(r);
        for (std::size_t k = 0; k < c; ++k) dst[k] += gs[k];
      }
    }
  });
}

Var segment_mean(Var a, std::vector<std::size_t> offsets) {
  const Matrix& x = a.value();
  check_offsets(offsets, x.rows(), "segment_mean");
  const std::size_t segs = offsets.size() - 1, c = x.cols();
  Matrix out(segs, c);
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    if (len == 0) continue;
    auto o = out.row(s);
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r) {
      auto in = x.row(r);
      for (std::size_t k = 0; k < c; ++k) o[k] += in[k];
    }
    const double inv = 1.0 / static_cast<double>(len);
    for (auto& v : o) v *= inv;
  }
  auto off = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return a.tape->push(std::move(out), {a}, [a, off, c](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(a);
    for (std::size_t s = 0; s + 1 < off->size(); ++s) {
      const std::size_t len = (*off)[s + 1] - (*off)[s];
      if (len == 0) continue;
      const double inv = 1.0 / static_cast<double>(len);
      auto gs = g.row(s);
      for (std::size_t r = (*off)[s]; r < (*off)[s + 1]; ++r) {
        auto dst = ga.row(r);
        for (std::size_t k = 0; k < c; ++k) dst[k] += gs[k] * inv;
      }
    }
  });
}

Var segment_softmax(Var scores, std::vector<std::size_t> offsets) {
  const Matrix& x = scores.value();
  require_shape(x.cols() == 1, "segment_softmax expects a column of scores");
  check_offsets(offsets, x.rows(), "segment_softmax");
  Matrix out(x.rows(), 1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto lo = offsets[s], hi = offsets[s + 1];
    if (lo == hi) continue;
    double m = x[lo];
    for (auto r = lo; r < hi; ++r) m = std::max(m, x[r]);
    double z = 0.0;
    for (auto r = lo; r < hi; ++r) z += (out[r] = std::exp(x[r] - m));
    for (auto r = lo; r < hi; ++r) out[r] /= z;
  }
  auto off = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  return scores.tape->push(std::move(out), {scores}, [scores, off](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& y = t.value(self);
    Matrix& ga = t.grad(scores);
    for (std::size_t s = 0; s + 1 < off->size(); ++s) {
      double dot = 0.0;
      for (auto r = (*off)[s]; r < (*off)[s + 1]; ++r) dot += g[r] * y[r];
      for (auto r = (*off)[s]; r < (*off)[s + 1]; ++r) ga[r] += y[r] * (g[r] - dot);
    }
  });
}

Var segment_attention(Var q, Var k, Var v, std::vector<std::size_t> offsets, std::size_t heads) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  check_same(qv, kv, "segment_attention q/k");
  check_same(qv, vv, "segment_attention q/v");
  check_offsets(offsets, qv.rows(), "segment_attention");
  const std::size_t d = qv.cols();
  require_shape(heads > 0 && d % heads == 0, "head count must divide the width");
  const std::size_t dh = d / heads;
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));

  // probs[h] holds, per segment, an m x m block stored contiguously.
  std::vector<std::size_t> block_start(offsets.size(), 0);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto m = offsets[s + 1] - offsets[s];
    block_start[s + 1] = block_start[s] + m * m;
  }
  auto probs = std::make_shared<std::vector<double>>(heads * block_start.back());
  Matrix out(qv.rows(), d);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const auto lo = offsets[s], m = offsets[s + 1] - offsets[s];
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs->data() + h * block_start.back() + block_start[s];
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < m; ++i) {
        double mx = -1e300;
        for (std::size_t j = 0; j < m; ++j) {
          double sc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) sc += qv(lo + i, c0 + c) * kv(lo + j, c0 + c);
          sc *= scale_f;
          p[i * m + j] = sc;
          mx = std::max(mx, sc);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) z += (p[i * m + j] = std::exp(p[i * m + j] - mx));
        for (std::size_t j = 0; j < m; ++j) p[i * m + j] /= z;
        for (std::size_t j = 0; j < m; ++j) {
          const double w = p[i * m + j];
          for (std::size_t c = 0; c < dh; ++c) out(lo + i, c0 + c) += w * vv(lo + j, c0 + c);
        }
      }
    }
  }
  auto off = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
  auto starts = std::make_shared<std::vector<std::size_t>>(std::move(block_start));
  return q.tape->push(std::move(out), {q, k, v}, [q, k, v, off, starts, probs, heads, dh, scale_f](Tape& t, std::uint32_t self) {
    const Matrix& g = t.grad(self);
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
    Matrix* dq = gq ? &t.grad(q) : nullptr;
    Matrix* dk = gk ? &t.grad(k) : nullptr;
    Matrix* dv = gv ? &t.grad(v) : nullptr;
    std::vector<double> dp, ds;
    for (std::size_t s = 0; s + 1 < off->size(); ++s) {
      const auto lo = (*off)[s], m = (*off)[s + 1] - (*off)[s];
      dp.assign(m * m, 0.0);
      ds.assign(m * m, 0.0);
      for (std::size_t h = 0; h < heads; ++h) {
        const double* p = probs->data() + h * starts->back() + (*starts)[s];
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            double acc_dp = 0.0;
            for (std::size_t c = 0; c < dh; ++c) acc_dp += g(lo + i, c0 + c) * vv(lo + j, c0 + c);
            dp[i * m + j] = acc_dp;
            if (dv) {
              const double w = p[i * m + j];
              for (std::size_t c = 0; c < dh; ++c) (*dv)(lo + j, c0 + c) += w * g(lo + i, c0 + c);
            }
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < m; ++j) dot += p[i * m + j] * dp[i * m + j];
          for (std::size_t j = 0; j < m; ++j) ds[i * m + j] = p[i * m + j] * (dp[i * m + j] - dot) * scale_f;
        }
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double w = ds[i * m + j];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < dh; ++c) {
              if (dq) (*dq)(lo + i, c0 + c) += w * kv(lo + j, c0 + c);
              if (dk) (*dk)(lo + j, c0 + c) += w * qv(lo + i, c0 + c);
            }
          }
        }
      }
    }
  });
}

Var linear_map(Var a, std::function<Matrix(const Matrix&)> forward,
               std::function<Matrix(const Matrix&)> adjoint) {
  Matrix out = forward(a.value());
  return a.tape->push(std::move(out), {a}, [a, adj = std::move(adjoint)](Tape& t, std::uint32_t self) {
    Matrix back = adj(t.grad(self));
    acc(t.grad(a), back);
  });
}

Var info_nce(Var logits, std::vector<std::size_t> positive, std::vector<std::uint8_t> include) {
  const Matrix& x = logits.value();
  require_shape(positive.size() == x.rows(), "info_nce: one positive column per row");
  require_shape(include.empty() || include.size() == x.size(), "info_nce: include mask shape");
  auto inc = [&include, &x](std::size_t r, std::size_t c) {
    return include.empty() || include[r * x.cols() + c] != 0;
  };
  auto soft = std::make_shared<Matrix>(x.rows(), x.cols());
  double loss = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    require_shape(positive[r] < x.cols(), "info_nce: positive column out of range");
    double mx = -1e300;
    bool any = false;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (inc(r, c)) mx = std::max(mx, x(r, c)), any = true;
    }
    if (!any) throw ValidationError("info_nce: empty denominator");
    double z = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      if (inc(r, c)) z += ((*soft)(r, c) = std::exp(x(r, c) - mx));
    }
    for (std::size_t c = 0; c < x.cols(); ++c) (*soft)(r, c) /= z;
    loss += mx + std::log(z) - x(r, positive[r]);
  }
  auto pos = std::make_shared<std::vector<std::size_t>>(std::move(positive));
  return logits.tape->push(Matrix(1, 1, loss), {logits}, [logits, soft, pos](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    Matrix& gl = t.grad(logits);
    for (std::size_t r = 0; r < gl.rows(); ++r) {
      for (std::size_t c = 0; c < gl.cols(); ++c) gl(r, c) += g * (*soft)(r, c);
      gl(r, (*pos)[r]) -= g;
    }
  });
}

// ---------------------------------------------------------------------------
// Optimisers

void sgd_step(ParamStore& store, double lr) {
  for (auto& [name, t] : store.tensors()) {
    if (t.requires_grad && !store.frozen(name) && lr != 0.0) {
      for (std::size_t i = 0; i < t.value.size(); ++i) t.value[i] -= lr * t.grad[i];
    }
    t.zero_grad();
  }
}

void Adam::step(ParamStore& store) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& [name, t] : store.tensors()) {
    if (t.requires_grad && !store.frozen(name) && lr_ != 0.0) {
      auto& [m, v] = moments_[name];
      if (m.size() != t.value.size()) {
        m.assign(t.value.size(), 0.0);
        v.assign(t.value.size(), 0.0);
      }
      for (std::size_t i = 0; i < t.value.size(); ++i) {
        const double g = t.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        t.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
    t.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, ParamStore& store, double h, double floor,
                           std::size_t max_coords_per_tensor) {
  if (!(h > 0.0)) throw ConfigError("grad_check step must be positive");
  auto eval = [&] {
    Tape tape;
    const double v = f(tape).value()[0];
    if (!std::isfinite(v)) throw NumericalError("grad_check aborted: f is not finite");
    return v;
  };
  store.zero_grad();
  {
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.value()[0])) throw NumericalError("grad_check aborted: f is not finite");
    tape.backward(loss);
  }
  GradCheckResult result;
  for (auto& [name, t] : store.tensors()) {
    if (!t.requires_grad || store.frozen(name)) continue;
    const Matrix analytic = t.grad;
    const std::size_t n = t.value.size();
    const std::size_t stride =
        (max_coords_per_tensor == 0 || n <= max_coords_per_tensor) ? 1 : (n + max_coords_per_tensor - 1) / max_coords_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = t.value[i];
      t.value[i] = orig + h;
      const double fp = eval();
      t.value[i] = orig - h;
      const double fm = eval();
      t.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++result.coordinates;
      if (rel > result.max_rel_error || result.worst_param.empty()) {
        if (rel >= result.max_rel_error) {
          result.max_rel_error = rel;
          result.worst_param = name;
          result.worst_index = i;
        }
      }
    }
  }
  store.zero_grad();
  return result;
}

// ---------------------------------------------------------------------------
// Serialisation

namespace {

constexpr char kMagic[8] = {'M', 'O', 'P', 'P', 'A', 'R', 'A', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_str(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("truncated checkpoint");
  return v;
}
std::string get_str(std::istream& in) {
  const auto n = get_u64(in);
  if (n > (1ull << 32)) throw Error("corrupt checkpoint string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw Error("truncated checkpoint");
  return s;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamStore& store,
                 const std::map<std::string, std::string>& metadata) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    put_u64(out, store.tensors().size());
    for (const auto& [name, t] : store.tensors()) {
      put_str(out, name);
      put_u64(out, t.value.rows());
      put_u64(out, t.value.cols());
      const char trainable = t.requires_grad ? 1 : 0;
      out.write(&trainable, 1);
      out.write(reinterpret_cast<const char*>(t.value.data()),
                static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    put_u64(out, store.frozen_names().size());
    for (const auto& name : store.frozen_names()) put_str(out, name);
    put_u64(out, metadata.size());
    for (const auto& [k, v] : metadata) {
      put_str(out, k);
      put_str(out, v);
    }
    if (!out) throw Error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ParamStore load_params(const std::filesystem::path& path, std::map<std::string, std::string>* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw Error("not a checkpoint: " + path.string());
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  ParamStore store;
  const auto count = get_u64(in);
  for (std::uint64_t k = 0; k < count; ++k) {
    auto name = get_str(in);
    const auto rows = get_u64(in), cols = get_u64(in);
    char trainable = 0;
    in.read(&trainable, 1);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in) throw Error("truncated checkpoint");
    auto& t = store.add(name, std::move(m));
    t.requires_grad = trainable != 0;
  }
  const auto n_frozen = get_u64(in);
  for (std::uint64_t k = 0; k < n_frozen; ++k) store.freeze(get_str(in));
  const auto n_meta = get_u64(in);
  for (std::uint64_t k = 0; k < n_meta; ++k) {
    auto key = get_str(in);
    auto value = get_str(in);
    if (metadata) (*metadata)[key] = value;
  }
  return store;
}

}  // namespace mop::ad
