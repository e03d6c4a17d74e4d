#include "coberl/numerics/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "coberl/error.hpp"

namespace coberl::numerics {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

MatMap as_mat(Tensor& t) { return MatMap(t.data(), t.rows(), t.cols()); }
ConstMatMap as_mat(const Tensor& t) { return ConstMatMap(t.data(), t.rows(), t.cols()); }

// Message is only built on failure.
#define require(ok, op, detail)                                          \
  do {                                                                   \
    if (!(ok)) throw ConfigError(std::string(op) + ": " + (detail));     \
  } while (0)

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), op, "shape mismatch " + dims(a) + " vs " + dims(b));
}

// Elementwise op whose derivative is expressed through (x, y = f(x)).
template <typename F, typename D>
Var unary(Var a, F f, D dydx) {
  const Tensor& x = a.value();
  Tensor y({x.rows(), x.cols()});
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape->record(std::move(y), {a}, [a, dydx](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += g[i] * dydx(x[i], y[i]);
    }
  });
}

}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (value.rank() != 2) value = value.reshaped({value.rows(), value.cols()});
  Node node;
  node.value = std::move(value);
  node.requires_grad = record_ && requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Tensor({node.value.rows(), node.value.cols()});
  return node.grad;
}

Tensor* Tape::grad_buffer(Var v) {
  Node& node = nodes_[v.id];
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty() && node.value.size() > 0) node.grad = Tensor({node.value.rows(), node.value.cols()});
  return &node.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    node.requires_grad = std::any_of(parents.begin(), parents.end(),
                                     [this](Var p) { return nodes_[p.id].requires_grad; });
    if (node.requires_grad) node.backward = std::move(fn);
  }
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::backward(Var loss) {
  if (!record_) throw HarnessError("backward() on a tape built without recording");
  const Tensor& v = value(loss);
  if (v.size() != 1) throw InputError("backward() needs a scalar loss, got " + dims(v));
  if (!nodes_[loss.id].requires_grad) return;
  nodes_[loss.id].grad = Tensor({1, 1}, 1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.backward || node.grad.empty()) continue;
    node.backward(*this, node.value, node.grad);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.rows(), "matmul", dims(A) + " x " + dims(B));
  Tensor out({A.rows(), B.cols()});
  if (out.size() > 0 && A.cols() > 0) as_mat(out).noalias() = as_mat(A) * as_mat(B);
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) as_mat(*ga).noalias() += as_mat(g) * as_mat(t.value(b)).transpose();
    if (Tensor* gb = t.grad_buffer(b)) as_mat(*gb).noalias() += as_mat(t.value(a)).transpose() * as_mat(g);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require(A.cols() == B.cols(), "matmul_nt", dims(A) + " x " + dims(B) + "^T");
  Tensor out({A.rows(), B.rows()});
  if (out.size() > 0) as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) as_mat(*ga).noalias() += as_mat(g) * as_mat(t.value(b));
    if (Tensor* gb = t.grad_buffer(b)) as_mat(*gb).noalias() += as_mat(g).transpose() * as_mat(t.value(a));
  });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "add");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    for (Var p : {a, b}) {
      if (Tensor* gp = t.grad_buffer(p))
        for (std::size_t i = 0; i < g.size(); ++i) (*gp)[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "sub");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gb = t.grad_buffer(b))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_same_shape(A, B, "mul");
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& B = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B[i];
    }
    if (Tensor* gb = t.grad_buffer(b)) {
      const Tensor& A = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var add_row(Var a, Var row) {
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  require(R.rows() == 1 && R.cols() == A.cols(), "add_row", dims(A) + " + " + dims(R));
  Tensor out = A;
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += R[j];
  return a.tape->record(std::move(out), {a, row}, [a, row, n, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gr = t.grad_buffer(row))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gr)[j] += g(i, j);
  });
}

Var add_col(Var a, Var col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  require(C.cols() == 1 && C.rows() == A.rows(), "add_col", dims(A) + " + " + dims(C));
  Tensor out = A;
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) += C[i];
  return a.tape->record(std::move(out), {a, col}, [a, col, n, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (Tensor* gc = t.grad_buffer(col))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gc)[i] += g(i, j);
  });
}

Var mul_col(Var a, Var col) {
  const Tensor& A = a.value();
  const Tensor& C = col.value();
  require(C.cols() == 1 && C.rows() == A.rows(), "mul_col", dims(A) + " * " + dims(C));
  Tensor out = A;
  const std::size_t n = A.rows(), m = A.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out(i, j) *= C[i];
  return a.tape->record(std::move(out), {a, col}, [a, col, n, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      const Tensor& C = t.value(col);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += g(i, j) * C[i];
    }
    if (Tensor* gc = t.grad_buffer(col)) {
      const Tensor& A = t.value(a);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*gc)[i] += g(i, j) * A(i, j);
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape->record(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (double& v : ga->values()) v += g[0];
  });
}

Var mean_all(Var a) {
  const std::size_t n = a.value().size();
  require(n > 0, "mean_all", "empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var sum_cols(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += A(i, j);
  return a.tape->record(std::move(out), {a}, [a, n, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += g[i];
  });
}

Var mean_cols(Var a) {
  const std::size_t m = a.value().cols();
  require(m > 0, "mean_cols", "no columns");
  return scale(sum_cols(a), 1.0 / static_cast<double>(m));
}

// ---------------------------------------------------------------------------
// Row-wise normalisations

Var softmax_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out(i, j) = std::exp(A(i, j) - mx));
    for (std::size_t j = 0; j < m; ++j) out(i, j) /= z;
  }
  return a.tape->record(std::move(out), {a}, [a, n, m](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < m; ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += y(i, j) * (g(i, j) - dot);
      }
    }
  });
}

Var log_softmax_rows(Var a) {
  const Tensor& A = a.value();
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, A(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(A(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out(i, j) = A(i, j) - lse;
  }
  return a.tape->record(std::move(out), {a}, [a, n, m](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < n; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < m; ++j) gsum += g(i, j);
        for (std::size_t j = 0; j < m; ++j) (*ga)(i, j) += g(i, j) - std::exp(y(i, j)) * gsum;
      }
    }
  });
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), m = X.cols();
  require(gamma.value().size() == m && beta.value().size() == m, "layer_norm_rows",
          "affine width does not match " + dims(X));
  const Tensor& G = gamma.value();
  const Tensor& B = beta.value();
  auto xhat = std::make_shared<Tensor>(Shape{n, m});
  auto rstd = std::make_shared<std::vector<double>>(n);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += X(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
    var /= static_cast<double>(m);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < m; ++j) {
      const double h = (X(i, j) - mu) * r;
      (*xhat)(i, j) = h;
      out(i, j) = h * G[j] + B[j];
    }
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat, rstd, n, m](Tape& t, const Tensor&, const Tensor& g) {
                          const Tensor& G = t.value(gamma);
                          if (Tensor* gg = t.grad_buffer(gamma))
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) (*gg)[j] += g(i, j) * (*xhat)(i, j);
                          if (Tensor* gb = t.grad_buffer(beta))
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < m; ++j) (*gb)[j] += g(i, j);
                          if (Tensor* gx = t.grad_buffer(x)) {
                            const double inv_m = 1.0 / static_cast<double>(m);
                            for (std::size_t i = 0; i < n; ++i) {
                              double mean_d = 0.0, mean_dx = 0.0;
                              for (std::size_t j = 0; j < m; ++j) {
                                const double d = g(i, j) * G[j];
                                mean_d += d;
                                mean_dx += d * (*xhat)(i, j);
                              }
                              mean_d *= inv_m;
                              mean_dx *= inv_m;
                              for (std::size_t j = 0; j < m; ++j) {
                                const double d = g(i, j) * G[j];
                                (*gx)(i, j) += (*rstd)[i] * (d - mean_d - (*xhat)(i, j) * mean_dx);
                              }
                            }
                          }
                        });
}

Var l2_normalize_rows(Var x, double eps) {
  const Tensor& X = x.value();
  const std::size_t n = X.rows(), m = X.cols();
  auto inv = std::make_shared<std::vector<double>>(n);
  auto clamped = std::make_shared<std::vector<std::uint8_t>>(n);
  Tensor out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < m; ++j) ss += X(i, j) * X(i, j);
    (*clamped)[i] = ss <= eps;
    const double r = 1.0 / std::sqrt(std::max(ss, eps));
    (*inv)[i] = r;
    for (std::size_t j = 0; j < m; ++j) out(i, j) = X(i, j) * r;
  }
  return x.tape->record(std::move(out), {x}, [x, inv, clamped, n, m](Tape& t, const Tensor& y, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x)) {
      for (std::size_t i = 0; i < n; ++i) {
        const double r = (*inv)[i];
        double dot = 0.0;
        if (!(*clamped)[i])
          for (std::size_t j = 0; j < m; ++j) dot += y(i, j) * g(i, j);
        for (std::size_t j = 0; j < m; ++j) (*gx)(i, j) += r * (g(i, j) - y(i, j) * dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structure

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t n = parts[0].rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (Var p : parts) {
    require(p.rows() == n, "concat_cols", "row count mismatch");
    offsets.push_back(total);
    total += p.cols();
  }
  Tensor out({n, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(P.data() + i * P.cols(), P.cols(), out.data() + i * total + offsets[k]);
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts,
                               [saved, offsets, n, total](Tape& t, const Tensor&, const Tensor& g) {
                                 for (std::size_t k = 0; k < saved.size(); ++k) {
                                   if (Tensor* gp = t.grad_buffer(saved[k])) {
                                     const std::size_t c = gp->cols();
                                     for (std::size_t i = 0; i < n; ++i)
                                       for (std::size_t j = 0; j < c; ++j) (*gp)(i, j) += g[i * total + offsets[k] + j];
                                   }
                                 }
                               });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows", "no inputs");
  const std::size_t m = parts[0].cols();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (Var p : parts) {
    require(p.cols() == m || p.rows() == 0, "concat_rows", "column count mismatch");
    offsets.push_back(total);
    total += p.rows();
  }
  Tensor out({total, m});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& P = parts[k].value();
    std::copy_n(P.data(), P.size(), out.data() + offsets[k] * m);
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return parts[0].tape->record(std::move(out), parts, [saved, offsets, m](Tape& t, const Tensor&, const Tensor& g) {
    for (std::size_t k = 0; k < saved.size(); ++k) {
      if (Tensor* gp = t.grad_buffer(saved[k]))
        for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += g[offsets[k] * m + i];
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require(start + count <= A.cols(), "slice_cols", "range out of bounds for " + dims(A));
  const std::size_t n = A.rows(), m = A.cols();
  Tensor out({n, count});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(A.data() + i * m + start, count, out.data() + i * count);
  return a.tape->record(std::move(out), {a}, [a, start, count, n, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count; ++j) (*ga)[i * m + start + j] += g[i * count + j];
  });
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  const Tensor& A = a.value();
  require(start + count <= A.rows(), "slice_rows", "range out of bounds for " + dims(A));
  const std::size_t m = A.cols();
  Tensor out({count, m});
  std::copy_n(A.data() + start * m, count * m, out.data());
  return a.tape->record(std::move(out), {a}, [a, start, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[start * m + i] += g[i];
  });
}

Var select_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& A = a.value();
  const std::size_t m = A.cols();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  Tensor out({idx.size(), m});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < A.rows(), "select_rows", "row index out of range");
    std::copy_n(A.data() + idx[i] * m, m, out.data() + i * m);
  }
  return a.tape->record(std::move(out), {a}, [a, idx, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < m; ++j) (*ga)[idx[i] * m + j] += g[i * m + j];
  });
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tensor out = a.value().reshaped({rows, cols});
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
  });
}

Var gather_cols(Var a, std::span<const std::size_t> col_per_row) {
  const Tensor& A = a.value();
  require(col_per_row.size() == A.rows(), "gather_cols", "index count does not match rows");
  const std::size_t m = A.cols();
  std::vector<std::size_t> idx(col_per_row.begin(), col_per_row.end());
  Tensor out({idx.size(), 1});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < m, "gather_cols", "column index out of range");
    out[i] = A(i, idx[i]);
  }
  return a.tape->record(std::move(out), {a}, [a, idx, m](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* ga = t.grad_buffer(a))
      for (std::size_t i = 0; i < idx.size(); ++i) (*ga)[i * m + idx[i]] += g[i];
  });
}

Var replace_rows(Var x, Var token, std::span<const std::uint8_t> mask) {
  const Tensor& X = x.value();
  const Tensor& T = token.value();
  require(T.rows() == 1 && T.cols() == X.cols(), "replace_rows", "token width mismatch");
  require(mask.size() == X.rows(), "replace_rows", "mask length mismatch");
  const std::size_t m = X.cols();
  std::vector<std::uint8_t> keep(mask.begin(), mask.end());
  Tensor out = X;
  for (std::size_t i = 0; i < keep.size(); ++i)
    if (keep[i]) std::copy_n(T.data(), m, out.data() + i * m);
  return x.tape->record(std::move(out), {x, token}, [x, token, keep, m](Tape& t, const Tensor&, const Tensor& g) {
    Tensor* gx = t.grad_buffer(x);
    Tensor* gt = t.grad_buffer(token);
    for (std::size_t i = 0; i < keep.size(); ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        if (keep[i]) {
          if (gt) (*gt)[j] += g[i * m + j];
        } else if (gx) {
          (*gx)[i * m + j] += g[i * m + j];
        }
      }
    }
  });
}

Tensor Tape::stop_gradient_value(const Tensor& value) {
  if (sg_replay_) {
    require(sg_next_ < sg_replay_->size(), "stop_gradient", "more calls than captured values");
    const Tensor& v = (*sg_replay_)[sg_next_++];
    require(v.shape() == value.shape(), "stop_gradient", "replayed shape " + dims(v) + " vs " + dims(value));
    return v;
  }
  if (sg_sink_) sg_sink_->push_back(value);
  return value;
}

Var stop_gradient(Var a) { return a.tape->record(a.tape->stop_gradient_value(a.value()), {}, {}); }

// ---------------------------------------------------------------------------
// Convolution support

std::size_t conv_output_extent(std::size_t extent, std::size_t kernel, std::size_t stride) {
  const std::size_t pad = (kernel - 1) / 2;
  return (extent + 2 * pad - kernel) / stride + 1;
}

Var im2col(Var x, const ImageLayout& layout, std::size_t kernel, std::size_t stride) {
  const Tensor& X = x.value();
  const std::size_t B = layout.batch, H = layout.height, W = layout.width, C = layout.channels;
  require(X.rows() == B * H * W && X.cols() == C, "im2col", "input " + dims(X) + " does not match layout");
  const std::size_t pad = (kernel - 1) / 2;
  const std::size_t Ho = conv_output_extent(H, kernel, stride);
  const std::size_t Wo = conv_output_extent(W, kernel, stride);
  const std::size_t width = kernel * kernel * C;
  // src[r * width + c] = input element index, or npos for padding.
  auto src = std::make_shared<std::vector<std::size_t>>(B * Ho * Wo * width, SIZE_MAX);
  Tensor out({B * Ho * Wo, width});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const std::size_t r = (b * Ho + oy) * Wo + ox;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
            const std::size_t in_row = (b * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix);
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t k = r * width + (ky * kernel + kx) * C + c;
              (*src)[k] = in_row * C + c;
              out[k] = X[in_row * C + c];
            }
          }
      }
  return x.tape->record(std::move(out), {x}, [x, src](Tape& t, const Tensor&, const Tensor& g) {
    if (Tensor* gx = t.grad_buffer(x))
      for (std::size_t k = 0; k < src->size(); ++k)
        if ((*src)[k] != SIZE_MAX) (*gx)[(*src)[k]] += g[k];
  });
}

Var group_norm(Var x, Var gamma, Var beta, std::size_t batch, std::size_t channels_per_group, double eps) {
  const Tensor& X = x.value();
  const std::size_t C = X.cols();
  require(batch > 0 && X.rows() % batch == 0, "group_norm", "rows not divisible by batch");
  require(channels_per_group > 0 && C % channels_per_group == 0, "group_norm",
          "channels " + std::to_string(C) + " not divisible by group size " + std::to_string(channels_per_group));
  require(gamma.value().size() == C && beta.value().size() == C, "group_norm", "affine width mismatch");
  const std::size_t P = X.rows() / batch;
  const std::size_t G = C / channels_per_group;
  const double count = static_cast<double>(P * channels_per_group);
  const Tensor& Ga = gamma.value();
  const Tensor& Be = beta.value();
  auto xhat = std::make_shared<Tensor>(Shape{X.rows(), C});
  auto rstd = std::make_shared<std::vector<double>>(batch * G);
  Tensor out({X.rows(), C});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t gi = 0; gi < G; ++gi) {
      double mu = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = gi * channels_per_group; c < (gi + 1) * channels_per_group; ++c) mu += X(b * P + p, c);
      mu /= count;
      double var = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = gi * channels_per_group; c < (gi + 1) * channels_per_group; ++c) {
          const double d = X(b * P + p, c) - mu;
          var += d * d;
        }
      var /= count;
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[b * G + gi] = r;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t c = gi * channels_per_group; c < (gi + 1) * channels_per_group; ++c) {
          const double h = (X(b * P + p, c) - mu) * r;
          (*xhat)(b * P + p, c) = h;
          out(b * P + p, c) = h * Ga[c] + Be[c];
        }
    }
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, batch, P, G, C, channels_per_group, count](Tape& t, const Tensor&, const Tensor& g) {
        const Tensor& Ga = t.value(gamma);
        if (Tensor* gg = t.grad_buffer(gamma))
          for (std::size_t r = 0; r < batch * P; ++r)
            for (std::size_t c = 0; c < C; ++c) (*gg)[c] += g(r, c) * (*xhat)(r, c);
        if (Tensor* gb = t.grad_buffer(beta))
          for (std::size_t r = 0; r < batch * P; ++r)
            for (std::size_t c = 0; c < C; ++c) (*gb)[c] += g(r, c);
        if (Tensor* gx = t.grad_buffer(x)) {
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t gi = 0; gi < G; ++gi) {
              double mean_d = 0.0, mean_dx = 0.0;
              const std::size_t c0 = gi * channels_per_group, c1 = c0 + channels_per_group;
              for (std::size_t p = 0; p < P; ++p)
                for (std::size_t c = c0; c < c1; ++c) {
                  const double d = g(b * P + p, c) * Ga[c];
                  mean_d += d;
                  mean_dx += d * (*xhat)(b * P + p, c);
                }
              mean_d /= count;
              mean_dx /= count;
              const double r = (*rstd)[b * G + gi];
              for (std::size_t p = 0; p < P; ++p)
                for (std::size_t c = c0; c < c1; ++c) {
                  const double d = g(b * P + p, c) * Ga[c];
                  (*gx)(b * P + p, c) += r * (d - mean_d - (*xhat)(b * P + p, c) * mean_dx);
                }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Relative multi-head attention

bool AttentionLayout::allowed(std::size_t i, std::size_t j) const {
  if (!causal) return true;
  // distance = i + memory_len - j must lie in [0, window]
  if (j > i + memory_len) return false;
  return i + memory_len - j <= window;
}

Var relative_attention(Var q, Var k_mem, Var k_seg, Var v_mem, Var v_seg, Var pos, Var u, Var w,
                       const AttentionLayout& L) {
  const std::size_t B = L.batch, T = L.query_len, M = L.memory_len, H = L.num_heads, dh = L.head_size;
  const std::size_t HD = H * dh;
  const std::size_t S = L.key_len();
  const std::size_t D = L.num_distances();
  require(q.rows() == B * T && q.cols() == HD, "relative_attention", "query shape " + dims(q.value()));
  require(k_seg.rows() == B * T && k_seg.cols() == HD && v_seg.rows() == B * T && v_seg.cols() == HD,
          "relative_attention", "segment key/value shape");
  require(k_mem.rows() == B * M && v_mem.rows() == B * M && (M == 0 || (k_mem.cols() == HD && v_mem.cols() == HD)),
          "relative_attention", "memory key/value shape");
  require(pos.rows() == D && pos.cols() == HD, "relative_attention", "position table shape " + dims(pos.value()));
  require(u.value().size() == HD && w.value().size() == HD, "relative_attention", "bias width");

  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor& Q = q.value();
  const Tensor& KM = k_mem.value();
  const Tensor& KS = k_seg.value();
  const Tensor& VM = v_mem.value();
  const Tensor& VS = v_seg.value();
  const Tensor& P = pos.value();
  const Tensor& U = u.value();
  const Tensor& Wb = w.value();

  auto key_row = [&](const Tensor& mem, const Tensor& seg, std::size_t b, std::size_t j,
                     std::size_t h) -> const double* {
    return j < M ? mem.data() + (b * M + j) * HD + h * dh : seg.data() + (b * T + (j - M)) * HD + h * dh;
  };

  // Attention weights, [B, H, T, S]; masked entries are exactly zero.
  auto probs = std::make_shared<std::vector<double>>(B * H * T * S, 0.0);
  Tensor out({B * T, HD});
  std::vector<double> scores(S);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        const double* qi = Q.data() + (b * T + i) * HD + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < S; ++j) {
          if (!L.allowed(i, j)) continue;
          const double* kj = key_row(KM, KS, b, j, h);
          const double* pj = P.data() + L.distance_index(i, j) * HD + h * dh;
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e)
            s += (qi[e] + U[h * dh + e]) * kj[e] + (qi[e] + Wb[h * dh + e]) * pj[e];
          scores[j] = s * sc;
          mx = std::max(mx, scores[j]);
        }
        double* a = probs->data() + ((b * H + h) * T + i) * S;
        double z = 0.0;
        for (std::size_t j = 0; j < S; ++j) {
          if (!L.allowed(i, j)) continue;
          z += (a[j] = std::exp(scores[j] - mx));
        }
        double* oi = out.data() + (b * T + i) * HD + h * dh;
        for (std::size_t j = 0; j < S; ++j) {
          if (!L.allowed(i, j)) continue;
          a[j] /= z;
          const double* vj = key_row(VM, VS, b, j, h);
          for (std::size_t e = 0; e < dh; ++e) oi[e] += a[j] * vj[e];
        }
      }

  const Var parents[] = {q, k_mem, k_seg, v_mem, v_seg, pos, u, w};
  return q.tape->record(
      std::move(out), parents,
      [q, k_mem, k_seg, v_mem, v_seg, pos, u, w, L, probs, sc](Tape& t, const Tensor&, const Tensor& g) {
        const std::size_t B = L.batch, T = L.query_len, M = L.memory_len, H = L.num_heads, dh = L.head_size;
        const std::size_t HD = H * dh, S = L.key_len();
        const Tensor& Q = t.value(q);
        const Tensor& KM = t.value(k_mem);
        const Tensor& KS = t.value(k_seg);
        const Tensor& VM = t.value(v_mem);
        const Tensor& VS = t.value(v_seg);
        const Tensor& P = t.value(pos);
        const Tensor& U = t.value(u);
        const Tensor& Wb = t.value(w);
        Tensor* gq = t.grad_buffer(q);
        Tensor* gkm = t.grad_buffer(k_mem);
        Tensor* gks = t.grad_buffer(k_seg);
        Tensor* gvm = t.grad_buffer(v_mem);
        Tensor* gvs = t.grad_buffer(v_seg);
        Tensor* gp = t.grad_buffer(pos);
        Tensor* gu = t.grad_buffer(u);
        Tensor* gw = t.grad_buffer(w);
        auto row_of = [&](const Tensor& mem, const Tensor& seg, std::size_t b, std::size_t j,
                          std::size_t h) -> const double* {
          return j < M ? mem.data() + (b * M + j) * HD + h * dh : seg.data() + (b * T + (j - M)) * HD + h * dh;
        };
        auto grad_row = [&](Tensor* mem, Tensor* seg, std::size_t b, std::size_t j, std::size_t h) -> double* {
          Tensor* target = j < M ? mem : seg;
          if (!target) return nullptr;
          return j < M ? target->data() + (b * M + j) * HD + h * dh : target->data() + (b * T + (j - M)) * HD + h * dh;
        };
        std::vector<double> dA(S);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < T; ++i) {
              const double* a = probs->data() + ((b * H + h) * T + i) * S;
              const double* gi = g.data() + (b * T + i) * HD + h * dh;
              const double* qi = Q.data() + (b * T + i) * HD + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < S; ++j) {
                if (!L.allowed(i, j)) continue;
                const double* vj = row_of(VM, VS, b, j, h);
                double s = 0.0;
                for (std::size_t e = 0; e < dh; ++e) s += gi[e] * vj[e];
                dA[j] = s;
                dot += a[j] * s;
                if (double* gv = grad_row(gvm, gvs, b, j, h))
                  for (std::size_t e = 0; e < dh; ++e) gv[e] += a[j] * gi[e];
              }
              for (std::size_t j = 0; j < S; ++j) {
                if (!L.allowed(i, j)) continue;
                const double ds = a[j] * (dA[j] - dot) * sc;
                if (ds == 0.0) continue;
                const double* kj = row_of(KM, KS, b, j, h);
                const std::size_t d = L.distance_index(i, j);
                const double* pj = P.data() + d * HD + h * dh;
                for (std::size_t e = 0; e < dh; ++e) {
                  if (gq) (*gq)[(b * T + i) * HD + h * dh + e] += ds * (kj[e] + pj[e]);
                  if (gu) (*gu)[h * dh + e] += ds * kj[e];
                  if (gw) (*gw)[h * dh + e] += ds * pj[e];
                  if (gp) (*gp)[d * HD + h * dh + e] += ds * (qi[e] + Wb[h * dh + e]);
                }
                if (double* gk = grad_row(gkm, gks, b, j, h))
                  for (std::size_t e = 0; e < dh; ++e) gk[e] += ds * (qi[e] + U[h * dh + e]);
              }
            }
      });
}

}  // namespace coberl::numerics
