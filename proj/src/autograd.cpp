// SPDX-License-Identifier: Apache-2.0
#include "bractive/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "bractive/ops.hpp"

namespace bractive::ag {

using num::gemm;

const Tensor& Var::value() const { return g->value(id); }
const Tensor& Var::grad() const { return g->grad(id); }

Var Graph::constant(Tensor t) {
  require_finite(t, "constant");
  nodes_.push_back(Node{std::move(t), {}, false, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::leaf(Tensor t) {
  require_finite(t, "leaf");
  nodes_.push_back(Node{std::move(t), {}, true, false, {}});
  return Var{this, nodes_.size() - 1};
}

Var Graph::push(Tensor value, std::span<const Var> inputs, BackwardFn fn, std::string_view op) {
  if (!value.all_finite()) throw ValueError("non-finite value produced by " + std::string(op));
  bool rg = false;
  for (auto v : inputs) {
    if (v.g != this) throw InvariantError(std::string(op) + ": input belongs to a different graph");
    rg = rg || nodes_[v.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Graph::grad(std::size_t id) const {
  static const Tensor none;
  const auto& n = nodes_[id];
  return n.has_grad ? n.grad : none;
}

Tensor& Graph::grad_ref(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var root) {
  if (root.g != this) throw InvariantError("backward: root from another graph");
  if (nodes_[root.id].value.size() != 1) throw DimensionError("backward: root must be a scalar");
  grad_ref(root.id)[0] += 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

namespace {

bool needs(Graph& g, Var v) { return g.requires_grad(v.id); }

void need_matrix(Var v, const char* op) {
  if (v.value().rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(v.value().shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  need_matrix(a, "matmul");
  need_matrix(b, "matmul");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.dim(1) != B.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor C({m, n});
  gemm(false, false, m, n, k, 1.0, A.ptr(), B.ptr(), 0.0, C.ptr());
  return a.g->push(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& dC) {
    if (needs(g, a)) gemm(false, true, m, k, n, 1.0, dC.ptr(), g.value(b.id).ptr(), 1.0, g.grad_ref(a.id).ptr());
    if (needs(g, b)) gemm(true, false, k, n, m, 1.0, g.value(a.id).ptr(), dC.ptr(), 1.0, g.grad_ref(b.id).ptr());
  }, "matmul");
}

Var matmul_nt(Var a, Var b) {
  need_matrix(a, "matmul_nt");
  need_matrix(b, "matmul_nt");
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.dim(1) != B.dim(1))
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()) + "^T");
  std::size_t m = A.dim(0), k = A.dim(1), n = B.dim(0);
  Tensor C({m, n});
  gemm(false, true, m, n, k, 1.0, A.ptr(), B.ptr(), 0.0, C.ptr());
  return a.g->push(std::move(C), {a, b}, [a, b, m, k, n](Graph& g, const Tensor& dC) {
    if (needs(g, a)) gemm(false, false, m, k, n, 1.0, dC.ptr(), g.value(b.id).ptr(), 1.0, g.grad_ref(a.id).ptr());
    if (needs(g, b)) gemm(true, false, n, k, m, 1.0, dC.ptr(), g.value(a.id).ptr(), 1.0, g.grad_ref(b.id).ptr());
  }, "matmul_nt");
}

Var linear(Var x, Var w, Var b) {
  need_matrix(x, "linear");
  need_matrix(w, "linear");
  const Tensor& X = x.value();
  const Tensor& W = w.value();
  std::size_t n = X.dim(0), in = X.dim(1), out = W.dim(1);
  if (W.dim(0) != in)
    throw DimensionError("linear: input " + shape_str(X.shape()) + " does not fit weight " + shape_str(W.shape()));
  if (b.value().size() != out)
    throw DimensionError("linear: bias " + shape_str(b.value().shape()) + " does not fit " + std::to_string(out) +
                         " outputs");
  Tensor Y({n, out});
  const double* bias = b.value().ptr();
  for (std::size_t r = 0; r < n; ++r) std::copy(bias, bias + out, Y.ptr() + r * out);
  gemm(false, false, n, out, in, 1.0, X.ptr(), W.ptr(), 1.0, Y.ptr());
  return x.g->push(std::move(Y), {x, w, b}, [x, w, b, n, in, out](Graph& g, const Tensor& dY) {
    if (needs(g, x)) gemm(false, true, n, in, out, 1.0, dY.ptr(), g.value(w.id).ptr(), 1.0, g.grad_ref(x.id).ptr());
    if (needs(g, w)) gemm(true, false, in, out, n, 1.0, g.value(x.id).ptr(), dY.ptr(), 1.0, g.grad_ref(w.id).ptr());
    if (needs(g, b)) {
      double* db = g.grad_ref(b.id).ptr();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out; ++c) db[c] += dY[r * out + c];
    }
  }, "linear");
}

Var transpose(Var a) {
  need_matrix(a, "transpose");
  return a.g->push(num::transpose(a.value()), {a}, [a](Graph& g, const Tensor& d) {
    add_into(g.grad_ref(a.id), num::transpose(d));
  }, "transpose");
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor c = a.value();
  add_into(c, b.value());
  return a.g->push(std::move(c), {a, b}, [a, b](Graph& g, const Tensor& d) {
    if (needs(g, a)) add_into(g.grad_ref(a.id), d);
    if (needs(g, b)) add_into(g.grad_ref(b.id), d);
  }, "add");
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b.value()[i];
  return a.g->push(std::move(c), {a, b}, [a, b](Graph& g, const Tensor& d) {
    if (needs(g, a)) add_into(g.grad_ref(a.id), d);
    if (needs(g, b)) {
      auto& gb = g.grad_ref(b.id);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] -= d[i];
    }
  }, "sub");
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor c = a.value();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b.value()[i];
  return a.g->push(std::move(c), {a, b}, [a, b](Graph& g, const Tensor& d) {
    if (needs(g, a)) {
      auto& ga = g.grad_ref(a.id);
      const auto& bv = g.value(b.id);
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (needs(g, b)) {
      auto& gb = g.grad_ref(b.id);
      const auto& av = g.value(a.id);
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * av[i];
    }
  }, "mul");
}

Var scale(Var a, double s) {
  Tensor c = a.value();
  for (auto& v : c.data()) v *= s;
  return a.g->push(std::move(c), {a}, [a, s](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * s;
  }, "scale");
}

Var mul_const(Var a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
  return a.g->push(std::move(y), {a}, [a, c](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * c[i];
  }, "mul_const");
}

Var sigmoid(Var a) {
  Tensor y = num::sigmoid(a.value());
  return a.g->push(std::move(y), {a}, [a](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    const auto& x = g.value(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) {
      double s = num::sigmoid(x[i]);
      ga[i] += d[i] * s * (1.0 - s);
    }
  }, "sigmoid");
}

Var gelu(Var a) {
  Tensor y(a.value().shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2));
  return a.g->push(std::move(y), {a}, [a](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    const auto& x = g.value(a.id);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < d.size(); ++i) {
      double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += d[i] * (cdf + x[i] * pdf);
    }
  }, "gelu");
}

Var add_tiled(Var x, Var p) {
  need_matrix(x, "add_tiled");
  need_matrix(p, "add_tiled");
  const auto& X = x.value();
  const auto& P = p.value();
  if (X.dim(1) != P.dim(1) || X.dim(0) % P.dim(0) != 0)
    throw DimensionError("add_tiled: " + shape_str(X.shape()) + " is not a stack of " + shape_str(P.shape()));
  Tensor y = X;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += P[i % P.size()];
  return x.g->push(std::move(y), {x, p}, [x, p](Graph& g, const Tensor& d) {
    if (needs(g, x)) add_into(g.grad_ref(x.id), d);
    if (needs(g, p)) {
      auto& gp = g.grad_ref(p.id);
      for (std::size_t i = 0; i < d.size(); ++i) gp[i % gp.size()] += d[i];
    }
  }, "add_tiled");
}

Var softmax_rows(Var a) {
  need_matrix(a, "softmax_rows");
  Tensor y = num::softmax(a.value(), 1);
  return a.g->push(y, {a}, [a, y](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    std::size_t R = y.dim(0), C = y.dim(1);
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += d[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += y[r * C + c] * (d[r * C + c] - s);
    }
  }, "softmax_rows");
}

Var log_softmax_rows(Var a) {
  need_matrix(a, "log_softmax_rows");
  Tensor y = num::log_softmax(a.value(), 1);
  return a.g->push(y, {a}, [a, y](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    std::size_t R = y.dim(0), C = y.dim(1);
    for (std::size_t r = 0; r < R; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < C; ++c) s += d[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += d[r * C + c] - std::exp(y[r * C + c]) * s;
    }
  }, "log_softmax_rows");
}

Var l2_normalize_rows(Var a, double eps) {
  need_matrix(a, "l2_normalize_rows");
  const auto& X = a.value();
  std::size_t R = X.dim(0), C = X.dim(1);
  Tensor y(X.shape());
  std::vector<double> norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < C; ++c) ss += X[r * C + c] * X[r * C + c];
    norms[r] = std::sqrt(ss);
    double n = std::max(norms[r], eps);
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] = X[r * C + c] / n;
  }
  return a.g->push(y, {a}, [a, y, norms, eps, R, C](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < R; ++r) {
      double n = std::max(norms[r], eps);
      double proj = 0.0;
      if (norms[r] > eps)
        for (std::size_t c = 0; c < C; ++c) proj += y[r * C + c] * d[r * C + c];
      for (std::size_t c = 0; c < C; ++c) ga[r * C + c] += (d[r * C + c] - y[r * C + c] * proj) / n;
    }
  }, "l2_normalize_rows");
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  need_matrix(x, "layer_norm");
  const auto& X = x.value();
  std::size_t R = X.dim(0), C = X.dim(1);
  if (gamma.value().size() != C || beta.value().size() != C)
    throw DimensionError("layer_norm: affine params do not match width " + std::to_string(C));
  Tensor xhat(X.shape());
  std::vector<double> rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += X[r * C + c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (X[r * C + c] - mu) * (X[r * C + c] - mu);
    var /= static_cast<double>(C);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) xhat[r * C + c] = (X[r * C + c] - mu) * rstd[r];
  }
  Tensor y(X.shape());
  const auto& G = gamma.value();
  const auto& B = beta.value();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) y[r * C + c] = xhat[r * C + c] * G[c] + B[c];
  return x.g->push(std::move(y), {x, gamma, beta}, [x, gamma, beta, xhat, rstd, R, C](Graph& g, const Tensor& d) {
    const auto& G = g.value(gamma.id);
    if (needs(g, gamma)) {
      auto& gg = g.grad_ref(gamma.id);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gg[c] += d[r * C + c] * xhat[r * C + c];
    }
    if (needs(g, beta)) {
      auto& gb = g.grad_ref(beta.id);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gb[c] += d[r * C + c];
    }
    if (needs(g, x)) {
      auto& gx = g.grad_ref(x.id);
      double invC = 1.0 / static_cast<double>(C);
      for (std::size_t r = 0; r < R; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          double dx = d[r * C + c] * G[c];
          m1 += dx;
          m2 += dx * xhat[r * C + c];
        }
        m1 *= invC;
        m2 *= invC;
        for (std::size_t c = 0; c < C; ++c) {
          double dx = d[r * C + c] * G[c];
          gx[r * C + c] += rstd[r] * (dx - m1 - xhat[r * C + c] * m2);
        }
      }
    }
  }, "layer_norm");
}

Var reshape(Var a, Shape s) {
  Tensor y = a.value().reshaped(std::move(s));
  return a.g->push(std::move(y), {a}, [a](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
  }, "reshape");
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  need_matrix(a, "slice_rows");
  Tensor y = a.value().row_slice(start, count);
  std::size_t C = a.value().dim(1);
  return a.g->push(std::move(y), {a}, [a, start, C](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < d.size(); ++i) ga[start * C + i] += d[i];
  }, "slice_rows");
}

Var gather_rows(Var a, const std::vector<std::size_t>& rows) {
  need_matrix(a, "gather_rows");
  const auto& X = a.value();
  std::size_t C = X.dim(1);
  if (rows.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor y({rows.size(), C});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= X.dim(0)) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(X.ptr() + rows[i] * C, C, y.ptr() + i * C);
  }
  return a.g->push(std::move(y), {a}, [a, rows, C](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t c = 0; c < C; ++c) ga[rows[i] * C + c] += d[i * C + c];
  }, "gather_rows");
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Graph* g0 = parts[0].g;
  std::size_t C = parts[0].value().cols();
  std::size_t R = 0;
  for (auto p : parts) {
    if (p.value().cols() != C) throw DimensionError("concat_rows: width mismatch");
    R += p.value().rows();
  }
  Tensor y({R, C});
  std::size_t off = 0;
  for (auto p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), y.ptr() + off);
    off += p.value().size();
  }
  return g0->push(std::move(y), parts, [parts](Graph& g, const Tensor& d) {
    std::size_t off = 0;
    for (auto p : parts) {
      std::size_t n = g.value(p.id).size();
      if (g.requires_grad(p.id)) {
        auto& gp = g.grad_ref(p.id);
        for (std::size_t i = 0; i < n; ++i) gp[i] += d[off + i];
      }
      off += n;
    }
  }, "concat_rows");
}

Var prepend_rows(Var head, Var x, std::size_t groups) {
  need_matrix(head, "prepend_rows");
  need_matrix(x, "prepend_rows");
  const auto& H = head.value();
  const auto& X = x.value();
  std::size_t C = X.dim(1);
  if (H.dim(0) != 1 || H.dim(1) != C || groups == 0 || X.dim(0) % groups != 0)
    throw DimensionError("prepend_rows: cannot prepend " + shape_str(H.shape()) + " to " + shape_str(X.shape()));
  std::size_t n = X.dim(0) / groups;
  Tensor y({groups * (n + 1), C});
  for (std::size_t b = 0; b < groups; ++b) {
    std::copy_n(H.ptr(), C, y.ptr() + b * (n + 1) * C);
    std::copy_n(X.ptr() + b * n * C, n * C, y.ptr() + (b * (n + 1) + 1) * C);
  }
  return x.g->push(std::move(y), {head, x}, [head, x, groups, n, C](Graph& g, const Tensor& d) {
    if (needs(g, head)) {
      auto& gh = g.grad_ref(head.id);
      for (std::size_t b = 0; b < groups; ++b)
        for (std::size_t c = 0; c < C; ++c) gh[c] += d[b * (n + 1) * C + c];
    }
    if (needs(g, x)) {
      auto& gx = g.grad_ref(x.id);
      for (std::size_t b = 0; b < groups; ++b)
        for (std::size_t i = 0; i < n * C; ++i) gx[b * n * C + i] += d[(b * (n + 1) + 1) * C + i];
    }
  }, "prepend_rows");
}

Var take(Var a, const std::vector<std::size_t>& flat, Shape out_shape) {
  if (shape_size(out_shape) != flat.size()) throw DimensionError("take: index count does not match output shape");
  const auto& X = a.value();
  Tensor y(out_shape);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= X.size()) throw DimensionError("take: index out of range");
    y[i] = X[flat[i]];
  }
  return a.g->push(std::move(y), {a}, [a, flat](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += d[i];
  }, "take");
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.g->push(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor& d) {
    auto& ga = g.grad_ref(a.id);
    for (auto& v : ga.data()) v += d[0];
  }, "sum");
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads, const std::vector<bool>* key_mask) {
  need_matrix(qkv, "attention");
  const auto& X = qkv.value();
  if (X.dim(0) != batch * seq || X.dim(1) % 3 != 0 || heads == 0 || (X.dim(1) / 3) % heads != 0)
    throw DimensionError("attention: qkv " + shape_str(X.shape()) + " inconsistent with batch=" +
                         std::to_string(batch) + " seq=" + std::to_string(seq) + " heads=" + std::to_string(heads));
  if (key_mask && key_mask->size() != batch * seq) throw DimensionError("attention: key mask length mismatch");
  std::size_t d = X.dim(1) / 3, dh = d / heads, W = 3 * d;
  double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<bool> mask = key_mask ? *key_mask : std::vector<bool>(batch * seq, true);

  Tensor out({batch * seq, d});
  Tensor probs({batch * heads * seq * seq});
  std::vector<double> q(seq * dh), k(seq * dh), v(seq * dh), s(seq * seq), o(seq * dh);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t u = 0; u < seq; ++u) any = any || mask[b * seq + u];
    if (!any) throw ValueError("attention: sequence " + std::to_string(b) + " has no valid keys");
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < seq; ++t) {
        const double* row = X.ptr() + (b * seq + t) * W + h * dh;
        std::copy_n(row, dh, q.data() + t * dh);
        std::copy_n(row + d, dh, k.data() + t * dh);
        std::copy_n(row + 2 * d, dh, v.data() + t * dh);
      }
      gemm(false, true, seq, seq, dh, sc, q.data(), k.data(), 0.0, s.data());
      double* P = probs.ptr() + (b * heads + h) * seq * seq;
      for (std::size_t t = 0; t < seq; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u < seq; ++u)
          if (mask[b * seq + u]) mx = std::max(mx, s[t * seq + u]);
        double z = 0.0;
        for (std::size_t u = 0; u < seq; ++u) {
          double e = mask[b * seq + u] ? std::exp(s[t * seq + u] - mx) : 0.0;
          P[t * seq + u] = e;
          z += e;
        }
        for (std::size_t u = 0; u < seq; ++u) P[t * seq + u] /= z;
      }
      gemm(false, false, seq, dh, seq, 1.0, P, v.data(), 0.0, o.data());
      for (std::size_t t = 0; t < seq; ++t) std::copy_n(o.data() + t * dh, dh, out.ptr() + (b * seq + t) * d + h * dh);
    }
  }
  return qkv.g->push(std::move(out), {qkv}, [qkv, probs, batch, seq, heads, d, dh, W, sc](Graph& g, const Tensor& dout) {
    const auto& X = g.value(qkv.id);
    auto& gx = g.grad_ref(qkv.id);
    std::vector<double> q(seq * dh), k(seq * dh), v(seq * dh), dO(seq * dh), dP(seq * seq), dq(seq * dh),
        dk(seq * dh), dv(seq * dh);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < seq; ++t) {
          const double* row = X.ptr() + (b * seq + t) * W + h * dh;
          std::copy_n(row, dh, q.data() + t * dh);
          std::copy_n(row + d, dh, k.data() + t * dh);
          std::copy_n(row + 2 * d, dh, v.data() + t * dh);
          std::copy_n(dout.ptr() + (b * seq + t) * d + h * dh, dh, dO.data() + t * dh);
        }
        const double* P = probs.ptr() + (b * heads + h) * seq * seq;
        gemm(true, false, seq, dh, seq, 1.0, P, dO.data(), 0.0, dv.data());
        gemm(false, true, seq, seq, dh, 1.0, dO.data(), v.data(), 0.0, dP.data());
        for (std::size_t t = 0; t < seq; ++t) {
          double r = 0.0;
          for (std::size_t u = 0; u < seq; ++u) r += dP[t * seq + u] * P[t * seq + u];
          for (std::size_t u = 0; u < seq; ++u) dP[t * seq + u] = P[t * seq + u] * (dP[t * seq + u] - r);
        }
        gemm(false, false, seq, dh, seq, sc, dP.data(), k.data(), 0.0, dq.data());
        gemm(true, false, seq, dh, seq, sc, dP.data(), q.data(), 0.0, dk.data());
        for (std::size_t t = 0; t < seq; ++t) {
          double* row = gx.ptr() + (b * seq + t) * W + h * dh;
          for (std::size_t i = 0; i < dh; ++i) {
            row[i] += dq[t * dh + i];
            row[d + i] += dk[t * dh + i];
            row[2 * d + i] += dv[t * dh + i];
          }
        }
      }
  }, "attention");
}

}  // namespace bractive::ag
