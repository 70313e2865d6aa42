// SPDX-License-Identifier: Apache-2.0
#include "bractive/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>

extern "C" void openblas_set_num_threads(int);

namespace bractive::num {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] *= beta;
    return;
  }
  auto lda = static_cast<int>(trans_a ? m : k);
  auto ldb = static_cast<int>(trans_b ? k : n);
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a, lda, b, ldb, beta, c,
              static_cast<int>(n));
}

void set_blas_threads(int n) { openblas_set_num_threads(std::max(1, n)); }

namespace {

void need_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  need_matrix(a, "matmul");
  need_matrix(b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor c({a.dim(0), b.dim(1)});
  gemm(false, false, a.dim(0), b.dim(1), a.dim(1), 1.0, a.ptr(), b.ptr(), 0.0, c.ptr());
  require_finite(c, "matmul");
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  need_matrix(a, "matmul_nt");
  need_matrix(b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor c({a.dim(0), b.dim(0)});
  gemm(false, true, a.dim(0), b.dim(0), a.dim(1), 1.0, a.ptr(), b.ptr(), 0.0, c.ptr());
  require_finite(c, "matmul_nt");
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  need_matrix(a, "matmul_tn");
  need_matrix(b, "matmul_tn");
  if (a.dim(0) != b.dim(0))
    throw DimensionError("matmul_tn: inner dimensions disagree, " + shape_str(a.shape()) + "^T x " +
                         shape_str(b.shape()));
  Tensor c({a.dim(1), b.dim(1)});
  gemm(true, false, a.dim(1), b.dim(1), a.dim(0), 1.0, a.ptr(), b.ptr(), 0.0, c.ptr());
  require_finite(c, "matmul_tn");
  return c;
}

Tensor transpose(const Tensor& a) {
  need_matrix(a, "transpose");
  auto r = a.dim(0), c = a.dim(1);
  Tensor t({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) t[j * r + i] = a[i * c + j];
  return t;
}

AxisSplit split_axis(const Shape& s, int axis) {
  auto rank = static_cast<int>(s.size());
  int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw DimensionError("axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  AxisSplit r{1, s[static_cast<std::size_t>(ax)], 1};
  for (int i = 0; i < ax; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < rank; ++i) r.inner *= s[static_cast<std::size_t>(i)];
  return r;
}

Tensor softmax(const Tensor& v, int axis) {
  require_finite(v, "softmax input");
  auto [outer, n, inner] = split_axis(v.shape(), axis);
  Tensor out(v.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const double* x = v.ptr() + o * n * inner + in;
      double* y = out.ptr() + o * n * inner + in;
      double mx = x[0];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        y[i * inner] = std::exp(x[i * inner] - mx);
        z += y[i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) y[i * inner] /= z;
    }
  return out;
}

Tensor log_softmax(const Tensor& v, int axis) {
  require_finite(v, "log_softmax input");
  auto [outer, n, inner] = split_axis(v.shape(), axis);
  Tensor out(v.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const double* x = v.ptr() + o * n * inner + in;
      double* y = out.ptr() + o * n * inner + in;
      double mx = x[0];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, x[i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i * inner] - mx);
      double lz = mx + std::log(z);
      for (std::size_t i = 0; i < n; ++i) y[i * inner] = x[i * inner] - lz;
    }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& v) {
  require_finite(v, "sigmoid input");
  Tensor out(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = sigmoid(v[i]);
  return out;
}

Tensor l2_normalize(const Tensor& v, int axis, double eps) {
  require_finite(v, "l2_normalize input");
  auto [outer, n, inner] = split_axis(v.shape(), axis);
  Tensor out(v.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const double* x = v.ptr() + o * n * inner + in;
      double* y = out.ptr() + o * n * inner + in;
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) ss += x[i * inner] * x[i * inner];
      double d = std::max(std::sqrt(ss), eps);
      for (std::size_t i = 0; i < n; ++i) y[i * inner] = x[i * inner] / d;
    }
  return out;
}

double cosine_sim(std::span<const double> a, std::span<const double> b, double eps) {
  if (a.size() != b.size())
    throw DimensionError("cosine_sim: length mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  double c = ab / (std::max(std::sqrt(aa), eps) * std::max(std::sqrt(bb), eps));
  if (!std::isfinite(c)) throw ValueError("non-finite value produced by cosine_sim");
  return std::clamp(c, -1.0, 1.0);
}

double cosine_sim(const Tensor& a, const Tensor& b, double eps) { return cosine_sim(a.data(), b.data(), eps); }

TopK topk(std::span<const double> v, std::size_t k) {
  if (k == 0 || k > v.size())
    throw ValueError("topk: k=" + std::to_string(k) + " must be in [1, " + std::to_string(v.size()) + "]");
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return v[a] > v[b] || (v[a] == v[b] && a < b); });
  idx.resize(k);
  Tensor vals({k});
  for (std::size_t i = 0; i < k; ++i) vals[i] = v[idx[i]];
  return {std::move(vals), std::move(idx)};
}

TopK topk(const Tensor& v, std::size_t k) { return topk(v.data(), k); }

Tensor upsample2d(const Tensor& grid, std::size_t s, Upsample mode) {
  if (grid.rank() != 2) throw DimensionError("upsample2d: expected a 2-d grid, got " + shape_str(grid.shape()));
  if (s == 0) throw ValueError("upsample2d: scale must be >= 1");
  auto h = grid.dim(0), w = grid.dim(1);
  auto H = h * s, W = w * s;
  Tensor out({H, W});
  if (mode == Upsample::nearest || s == 1) {
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[y * W + x] = grid[(y / s) * w + x / s];
    return out;
  }
  // half-pixel centres, clamped at the border
  auto src = [s](std::size_t o, std::size_t n, std::size_t& i0, std::size_t& i1, double& t) {
    double c = (static_cast<double>(o) + 0.5) / static_cast<double>(s) - 0.5;
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    t = c - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < H; ++y) {
    std::size_t y0, y1;
    double ty;
    src(y, h, y0, y1, ty);
    for (std::size_t x = 0; x < W; ++x) {
      std::size_t x0, x1;
      double tx;
      src(x, w, x0, x1, tx);
      double a = grid[y0 * w + x0], b = grid[y0 * w + x1];
      double c = grid[y1 * w + x0], d = grid[y1 * w + x1];
      double top = a + tx * (b - a);
      double bot = c + tx * (d - c);
      out[y * W + x] = top + ty * (bot - top);
    }
  }
  return out;
}

}  // namespace bractive::num
