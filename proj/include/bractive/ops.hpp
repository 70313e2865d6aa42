// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bractive/tensor.hpp"

namespace bractive::num {

inline constexpr double kNormEps = 1e-12;

// C = alpha * op(A) * op(B) + beta * C, row-major
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha, const double* a,
          const double* b, double beta, double* c);

// single-threaded BLAS keeps reductions in a fixed order
void set_blas_threads(int n);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor transpose(const Tensor& a);

Tensor softmax(const Tensor& v, int axis = -1);
Tensor log_softmax(const Tensor& v, int axis = -1);
Tensor sigmoid(const Tensor& v);
double sigmoid(double x);
Tensor l2_normalize(const Tensor& v, int axis = -1, double eps = kNormEps);
double cosine_sim(std::span<const double> a, std::span<const double> b, double eps = kNormEps);
double cosine_sim(const Tensor& a, const Tensor& b, double eps = kNormEps);

struct TopK {
  Tensor values;
  std::vector<std::size_t> indices;
};
TopK topk(std::span<const double> v, std::size_t k);
TopK topk(const Tensor& v, std::size_t k);

enum class Upsample { nearest, bilinear };
Tensor upsample2d(const Tensor& grid, std::size_t s, Upsample mode);

// splits a shape around an axis into (outer, n, inner)
struct AxisSplit {
  std::size_t outer, n, inner;
};
AxisSplit split_axis(const Shape& s, int axis);

}  // namespace bractive::num
