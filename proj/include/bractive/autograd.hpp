// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "bractive/tensor.hpp"

namespace bractive::ag {

class Graph;

struct Var {
  Graph* g = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
};

// Receives the output cotangent and accumulates input cotangents through Graph::grad_ref.
using BackwardFn = std::function<void(Graph&, const Tensor&)>;

// Tape of tensor-valued nodes. Nodes are appended in topological order, so
// backward is a reverse sweep.
class Graph {
 public:
  Var constant(Tensor t);
  Var leaf(Tensor t);  // requires grad

  Var push(Tensor value, std::span<const Var> inputs, BackwardFn fn, std::string_view op);
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, std::string_view op) {
    return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn), op);
  }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }
  const Tensor& grad(std::size_t id) const;
  Tensor& grad_ref(std::size_t id);  // zero-initialised on first use

  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// linear algebra
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var linear(Var x, Var w, Var b);  // x * w + b, w is [in x out]
Var transpose(Var a);

// elementwise
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var mul_const(Var a, const Tensor& c);
Var sigmoid(Var a);
Var gelu(Var a);

// rows of x [B*T x d] get p [T x d] added per block
Var add_tiled(Var x, Var p);

// row-wise ops on matrices
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var l2_normalize_rows(Var a, double eps = 1e-12);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

// shape plumbing
Var reshape(Var a, Shape s);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var gather_rows(Var a, const std::vector<std::size_t>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var prepend_rows(Var head, Var x, std::size_t groups);  // head [1 x d] before each of `groups` blocks of x
Var take(Var a, const std::vector<std::size_t>& flat, Shape out_shape);

// reductions
Var sum(Var a);
Var dot(Var a, Var b);

// multi-head self-attention over `batch` sequences of length `seq`.
// qkv is [batch*seq x 3d]; key_mask (optional, batch*seq) disables keys.
Var attention(Var qkv, std::size_t batch, std::size_t seq, std::size_t heads,
              const std::vector<bool>* key_mask = nullptr);

}  // namespace bractive::ag
