#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// A Tape records nodes in creation order, which is already a topological
// order, so backward() is a single reverse sweep. One tape holds one
// computation (typically one sample); tapes are independent and may live on
// different threads. Parameters enter a tape as leaves that view the
// parameter's storage; their gradients are pulled out with
// accumulate_param_grads() after backward().
//
// Feature maps use channel-major [C, H, W] layout; token sets are [L, D].

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "aunet/parameter.hpp"

namespace aunet::ag {

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::size_t size() const;
  std::span<const double> value() const;
  const double* data() const;
  double item() const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Shape shape, std::vector<double> value);
  Var zeros(Shape shape);
  Var scalar(double v) { return constant({1}, {v}); }
  // Leaf bound to a parameter. Repeated calls with the same parameter return
  // the same leaf, so shared weights accumulate into one gradient.
  Var param(const Parameter& p);

  // Creates an op node. `backward` runs only if the node needs a gradient and
  // one has reached it.
  Var record(Shape shape, std::vector<double> value, bool requires_grad,
             BackwardFn backward);

  void backward(Var loss);

  const Shape& shape(int id) const { return nodes_[id].shape; }
  const double* data(int id) const {
    const Node& n = nodes_[id];
    return n.external ? n.external : n.value.data();
  }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient storage for node `id`, allocated as zeros on first access.
  double* grad(int id);
  // Read-only gradient; empty if nothing flowed into the node.
  std::span<const double> grad_of(Var v) const;

  void accumulate_param_grads(GradientBuffer& out, double scale = 1.0) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    const double* external = nullptr;
    std::vector<double> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
};

// ---- elementwise ----------------------------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a * s where s has one element.
Var mul_scalar(Var a, Var s);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
Var sum(Var a);
Var mean(Var a);
// Sum of any number of same-shaped vars in the given order.
Var add_n(std::span<const Var> xs);

// ---- shape ----------------------------------------------------------------
Var reshape(Var a, Shape shape);
Var transpose2d(Var a);
// [C_i, H, W] -> [sum C_i, H, W]
Var concat_channels(std::span<const Var> xs);

// ---- dense ----------------------------------------------------------------
Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T
Var linear(Var x, Var w, Var b);  // x [L,in], w [out,in], b [out] (b may be invalid)
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- spatial --------------------------------------------------------------
// x [C,H,W], w [O,C,k,k], b [O] (may be invalid).
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var group_norm(Var x, Var gamma, Var beta, int groups, double eps = 1e-5);
// Adaptive average pooling with PyTorch bin edges floor(i*H/g), ceil((i+1)*H/g).
Var adaptive_avg_pool(Var x, int out_h, int out_w);
// Bilinear resize with half-pixel centers (align_corners = false).
Var bilinear_resize(Var x, int out_h, int out_w);
// F [C,H,W] * M [1,H,W] broadcast over channels.
Var mul_channel_broadcast(Var f, Var m);

}  // namespace aunet::ag
