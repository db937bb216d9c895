#pragma once

// Tape-based reverse-mode differentiation. A Graph records every primitive in
// execution order; gradients() sweeps the tape backwards once.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "sbc/tensor.hpp"

namespace sbc {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

class Graph {
 public:
  using Inputs = std::span<const Tensor* const>;
  using ForwardFn = std::function<Tensor(Inputs)>;
  // Receives input values, the node's output gradient, and one gradient
  // buffer per input (nullptr when that input needs no gradient).
  using BackwardFn = std::function<void(Inputs, const Tensor& out, std::span<const double> out_grad,
                                        std::span<double* const> in_grads)>;

  /// Leaf bound to an external tensor. The tensor must outlive the graph and
  /// stay unmodified until gradients() returns; its grad buffer is filled there.
  Var param(Tensor& t);
  Var constant(Tensor t);

  Var record(std::vector<Var> inputs, ForwardFn forward, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward pass at any node (empty if unreached).
  std::span<const double> grad(Var v) const;

  /// Re-executes every recorded op from its inputs and returns the largest
  /// absolute deviation from the stored forward values.
  double replay_deviation() const;

  void backward(Var loss);

 private:
  struct Node {
    Tensor value;
    Tensor* external = nullptr;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    bool requires_grad = false;
    std::vector<double> grad;
  };
  std::vector<Node> nodes_;
};

/// Fills the grad buffer of every parameter reachable from `loss` (zeroing
/// them first). Throws ContractError unless `loss` holds exactly one element.
void gradients(Graph& g, Var loss);

// ---- differentiable primitives -------------------------------------------

Var matmul(Graph& g, Var a, Var b);
Var conv2d(Graph& g, Var x, Var k, std::size_t stride = 1);
Var max_pool2(Graph& g, Var x);
Var relu(Graph& g, Var x);
/// Mean cross-entropy; labels are copied into the node.
Var softmax_xent(Graph& g, Var logits, std::span<const int> labels);

Var add(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var add_scalar(Graph& g, Var a, double s);
Var exp(Graph& g, Var a);
Var square(Graph& g, Var a);
Var sum(Graph& g, Var a);
/// x[..., c, ...] + b[c] along `axis` (bias add for dense rows or conv channels).
Var add_along(Graph& g, Var x, Var b, std::size_t axis);
/// x[..., c, ...] * s[c] along `axis`.
Var scale_along(Graph& g, Var x, Var s, std::size_t axis);
Var reshape(Graph& g, Var x, Shape shape);
/// mean + sqrt(var) * noise with var >= 0; d/dvar is taken as 0 where var == 0.
Var gaussian_sample(Graph& g, Var mean, Var var, Var noise);

}  // namespace sbc
