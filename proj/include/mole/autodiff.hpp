#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "mole/param_store.hpp"
#include "mole/tensor.hpp"

namespace mole {

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Records one forward pass and replays it in reverse. A tape is single-use:
// backward() may be called once, after which the tape only serves reads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf bound to a stored parameter. Frozen parameters behave as constants.
  Var param(ParamStore& store, std::string_view id);

  Var record(Tensor value, std::span<const Var> inputs, Backward backward);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of an input during backward, zero-initialised on first use.
  // Null when the node does not need a gradient.
  Tensor* grad_slot(Var v);

  // Gradient of a node after backward(); null if nothing flowed into it.
  const Tensor* grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and accumulates parameter gradients into their
  // stores (adding to whatever the accumulators already hold).
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
  };

  // deque: value references handed out stay valid while the tape grows.
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

// Maps a parameter id to a leaf on some tape.
using ParamBinder = std::function<Var(std::string_view)>;

// Leaves that feed gradients back into `store` (frozen entries excepted).
ParamBinder trainable_binder(Tape& tape, ParamStore& store);
// Leaves holding copies of the values only; nothing is differentiated.
ParamBinder constant_binder(Tape& tape, const ParamStore& store);

// Differentiable operations. All inputs must live on the same tape.
namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// a[..., D] + bias[D]
Var add_bias(Var a, Var bias);
// a[..., p] x b[p, n]
Var matmul(Var a, Var b);
Var reshape(Var a, Shape shape);
Var gelu(Var a);
// Softmax over the last axis.
Var softmax(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
// Single-head scaled dot-product attention, batched over a leading axis when
// the inputs are rank 3.
Var attention(Var q, Var k, Var v);

// Rows of a (viewed as [rows x last]) at the given indices -> [m x last].
Var gather_rows(Var a, std::vector<std::size_t> rows);
// base + sum_j scatter(srcs[j] into rows idx[j]); result has base's shape.
Var scatter_add_rows(Var base, std::vector<Var> srcs, std::vector<std::vector<std::size_t>> idx);
// Flat elements of a at the given indices -> [m].
Var gather_elements(Var a, std::vector<std::size_t> flat);
// Row r of a[m x C] scaled by w[r].
Var scale_rows(Var a, Var w);
// Mean over all rows of a (viewed as [rows x C]) -> [C].
Var mean_rows(Var a);
// a[B x P x C] -> [B x C], mean over the middle axis.
Var mean_middle(Var a);

Var sum(Var a);
Var mean(Var a);
Var dot_const(Var a, const Tensor& c);
Var mse(Var pred, const Tensor& target);
Var linear_combination(std::span<const Var> scalars, std::span<const double> coefs);
// Mean squared cosine similarity over ordered pairs of flattened inputs.
Var ortho_loss(std::span<const Var> outputs, double eps = 1e-12);

}  // namespace ad
}  // namespace mole
