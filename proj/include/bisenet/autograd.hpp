#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every differentiable op returns a Var whose node remembers its parents and
// a closure that pushes the node's gradient into them. Parameter leaves write
// into ParamTensor::grad; input leaves created with requires_grad keep their
// own gradient. Leaf gradients accumulate across backward() calls until reset.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "bisenet/ops.hpp"
#include "bisenet/tensor.hpp"

namespace bisenet::ag {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until a gradient reaches the node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  ParamTensor<T>* param = nullptr;
  bool requires_grad = false;
  std::string label;

  bool is_leaf() const { return parents.empty(); }

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) {
      grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
  }
};

/// Gradient recording is on by default; NoGradGuard disables it for a scope.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false,
               std::string label = {})
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->label = std::move(label);
  }

  /// Leaf bound to a learnable parameter.
  static Var param(ParamTensor<T>& p, std::string label = {}) {
    Var v(p.value, true, std::move(label));
    v.node_->param = &p;
    return v;
  }

  /// Result of an op. Records parents only when some parent needs a gradient.
  static Var make(Tensor<T> value, std::vector<Var> parents,
                  std::function<void(Node<T>&)> backward_fn,
                  std::string label = {});

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Accumulated gradient of an input leaf (zeros if none reached it).
  Tensor<T> grad() const {
    return node_->grad.empty() ? Tensor<T>(shape()) : node_->grad;
  }
  void zero_grad() { node_->grad = Tensor<T>(); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Propagates `seed` (same shape as `out`) to every reachable leaf.
/// Throws StateError when `out` carries no recorded forward pass.
template <typename T>
void backward(const Var<T>& out, const Tensor<T>& seed);
/// Seeds with ones.
template <typename T>
void backward(const Var<T>& out);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::type_identity_t<Var<T>>* bias,
              const ConvGeometry& g);
template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   RunningStats<T>& stats, ops::BnMode mode,
                   double momentum = ops::kBnMomentum,
                   double eps = ops::kBnEps);
template <typename T>
Var<T> relu(const Var<T>& x);
template <typename T>
Var<T> sigmoid(const Var<T>& x);
template <typename T>
Var<T> maxpool2d(const Var<T>& x, int k, int stride, int pad);
template <typename T>
Var<T> avgpool2d(const Var<T>& x, int k, int stride, int pad);
template <typename T>
Var<T> global_avgpool(const Var<T>& x);
template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w);
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int scale);
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);
template <typename T>
Var<T> add(const Var<T>& x, const Var<T>& y);
template <typename T>
Var<T> mul(const Var<T>& x, const Var<T>& y);
/// Sum of all elements as a (1,1,1,1) tensor.
template <typename T>
Var<T> sum(const Var<T>& x);
/// Weighted sum of (1,1,1,1) scalars.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs,
                    const std::vector<double>& weights);

}  // namespace bisenet::ag
