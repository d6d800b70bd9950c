#pragma once

// Tensor-in, tensor-out neural network primitives. These carry no autograd
// state; the differentiable wrappers in autograd.hpp call into them and into
// the matching *_backward helpers declared here.

#include <optional>
#include <type_traits>
#include <vector>

#include "bisenet/kernels.hpp"
#include "bisenet/tensor.hpp"

namespace bisenet::ops {

enum class BnMode { Train, Eval };

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvGeometry& g);

/// Per-channel statistics saved by a train-mode forward for the backward pass.
struct BnSaved {
  std::vector<double> mean;
  std::vector<double> invstd;
};

/// Batch normalization over (n, h, w) per channel. gamma/beta are (1,c,1,1).
/// Train mode normalizes with batch statistics and folds them into `stats`
/// (unbiased variance); eval mode reads `stats` and throws StateError when
/// they were never initialized.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, RunningStats<T>& stats,
                      BnMode mode, double momentum = kBnMomentum,
                      double eps = kBnEps, BnSaved* saved = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// `argmax`, when given, receives the flat input index chosen per output.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad,
                    std::vector<std::size_t>* argmax = nullptr);
/// Padded cells are excluded from the divisor.
template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride, int pad);
template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& dy, const Shape& x_shape, int k,
                             int stride, int pad);
template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x);

/// Half-pixel bilinear resize (align_corners = false).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);
template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dy, const Shape& x_shape);
/// Integer-factor bilinear upsampling; scale in {2, 4, 8, ...}.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int scale);

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w);
LabelMap resize_nearest(const LabelMap& labels, int out_h, int out_w);

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs);

/// True when `b` can be combined with `a` elementwise: equal shapes, or `b`
/// is (n, c, 1, 1) and broadcasts over space.
bool broadcastable(const Shape& a, const Shape& b);

/// Elementwise sum/product; either operand may be the (n,c,1,1) broadcast one.
template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y);
template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y);

/// Sums a full-size gradient down to `target` (identity when shapes match).
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target);

/// Channel argmax, ties resolved to the lowest class index.
template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits);

}  // namespace bisenet::ops
