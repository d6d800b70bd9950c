#pragma once

// Compute kernels for the dense layers. Each kernel exists twice: a serial
// reference that evaluates every output element directly from its defining
// formula, and an OpenMP version that parallelizes over independent output
// planes. Every output element of the parallel version is produced by exactly
// one thread in a fixed order, so results do not depend on the thread count.
//
// Accumulation is always carried out in double, also for float tensors.

#include "bisenet/tensor.hpp"

namespace bisenet {

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
  int groups = 1;
};

/// Output shape of conv2d; throws ConfigError naming the offending dims.
Shape conv2d_output_shape(const Shape& x, const Shape& weight,
                          const ConvGeometry& g);

/// Output shape of max/avg pooling with a square window.
Shape pool_output_shape(const Shape& x, int kernel, int stride, int pad);

namespace kernels {

/// Worker threads used by the parallel kernels. Initialized from
/// BISENET_THREADS when set, otherwise from the OpenMP default.
int thread_count();
void set_thread_count(int n);

/// Precomputed half-pixel bilinear taps for one axis.
struct LinearTaps {
  std::vector<int> lo;
  std::vector<int> hi;
  std::vector<double> frac;  // weight of `hi`
};
LinearTaps half_pixel_taps(int in_size, int out_size);

namespace serial {

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<T>* bias,
                    const ConvGeometry& g, Tensor<T>& y);
template <typename T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w,
                           const ConvGeometry& g, Tensor<T>& dx);
template <typename T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x,
                            const ConvGeometry& g, Tensor<T>& dw, std::type_identity_t<T>* dbias);
template <typename T>
void resize_bilinear_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void resize_bilinear_backward(const Tensor<T>& dy, Tensor<T>& dx);

}  // namespace serial

namespace omp {

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<T>* bias,
                    const ConvGeometry& g, Tensor<T>& y);
template <typename T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w,
                           const ConvGeometry& g, Tensor<T>& dx);
template <typename T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x,
                            const ConvGeometry& g, Tensor<T>& dw, std::type_identity_t<T>* dbias);
template <typename T>
void resize_bilinear_forward(const Tensor<T>& x, Tensor<T>& y);
template <typename T>
void resize_bilinear_backward(const Tensor<T>& dy, Tensor<T>& dx);

}  // namespace omp

}  // namespace kernels
}  // namespace bisenet
