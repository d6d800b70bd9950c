#include "bisenet/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace bisenet::ops {

namespace {

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t,
                  [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!t.all_finite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
#endif
}

inline int nearest_source(int o, int in, int out) {
  const int s = static_cast<int>(std::floor((o + 0.5) * in / out));
  return s < in ? s : in - 1;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias,
                 const ConvGeometry& g) {
  const Shape ys = conv2d_output_shape(x.shape(), w.shape(), g);
  if (bias && bias->size() != static_cast<std::size_t>(ys.c)) {
    throw ConfigError("conv2d: bias has " + std::to_string(bias->size()) +
                      " entries for " + std::to_string(ys.c) +
                      " output channels");
  }
  Tensor<T> y(ys);
  kernels::omp::conv2d_forward(x, w, bias ? bias->data() : nullptr, g, y);
  check_finite(y, "conv2d");
  return y;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, RunningStats<T>& stats,
                      BnMode mode, double momentum, double eps,
                      BnSaved* saved) {
  const Shape s = x.shape();
  const auto c = static_cast<std::size_t>(s.c);
  if (gamma.size() != c || beta.size() != c) {
    throw ConfigError("batchnorm2d: affine parameters sized " +
                      std::to_string(gamma.size()) + " for " +
                      std::to_string(c) + " channels");
  }
  if (mode == BnMode::Eval && !stats.initialized) {
    throw StateError("batchnorm2d: eval mode with uninitialized running stats");
  }
  if (stats.initialized && (stats.mean.size() != c || stats.var.size() != c)) {
    throw ConfigError("batchnorm2d: running stats sized " +
                      std::to_string(stats.mean.size()) + " for " +
                      std::to_string(c) + " channels");
  }
  if (!stats.initialized) stats = RunningStats<T>(s.c);

  Tensor<T> y(s);
  const std::size_t plane = s.plane();
  const double count = static_cast<double>(s.n) * plane;
  if (saved) {
    saved->mean.assign(c, 0.0);
    saved->invstd.assign(c, 0.0);
  }

#pragma omp parallel for schedule(static) num_threads(kernels::thread_count())
  for (int ch = 0; ch < s.c; ++ch) {
    double mean, var;
    if (mode == BnMode::Train) {
      double sum = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.plane(n, ch);
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / count;
      double sq = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* p = x.plane(n, ch);
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / count;
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      stats.mean[ch] = static_cast<T>((1 - momentum) * stats.mean[ch] +
                                      momentum * mean);
      stats.var[ch] = static_cast<T>((1 - momentum) * stats.var[ch] +
                                     momentum * unbiased);
    } else {
      mean = stats.mean[ch];
      var = stats.var[ch];
    }
    const double invstd = 1.0 / std::sqrt(var + eps);
    if (saved) {
      saved->mean[ch] = mean;
      saved->invstd[ch] = invstd;
    }
    const double g = gamma[ch];
    const double b = beta[ch];
    for (int n = 0; n < s.n; ++n) {
      const T* p = x.plane(n, ch);
      T* q = y.plane(n, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        q[i] = static_cast<T>(g * ((p[i] - mean) * invstd) + b);
      }
    }
  }
  check_finite(y, "batchnorm2d");
  return y;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v >= 0) {
      y[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
    } else {
      const double e = std::exp(v);
      y[i] = static_cast<T>(e / (1.0 + e));
    }
  }
  return y;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k, int stride, int pad,
                    std::vector<std::size_t>* argmax) {
  const Shape xs = x.shape();
  const Shape ys = pool_output_shape(xs, k, stride, pad);
  Tensor<T> y(ys);
  if (argmax) argmax->assign(ys.numel(), 0);
  const int planes = ys.n * ys.c;
#pragma omp parallel for schedule(static) num_threads(kernels::thread_count())
  for (int p = 0; p < planes; ++p) {
    const std::size_t xoff = static_cast<std::size_t>(p) * xs.plane();
    const std::size_t yoff = static_cast<std::size_t>(p) * ys.plane();
    for (int oh = 0; oh < ys.h; ++oh) {
      for (int ow = 0; ow < ys.w; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        bool any = false;
        for (int kh = 0; kh < k; ++kh) {
          const int ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= xs.h) continue;
          for (int kw = 0; kw < k; ++kw) {
            const int iw = ow * stride - pad + kw;
            if (iw < 0 || iw >= xs.w) continue;
            const std::size_t i = xoff + static_cast<std::size_t>(ih) * xs.w + iw;
            if (!any || x[i] > best) {
              best = x[i];
              best_i = i;
              any = true;
            }
          }
        }
        const std::size_t o = yoff + static_cast<std::size_t>(oh) * ys.w + ow;
        y[o] = best;
        if (argmax) (*argmax)[o] = best_i;
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ys = pool_output_shape(xs, k, stride, pad);
  Tensor<T> y(ys);
  const int planes = ys.n * ys.c;
#pragma omp parallel for schedule(static) num_threads(kernels::thread_count())
  for (int p = 0; p < planes; ++p) {
    const T* xp = x.data() + static_cast<std::size_t>(p) * xs.plane();
    T* yp = y.data() + static_cast<std::size_t>(p) * ys.plane();
    for (int oh = 0; oh < ys.h; ++oh) {
      const int h0 = std::max(oh * stride - pad, 0);
      const int h1 = std::min(oh * stride - pad + k, xs.h);
      for (int ow = 0; ow < ys.w; ++ow) {
        const int w0 = std::max(ow * stride - pad, 0);
        const int w1 = std::min(ow * stride - pad + k, xs.w);
        double sum = 0.0;
        for (int ih = h0; ih < h1; ++ih)
          for (int iw = w0; iw < w1; ++iw) sum += xp[ih * xs.w + iw];
        yp[oh * ys.w + ow] =
            static_cast<T>(sum / ((h1 - h0) * (w1 - w0)));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& dy, const Shape& xs, int k,
                             int stride, int pad) {
  const Shape ys = dy.shape();
  Tensor<T> dx(xs);
  const int planes = ys.n * ys.c;
#pragma omp parallel num_threads(kernels::thread_count())
  {
    std::vector<double> acc(xs.plane());
#pragma omp for schedule(static)
    for (int p = 0; p < planes; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* gp = dy.data() + static_cast<std::size_t>(p) * ys.plane();
      for (int oh = 0; oh < ys.h; ++oh) {
        const int h0 = std::max(oh * stride - pad, 0);
        const int h1 = std::min(oh * stride - pad + k, xs.h);
        for (int ow = 0; ow < ys.w; ++ow) {
          const int w0 = std::max(ow * stride - pad, 0);
          const int w1 = std::min(ow * stride - pad + k, xs.w);
          const double g =
              static_cast<double>(gp[oh * ys.w + ow]) / ((h1 - h0) * (w1 - w0));
          for (int ih = h0; ih < h1; ++ih)
            for (int iw = w0; iw < w1; ++iw) acc[ih * xs.w + iw] += g;
        }
      }
      T* dp = dx.data() + static_cast<std::size_t>(p) * xs.plane();
      for (std::size_t i = 0; i < acc.size(); ++i) dp[i] = static_cast<T>(acc[i]);
    }
  }
  return dx;
}

template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
  const Shape xs = x.shape();
  Tensor<T> y({xs.n, xs.c, 1, 1});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c) {
      const T* p = x.plane(n, c);
      double sum = 0.0;
      for (std::size_t i = 0; i < xs.plane(); ++i) sum += p[i];
      y.at(n, c, 0, 0) = static_cast<T>(sum / xs.plane());
    }
  return y;
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  const Shape xs = x.shape();
  Tensor<T> y({xs.n, xs.c, out_h, out_w});
  kernels::omp::resize_bilinear_forward(x, y);
  return y;
}

template <typename T>
Tensor<T> resize_bilinear_backward(const Tensor<T>& dy, const Shape& xs) {
  Tensor<T> dx(xs);
  kernels::omp::resize_bilinear_backward(dy, dx);
  return dx;
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int scale) {
  if (scale < 1) {
    throw ConfigError("upsample_bilinear: scale must be >= 1, got " +
                      std::to_string(scale));
  }
  return resize_bilinear(x, x.shape().h * scale, x.shape().w * scale);
}

template <typename T>
Tensor<T> resize_nearest(const Tensor<T>& x, int out_h, int out_w) {
  const Shape xs = x.shape();
  Tensor<T> y({xs.n, xs.c, out_h, out_w});
  for (int n = 0; n < xs.n; ++n)
    for (int c = 0; c < xs.c; ++c)
      for (int oh = 0; oh < out_h; ++oh) {
        const int ih = nearest_source(oh, xs.h, out_h);
        for (int ow = 0; ow < out_w; ++ow)
          y.at(n, c, oh, ow) = x.at(n, c, ih, nearest_source(ow, xs.w, out_w));
      }
  return y;
}

LabelMap resize_nearest(const LabelMap& labels, int out_h, int out_w) {
  LabelMap out(labels.n, out_h, out_w);
  for (int n = 0; n < labels.n; ++n)
    for (int oh = 0; oh < out_h; ++oh) {
      const int ih = nearest_source(oh, labels.h, out_h);
      for (int ow = 0; ow < out_w; ++ow)
        out.at(n, oh, ow) = labels.at(n, ih, nearest_source(ow, labels.w, out_w));
    }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<const Tensor<T>*>& xs) {
  if (xs.empty()) throw ConfigError("concat_channels: no inputs");
  const Shape first = xs.front()->shape();
  int channels = 0;
  for (const Tensor<T>* t : xs) {
    const Shape s = t->shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw ConfigError("concat_channels: incompatible shapes " +
                        to_string(first) + " and " + to_string(s));
    }
    channels += s.c;
  }
  Tensor<T> y({first.n, channels, first.h, first.w});
  for (int n = 0; n < first.n; ++n) {
    T* dst = y.plane(n, 0);
    for (const Tensor<T>* t : xs) {
      const std::size_t len = static_cast<std::size_t>(t->shape().c) * first.h * first.w;
      std::copy_n(t->plane(n, 0), len, dst);
      dst += len;
    }
  }
  return y;
}

bool broadcastable(const Shape& a, const Shape& b) {
  if (a == b) return true;
  return a.n == b.n && a.c == b.c && b.h == 1 && b.w == 1;
}

namespace {

template <typename T, typename Fn>
Tensor<T> binary(const Tensor<T>& x, const Tensor<T>& y, Fn fn,
                 const char* name) {
  const Shape a = x.shape();
  const Shape b = y.shape();
  if (a == b) {
    Tensor<T> out(a);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = fn(x[i], y[i]);
    return out;
  }
  const bool y_small = broadcastable(a, b);
  const bool x_small = broadcastable(b, a);
  if (!y_small && !x_small) {
    throw ConfigError(std::string(name) + ": incompatible shapes " +
                      to_string(a) + " and " + to_string(b));
  }
  const Tensor<T>& big = y_small ? x : y;
  const Tensor<T>& small = y_small ? y : x;
  const Shape s = big.shape();
  Tensor<T> out(s);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T v = small.at(n, c, 0, 0);
      const T* p = big.plane(n, c);
      T* q = out.plane(n, c);
      for (std::size_t i = 0; i < s.plane(); ++i)
        q[i] = y_small ? fn(p[i], v) : fn(v, p[i]);
    }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
  return binary(x, y, [](T a, T b) { return a + b; }, "add");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
  return binary(x, y, [](T a, T b) { return a * b; }, "mul");
}

template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const Shape s = g.shape();
  Tensor<T> out(target);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = g.plane(n, c);
      double sum = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) sum += p[i];
      out.at(n, c, 0, 0) = static_cast<T>(sum);
    }
  return out;
}

template <typename T>
LabelMap argmax_channels(const Tensor<T>& logits) {
  const Shape s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        int best = 0;
        T bv = logits.at(n, 0, i, j);
        for (int c = 1; c < s.c; ++c) {
          const T v = logits.at(n, c, i, j);
          if (v > bv) {
            bv = v;
            best = c;
          }
        }
        out.at(n, i, j) = best;
      }
  return out;
}

#define BISENET_INSTANTIATE(T)                                                 \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&,             \
                               const Tensor<T>*, const ConvGeometry&);         \
  template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&,        \
                                    const Tensor<T>&, RunningStats<T>&,        \
                                    BnMode, double, double, BnSaved*);         \
  template Tensor<T> relu<T>(const Tensor<T>&);                                \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                             \
  template Tensor<T> maxpool2d<T>(const Tensor<T>&, int, int, int,             \
                                  std::vector<std::size_t>*);                  \
  template Tensor<T> avgpool2d<T>(const Tensor<T>&, int, int, int);            \
  template Tensor<T> avgpool2d_backward<T>(const Tensor<T>&, const Shape&,     \
                                           int, int, int);                     \
  template Tensor<T> global_avgpool<T>(const Tensor<T>&);                      \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int, int);           \
  template Tensor<T> resize_bilinear_backward<T>(const Tensor<T>&,             \
                                                 const Shape&);                \
  template Tensor<T> upsample_bilinear<T>(const Tensor<T>&, int);              \
  template Tensor<T> resize_nearest<T>(const Tensor<T>&, int, int);            \
  template Tensor<T> concat_channels<T>(const std::vector<const Tensor<T>*>&); \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> reduce_to<T>(const Tensor<T>&, const Shape&);             \
  template LabelMap argmax_channels<T>(const Tensor<T>&);

BISENET_INSTANTIATE(float)
BISENET_INSTANTIATE(double)
#undef BISENET_INSTANTIATE

}  // namespace bisenet::ops
