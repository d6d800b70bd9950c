#include <cmath>
#include <cstdlib>
#include <string>

#include "bisenet/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bisenet {

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," +
         std::to_string(s.h) + "," + std::to_string(s.w) + ")";
}

Shape conv2d_output_shape(const Shape& x, const Shape& weight,
                          const ConvGeometry& g) {
  if (g.groups < 1 || g.stride < 1 || g.pad < 0) {
    throw ConfigError("conv2d: invalid geometry stride=" +
                      std::to_string(g.stride) + " pad=" +
                      std::to_string(g.pad) + " groups=" +
                      std::to_string(g.groups));
  }
  if (x.c % g.groups != 0) {
    throw ConfigError("conv2d: input channels " + std::to_string(x.c) +
                      " not divisible by groups " + std::to_string(g.groups));
  }
  if (weight.n % g.groups != 0) {
    throw ConfigError("conv2d: output channels " + std::to_string(weight.n) +
                      " not divisible by groups " + std::to_string(g.groups));
  }
  if (weight.c != x.c / g.groups) {
    throw ConfigError("conv2d: kernel " + to_string(weight) + " expects " +
                      std::to_string(weight.c * g.groups) +
                      " input channels, input is " + to_string(x));
  }
  if (weight.h != weight.w) {
    throw ConfigError("conv2d: only square kernels supported, got " +
                      to_string(weight));
  }
  const int k = weight.h;
  const int ho = (x.h + 2 * g.pad - k) / g.stride + 1;
  const int wo = (x.w + 2 * g.pad - k) / g.stride + 1;
  if (x.h + 2 * g.pad < k || x.w + 2 * g.pad < k) {
    throw ConfigError("conv2d: kernel " + std::to_string(k) +
                      " larger than padded input " + to_string(x));
  }
  return {x.n, weight.n, ho, wo};
}

Shape pool_output_shape(const Shape& x, int kernel, int stride, int pad) {
  if (kernel < 1 || stride < 1 || pad < 0 || 2 * pad > kernel) {
    throw ConfigError("pool: invalid window k=" + std::to_string(kernel) +
                      " s=" + std::to_string(stride) +
                      " p=" + std::to_string(pad));
  }
  if (x.h + 2 * pad < kernel || x.w + 2 * pad < kernel) {
    throw ConfigError("pool: window " + std::to_string(kernel) +
                      " larger than padded input " + to_string(x));
  }
  return {x.n, x.c, (x.h + 2 * pad - kernel) / stride + 1,
          (x.w + 2 * pad - kernel) / stride + 1};
}

namespace kernels {

namespace {
int initial_threads() {
  if (const char* env = std::getenv("BISENET_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}
int g_threads = initial_threads();
}  // namespace

int thread_count() { return g_threads; }
void set_thread_count(int n) {
  if (n < 1) throw ConfigError("thread count must be >= 1");
  g_threads = n;
}

LinearTaps half_pixel_taps(int in_size, int out_size) {
  LinearTaps t;
  t.lo.resize(out_size);
  t.hi.resize(out_size);
  t.frac.resize(out_size);
  const double ratio = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in_size - 1) lo = in_size - 1;
    t.lo[o] = lo;
    t.hi[o] = lo + 1 < in_size ? lo + 1 : in_size - 1;
    t.frac[o] = src - lo;
  }
  return t;
}

namespace serial {

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<T>* bias,
                    const ConvGeometry& g, Tensor<T>& y) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const Shape& ys = y.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  for (int n = 0; n < ys.n; ++n) {
    for (int co = 0; co < ys.c; ++co) {
      const int grp = co / cout_g;
      for (int oh = 0; oh < ys.h; ++oh) {
        for (int ow = 0; ow < ys.w; ++ow) {
          double acc = bias ? static_cast<double>(bias[co]) : 0.0;
          for (int cl = 0; cl < ws.c; ++cl) {
            const int ci = grp * ws.c + cl;
            for (int kh = 0; kh < k; ++kh) {
              const int ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= xs.w) continue;
                acc += static_cast<double>(w.at(co, cl, kh, kw)) *
                       static_cast<double>(x.at(n, ci, ih, iw));
              }
            }
          }
          y.at(n, co, oh, ow) = static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w,
                           const ConvGeometry& g, Tensor<T>& dx) {
  const Shape& xs = dx.shape();
  const Shape& ws = w.shape();
  const Shape& ys = dy.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  for (int n = 0; n < xs.n; ++n) {
    for (int ci = 0; ci < xs.c; ++ci) {
      const int grp = ci / ws.c;
      const int cl = ci % ws.c;
      for (int ih = 0; ih < xs.h; ++ih) {
        for (int iw = 0; iw < xs.w; ++iw) {
          double acc = 0.0;
          for (int co = grp * cout_g; co < (grp + 1) * cout_g; ++co) {
            for (int kh = 0; kh < k; ++kh) {
              const int th = ih + g.pad - kh;
              if (th < 0 || th % g.stride != 0) continue;
              const int oh = th / g.stride;
              if (oh >= ys.h) continue;
              for (int kw = 0; kw < k; ++kw) {
                const int tw = iw + g.pad - kw;
                if (tw < 0 || tw % g.stride != 0) continue;
                const int ow = tw / g.stride;
                if (ow >= ys.w) continue;
                acc += static_cast<double>(w.at(co, cl, kh, kw)) *
                       static_cast<double>(dy.at(n, co, oh, ow));
              }
            }
          }
          dx.at(n, ci, ih, iw) = static_cast<T>(acc);
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x,
                            const ConvGeometry& g, Tensor<T>& dw, std::type_identity_t<T>* dbias) {
  const Shape& xs = x.shape();
  const Shape& ws = dw.shape();
  const Shape& ys = dy.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  for (int co = 0; co < ws.n; ++co) {
    const int grp = co / cout_g;
    for (int cl = 0; cl < ws.c; ++cl) {
      const int ci = grp * ws.c + cl;
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          double acc = 0.0;
          for (int n = 0; n < ys.n; ++n) {
            for (int oh = 0; oh < ys.h; ++oh) {
              const int ih = oh * g.stride - g.pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              for (int ow = 0; ow < ys.w; ++ow) {
                const int iw = ow * g.stride - g.pad + kw;
                if (iw < 0 || iw >= xs.w) continue;
                acc += static_cast<double>(dy.at(n, co, oh, ow)) *
                       static_cast<double>(x.at(n, ci, ih, iw));
              }
            }
          }
          dw.at(co, cl, kh, kw) = static_cast<T>(acc);
        }
      }
    }
    if (dbias) {
      double acc = 0.0;
      for (int n = 0; n < ys.n; ++n)
        for (int i = 0; i < ys.h; ++i)
          for (int j = 0; j < ys.w; ++j) acc += dy.at(n, co, i, j);
      dbias[co] = static_cast<T>(acc);
    }
  }
}

namespace {
// Source coordinate and neighbours, evaluated from scratch per sample.
void bilinear_source(int o, int in, int out, int& lo, int& hi, double& frac) {
  double src = (o + 0.5) * in / out - 0.5;
  if (src < 0) src = 0;
  lo = static_cast<int>(std::floor(src));
  if (lo > in - 1) lo = in - 1;
  hi = lo + 1 < in ? lo + 1 : in - 1;
  frac = src - lo;
}
}  // namespace

template <typename T>
void resize_bilinear_forward(const Tensor<T>& x, Tensor<T>& y) {
  const Shape& xs = x.shape();
  const Shape& ys = y.shape();
  for (int n = 0; n < ys.n; ++n)
    for (int c = 0; c < ys.c; ++c)
      for (int oh = 0; oh < ys.h; ++oh) {
        int y0, y1;
        double fy;
        bilinear_source(oh, xs.h, ys.h, y0, y1, fy);
        for (int ow = 0; ow < ys.w; ++ow) {
          int x0, x1;
          double fx;
          bilinear_source(ow, xs.w, ys.w, x0, x1, fx);
          const double v = (1 - fy) * ((1 - fx) * x.at(n, c, y0, x0) +
                                       fx * x.at(n, c, y0, x1)) +
                           fy * ((1 - fx) * x.at(n, c, y1, x0) +
                                 fx * x.at(n, c, y1, x1));
          y.at(n, c, oh, ow) = static_cast<T>(v);
        }
      }
}

template <typename T>
void resize_bilinear_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const Shape& xs = dx.shape();
  const Shape& ys = dy.shape();
  std::vector<double> acc(xs.numel(), 0.0);
  for (int n = 0; n < ys.n; ++n)
    for (int c = 0; c < ys.c; ++c)
      for (int oh = 0; oh < ys.h; ++oh) {
        int y0, y1;
        double fy;
        bilinear_source(oh, xs.h, ys.h, y0, y1, fy);
        for (int ow = 0; ow < ys.w; ++ow) {
          int x0, x1;
          double fx;
          bilinear_source(ow, xs.w, ys.w, x0, x1, fx);
          const double g = dy.at(n, c, oh, ow);
          acc[dx.index(n, c, y0, x0)] += (1 - fy) * (1 - fx) * g;
          acc[dx.index(n, c, y0, x1)] += (1 - fy) * fx * g;
          acc[dx.index(n, c, y1, x0)] += fy * (1 - fx) * g;
          acc[dx.index(n, c, y1, x1)] += fy * fx * g;
        }
      }
  for (std::size_t i = 0; i < acc.size(); ++i) dx[i] = static_cast<T>(acc[i]);
}

#define BISENET_INSTANTIATE(T)                                              \
  template void conv2d_forward<T>(const Tensor<T>&, const Tensor<T>&,       \
                                  const T*, const ConvGeometry&, Tensor<T>&); \
  template void conv2d_backward_input<T>(const Tensor<T>&, const Tensor<T>&, \
                                         const ConvGeometry&, Tensor<T>&);   \
  template void conv2d_backward_weight<T>(const Tensor<T>&,                 \
                                          const Tensor<T>&,                 \
                                          const ConvGeometry&, Tensor<T>&,  \
                                          T*);                              \
  template void resize_bilinear_forward<T>(const Tensor<T>&, Tensor<T>&);   \
  template void resize_bilinear_backward<T>(const Tensor<T>&, Tensor<T>&);

BISENET_INSTANTIATE(float)
BISENET_INSTANTIATE(double)
#undef BISENET_INSTANTIATE

}  // namespace serial
}  // namespace kernels
}  // namespace bisenet
