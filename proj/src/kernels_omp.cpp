#include <algorithm>
#include <vector>

#include "bisenet/kernels.hpp"

namespace bisenet::kernels::omp {

namespace {

// Output columns [lo, hi) whose tap `kw` lands inside [0, in_w).
inline void valid_range(int out, int in, int stride, int pad, int tap,
                        int& lo, int& hi) {
  // need 0 <= o*stride - pad + tap < in
  const int a = pad - tap;
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const int b = in - 1 + pad - tap;
  hi = b < 0 ? 0 : std::min(out, b / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<T>* bias,
                    const ConvGeometry& g, Tensor<T>& y) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  const Shape ys = y.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  const int s = g.stride;
  const int planes = ys.n * ys.c;

  std::vector<int> col_lo(k), col_hi(k);
  for (int kw = 0; kw < k; ++kw)
    valid_range(ys.w, xs.w, s, g.pad, kw, col_lo[kw], col_hi[kw]);

#pragma omp parallel num_threads(thread_count())
  {
    std::vector<double> acc(ys.plane());
#pragma omp for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const int n = p / ys.c;
      const int co = p % ys.c;
      const int grp = co / cout_g;
      std::fill(acc.begin(), acc.end(),
                bias ? static_cast<double>(bias[co]) : 0.0);
      for (int cl = 0; cl < ws.c; ++cl) {
        const T* xp = x.plane(n, grp * ws.c + cl);
        const T* wp = w.plane(co, cl);
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            const double wv = wp[kh * k + kw];
            const int lo = col_lo[kw];
            const int hi = col_hi[kw];
            for (int oh = 0; oh < ys.h; ++oh) {
              const int ih = oh * s - g.pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              const std::ptrdiff_t base =
                  static_cast<std::ptrdiff_t>(ih) * xs.w - g.pad + kw;
              double* arow = acc.data() + static_cast<std::size_t>(oh) * ys.w;
              if (s == 1) {
                for (int ow = lo; ow < hi; ++ow) arow[ow] += wv * xp[base + ow];
              } else {
                for (int ow = lo; ow < hi; ++ow) arow[ow] += wv * xp[base + ow * s];
              }
            }
          }
        }
      }
      T* yp = y.plane(n, co);
      for (std::size_t i = 0; i < acc.size(); ++i) yp[i] = static_cast<T>(acc[i]);
    }
  }
}

template <typename T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w,
                           const ConvGeometry& g, Tensor<T>& dx) {
  const Shape xs = dx.shape();
  const Shape ws = w.shape();
  const Shape ys = dy.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  const int s = g.stride;
  const int planes = xs.n * xs.c;

  std::vector<int> col_lo(k), col_hi(k);
  for (int kw = 0; kw < k; ++kw)
    valid_range(ys.w, xs.w, s, g.pad, kw, col_lo[kw], col_hi[kw]);

#pragma omp parallel num_threads(thread_count())
  {
    std::vector<double> acc(xs.plane());
#pragma omp for schedule(static)
    for (int p = 0; p < planes; ++p) {
      const int n = p / xs.c;
      const int ci = p % xs.c;
      const int grp = ci / ws.c;
      const int cl = ci % ws.c;
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int co = grp * cout_g; co < (grp + 1) * cout_g; ++co) {
        const T* gp = dy.plane(n, co);
        const T* wp = w.plane(co, cl);
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            const double wv = wp[kh * k + kw];
            const int lo = col_lo[kw];
            const int hi = col_hi[kw];
            for (int oh = 0; oh < ys.h; ++oh) {
              const int ih = oh * s - g.pad + kh;
              if (ih < 0 || ih >= xs.h) continue;
              const std::ptrdiff_t base =
                  static_cast<std::ptrdiff_t>(ih) * xs.w - g.pad + kw;
              const T* grow = gp + static_cast<std::size_t>(oh) * ys.w;
              for (int ow = lo; ow < hi; ++ow) acc[base + ow * s] += wv * grow[ow];
            }
          }
        }
      }
      T* dp = dx.plane(n, ci);
      for (std::size_t i = 0; i < acc.size(); ++i) dp[i] = static_cast<T>(acc[i]);
    }
  }
}

template <typename T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x,
                            const ConvGeometry& g, Tensor<T>& dw, std::type_identity_t<T>* dbias) {
  const Shape xs = x.shape();
  const Shape ws = dw.shape();
  const Shape ys = dy.shape();
  const int cout_g = ws.n / g.groups;
  const int k = ws.h;
  const int s = g.stride;

  std::vector<int> col_lo(k), col_hi(k);
  for (int kw = 0; kw < k; ++kw)
    valid_range(ys.w, xs.w, s, g.pad, kw, col_lo[kw], col_hi[kw]);

#pragma omp parallel num_threads(thread_count())
  {
    std::vector<double> acc(static_cast<std::size_t>(ws.c) * k * k);
#pragma omp for schedule(static)
    for (int co = 0; co < ws.n; ++co) {
      const int grp = co / cout_g;
      std::fill(acc.begin(), acc.end(), 0.0);
      double bacc = 0.0;
      for (int n = 0; n < ys.n; ++n) {
        const T* gp = dy.plane(n, co);
        if (dbias) {
          for (std::size_t i = 0; i < ys.plane(); ++i) bacc += gp[i];
        }
        for (int cl = 0; cl < ws.c; ++cl) {
          const T* xp = x.plane(n, grp * ws.c + cl);
          for (int kh = 0; kh < k; ++kh) {
            for (int kw = 0; kw < k; ++kw) {
              double sum = 0.0;
              const int lo = col_lo[kw];
              const int hi = col_hi[kw];
              for (int oh = 0; oh < ys.h; ++oh) {
                const int ih = oh * s - g.pad + kh;
                if (ih < 0 || ih >= xs.h) continue;
                const std::ptrdiff_t base =
                    static_cast<std::ptrdiff_t>(ih) * xs.w - g.pad + kw;
                const T* grow = gp + static_cast<std::size_t>(oh) * ys.w;
                for (int ow = lo; ow < hi; ++ow)
                  sum += static_cast<double>(grow[ow]) * xp[base + ow * s];
              }
              acc[(static_cast<std::size_t>(cl) * k + kh) * k + kw] += sum;
            }
          }
        }
      }
      T* dp = dw.plane(co, 0);
      for (std::size_t i = 0; i < acc.size(); ++i) dp[i] = static_cast<T>(acc[i]);
      if (dbias) dbias[co] = static_cast<T>(bacc);
    }
  }
}

template <typename T>
void resize_bilinear_forward(const Tensor<T>& x, Tensor<T>& y) {
  const Shape xs = x.shape();
  const Shape ys = y.shape();
  const LinearTaps th = half_pixel_taps(xs.h, ys.h);
  const LinearTaps tw = half_pixel_taps(xs.w, ys.w);
  const int planes = ys.n * ys.c;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (int p = 0; p < planes; ++p) {
    const T* xp = x.data() + static_cast<std::size_t>(p) * xs.plane();
    T* yp = y.data() + static_cast<std::size_t>(p) * ys.plane();
    for (int oh = 0; oh < ys.h; ++oh) {
      const T* r0 = xp + static_cast<std::size_t>(th.lo[oh]) * xs.w;
      const T* r1 = xp + static_cast<std::size_t>(th.hi[oh]) * xs.w;
      const double fy = th.frac[oh];
      for (int ow = 0; ow < ys.w; ++ow) {
        const double fx = tw.frac[ow];
        const int x0 = tw.lo[ow];
        const int x1 = tw.hi[ow];
        const double v = (1 - fy) * ((1 - fx) * r0[x0] + fx * r0[x1]) +
                         fy * ((1 - fx) * r1[x0] + fx * r1[x1]);
        yp[static_cast<std::size_t>(oh) * ys.w + ow] = static_cast<T>(v);
      }
    }
  }
}

template <typename T>
void resize_bilinear_backward(const Tensor<T>& dy, Tensor<T>& dx) {
  const Shape xs = dx.shape();
  const Shape ys = dy.shape();
  const LinearTaps th = half_pixel_taps(xs.h, ys.h);
  const LinearTaps tw = half_pixel_taps(xs.w, ys.w);
  const int planes = ys.n * ys.c;
#pragma omp parallel num_threads(thread_count())
  {
    std::vector<double> acc(xs.plane());
#pragma omp for schedule(static)
    for (int p = 0; p < planes; ++p) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const T* gp = dy.data() + static_cast<std::size_t>(p) * ys.plane();
      for (int oh = 0; oh < ys.h; ++oh) {
        double* r0 = acc.data() + static_cast<std::size_t>(th.lo[oh]) * xs.w;
        double* r1 = acc.data() + static_cast<std::size_t>(th.hi[oh]) * xs.w;
        const double fy = th.frac[oh];
        for (int ow = 0; ow < ys.w; ++ow) {
          const double gv = gp[static_cast<std::size_t>(oh) * ys.w + ow];
          const double fx = tw.frac[ow];
          r0[tw.lo[ow]] += (1 - fy) * (1 - fx) * gv;
          r0[tw.hi[ow]] += (1 - fy) * fx * gv;
          r1[tw.lo[ow]] += fy * (1 - fx) * gv;
          r1[tw.hi[ow]] += fy * fx * gv;
        }
      }
      T* dp = dx.data() + static_cast<std::size_t>(p) * xs.plane();
      for (std::size_t i = 0; i < acc.size(); ++i) dp[i] = static_cast<T>(acc[i]);
    }
  }
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

}  // namespace bisenet::kernels::omp
