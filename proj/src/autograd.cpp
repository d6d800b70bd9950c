#include "bisenet/autograd.hpp"

#include <unordered_set>

namespace bisenet::ag {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Var<T> Var<T>::make(Tensor<T> value, std::vector<Var> parents,
                    std::function<void(Node<T>&)> backward_fn,
                    std::string label) {
  Var out(std::move(value), false, std::move(label));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (Var& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
void backward(const Var<T>& out, const Tensor<T>& seed) {
  if (!out.defined()) {
    throw StateError("backward: output has no recorded forward pass");
  }
  if (!out.requires_grad()) {
    throw StateError(
        "backward: output does not depend on any differentiable leaf");
  }
  if (seed.shape() != out.shape()) {
    throw ConfigError("backward: seed shape " + to_string(seed.shape()) +
                      " does not match output " + to_string(out.shape()));
  }

  // Post-order DFS gives parents before children.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(out.node().get(), 0);
  seen.insert(out.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order)
    if (!n->is_leaf()) n->grad = Tensor<T>();
  out.node()->accumulate(seed);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty()) continue;
    if (n->is_leaf()) {
      if (n->param) {
        Tensor<T>& pg = n->param->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n->grad[i];
        n->grad = Tensor<T>();
      }
      continue;
    }
    n->backward_fn(*n);
    n->grad = Tensor<T>();
  }
}

template <typename T>
void backward(const Var<T>& out) {
  if (!out.defined()) {
    throw StateError("backward: output has no recorded forward pass");
  }
  backward(out, Tensor<T>(out.shape(), T(1)));
}

namespace {

template <typename T>
void push(Node<T>& self, std::size_t i, const Tensor<T>& g) {
  Node<T>& p = *self.parents[i];
  if (p.requires_grad) p.accumulate(g);
}

template <typename T>
bool wants(const Node<T>& self, std::size_t i) {
  return self.parents[i]->requires_grad;
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const std::type_identity_t<Var<T>>* bias,
              const ConvGeometry& g) {
  Tensor<T> y = ops::conv2d(x.value(), w.value(),
                            bias ? &bias->value() : nullptr, g);
  std::vector<Var<T>> parents{x, w};
  if (bias) parents.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return Var<T>::make(std::move(y), std::move(parents),
                      [g, has_bias](Node<T>& self) {
                        const Tensor<T>& xv = self.parents[0]->value;
                        const Tensor<T>& wv = self.parents[1]->value;
                        if (wants(self, 0)) {
                          Tensor<T> dx(xv.shape());
                          kernels::omp::conv2d_backward_input(self.grad, wv, g, dx);
                          push(self, 0, dx);
                        }
                        const bool need_w = wants(self, 1);
                        const bool need_b = has_bias && wants(self, 2);
                        if (need_w || need_b) {
                          Tensor<T> dw(wv.shape());
                          Tensor<T> db(has_bias ? self.parents[2]->value.shape()
                                                : Shape{});
                          kernels::omp::conv2d_backward_weight(
                              self.grad, xv, g, dw, has_bias ? db.data() : nullptr);
                          if (need_w) push(self, 1, dw);
                          if (need_b) push(self, 2, db);
                        }
                      },
                      "conv2d");
}

template <typename T>
Var<T> batchnorm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                   RunningStats<T>& stats, ops::BnMode mode, double momentum,
                   double eps) {
  auto saved = std::make_shared<ops::BnSaved>();
  Tensor<T> y = ops::batchnorm2d(x.value(), gamma.value(), beta.value(), stats,
                                 mode, momentum, eps, saved.get());
  const bool train = mode == ops::BnMode::Train;
  return Var<T>::make(
      std::move(y), {x, gamma, beta},
      [saved, train](Node<T>& self) {
        const Tensor<T>& xv = self.parents[0]->value;
        const Tensor<T>& gv = self.parents[1]->value;
        const Shape s = xv.shape();
        const std::size_t plane = s.plane();
        const double count = static_cast<double>(s.n) * plane;
        Tensor<T> dx(s), dgamma(gv.shape()), dbeta(gv.shape());
        const Tensor<T>& dy = self.grad;
#pragma omp parallel for schedule(static) num_threads(kernels::thread_count())
        for (int c = 0; c < s.c; ++c) {
          const double mean = saved->mean[c];
          const double invstd = saved->invstd[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int n = 0; n < s.n; ++n) {
            const T* xp = xv.plane(n, c);
            const T* gp = dy.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += gp[i];
              sum_dy_xhat += gp[i] * ((xp[i] - mean) * invstd);
            }
          }
          dgamma[c] = static_cast<T>(sum_dy_xhat);
          dbeta[c] = static_cast<T>(sum_dy);
          const double gam = gv[c];
          for (int n = 0; n < s.n; ++n) {
            const T* xp = xv.plane(n, c);
            const T* gp = dy.plane(n, c);
            T* dp = dx.plane(n, c);
            for (std::size_t i = 0; i < plane; ++i) {
              if (train) {
                const double xhat = (xp[i] - mean) * invstd;
                dp[i] = static_cast<T>(gam * invstd / count *
                                       (count * gp[i] - sum_dy -
                                        xhat * sum_dy_xhat));
              } else {
                dp[i] = static_cast<T>(gam * invstd * gp[i]);
              }
            }
          }
        }
        if (wants(self, 0)) push(self, 0, dx);
        if (wants(self, 1)) push(self, 1, dgamma);
        if (wants(self, 2)) push(self, 2, dbeta);
      },
      "batchnorm2d");
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return Var<T>::make(ops::relu(x.value()), {x},
                      [](Node<T>& self) {
                        const Tensor<T>& xv = self.parents[0]->value;
                        Tensor<T> dx(xv.shape());
                        for (std::size_t i = 0; i < dx.size(); ++i)
                          dx[i] = xv[i] > T(0) ? self.grad[i] : T(0);
                        push(self, 0, dx);
                      },
                      "relu");
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return Var<T>::make(ops::sigmoid(x.value()), {x},
                      [](Node<T>& self) {
                        const Tensor<T>& y = self.value;
                        Tensor<T> dx(y.shape());
                        for (std::size_t i = 0; i < dx.size(); ++i)
                          dx[i] = self.grad[i] * y[i] * (T(1) - y[i]);
                        push(self, 0, dx);
                      },
                      "sigmoid");
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, int k, int stride, int pad) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor<T> y = ops::maxpool2d(x.value(), k, stride, pad, argmax.get());
  return Var<T>::make(std::move(y), {x},
                      [argmax](Node<T>& self) {
                        Tensor<T> dx(self.parents[0]->value.shape());
                        // Each output maps to one input; order is fixed.
                        for (std::size_t o = 0; o < argmax->size(); ++o)
                          dx[(*argmax)[o]] += self.grad[o];
                        push(self, 0, dx);
                      },
                      "maxpool2d");
}

template <typename T>
Var<T> avgpool2d(const Var<T>& x, int k, int stride, int pad) {
  return Var<T>::make(ops::avgpool2d(x.value(), k, stride, pad), {x},
                      [k, stride, pad](Node<T>& self) {
                        push(self, 0,
                             ops::avgpool2d_backward(
                                 self.grad, self.parents[0]->value.shape(), k,
                                 stride, pad));
                      },
                      "avgpool2d");
}

template <typename T>
Var<T> global_avgpool(const Var<T>& x) {
  return Var<T>::make(ops::global_avgpool(x.value()), {x},
                      [](Node<T>& self) {
                        const Shape s = self.parents[0]->value.shape();
                        Tensor<T> dx(s);
                        const double inv = 1.0 / s.plane();
                        for (int n = 0; n < s.n; ++n)
                          for (int c = 0; c < s.c; ++c) {
                            const T g = static_cast<T>(self.grad.at(n, c, 0, 0) * inv);
                            T* p = dx.plane(n, c);
                            std::fill(p, p + s.plane(), g);
                          }
                        push(self, 0, dx);
                      },
                      "global_avgpool");
}

template <typename T>
Var<T> resize_bilinear(const Var<T>& x, int out_h, int out_w) {
  return Var<T>::make(ops::resize_bilinear(x.value(), out_h, out_w), {x},
                      [](Node<T>& self) {
                        push(self, 0,
                             ops::resize_bilinear_backward(
                                 self.grad, self.parents[0]->value.shape()));
                      },
                      "resize_bilinear");
}

template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, int scale) {
  if (scale < 1) {
    throw ConfigError("upsample_bilinear: scale must be >= 1, got " +
                      std::to_string(scale));
  }
  return resize_bilinear(x, x.shape().h * scale, x.shape().w * scale);
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  std::vector<const Tensor<T>*> values;
  values.reserve(xs.size());
  for (const auto& v : xs) values.push_back(&v.value());
  return Var<T>::make(
      ops::concat_channels(values), xs,
      [](Node<T>& self) {
        const Shape s = self.value.shape();
        int offset = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          const Shape ps = self.parents[i]->value.shape();
          if (wants(self, i)) {
            Tensor<T> g(ps);
            for (int n = 0; n < s.n; ++n)
              std::copy_n(self.grad.plane(n, offset),
                          static_cast<std::size_t>(ps.c) * ps.h * ps.w,
                          g.plane(n, 0));
            push(self, i, g);
          }
          offset += ps.c;
        }
      },
      "concat");
}

template <typename T>
Var<T> add(const Var<T>& x, const Var<T>& y) {
  return Var<T>::make(ops::add(x.value(), y.value()), {x, y},
                      [](Node<T>& self) {
                        for (std::size_t i = 0; i < 2; ++i)
                          if (wants(self, i))
                            push(self, i,
                                 ops::reduce_to(self.grad,
                                                self.parents[i]->value.shape()));
                      },
                      "add");
}

template <typename T>
Var<T> mul(const Var<T>& x, const Var<T>& y) {
  return Var<T>::make(
      ops::mul(x.value(), y.value()), {x, y},
      [](Node<T>& self) {
        const Tensor<T>& a = self.parents[0]->value;
        const Tensor<T>& b = self.parents[1]->value;
        if (wants(self, 0))
          push(self, 0, ops::reduce_to(ops::mul(self.grad, b), a.shape()));
        if (wants(self, 1))
          push(self, 1, ops::reduce_to(ops::mul(self.grad, a), b.shape()));
      },
      "mul");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double s = 0.0;
  for (T v : x.value().span()) s += v;
  return Var<T>::make(Tensor<T>({1, 1, 1, 1}, static_cast<T>(s)), {x},
                      [](Node<T>& self) {
                        push(self, 0,
                             Tensor<T>(self.parents[0]->value.shape(),
                                       self.grad[0]));
                      },
                      "sum");
}

template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& xs,
                    const std::vector<double>& weights) {
  if (xs.size() != weights.size()) {
    throw ConfigError("weighted_sum: " + std::to_string(xs.size()) +
                      " terms but " + std::to_string(weights.size()) +
                      " weights");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].value().size() != 1) {
      throw ConfigError("weighted_sum: terms must be scalars, got " +
                        to_string(xs[i].shape()));
    }
    s += weights[i] * xs[i].value()[0];
  }
  return Var<T>::make(Tensor<T>({1, 1, 1, 1}, static_cast<T>(s)), xs,
                      [weights](Node<T>& self) {
                        for (std::size_t i = 0; i < self.parents.size(); ++i)
                          if (wants(self, i))
                            push(self, i,
                                 Tensor<T>({1, 1, 1, 1},
                                           static_cast<T>(weights[i] *
                                                          self.grad[0])));
                      },
                      "weighted_sum");
}

#define BISENET_INSTANTIATE(T)                                                 \
  template class Var<T>;                                                       \
  template void backward<T>(const Var<T>&, const Tensor<T>&);                  \
  template void backward<T>(const Var<T>&);                                    \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>*,       \
                            const ConvGeometry&);                              \
  template Var<T> batchnorm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&,  \
                                 RunningStats<T>&, ops::BnMode, double,        \
                                 double);                                      \
  template Var<T> relu<T>(const Var<T>&);                                      \
  template Var<T> sigmoid<T>(const Var<T>&);                                   \
  template Var<T> maxpool2d<T>(const Var<T>&, int, int, int);                  \
  template Var<T> avgpool2d<T>(const Var<T>&, int, int, int);                  \
  template Var<T> global_avgpool<T>(const Var<T>&);                            \
  template Var<T> resize_bilinear<T>(const Var<T>&, int, int);                 \
  template Var<T> upsample_bilinear<T>(const Var<T>&, int);                    \
  template Var<T> concat_channels<T>(const std::vector<Var<T>>&);              \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                        \
  template Var<T> sum<T>(const Var<T>&);                                       \
  template Var<T> weighted_sum<T>(const std::vector<Var<T>>&,                  \
                                  const std::vector<double>&);

BISENET_INSTANTIATE(float)
BISENET_INSTANTIATE(double)
#undef BISENET_INSTANTIATE

}  // namespace bisenet::ag
