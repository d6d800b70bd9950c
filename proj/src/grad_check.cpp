#include "bisenet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bisenet {

namespace {

std::vector<std::size_t> pick_coords(std::size_t n, std::size_t max_coords,
                                     std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (max_coords == 0 || max_coords >= n) return idx;
  for (std::size_t i = 0; i < max_coords; ++i) {
    const std::size_t j = i + rng() % (n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

GradCheckResult grad_check_detailed(const DiffFn& fn,
                                    const std::vector<Tensor<double>>& inputs,
                                    const std::vector<ParamTensor<double>*>& params,
                                    const GradCheckOptions& opt) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-3)) {
    throw ConfigError("grad_check eps must lie in [1e-7, 1e-3]");
  }
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);

  std::vector<Tensor<double>> x = inputs;
  auto evaluate = [&](bool record) {
    std::vector<ag::Var<double>> vars;
    for (auto& t : x) vars.emplace_back(t, record);
    return std::make_pair(fn(vars), vars);
  };

  // Analytic pass.
  for (auto* p : params) p->zero_grad();
  auto [out, vars] = evaluate(true);
  Tensor<double> proj(out.shape());
  for (std::size_t i = 0; i < proj.size(); ++i) proj[i] = uni(rng);
  ag::backward(out, proj);
  std::vector<Tensor<double>> analytic_in;
  for (auto& v : vars) analytic_in.push_back(v.grad());
  std::vector<Tensor<double>> analytic_p;
  for (auto* p : params) analytic_p.push_back(p->grad);

  auto loss = [&] {
    ag::NoGradGuard guard;
    const auto y = evaluate(false).first.value();
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += proj[i] * y[i];
    return s;
  };

  GradCheckResult r;
  auto check = [&](double& slot, double analytic, const std::string& where) {
    const double saved = slot;
    slot = saved + opt.eps;
    const double lp = loss();
    slot = saved - opt.eps;
    const double lm = loss();
    slot = saved;
    const double fd = (lp - lm) / (2 * opt.eps);
    const double err = std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
    if (r.coords_checked++ == 0 || err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = where;
    }
  };

  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t i : pick_coords(x[t].size(), opt.max_coords, rng)) {
      check(x[t][i], analytic_in[t][i],
            "input " + std::to_string(t) + " [" + std::to_string(i) + "]");
    }
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<double>& value = params[k]->value;
    for (std::size_t i : pick_coords(value.size(), opt.max_coords, rng)) {
      check(value[i], analytic_p[k][i],
            "param " + std::to_string(k) + " [" + std::to_string(i) + "]");
    }
  }
  for (auto* p : params) p->zero_grad();
  return r;
}

double grad_check(const DiffFn& fn, const std::vector<Tensor<double>>& inputs,
                  double eps, const std::vector<ParamTensor<double>*>& params) {
  GradCheckOptions opt;
  opt.eps = eps;
  return grad_check_detailed(fn, inputs, params, opt).max_rel_error;
}

}  // namespace bisenet
