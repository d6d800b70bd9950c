#pragma once

// Central finite-difference check of reverse-mode gradients (double only).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bisenet/autograd.hpp"

namespace bisenet {

using DiffFn =
    std::function<ag::Var<double>(const std::vector<ag::Var<double>>& inputs)>;

struct GradCheckOptions {
  double eps = 1e-6;
  std::uint64_t seed = 7;  // random projection of the output
  /// Coordinates checked per tensor; 0 checks all of them, otherwise a
  /// seeded sample of this many.
  std::size_t max_coords = 0;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::string worst;  // "input 0 [13]" / "param 'x.weight' [4]"
  std::size_t coords_checked = 0;
};

/// Compares the analytic gradient of L = <r, fn(inputs)> (r a fixed random
/// projection) with central differences over every input coordinate and
/// every coordinate of `params`, which `fn` is expected to read. Returns
/// max |analytic - fd| / max(1, |fd|).
GradCheckResult grad_check_detailed(const DiffFn& fn,
                                    const std::vector<Tensor<double>>& inputs,
                                    const std::vector<ParamTensor<double>*>& params = {},
                                    const GradCheckOptions& opt = {});

double grad_check(const DiffFn& fn, const std::vector<Tensor<double>>& inputs,
                  double eps = 1e-6,
                  const std::vector<ParamTensor<double>*>& params = {});

}  // namespace bisenet
