#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "serkd/tensor.hpp"

namespace serkd {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_coordinate = 0;
};

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h, coordinate by coordinate.
/// Error per coordinate is |analytic - fd| / max(|fd|, 1e-6).
/// Throws NumericalError naming the coordinate if f is non-finite.
GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                  double h);

struct ParamCoordinate {
  std::size_t param;
  std::size_t index;
};

/// Same check over selected coordinates of several leaf parameters, which are
/// perturbed in place and restored afterwards.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                  std::span<const ParamCoordinate> coords, double h);

}  // namespace serkd
