#include "serkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace serkd {
namespace {

double finite_value(const Tensor& t, std::size_t coordinate, const char* where) {
  const double v = t.item();
  if (!std::isfinite(v)) {
    throw NumericalError(std::string("non-finite objective ") + where + " coordinate " + std::to_string(coordinate));
  }
  return v;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-6);
}

}  // namespace

GradCheckResult finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.clone(true);
  Tensor root = f(probe);
  finite_value(root, 0, "at the base point,");
  root.backward();
  std::vector<double> analytic(probe.numel(), 0.0);
  if (probe.has_grad()) std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());

  GradCheckResult result;
  std::vector<double> base(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto shifted = base;
    shifted[i] = base[i] + h;
    const double up = finite_value(f(Tensor::from(x.shape(), shifted)), i, "at +h,");
    shifted[i] = base[i] - h;
    const double down = finite_value(f(Tensor::from(x.shape(), shifted)), i, "at -h,");
    const double err = relative_error(analytic[i], (up - down) / (2.0 * h));
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = i;
    }
  }
  return result;
}

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                  std::span<const ParamCoordinate> coords, double h) {
  for (auto& p : params) p.zero_grad();
  Tensor root = f();
  finite_value(root, 0, "at the base point,");
  root.backward();

  GradCheckResult result;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    Tensor& p = params[coords[c].param];
    const std::size_t idx = coords[c].index;
    const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
    auto values = p.leaf_values();
    const double saved = values[idx];
    values[idx] = saved + h;
    const double up = finite_value(f(), c, "at +h,");
    values[idx] = saved - h;
    const double down = finite_value(f(), c, "at -h,");
    values[idx] = saved;
    const double err = relative_error(analytic, (up - down) / (2.0 * h));
    if (err >= result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_coordinate = c;
    }
  }
  for (auto& p : params) p.zero_grad();
  return result;
}

}  // namespace serkd
