#include "serkd/optim.hpp"

#include <cmath>
#include <numbers>

#include "serkd/errors.hpp"

namespace serkd {

RmsProp::RmsProp(std::vector<Tensor> params, const OptimizerSpec& spec, std::size_t total_steps)
    : params_(std::move(params)), spec_(spec), total_steps_(total_steps) {
  for (const auto& p : params_) {
    if (!p.is_leaf() || !p.requires_grad()) throw ContractError("RmsProp: parameters must be trainable leaves");
    sq_avg_.emplace_back(p.numel(), 0.0);
  }
}

double RmsProp::current_lr() const {
  if (!spec_.cosine || total_steps_ == 0) return spec_.lr;
  const double progress = static_cast<double>(step_) / static_cast<double>(total_steps_);
  return 0.5 * spec_.lr * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

void RmsProp::step() {
  const double lr = current_lr();
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.leaf_values();
    auto& v = sq_avg_[k];
    const double decay = p.rank() >= 2 ? spec_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericalError("non-finite gradient at optimizer step " + std::to_string(step_));
      v[i] = kDecay * v[i] + (1 - kDecay) * g[i] * g[i];
      w[i] -= lr * (g[i] / (std::sqrt(v[i]) + kEps) + decay * w[i]);
    }
  }
  for (auto& p : params_) p.zero_grad();
  ++step_;
}

}  // namespace serkd
