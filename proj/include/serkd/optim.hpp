#pragma once

#include <cstddef>
#include <vector>

#include "serkd/config.hpp"
#include "serkd/tensor.hpp"

namespace serkd {

/// RMSprop without momentum, decoupled weight decay on matrices (rank >= 2)
/// and an optional cosine decay of the learning rate to zero over
/// `total_steps`.
class RmsProp {
 public:
  RmsProp(std::vector<Tensor> params, const OptimizerSpec& spec, std::size_t total_steps);

  /// Updates every parameter that holds a gradient, then clears all
  /// gradients. Throws NumericalError on a non-finite gradient.
  void step();
  double current_lr() const;
  std::size_t steps_taken() const { return step_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> sq_avg_;
  OptimizerSpec spec_;
  std::size_t total_steps_;
  std::size_t step_ = 0;
  static constexpr double kDecay = 0.99;
  static constexpr double kEps = 1e-8;
};

}  // namespace serkd
