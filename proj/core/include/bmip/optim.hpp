#pragma once

#include <cstddef>
#include <vector>

#include "bmip/tensor.hpp"

namespace bmip {

enum class Schedule { Constant, Cosine };

/// Learning rate at step `step` of `total_steps`. Cosine decays from base to 0.
double scheduled_lr(double base_lr, Schedule schedule, std::size_t step, std::size_t total_steps);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

/// SGD with heavy-ball momentum: v <- m v + g ; p <- p - lr v.
class Sgd {
 public:
  Sgd(std::vector<Tensor> params, double lr, double momentum = 0.9);

  /// Applies one update from the parameters' accumulated gradients.
  /// Throws std::runtime_error if any gradient is non-finite.
  void step();
  /// Same, with an explicit learning rate for this step.
  void step(double lr);
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr);
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_;
  double momentum_;
};

}  // namespace bmip
