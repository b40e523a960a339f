#include "bmip/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace bmip {

double scheduled_lr(double base_lr, Schedule schedule, std::size_t step, std::size_t total_steps) {
  if (schedule == Schedule::Constant || total_steps == 0) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.node()->grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      for (double& g : p.node()->grad) g *= factor;
    }
  }
  return norm;
}

Sgd::Sgd(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  if (!(lr >= 0.0)) throw ConfigError("sgd: learning rate must be >= 0, got " + std::to_string(lr));
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("sgd: momentum must lie in [0, 1), got " + std::to_string(momentum));
  }
  for (const auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
}

void Sgd::set_lr(double lr) {
  if (!(lr >= 0.0)) throw ConfigError("sgd: learning rate must be >= 0, got " + std::to_string(lr));
  lr_ = lr;
}

void Sgd::step() { step(lr_); }

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].node()->grad;
    if (g.empty()) continue;
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k])) {
        throw std::runtime_error("sgd: non-finite gradient in parameter " + std::to_string(i) +
                                 " at element " + std::to_string(k));
      }
    }
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& g = params_[i].node()->grad;
    if (g.empty()) continue;
    auto p = params_[i].mutable_data();
    auto& v = velocity_[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k];
      p[k] -= lr * v[k];
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace bmip
