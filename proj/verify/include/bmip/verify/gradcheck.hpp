#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bmip/tensor.hpp"

namespace bmip::verify {

inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-6;

/// Denominator floor: well above the norm of central-difference noise
/// (~1e-8 at step 1e-6), far below the O(0.1)-O(10) gradients checked here. Keeps structurally zero gradients
/// (e.g. key biases under softmax) from reading as failures.
inline constexpr double kGradientNormFloor = 1e-4;

/// ||a - n|| / max(||a||, ||n||, kGradientNormFloor).
double relative_error(std::span<const double> analytic, std::span<const double> numeric);

struct GradcheckCase {
  std::string name;
  std::uint64_t seed = 0;
  double max_relative_error = 0;  // worst input tensor
  std::size_t coordinates = 0;    // scalars perturbed
  bool passed() const { return max_relative_error < kGradcheckTolerance; }
};

/// Compares the analytic gradient of sum(R * f()) against central differences
/// for every entry of every input, R a fixed random weighting of f's output.
/// f must rebuild its graph from the current input values on each call.
GradcheckCase check_gradients(std::string name, std::uint64_t seed, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, double step = kGradcheckStep);

/// Every differentiable operation, the encoder block, the losses, and the
/// full interactive forward of each aggregation strategy on the micro model.
std::vector<GradcheckCase> run_gradcheck_suite(std::span<const std::uint64_t> seeds);

}  // namespace bmip::verify
