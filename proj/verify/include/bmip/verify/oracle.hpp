#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "bmip/aggregation.hpp"
#include "bmip/backbone.hpp"

namespace bmip::verify {

/// Reference outputs computed with plain loops over raw parameter values.
/// Nothing here calls a tensor operation; parameters are only read.
struct OracleOutput {
  std::vector<double> text;            // W_K, [N, x, d_l]
  std::vector<double> vision;          // CLS_K, [B, d_v]
  std::vector<double> text_features;   // z, [N, d_shared]
  std::vector<double> image_features;  // x, [B, d_shared]
};

OracleOutput naive_forward(const Backbone& backbone, const PromptModel& model, std::span<const Caption> captions,
                           std::span<const Image> images);

inline constexpr double kOracleTolerance = 1e-12;

struct OracleCase {
  Strategy strategy = Strategy::Bmip;
  std::size_t depth = 0;
  std::uint64_t seed = 0;
  double max_abs_diff = 0;  // over every output entry
  bool passed() const { return max_abs_diff <= kOracleTolerance; }
};

/// interactive_forward and the feature heads against naive_forward for every
/// strategy on the micro model, at J = 1 and J = 2 with b = 1.
std::vector<OracleCase> run_oracle_suite(std::span<const std::uint64_t> seeds);

}  // namespace bmip::verify
