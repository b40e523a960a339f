#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "bmip/aggregation.hpp"
#include "bmip/backbone.hpp"

namespace bmip {

/// Layout (little-endian):
///   "BMIP" | u32 format version | u64 config digest | u32 blob count
///   per blob: u32 name length | name | u32 rank | u64 extents[rank] | f64 values
/// Backbone blobs are named "frozen/<parameter>", prompt-side blobs
/// "tunable/<parameter>".
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::uint64_t config_digest = 0;
  std::vector<NamedTensor> blobs;

  const Tensor* find(const std::string& name) const;
};

/// A sibling path unique to this process and thread, for write-then-rename.
std::filesystem::path temporary_sibling(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws CheckpointError on bad magic/version, truncation, or when the
/// stored digest differs from expected_digest.
Checkpoint read_checkpoint(const std::filesystem::path& path, std::uint64_t expected_digest);

Checkpoint make_checkpoint(std::uint64_t config_digest, const Backbone& backbone, const PromptModel* model = nullptr);

/// Rebuilds a frozen backbone of the given architecture from "frozen/" blobs.
Backbone restore_backbone(const Checkpoint& checkpoint, const BackboneConfig& config);
/// Overwrites every tunable parameter of `model` from "tunable/" blobs.
void restore_prompts(const Checkpoint& checkpoint, PromptModel& model);

}  // namespace bmip
