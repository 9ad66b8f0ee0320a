#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "llmembed/classifier.hpp"
#include "llmembed/fusion.hpp"

namespace llmembed {

struct CheckpointSource {
  std::string name;
  std::uint32_t depths = 0;
  std::uint32_t dim = 0;

  bool operator==(const CheckpointSource&) const = default;
};

/// Everything needed to score new rows: the fusion recipe, the source shapes
/// it was trained on, class names and all learned parameters.
struct Checkpoint {
  FusionStrategy strategy;
  std::vector<CheckpointSource> sources;  // the strategy's required sources, in catalog order
  std::vector<std::string> class_names;
  ClassifierParams classifier;
  ProjectionParams projections;

  /// Throws Error(mismatch) when `bundle` lacks a source or has different
  /// shapes or class count than the checkpoint was trained with.
  void check_compatible(const DatasetBundle& bundle) const;
};

Checkpoint make_checkpoint(const FusionStrategy& strategy, const DatasetBundle& train_set,
                           ClassifierParams classifier, ProjectionParams projections);

// Checkpoint file:
//   "LLMC" | u32 version=1 | u32 strategy | f64 sigma | u32 projection_dim |
//   u8 n_sources | per source: u16 len, name, u32 depths, u32 dim |
//   u32 n_classes | per class: u16 len, name | u64 fused_dim | u32 hidden_width |
//   u32 n_projection_layers | per layer: u16 len, source name |
//   u32 crc32(header so far) |
//   f64 payload: [hidden_weight, hidden_bias,] weight, bias, then per layer weight, bias |
//   u32 crc32(payload)
// Matrices are row-major; everything little-endian.
inline constexpr char kCheckpointMagic[4] = {'L', 'L', 'M', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace llmembed
