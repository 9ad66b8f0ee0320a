#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace llmembed {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

/// Adaptive-moment optimizer over a fixed list of parameter tensors. Each
/// tensor is addressed by a slot index that must stay stable across steps;
/// moments are allocated lazily on the slot's first update.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig config);

  /// Advances the shared step counter. Call once before the updates of a step.
  void begin_step() { ++step_; }

  void update(std::size_t slot, std::span<double> param, std::span<const double> grad);

  std::uint64_t step_count() const { return step_; }
  const AdamConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };

  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<Moments> moments_;
};

}  // namespace llmembed
