#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "llmembed/classifier.hpp"
#include "llmembed/fusion.hpp"
#include "llmembed/optimizer.hpp"
#include "llmembed/timing.hpp"

namespace llmembed {

struct TrainConfig {
  std::size_t batch_size = 1024;
  int epochs = 100;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool deterministic = false;
  unsigned threads = 1;
  /// Evaluate train/test accuracy every this many epochs; 0 means only after the last one.
  int eval_every = 0;
  std::uint32_t hidden_width = 0;

  void validate() const;
  /// Thread count actually used: deterministic mode pins everything to one.
  unsigned effective_threads() const { return deterministic ? 1u : std::max(1u, threads); }
};

struct EvalRecord {
  int epoch = 0;
  double train_accuracy = 0.0;
  double test_accuracy = -1.0;  // negative when no test bundle was supplied
};

struct TrainReport {
  int strategy = 0;
  std::vector<double> epoch_loss;
  std::vector<EvalRecord> evals;
  std::vector<PhaseTiming> timings;
  double final_train_accuracy = 0.0;
  double final_test_accuracy = -1.0;
  TrainConfig config;

  /// One "epoch loss" pair per line, epochs counted from 1.
  std::string loss_curve_text() const;
};

struct TrainResult {
  ClassifierParams classifier;
  ProjectionParams projections;
  TrainReport report;
};

/// Loss and every parameter gradient for one batch of rows.
struct BatchGradients {
  double loss = 0.0;
  ClassifierGrads classifier;
  ProjectionGrads projections;
};

/// fuse -> head -> softmax cross-entropy -> backward through head and fusion.
BatchGradients compute_gradients(const ClassifierParams& classifier, const ProjectionParams& projections,
                                 const SourceSet& sources, std::span<const std::size_t> rows,
                                 std::span<const std::uint32_t> labels, const FusionStrategy& strategy,
                                 unsigned threads = 1);

/// Seeds for classifier and projection initialisation derived from the run seed.
std::uint64_t classifier_seed(std::uint64_t run_seed);
std::uint64_t projection_seed(std::uint64_t run_seed);

/// Full-permutation Fisher-Yates shuffle. Uses rejection sampling on the raw
/// engine output rather than std::uniform_int_distribution, so the order is
/// identical across standard library implementations.
void shuffle_rows(std::vector<std::size_t>& rows, std::mt19937_64& rng);

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Mini-batch training of the head (and the projections of learnable
/// strategies). `test` may be null. Throws Error(non_finite) with the epoch,
/// batch and loss value if the loss ever stops being finite.
TrainResult train(const DatasetBundle& train_set, const DatasetBundle* test_set, const FusionStrategy& strategy,
                  const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace llmembed
