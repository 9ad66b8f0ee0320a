#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "llmembed/fusion.hpp"

namespace llmembed {

/// Trainable head mapping a fused embedding to class logits. Without a
/// hidden layer it is a single affine map; with `hidden_width > 0` it is
/// affine -> ReLU -> affine.
struct ClassifierParams {
  std::uint32_t hidden_width = 0;
  Matrix hidden_weight;  // hidden_width x input_dim
  Vector hidden_bias;    // hidden_width
  Matrix weight;         // n_classes x (hidden_width or input_dim)
  Vector bias;           // n_classes

  /// Output layer starts at zero; the hidden layer, when present, is uniform
  /// in [-1/sqrt(input_dim), 1/sqrt(input_dim)] so units break symmetry.
  static ClassifierParams init(std::size_t input_dim, std::size_t n_classes, std::uint32_t hidden_width,
                               std::uint64_t seed);

  std::size_t input_dim() const;
  std::size_t n_classes() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t parameter_count() const;
  bool has_hidden() const { return hidden_width > 0; }

  bool operator==(const ClassifierParams& other) const;
};

/// Intermediate activations kept for the backward pass.
struct HeadForward {
  Matrix hidden_pre;  // empty without a hidden layer
  Matrix hidden;
  Matrix logits;
};

HeadForward forward(const ClassifierParams& params, const MatrixRef& fused);
Matrix forward_logits(const ClassifierParams& params, const MatrixRef& fused);

struct ClassifierGrads {
  Matrix hidden_weight;
  Vector hidden_bias;
  Matrix weight;
  Vector bias;
  Matrix input;  // d loss / d fused, feeds fuse_backward
};

ClassifierGrads backward(const ClassifierParams& params, const MatrixRef& fused, const HeadForward& cache,
                         const MatrixRef& grad_logits);

/// Row-wise softmax with max subtraction.
Matrix softmax(const MatrixRef& logits);

struct LossResult {
  double loss = 0.0;
  Matrix grad_logits;  // (softmax - onehot) / B
};

/// Mean negative log-likelihood of the true class.
LossResult softmax_cross_entropy(const MatrixRef& logits, std::span<const std::uint32_t> labels);

/// Index of the largest entry; ties resolve to the lowest index.
std::uint32_t argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row);

struct Prediction {
  std::uint32_t label = 0;
  std::vector<double> probabilities;
};

/// Rows are fused and scored in chunks of `chunk_rows` to bound memory.
std::vector<Prediction> predict(const ClassifierParams& params, const ProjectionParams& projections,
                                const SourceSet& sources, std::span<const std::size_t> rows,
                                const FusionStrategy& strategy, unsigned threads = 1, std::size_t chunk_rows = 1024);

/// Fraction of rows whose argmax logit equals the label.
double evaluate(const ClassifierParams& params, const ProjectionParams& projections, const DatasetBundle& bundle,
                const FusionStrategy& strategy, unsigned threads = 1, std::size_t chunk_rows = 1024);

double accuracy(const MatrixRef& logits, std::span<const std::uint32_t> labels);

}  // namespace llmembed
