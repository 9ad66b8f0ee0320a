#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "llmembed/embedding_store.hpp"

namespace llmembed {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using MatrixRef = Eigen::Ref<const Matrix>;

inline constexpr std::string_view kLlama2 = "llama2";
inline constexpr std::string_view kBert = "bert";
inline constexpr std::string_view kRoberta = "roberta";

// ---------------------------------------------------------------------------
// Primitives

/// Elementwise mean over the depth (row) axis of an H x K stack.
Vector avg_pool(const MatrixRef& stack);

/// Elementwise maximum over the depth (row) axis of an H x K stack.
Vector max_pool(const MatrixRef& stack);

/// Parts joined end to end in the given order.
Vector concat(std::span<const Vector> parts);

/// PN(x; sigma) = tanh(2 sigma x). Odd, strictly increasing, range (-1, 1).
double power_normalize(double x, double sigma);
Matrix power_normalize(const MatrixRef& x, double sigma);

/// The same map written as a logistic ratio, (1 - e^{-4 sigma x}) / (1 + e^{-4 sigma x}).
/// Kept as an independent evaluation route for cross-checking.
double power_normalize_logistic(double x, double sigma);

/// Row-concatenated Gram matrix X X^T of an H' x K stack, power-normalized.
/// Entry (i * H' + j) is PN(<x_i, x_j>).
Vector cooccurrence(const MatrixRef& stack, double sigma);

// ---------------------------------------------------------------------------
// Strategy catalog

inline constexpr int kStrategyCount = 15;
inline constexpr double kDefaultSigma = 0.3;
inline constexpr std::uint32_t kDefaultProjectionDim = 1024;

/// One of the fifteen fusion recipes. Indices 1-4 use llama2 alone, 5-7 add
/// bert, 8-10 add roberta, 11-15 use all three; 14 and 15 add co-occurrence
/// pooling over learnably projected vectors.
struct FusionStrategy {
  int index = 2;
  double sigma = kDefaultSigma;
  std::uint32_t projection_dim = kDefaultProjectionDim;

  /// Accepts "1".."15" or an alias such as "avg", "avg+cat", "cat+co+avg+cat",
  /// "max+cat@bert". Whitespace and case are ignored.
  static FusionStrategy parse(std::string_view selector);
  static FusionStrategy from_index(int index);

  /// Operator label, e.g. "Avg + Cat".
  std::string_view label() const;
  std::string description() const;
  std::vector<std::string_view> required_sources() const;
  bool learnable() const { return index >= 14; }

  void validate() const;
};

/// Alias table used by FusionStrategy::parse, in listing order.
struct StrategyAlias {
  std::string_view alias;
  int index;
};
std::span<const StrategyAlias> strategy_aliases();

struct SourceShape {
  std::uint32_t depths = 0;
  std::uint32_t dim = 0;
};

struct SourceLayout {
  std::optional<SourceShape> llama2;
  std::optional<SourceShape> bert;
  std::optional<SourceShape> roberta;

  std::optional<SourceShape> get(std::string_view name) const;
};

/// Output width of `strategy` for the given source shapes. Throws
/// Error(missing_source) when a required source is absent.
std::size_t fused_dim(const FusionStrategy& strategy, const SourceLayout& layout);

/// Non-owning view of the backbone matrices a strategy may draw from.
struct SourceSet {
  const EmbeddingMatrix* llama2 = nullptr;
  const EmbeddingMatrix* bert = nullptr;
  const EmbeddingMatrix* roberta = nullptr;

  static SourceSet from(const DatasetBundle& bundle);
  SourceLayout layout() const;
  std::size_t n_rows() const;
};

// ---------------------------------------------------------------------------
// Alignment projections

/// Affine map x -> W^T x + b resizing one source's vectors to projection_dim.
/// W is dim x projection_dim.
struct Projection {
  std::string source;
  Matrix weight;
  Vector bias;
};

/// Learnable state of the fusion stage. Only strategies 14 and 15 carry
/// layers: llama2 is always projected, encoders only when their width
/// differs from projection_dim. `version` increments on every update so
/// cached forward passes can be recognised as stale.
struct ProjectionParams {
  std::vector<Projection> layers;
  std::uint64_t version = 0;

  /// Weights uniform in [-1/sqrt(dim), 1/sqrt(dim)], zero bias.
  static ProjectionParams init(const FusionStrategy& strategy, const SourceLayout& layout, std::uint64_t seed);

  const Projection* find(std::string_view source) const;
  bool empty() const { return layers.empty(); }
  std::size_t parameter_count() const;
  void touch() { ++version; }
};

/// Gradients mirror ProjectionParams layer for layer; empty when the strategy
/// has nothing to learn.
struct ProjectionGrads {
  std::vector<Projection> layers;
  bool empty() const { return layers.empty(); }
};

// ---------------------------------------------------------------------------
// Fusion

struct FusedBatch {
  Matrix vectors;
  int strategy = 0;

  // Backward cache, populated for learnable strategies only.
  struct Cache {
    std::vector<std::size_t> rows;
    SourceSet sources;
    std::uint64_t params_version = 0;
    std::vector<Matrix> stacks;      // per row X, H' x K*
    std::vector<Matrix> normalized;  // per row PN(X X^T), H' x H'
  };
  std::optional<Cache> cache;
};

/// Applies `strategy` to the listed rows. Rows are independent, so `threads`
/// only changes wall-clock time, never the result.
FusedBatch fuse(const SourceSet& sources, std::span<const std::size_t> rows, const FusionStrategy& strategy,
                const ProjectionParams& params, unsigned threads = 1);

/// Convenience overload fusing every row of the bundle without a cache.
Matrix fuse_all(const DatasetBundle& bundle, const FusionStrategy& strategy, const ProjectionParams& params,
                unsigned threads = 1);

/// Gradient of sum(upstream .* batch.vectors) with respect to the projection
/// parameters. Throws Error(stale_cache) if `params` changed since `batch`
/// was produced or the cache is missing.
ProjectionGrads fuse_backward(const FusedBatch& batch, const MatrixRef& upstream, const FusionStrategy& strategy,
                              const ProjectionParams& params);

}  // namespace llmembed
