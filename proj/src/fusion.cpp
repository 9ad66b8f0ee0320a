#include "llmembed/fusion.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <random>
#include <sstream>

#include "llmembed/error.hpp"
#include "parallel.hpp"

namespace llmembed {

// ---------------------------------------------------------------------------
// Primitives

Vector avg_pool(const MatrixRef& stack) {
  if (stack.rows() < 1) throw Error(ErrorCode::shape, "avg_pool needs at least one depth");
  Vector out = Vector::Zero(stack.cols());
  for (Eigen::Index h = 0; h < stack.rows(); ++h) {
    for (Eigen::Index k = 0; k < stack.cols(); ++k) out[k] += stack(h, k);
  }
  return out / static_cast<double>(stack.rows());
}

Vector max_pool(const MatrixRef& stack) {
  if (stack.rows() < 1) throw Error(ErrorCode::shape, "max_pool needs at least one depth");
  Vector out = stack.row(0).transpose();
  for (Eigen::Index h = 1; h < stack.rows(); ++h) {
    for (Eigen::Index k = 0; k < stack.cols(); ++k) out[k] = std::max(out[k], stack(h, k));
  }
  return out;
}

Vector concat(std::span<const Vector> parts) {
  if (parts.empty()) throw Error(ErrorCode::shape, "concat needs at least one part");
  Eigen::Index total = 0;
  for (const auto& p : parts) total += p.size();
  Vector out(total);
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.segment(offset, p.size()) = p;
    offset += p.size();
  }
  return out;
}

double power_normalize(double x, double sigma) { return std::tanh(2.0 * sigma * x); }

Matrix power_normalize(const MatrixRef& x, double sigma) {
  return x.unaryExpr([sigma](double v) { return power_normalize(v, sigma); });
}

double power_normalize_logistic(double x, double sigma) {
  // Evaluate on the non-negative half and mirror, so exp never overflows.
  if (x < 0.0) return -power_normalize_logistic(-x, sigma);
  const double e = std::exp(-4.0 * sigma * x);
  return (1.0 - e) / (1.0 + e);
}

namespace {

// X X^T with each off-diagonal dot product computed once, so the result is
// bitwise symmetric whatever order the matrix product would have summed in.
Matrix gram(const MatrixRef& x) {
  const Eigen::Index h = x.rows();
  Matrix g(h, h);
  for (Eigen::Index i = 0; i < h; ++i) {
    for (Eigen::Index j = i; j < h; ++j) {
      g(i, j) = x.row(i).dot(x.row(j));
      g(j, i) = g(i, j);
    }
  }
  return g;
}

}  // namespace

Vector cooccurrence(const MatrixRef& stack, double sigma) {
  if (stack.rows() < 1) throw Error(ErrorCode::shape, "cooccurrence needs at least one row");
  const Matrix normalized = power_normalize(gram(stack), sigma);
  return Eigen::Map<const Vector>(normalized.data(), normalized.size());
}

// ---------------------------------------------------------------------------
// Strategy catalog

namespace {

struct StrategyInfo {
  std::string_view label;
  std::string_view description;
  bool bert;
  bool roberta;
};

constexpr std::array<StrategyInfo, kStrategyCount> kCatalog = {{
    {"/", "llama2 depth 1", false, false},
    {"Avg", "Avg(llama2 depths)", false, false},
    {"Max", "Max(llama2 depths)", false, false},
    {"Cat", "Cat(llama2 depths)", false, false},
    {"Avg + Cat", "Cat(Avg(llama2 depths), bert)", true, false},
    {"Max + Cat", "Cat(Max(llama2 depths), bert)", true, false},
    {"Cat", "Cat(llama2 depths, bert)", true, false},
    {"Avg + Cat", "Cat(Avg(llama2 depths), roberta)", false, true},
    {"Max + Cat", "Cat(Max(llama2 depths), roberta)", false, true},
    {"Cat", "Cat(llama2 depths, roberta)", false, true},
    {"Avg + Cat", "Cat(Avg(llama2 depths), bert, roberta)", true, true},
    {"Max + Cat", "Cat(Max(llama2 depths), bert, roberta)", true, true},
    {"Cat", "Cat(llama2 depths, bert, roberta)", true, true},
    {"Cat + Co", "PN(Cat(X X^T rows)), X = Cat(proj(llama2 depths), bert, roberta)", true, true},
    {"Cat + Co + Avg + Cat", "Cat(PN(Cat(X X^T rows)), Avg(llama2 depths))", true, true},
}};

constexpr std::array<StrategyAlias, 20> kAliases = {{
    {"single", 1},
    {"avg", 2},
    {"max", 3},
    {"cat", 4},
    {"avg+cat@bert", 5},
    {"max+cat@bert", 6},
    {"cat@bert", 7},
    {"avg+cat@roberta", 8},
    {"max+cat@roberta", 9},
    {"cat@roberta", 10},
    {"avg+cat", 11},
    {"avg+cat@all", 11},
    {"max+cat", 12},
    {"max+cat@all", 12},
    {"cat@all", 13},
    {"cat+co", 14},
    {"co", 14},
    {"cat+co+avg+cat", 15},
    {"co+avg", 15},
    {"llama2", 1},
}};

std::string normalize_selector(std::string_view text) {
  std::string out;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::string valid_selectors() {
  std::ostringstream os;
  os << "valid strategies are 1-15 or aliases:";
  for (const auto& a : kAliases) os << ' ' << a.alias;
  return os.str();
}

}  // namespace

std::span<const StrategyAlias> strategy_aliases() { return kAliases; }

FusionStrategy FusionStrategy::from_index(int index) {
  FusionStrategy s;
  s.index = index;
  s.validate();
  return s;
}

FusionStrategy FusionStrategy::parse(std::string_view selector) {
  const std::string key = normalize_selector(selector);
  if (!key.empty() && std::all_of(key.begin(), key.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
    const int index = key.size() <= 3 ? std::stoi(key) : -1;
    if (index < 1 || index > kStrategyCount) {
      throw Error(ErrorCode::argument, "unknown strategy index " + key + "; " + valid_selectors());
    }
    return from_index(index);
  }
  for (const auto& a : kAliases) {
    if (a.alias == key) return from_index(a.index);
  }
  throw Error(ErrorCode::argument, "unknown strategy '" + std::string(selector) + "'; " + valid_selectors());
}

std::string_view FusionStrategy::label() const {
  validate();
  return kCatalog[index - 1].label;
}

std::string FusionStrategy::description() const {
  validate();
  return std::string(kCatalog[index - 1].description);
}

std::vector<std::string_view> FusionStrategy::required_sources() const {
  validate();
  const auto& info = kCatalog[index - 1];
  std::vector<std::string_view> out{kLlama2};
  if (info.bert) out.push_back(kBert);
  if (info.roberta) out.push_back(kRoberta);
  return out;
}

void FusionStrategy::validate() const {
  if (index < 1 || index > kStrategyCount) {
    throw Error(ErrorCode::argument, "unknown strategy index " + std::to_string(index) + "; " + valid_selectors());
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(ErrorCode::argument, "sigma must be a positive finite number");
  }
  if (projection_dim < 1) throw Error(ErrorCode::argument, "projection_dim must be >= 1");
}

std::optional<SourceShape> SourceLayout::get(std::string_view name) const {
  if (name == kLlama2) return llama2;
  if (name == kBert) return bert;
  if (name == kRoberta) return roberta;
  return std::nullopt;
}

namespace {

void require_sources(const FusionStrategy& strategy, const SourceLayout& layout) {
  for (auto name : strategy.required_sources()) {
    if (!layout.get(name)) {
      throw Error(ErrorCode::missing_source, "strategy " + std::to_string(strategy.index) + " (" +
                                                 std::string(strategy.label()) + ") requires source '" +
                                                 std::string(name) + "' which is missing");
    }
  }
}

bool is_projected(std::string_view source, const SourceShape& shape, std::uint32_t projection_dim) {
  return source == kLlama2 || shape.dim != projection_dim;
}

}  // namespace

std::size_t fused_dim(const FusionStrategy& strategy, const SourceLayout& layout) {
  strategy.validate();
  require_sources(strategy, layout);
  const std::size_t depths = layout.llama2->depths;
  const std::size_t llama = layout.llama2->dim;
  const std::size_t bert = layout.bert ? layout.bert->dim : 0;
  const std::size_t roberta = layout.roberta ? layout.roberta->dim : 0;
  const std::size_t slots = depths + 2;
  switch (strategy.index) {
    case 1:
    case 2:
    case 3: return llama;
    case 4: return depths * llama;
    case 5:
    case 6: return llama + bert;
    case 7: return depths * llama + bert;
    case 8:
    case 9: return llama + roberta;
    case 10: return depths * llama + roberta;
    case 11:
    case 12: return llama + bert + roberta;
    case 13: return depths * llama + bert + roberta;
    case 14: return slots * slots;
    case 15: return slots * slots + llama;
  }
  return 0;
}

SourceSet SourceSet::from(const DatasetBundle& bundle) {
  return SourceSet{bundle.find(kLlama2), bundle.find(kBert), bundle.find(kRoberta)};
}

SourceLayout SourceSet::layout() const {
  auto shape = [](const EmbeddingMatrix* m) -> std::optional<SourceShape> {
    if (m == nullptr) return std::nullopt;
    return SourceShape{m->n_depths, m->dim};
  };
  return SourceLayout{shape(llama2), shape(bert), shape(roberta)};
}

std::size_t SourceSet::n_rows() const {
  for (const auto* m : {llama2, bert, roberta}) {
    if (m != nullptr) return m->n_rows;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Projections

ProjectionParams ProjectionParams::init(const FusionStrategy& strategy, const SourceLayout& layout,
                                        std::uint64_t seed) {
  strategy.validate();
  ProjectionParams params;
  if (!strategy.learnable()) return params;
  require_sources(strategy, layout);

  std::mt19937_64 rng(seed);
  for (auto name : strategy.required_sources()) {
    const SourceShape shape = *layout.get(name);
    if (!is_projected(name, shape, strategy.projection_dim)) continue;
    const double bound = 1.0 / std::sqrt(static_cast<double>(shape.dim));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    Projection layer;
    layer.source = std::string(name);
    layer.weight.resize(shape.dim, strategy.projection_dim);
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = uniform(rng);
    layer.bias = Vector::Zero(strategy.projection_dim);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

const Projection* ProjectionParams::find(std::string_view source) const {
  for (const auto& l : layers) {
    if (l.source == source) return &l;
  }
  return nullptr;
}

std::size_t ProjectionParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

// ---------------------------------------------------------------------------
// Fusion

namespace {

using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Matrix depth_stack(const EmbeddingMatrix& m, std::size_t row) {
  return Eigen::Map<const FloatMatrix>(m.row(row).data(), m.n_depths, m.dim).cast<double>();
}

Vector depth_vector(const EmbeddingMatrix& m, std::size_t row, std::size_t depth) {
  return Eigen::Map<const Eigen::VectorXf>(m.vector(row, depth).data(), m.dim).cast<double>();
}

/// Slot layout of the co-occurrence stack X: llama2 depths first, then
/// bert, then roberta.
struct Slot {
  const EmbeddingMatrix* source;
  std::size_t depth;
};

std::vector<Slot> cooccurrence_slots(const SourceSet& sources) {
  std::vector<Slot> slots;
  for (std::size_t d = 0; d < sources.llama2->n_depths; ++d) slots.push_back({sources.llama2, d});
  slots.push_back({sources.bert, 0});
  slots.push_back({sources.roberta, 0});
  return slots;
}

Matrix gather(const EmbeddingMatrix& m, std::span<const std::size_t> rows, std::size_t depth) {
  Matrix out(rows.size(), m.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = depth_vector(m, rows[i], depth).transpose();
  }
  return out;
}

void check_projection_shapes(const FusionStrategy& strategy, const SourceSet& sources,
                             const ProjectionParams& params) {
  for (const auto* m : {sources.llama2, sources.bert, sources.roberta}) {
    const SourceShape shape{m->n_depths, m->dim};
    const Projection* layer = params.find(m->source_name);
    if (!is_projected(m->source_name, shape, strategy.projection_dim)) {
      if (layer != nullptr) {
        throw Error(ErrorCode::shape, "unexpected projection for source '" + m->source_name + "'");
      }
      continue;
    }
    if (layer == nullptr) {
      throw Error(ErrorCode::shape, "no projection parameters for source '" + m->source_name + "'");
    }
    if (layer->weight.rows() != m->dim || layer->weight.cols() != strategy.projection_dim ||
        layer->bias.size() != strategy.projection_dim) {
      throw Error(ErrorCode::shape, "projection for '" + m->source_name + "' is " +
                                        std::to_string(layer->weight.rows()) + " x " +
                                        std::to_string(layer->weight.cols()) + ", expected " +
                                        std::to_string(m->dim) + " x " + std::to_string(strategy.projection_dim));
    }
  }
}

void fuse_fixed_row(const SourceSet& sources, std::size_t row, int index, Eigen::Ref<Eigen::RowVectorXd> out) {
  Eigen::Index offset = 0;
  auto put = [&](const Vector& v) {
    out.segment(offset, v.size()) = v.transpose();
    offset += v.size();
  };
  const EmbeddingMatrix& llama = *sources.llama2;
  const bool with_bert = index == 5 || index == 6 || index == 7 || index >= 11;
  const bool with_roberta = index >= 8;

  if (index == 1) {
    put(depth_vector(llama, row, 0));
    return;
  }
  // 2/5/8/11 average, 3/6/9/12 max, 4/7/10/13 concatenate the llama2 depths.
  const int op = (index - 2) % 3;
  if (op == 2) {
    for (std::size_t d = 0; d < llama.n_depths; ++d) put(depth_vector(llama, row, d));
  } else if (op == 0) {
    put(avg_pool(depth_stack(llama, row)));
  } else {
    put(max_pool(depth_stack(llama, row)));
  }
  if (with_bert) put(depth_vector(*sources.bert, row, 0));
  if (with_roberta) put(depth_vector(*sources.roberta, row, 0));
}

}  // namespace

FusedBatch fuse(const SourceSet& sources, std::span<const std::size_t> rows, const FusionStrategy& strategy,
                const ProjectionParams& params, unsigned threads) {
  const SourceLayout layout = sources.layout();
  const std::size_t width = fused_dim(strategy, layout);
  const std::size_t n_rows = sources.n_rows();
  for (const auto* m : {sources.llama2, sources.bert, sources.roberta}) {
    if (m != nullptr && m->n_rows != n_rows) {
      throw Error(ErrorCode::alignment, "fusion sources disagree on row count");
    }
  }
  for (std::size_t r : rows) {
    if (r >= n_rows) {
      throw Error(ErrorCode::range, "row " + std::to_string(r) + " out of range for " + std::to_string(n_rows) +
                                        " rows");
    }
  }

  FusedBatch batch;
  batch.strategy = strategy.index;
  batch.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));

  if (!strategy.learnable()) {
    if (!params.empty()) {
      throw Error(ErrorCode::shape, "strategy " + std::to_string(strategy.index) + " takes no projections");
    }
    detail::parallel_for(rows.size(), threads, [&](std::size_t i) {
      fuse_fixed_row(sources, rows[i], strategy.index, batch.vectors.row(static_cast<Eigen::Index>(i)));
    });
    return batch;
  }

  check_projection_shapes(strategy, sources, params);
  const std::vector<Slot> slots = cooccurrence_slots(sources);
  const auto n_slots = static_cast<Eigen::Index>(slots.size());
  const auto k_star = static_cast<Eigen::Index>(strategy.projection_dim);

  FusedBatch::Cache cache;
  cache.rows.assign(rows.begin(), rows.end());
  cache.sources = sources;
  cache.params_version = params.version;
  cache.stacks.assign(rows.size(), Matrix(n_slots, k_star));

  for (Eigen::Index s = 0; s < n_slots; ++s) {
    const Slot& slot = slots[s];
    Matrix block = gather(*slot.source, rows, slot.depth);
    if (const Projection* layer = params.find(slot.source->source_name)) {
      block = (block * layer->weight).rowwise() + layer->bias.transpose();
    }
    for (std::size_t i = 0; i < rows.size(); ++i) cache.stacks[i].row(s) = block.row(static_cast<Eigen::Index>(i));
  }

  cache.normalized.resize(rows.size());
  const Eigen::Index co_width = n_slots * n_slots;
  detail::parallel_for(rows.size(), threads, [&](std::size_t i) {
    const Matrix& x = cache.stacks[i];
    cache.normalized[i] = power_normalize(gram(x), strategy.sigma);
    auto out = batch.vectors.row(static_cast<Eigen::Index>(i));
    out.head(co_width) = Eigen::Map<const Eigen::RowVectorXd>(cache.normalized[i].data(), co_width);
    if (strategy.index == 15) {
      out.tail(sources.llama2->dim) = avg_pool(depth_stack(*sources.llama2, rows[i])).transpose();
    }
  });
  batch.cache = std::move(cache);
  return batch;
}

Matrix fuse_all(const DatasetBundle& bundle, const FusionStrategy& strategy, const ProjectionParams& params,
                unsigned threads) {
  std::vector<std::size_t> rows(bundle.n_rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  FusedBatch batch = fuse(SourceSet::from(bundle), rows, strategy, params, threads);
  return std::move(batch.vectors);
}

ProjectionGrads fuse_backward(const FusedBatch& batch, const MatrixRef& upstream, const FusionStrategy& strategy,
                              const ProjectionParams& params) {
  if (batch.strategy != strategy.index) {
    throw Error(ErrorCode::mismatch, "batch was fused with strategy " + std::to_string(batch.strategy) +
                                         ", backward requested for " + std::to_string(strategy.index));
  }
  if (!strategy.learnable()) return {};
  if (!batch.cache) throw Error(ErrorCode::stale_cache, "fused batch carries no backward cache");
  const FusedBatch::Cache& cache = *batch.cache;
  if (cache.params_version != params.version) {
    throw Error(ErrorCode::stale_cache, "projection parameters changed since the batch was fused (version " +
                                            std::to_string(cache.params_version) + " vs " +
                                            std::to_string(params.version) + ")");
  }
  if (upstream.rows() != batch.vectors.rows() || upstream.cols() != batch.vectors.cols()) {
    throw Error(ErrorCode::shape, "upstream gradient is " + std::to_string(upstream.rows()) + " x " +
                                      std::to_string(upstream.cols()) + ", batch is " +
                                      std::to_string(batch.vectors.rows()) + " x " +
                                      std::to_string(batch.vectors.cols()));
  }

  const std::size_t n = cache.rows.size();
  const Eigen::Index n_slots = cache.stacks.empty() ? 0 : cache.stacks.front().rows();
  const Eigen::Index k_star = static_cast<Eigen::Index>(strategy.projection_dim);
  const double slope = 2.0 * strategy.sigma;

  // d loss / d X per row: G = X X^T, so dX = (dG + dG^T) X.
  std::vector<Matrix> d_stacks(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Matrix& y = cache.normalized[i];
    Matrix d_gram(n_slots, n_slots);
    for (Eigen::Index a = 0; a < n_slots; ++a) {
      for (Eigen::Index b = 0; b < n_slots; ++b) {
        const double u = upstream(static_cast<Eigen::Index>(i), a * n_slots + b);
        d_gram(a, b) = u * slope * (1.0 - y(a, b) * y(a, b));
      }
    }
    d_stacks[i] = (d_gram + d_gram.transpose()) * cache.stacks[i];
  }

  const std::vector<Slot> slots = cooccurrence_slots(cache.sources);
  ProjectionGrads grads;
  for (const auto& layer : params.layers) {
    Projection g;
    g.source = layer.source;
    g.weight = Matrix::Zero(layer.weight.rows(), layer.weight.cols());
    g.bias = Vector::Zero(layer.bias.size());
    for (Eigen::Index s = 0; s < n_slots; ++s) {
      if (slots[s].source->source_name != layer.source) continue;
      Matrix inputs = gather(*slots[s].source, cache.rows, slots[s].depth);
      Matrix d_out(static_cast<Eigen::Index>(n), k_star);
      for (std::size_t i = 0; i < n; ++i) d_out.row(static_cast<Eigen::Index>(i)) = d_stacks[i].row(s);
      g.weight.noalias() += inputs.transpose() * d_out;
      g.bias += d_out.colwise().sum().transpose();
    }
    grads.layers.push_back(std::move(g));
  }
  return grads;
}

}  // namespace llmembed
