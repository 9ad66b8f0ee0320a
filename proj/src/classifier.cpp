#include "llmembed/classifier.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "llmembed/error.hpp"

namespace llmembed {

ClassifierParams ClassifierParams::init(std::size_t input_dim, std::size_t n_classes, std::uint32_t hidden_width,
                                        std::uint64_t seed) {
  if (input_dim < 1 || n_classes < 1) {
    throw Error(ErrorCode::shape, "classifier needs input_dim >= 1 and n_classes >= 1");
  }
  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto c = static_cast<Eigen::Index>(n_classes);
  ClassifierParams p;
  p.hidden_width = hidden_width;
  if (hidden_width > 0) {
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(input_dim));
    std::uniform_real_distribution<double> uniform(-bound, bound);
    p.hidden_weight.resize(hidden_width, d);
    for (Eigen::Index i = 0; i < p.hidden_weight.size(); ++i) p.hidden_weight.data()[i] = uniform(rng);
    p.hidden_bias = Vector::Zero(hidden_width);
    p.weight = Matrix::Zero(c, hidden_width);
  } else {
    p.weight = Matrix::Zero(c, d);
  }
  p.bias = Vector::Zero(c);
  return p;
}

std::size_t ClassifierParams::input_dim() const {
  return static_cast<std::size_t>(has_hidden() ? hidden_weight.cols() : weight.cols());
}

std::size_t ClassifierParams::parameter_count() const {
  return static_cast<std::size_t>(hidden_weight.size() + hidden_bias.size() + weight.size() + bias.size());
}

bool ClassifierParams::operator==(const ClassifierParams& other) const {
  auto same = [](const auto& a, const auto& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           std::equal(a.data(), a.data() + a.size(), b.data());
  };
  return hidden_width == other.hidden_width && same(hidden_weight, other.hidden_weight) &&
         same(hidden_bias, other.hidden_bias) && same(weight, other.weight) && same(bias, other.bias);
}

namespace {

void check_input(const ClassifierParams& params, const MatrixRef& fused) {
  if (static_cast<std::size_t>(fused.cols()) != params.input_dim()) {
    throw Error(ErrorCode::shape, "classifier expects " + std::to_string(params.input_dim()) +
                                      "-d input, got " + std::to_string(fused.cols()));
  }
}

}  // namespace

HeadForward forward(const ClassifierParams& params, const MatrixRef& fused) {
  check_input(params, fused);
  HeadForward out;
  if (params.has_hidden()) {
    out.hidden_pre = (fused * params.hidden_weight.transpose()).rowwise() + params.hidden_bias.transpose();
    out.hidden = out.hidden_pre.cwiseMax(0.0);
    out.logits = (out.hidden * params.weight.transpose()).rowwise() + params.bias.transpose();
  } else {
    out.logits = (fused * params.weight.transpose()).rowwise() + params.bias.transpose();
  }
  return out;
}

Matrix forward_logits(const ClassifierParams& params, const MatrixRef& fused) {
  return forward(params, fused).logits;
}

ClassifierGrads backward(const ClassifierParams& params, const MatrixRef& fused, const HeadForward& cache,
                         const MatrixRef& grad_logits) {
  check_input(params, fused);
  if (grad_logits.rows() != fused.rows() || static_cast<std::size_t>(grad_logits.cols()) != params.n_classes()) {
    throw Error(ErrorCode::shape, "logit gradient shape does not match the batch");
  }
  ClassifierGrads g;
  g.bias = grad_logits.colwise().sum().transpose();
  if (params.has_hidden()) {
    g.weight = grad_logits.transpose() * cache.hidden;
    Matrix d_hidden = grad_logits * params.weight;
    d_hidden = d_hidden.cwiseProduct((cache.hidden_pre.array() > 0.0).cast<double>().matrix());
    g.hidden_weight = d_hidden.transpose() * fused;
    g.hidden_bias = d_hidden.colwise().sum().transpose();
    g.input = d_hidden * params.hidden_weight;
  } else {
    g.weight = grad_logits.transpose() * fused;
    g.input = grad_logits * params.weight;
  }
  return g;
}

Matrix softmax(const MatrixRef& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - top).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

LossResult softmax_cross_entropy(const MatrixRef& logits, std::span<const std::uint32_t> labels) {
  const auto batch = logits.rows();
  const auto classes = logits.cols();
  if (static_cast<std::size_t>(batch) != labels.size()) {
    throw Error(ErrorCode::shape, "got " + std::to_string(labels.size()) + " labels for " + std::to_string(batch) +
                                      " logit rows");
  }
  if (batch == 0) throw Error(ErrorCode::shape, "empty batch");

  LossResult r;
  r.grad_logits.resize(batch, classes);
  double total = 0.0;
  for (Eigen::Index i = 0; i < batch; ++i) {
    const std::uint32_t y = labels[static_cast<std::size_t>(i)];
    if (y >= classes) {
      throw Error(ErrorCode::range, "label " + std::to_string(y) + " out of range for " + std::to_string(classes) +
                                        " classes");
    }
    const double top = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd shifted = logits.row(i).array() - top;
    const double log_norm = std::log(shifted.array().exp().sum());
    total += log_norm - shifted[y];
    r.grad_logits.row(i) = (shifted.array() - log_norm).exp().matrix();
    r.grad_logits(i, y) -= 1.0;
  }
  r.loss = total / static_cast<double>(batch);
  r.grad_logits /= static_cast<double>(batch);
  return r;
}

std::uint32_t argmax(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  std::uint32_t best = 0;
  for (Eigen::Index k = 1; k < row.size(); ++k) {
    if (row[k] > row[best]) best = static_cast<std::uint32_t>(k);
  }
  return best;
}

double accuracy(const MatrixRef& logits, std::span<const std::uint32_t> labels) {
  if (static_cast<std::size_t>(logits.rows()) != labels.size()) {
    throw Error(ErrorCode::shape, "label count does not match logit rows");
  }
  if (labels.empty()) return 0.0;
  std::size_t hits = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    if (argmax(logits.row(i)) == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::vector<Prediction> predict(const ClassifierParams& params, const ProjectionParams& projections,
                                const SourceSet& sources, std::span<const std::size_t> rows,
                                const FusionStrategy& strategy, unsigned threads, std::size_t chunk_rows) {
  std::vector<Prediction> out;
  out.reserve(rows.size());
  chunk_rows = std::max<std::size_t>(1, chunk_rows);
  for (std::size_t start = 0; start < rows.size(); start += chunk_rows) {
    const auto chunk = rows.subspan(start, std::min(chunk_rows, rows.size() - start));
    const FusedBatch batch = fuse(sources, chunk, strategy, projections, threads);
    const Matrix probs = softmax(forward_logits(params, batch.vectors));
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
      Prediction p;
      p.label = argmax(probs.row(i));
      p.probabilities.assign(probs.row(i).data(), probs.row(i).data() + probs.cols());
      out.push_back(std::move(p));
    }
  }
  return out;
}

double evaluate(const ClassifierParams& params, const ProjectionParams& projections, const DatasetBundle& bundle,
                const FusionStrategy& strategy, unsigned threads, std::size_t chunk_rows) {
  if (bundle.n_classes() != params.n_classes()) {
    throw Error(ErrorCode::shape, "bundle has " + std::to_string(bundle.n_classes()) + " classes, model has " +
                                      std::to_string(params.n_classes()));
  }
  const std::size_t n = bundle.n_rows();
  if (n == 0) return 0.0;
  const SourceSet sources = SourceSet::from(bundle);
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  chunk_rows = std::max<std::size_t>(1, chunk_rows);

  std::size_t hits = 0;
  for (std::size_t start = 0; start < n; start += chunk_rows) {
    const auto chunk = std::span<const std::size_t>(rows).subspan(start, std::min(chunk_rows, n - start));
    const FusedBatch batch = fuse(sources, chunk, strategy, projections, threads);
    const Matrix logits = forward_logits(params, batch.vectors);
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      if (argmax(logits.row(i)) == bundle.labels[chunk[static_cast<std::size_t>(i)]]) ++hits;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace llmembed
