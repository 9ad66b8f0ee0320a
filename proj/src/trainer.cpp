#include "llmembed/trainer.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "llmembed/error.hpp"

namespace llmembed {

void TrainConfig::validate() const {
  if (batch_size < 1) throw Error(ErrorCode::argument, "batch size must be >= 1");
  if (epochs < 1) throw Error(ErrorCode::argument, "epochs must be >= 1");
  if (eval_every < 0) throw Error(ErrorCode::argument, "eval cadence must be >= 0");
  adam.validate();
}

std::string TrainReport::loss_curve_text() const {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) os << (e + 1) << ' ' << epoch_loss[e] << '\n';
  return os.str();
}

std::uint64_t classifier_seed(std::uint64_t run_seed) { return run_seed * 0x9e3779b97f4a7c15ULL + 1; }
std::uint64_t projection_seed(std::uint64_t run_seed) { return run_seed * 0x9e3779b97f4a7c15ULL + 2; }

void shuffle_rows(std::vector<std::size_t>& rows, std::mt19937_64& rng) {
  for (std::size_t i = rows.size(); i > 1; --i) {
    const std::uint64_t bound = i;
    // Largest multiple of bound representable; draws above it are rejected.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t draw = rng();
    while (draw >= limit) draw = rng();
    std::swap(rows[i - 1], rows[static_cast<std::size_t>(draw % bound)]);
  }
}

namespace {

struct HeadStep {
  double loss = 0.0;
  ClassifierGrads grads;
};

HeadStep head_step(const ClassifierParams& classifier, const MatrixRef& fused, std::span<const std::uint32_t> labels) {
  const HeadForward fw = forward(classifier, fused);
  LossResult loss = softmax_cross_entropy(fw.logits, labels);
  return HeadStep{loss.loss, backward(classifier, fused, fw, loss.grad_logits)};
}

std::span<double> as_span(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> as_span(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }
std::span<const double> as_span(const Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

void apply_updates(AdamOptimizer& opt, ClassifierParams& classifier, ProjectionParams& projections,
                   const ClassifierGrads& head, const ProjectionGrads& proj) {
  opt.begin_step();
  opt.update(0, as_span(classifier.weight), as_span(head.weight));
  opt.update(1, as_span(classifier.bias), as_span(head.bias));
  if (classifier.has_hidden()) {
    opt.update(2, as_span(classifier.hidden_weight), as_span(head.hidden_weight));
    opt.update(3, as_span(classifier.hidden_bias), as_span(head.hidden_bias));
  }
  if (!proj.empty()) {
    for (std::size_t l = 0; l < projections.layers.size(); ++l) {
      opt.update(4 + 2 * l, as_span(projections.layers[l].weight), as_span(proj.layers[l].weight));
      opt.update(5 + 2 * l, as_span(projections.layers[l].bias), as_span(proj.layers[l].bias));
    }
    projections.touch();
  }
}

Matrix gather_rows(const Matrix& all, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), all.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = all.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

void check_compatible(const DatasetBundle& train_set, const DatasetBundle& test_set) {
  if (test_set.n_classes() != train_set.n_classes()) {
    throw Error(ErrorCode::mismatch, "train bundle has " + std::to_string(train_set.n_classes()) +
                                         " classes, test bundle has " + std::to_string(test_set.n_classes()));
  }
  const SourceLayout a = SourceSet::from(train_set).layout();
  const SourceLayout b = SourceSet::from(test_set).layout();
  for (auto name : {kLlama2, kBert, kRoberta}) {
    const auto sa = a.get(name);
    const auto sb = b.get(name);
    if (sa.has_value() != sb.has_value() || (sa && (sa->depths != sb->depths || sa->dim != sb->dim))) {
      throw Error(ErrorCode::mismatch, "source '" + std::string(name) + "' differs between train and test bundles");
    }
  }
}

}  // namespace

BatchGradients compute_gradients(const ClassifierParams& classifier, const ProjectionParams& projections,
                                 const SourceSet& sources, std::span<const std::size_t> rows,
                                 std::span<const std::uint32_t> labels, const FusionStrategy& strategy,
                                 unsigned threads) {
  const FusedBatch batch = fuse(sources, rows, strategy, projections, threads);
  HeadStep step = head_step(classifier, batch.vectors, labels);
  BatchGradients out;
  out.loss = step.loss;
  out.projections = fuse_backward(batch, step.grads.input, strategy, projections);
  out.classifier = std::move(step.grads);
  return out;
}

TrainResult train(const DatasetBundle& train_set, const DatasetBundle* test_set, const FusionStrategy& strategy,
                  const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  strategy.validate();
  train_set.validate();
  if (test_set != nullptr) {
    test_set->validate();
    check_compatible(train_set, *test_set);
  }
  if (train_set.n_rows() == 0) throw Error(ErrorCode::validation, "train bundle is empty");

  const SourceSet sources = SourceSet::from(train_set);
  const SourceLayout layout = sources.layout();
  const std::size_t width = fused_dim(strategy, layout);
  const unsigned threads = config.effective_threads();

  TrainResult result;
  result.classifier =
      ClassifierParams::init(width, train_set.n_classes(), config.hidden_width, classifier_seed(config.seed));
  result.projections = ProjectionParams::init(strategy, layout, projection_seed(config.seed));
  TrainReport& report = result.report;
  report.strategy = strategy.index;
  report.config = config;

  // Fixed strategies have no learnable fusion state, so features are fused once.
  Matrix train_features;
  Matrix test_features;
  double fuse_seconds = 0.0;
  if (!strategy.learnable()) {
    Stopwatch sw;
    train_features = fuse_all(train_set, strategy, result.projections, threads);
    if (test_set != nullptr) test_features = fuse_all(*test_set, strategy, result.projections, threads);
    fuse_seconds = sw.seconds();
  }

  auto accuracy_on = [&](const DatasetBundle& bundle, const Matrix& features) {
    if (!strategy.learnable()) return accuracy(forward_logits(result.classifier, features), bundle.labels);
    return evaluate(result.classifier, result.projections, bundle, strategy, threads);
  };

  AdamOptimizer optimizer(config.adam);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train_set.n_rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::uint32_t> batch_labels;

  double train_seconds = 0.0;
  double eval_seconds = 0.0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Stopwatch epoch_watch;
    shuffle_rows(order, rng);
    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
      const auto rows = std::span<const std::size_t>(order).subspan(start, std::min(config.batch_size, order.size() - start));
      batch_labels.resize(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) batch_labels[i] = train_set.labels[rows[i]];

      double loss = 0.0;
      if (strategy.learnable()) {
        BatchGradients g = compute_gradients(result.classifier, result.projections, sources, rows, batch_labels,
                                             strategy, threads);
        loss = g.loss;
        if (std::isfinite(loss)) apply_updates(optimizer, result.classifier, result.projections, g.classifier, g.projections);
      } else {
        const Matrix x = gather_rows(train_features, rows);
        HeadStep step = head_step(result.classifier, x, batch_labels);
        loss = step.loss;
        if (std::isfinite(loss)) apply_updates(optimizer, result.classifier, result.projections, step.grads, {});
      }
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "non-finite loss " << loss << " at epoch " << epoch << ", batch " << batch_index;
        throw Error(ErrorCode::non_finite, os.str());
      }
      loss_sum += loss * static_cast<double>(rows.size());
    }
    const double epoch_loss = loss_sum / static_cast<double>(order.size());
    report.epoch_loss.push_back(epoch_loss);
    train_seconds += epoch_watch.seconds();
    if (on_epoch) on_epoch(epoch, epoch_loss);

    const bool last = epoch == config.epochs;
    if (last || (config.eval_every > 0 && epoch % config.eval_every == 0)) {
      Stopwatch eval_watch;
      EvalRecord record;
      record.epoch = epoch;
      record.train_accuracy = accuracy_on(train_set, train_features);
      if (test_set != nullptr) record.test_accuracy = accuracy_on(*test_set, test_features);
      report.evals.push_back(record);
      eval_seconds += eval_watch.seconds();
    }
  }

  report.final_train_accuracy = report.evals.back().train_accuracy;
  report.final_test_accuracy = report.evals.back().test_accuracy;
  if (!strategy.learnable()) report.timings.push_back({"fuse", fuse_seconds});
  report.timings.push_back({"train", train_seconds});
  report.timings.push_back({"eval", eval_seconds});
  return result;
}

}  // namespace llmembed
