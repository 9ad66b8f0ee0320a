#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "llmembed/classifier.hpp"
#include "llmembed/error.hpp"
#include "oracles.hpp"

using namespace llmembed;

namespace {

ClassifierParams linear(const Matrix& w, const Vector& b) {
  ClassifierParams p;
  p.weight = w;
  p.bias = b;
  return p;
}

Matrix oracle_logits(const ClassifierParams& p, const Matrix& x) {
  Matrix out = oracle::matmul_nt(x, p.weight);
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) out(i, j) += p.bias(j);
  return out;
}

double oracle_loss(const Matrix& logits, const std::vector<std::uint32_t>& labels) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    double m = logits(i, 0);
    for (Eigen::Index j = 1; j < logits.cols(); ++j) m = std::max(m, logits(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) z += std::exp(logits(i, j) - m);
    total += -(logits(i, labels[std::size_t(i)]) - m - std::log(z));
  }
  return total / double(logits.rows());
}

// A single-source bundle whose rows are the given vectors.
DatasetBundle bundle_of(const Matrix& rows, std::vector<std::uint32_t> labels, std::size_t classes) {
  DatasetBundle b;
  EmbeddingMatrix m{"llama2", std::uint64_t(rows.rows()), 1, std::uint32_t(rows.cols()), {}};
  for (Eigen::Index i = 0; i < rows.size(); ++i) m.data.push_back(float(rows.data()[i]));
  b.sources.push_back(std::move(m));
  b.labels = std::move(labels);
  for (std::size_t c = 0; c < classes; ++c) b.class_names.push_back("c" + std::to_string(c));
  b.split = Split::test;
  return b;
}

}  // namespace

TEST_CASE("forward_logits") {
  const ClassifierParams zero = ClassifierParams::init(5, 3, 0, 1);
  CHECK(forward_logits(zero, Matrix::Ones(2, 5)).isZero(0.0));

  const ClassifierParams ident = linear(Matrix::Identity(2, 2), Vector::Zero(2));
  Matrix x(1, 2);
  x << 1, 0;
  const Matrix l = forward_logits(ident, x);
  CHECK(l(0, 0) == 1.0);
  CHECK(l(0, 1) == 0.0);

  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto p = linear(oracle::random_matrix(4, 7, rng), oracle::random_matrix(1, 4, rng).transpose());
    const Matrix in = oracle::random_matrix(3, 7, rng);
    const Matrix got = forward_logits(p, in);
    const Matrix want = oracle_logits(p, in);
    CHECK(oracle::relative_error(oracle::flat(got), oracle::flat(want)) <= 1e-12);
  }
  CHECK_THROWS_AS(forward_logits(ident, Matrix::Ones(1, 3)), Error);
}

TEST_CASE("init shapes") {
  const auto p = ClassifierParams::init(6, 3, 0, 9);
  CHECK(p.input_dim() == 6);
  CHECK(p.n_classes() == 3);
  CHECK(p.parameter_count() == 21);
  const auto h = ClassifierParams::init(6, 3, 4, 9);
  CHECK(h.input_dim() == 6);
  CHECK(h.parameter_count() == 4 * 6 + 4 + 3 * 4 + 3);
  CHECK(h.hidden_weight.cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(6.0));
  CHECK_FALSE(h.hidden_weight.isZero(0.0));
  CHECK(h == ClassifierParams::init(6, 3, 4, 9));
  CHECK_FALSE(h == ClassifierParams::init(6, 3, 4, 10));
}

TEST_CASE("softmax cross-entropy values") {
  const std::vector<std::uint32_t> labels{2};
  CHECK(softmax_cross_entropy(Matrix::Zero(1, 4), labels).loss == doctest::Approx(1.386294).epsilon(1e-6));
  CHECK(softmax_cross_entropy(Matrix::Zero(1, 4), labels).loss == doctest::Approx(std::log(4.0)).epsilon(1e-15));

  Matrix sat = Matrix::Zero(1, 4);
  sat(0, 2) = 1000;
  const auto r = softmax_cross_entropy(sat, labels);
  CHECK(r.loss <= 1e-6);
  CHECK(r.loss >= 0.0);
  CHECK(std::isfinite(softmax_cross_entropy(-sat, labels).loss));

  const std::vector<std::uint32_t> bad{4};
  try {
    softmax_cross_entropy(Matrix::Zero(1, 4), bad);
    FAIL("accepted label 4");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::range);
  }
}

TEST_CASE("loss gradient matches central differences") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 30; ++t) {
    Matrix logits = oracle::random_matrix(3, 5, rng, 4.0);
    std::vector<std::uint32_t> labels{std::uint32_t(rng() % 5), std::uint32_t(rng() % 5), std::uint32_t(rng() % 5)};
    const auto r = softmax_cross_entropy(logits, labels);
    CHECK(r.loss == doctest::Approx(oracle_loss(logits, labels)).epsilon(1e-12));
    const auto numeric = oracle::central_differences(logits.data(), std::size_t(logits.size()),
                                                     [&] { return oracle_loss(logits, labels); });
    CHECK(oracle::relative_error(oracle::flat(r.grad_logits), numeric) <= 1e-6);
  }
}

TEST_CASE("softmax rows sum to one and loss is non-negative") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    const Matrix logits = oracle::random_matrix(4, 1 + rng() % 6, rng, 50.0);
    const Matrix p = softmax(logits);
    for (Eigen::Index i = 0; i < p.rows(); ++i) CHECK(std::fabs(p.row(i).sum() - 1.0) <= 1e-6);
    std::vector<std::uint32_t> labels(4);
    for (auto& l : labels) l = std::uint32_t(rng() % logits.cols());
    CHECK(softmax_cross_entropy(logits, labels).loss >= 0.0);
  }
}

TEST_CASE("argmax ties resolve to the lowest index") {
  Eigen::RowVectorXd r(4);
  r << 1, 3, 3, 0;
  CHECK(argmax(r) == 1);
  CHECK(argmax(Eigen::RowVectorXd::Zero(4)) == 0);
}

TEST_CASE("head backward matches central differences, linear and hidden") {
  std::mt19937_64 rng(4);
  for (std::uint32_t hidden : {0u, 5u}) {
    for (int t = 0; t < 10; ++t) {
      ClassifierParams p = ClassifierParams::init(4, 3, hidden, rng());
      p.weight = oracle::random_matrix(p.weight.rows(), p.weight.cols(), rng);
      p.bias = oracle::random_matrix(1, 3, rng).transpose();
      Matrix x = oracle::random_matrix(2, 4, rng);
      const std::vector<std::uint32_t> labels{std::uint32_t(rng() % 3), std::uint32_t(rng() % 3)};
      const HeadForward fw = forward(p, x);
      const auto loss = softmax_cross_entropy(fw.logits, labels);
      const ClassifierGrads g = backward(p, x, fw, loss.grad_logits);
      auto f = [&] { return softmax_cross_entropy(forward_logits(p, x), labels).loss; };
      CHECK(oracle::relative_error(oracle::flat(g.weight),
                                   oracle::central_differences(p.weight.data(), std::size_t(p.weight.size()), f)) <= 1e-6);
      CHECK(oracle::relative_error(oracle::flat(g.bias),
                                   oracle::central_differences(p.bias.data(), std::size_t(p.bias.size()), f)) <= 1e-6);
      CHECK(oracle::relative_error(oracle::flat(g.input),
                                   oracle::central_differences(x.data(), std::size_t(x.size()), f)) <= 1e-6);
      if (hidden > 0) {
        CHECK(oracle::relative_error(
                  oracle::flat(g.hidden_weight),
                  oracle::central_differences(p.hidden_weight.data(), std::size_t(p.hidden_weight.size()), f)) <= 1e-6);
        CHECK(oracle::relative_error(
                  oracle::flat(g.hidden_bias),
                  oracle::central_differences(p.hidden_bias.data(), std::size_t(p.hidden_bias.size()), f)) <= 1e-6);
      }
    }
  }
}

TEST_CASE("evaluate: perfect, adversarial and hand-counted") {
  Matrix rows = Matrix::Identity(3, 3);
  const auto strat = FusionStrategy::from_index(1);
  const auto ident = linear(Matrix::Identity(3, 3), Vector::Zero(3));
  CHECK(evaluate(ident, {}, bundle_of(rows, {0, 1, 2}, 3), strat) == 1.0);
  CHECK(evaluate(ident, {}, bundle_of(rows, {1, 2, 0}, 3), strat) == 0.0);

  std::mt19937_64 rng(5);
  const Matrix x = oracle::random_matrix(10, 4, rng);
  const auto p = linear(oracle::random_matrix(3, 4, rng), oracle::random_matrix(1, 3, rng).transpose());
  std::vector<std::uint32_t> labels(10);
  for (auto& l : labels) l = std::uint32_t(rng() % 3);
  const auto b = bundle_of(x, labels, 3);
  Matrix stored(10, 4);
  for (Eigen::Index i = 0; i < 40; ++i) stored.data()[i] = double(b.sources[0].data[std::size_t(i)]);
  const Matrix want = oracle_logits(p, stored);
  int hits = 0;
  for (int i = 0; i < 10; ++i) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (want(i, c) > want(i, best)) best = c;
    hits += best == int(labels[std::size_t(i)]);
  }
  CHECK(evaluate(p, {}, b, strat) == double(hits) / 10.0);
  CHECK(evaluate(p, {}, b, strat, 2, 3) == double(hits) / 10.0);
}

TEST_CASE("predict: uniform, consistent, shift invariant") {
  Matrix x = Matrix::Ones(4, 3);
  const auto b = bundle_of(x, {0, 1, 2, 3}, 4);
  const auto strat = FusionStrategy::from_index(1);
  std::vector<std::size_t> rows{0, 1, 2, 3};
  const auto zero = ClassifierParams::init(3, 4, 0, 0);
  for (const auto& p : predict(zero, {}, SourceSet::from(b), rows, strat)) {
    CHECK(p.label == 0);
    for (double q : p.probabilities) CHECK(q == doctest::Approx(0.25).epsilon(1e-15));
  }

  std::mt19937_64 rng(6);
  const Matrix xr = oracle::random_matrix(6, 3, rng);
  const auto br = bundle_of(xr, {0, 1, 2, 3, 0, 1}, 4);
  auto p = linear(oracle::random_matrix(4, 3, rng, 3.0), oracle::random_matrix(1, 4, rng).transpose());
  std::vector<std::size_t> rr{0, 1, 2, 3, 4, 5};
  const auto before = predict(p, {}, SourceSet::from(br), rr, strat, 1, 4);
  p.bias.array() += 123.5;
  const auto after = predict(p, {}, SourceSet::from(br), rr, strat);
  REQUIRE(before.size() == 6);
  for (std::size_t i = 0; i < before.size(); ++i) {
    double sum = 0.0;
    for (double q : before[i].probabilities) sum += q;
    CHECK(std::fabs(sum - 1.0) <= 1e-6);
    const auto& pr = before[i].probabilities;
    CHECK(before[i].label == std::size_t(std::max_element(pr.begin(), pr.end()) - pr.begin()));
    CHECK(after[i].label == before[i].label);
    CHECK(oracle::max_abs_diff(after[i].probabilities, before[i].probabilities) <= 1e-9);
  }
}

TEST_CASE("accuracy helper") {
  Matrix logits(3, 2);
  logits << 1, 0, 0, 1, 2, 2;
  const std::vector<std::uint32_t> labels{0, 0, 0};
  CHECK(accuracy(logits, labels) == doctest::Approx(2.0 / 3.0));
}
