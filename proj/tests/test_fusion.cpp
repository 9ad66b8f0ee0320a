#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "llmembed/error.hpp"
#include "llmembed/fusion.hpp"
#include "oracles.hpp"

using namespace llmembed;

namespace {

Matrix stack_of(const oracle::Table& rows) {
  Matrix m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(Eigen::Index(i), Eigen::Index(k)) = rows[i][k];
  return m;
}

oracle::Table random_table(std::size_t h, std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-3, 3);
  oracle::Table t(h, std::vector<double>(k));
  for (auto& r : t)
    for (auto& v : r) v = u(rng);
  return t;
}

struct Sources {
  EmbeddingMatrix llama2, bert, roberta;
  SourceSet set() const { return SourceSet{&llama2, &bert, &roberta}; }
};

Sources random_sources(std::size_t rows, std::uint32_t h, std::uint32_t kl, std::uint32_t kb, std::uint32_t kr,
                       std::mt19937_64& rng, double scale = 1.0) {
  return {oracle::random_source("llama2", rows, h, kl, rng, scale), oracle::random_source("bert", rows, 1, kb, rng, scale),
          oracle::random_source("roberta", rows, 1, kr, rng, scale)};
}

// Composition of one fused row from the per-strategy recipe, using only the oracles.
std::vector<double> reference_row(int idx, const Sources& s, std::size_t row, const ProjectionParams& params,
                                  double sigma) {
  const oracle::Table depths = oracle::depth_vectors(s.llama2, row);
  const auto bert = oracle::depth_vectors(s.bert, row)[0];
  const auto roberta = oracle::depth_vectors(s.roberta, row)[0];
  if (idx >= 14) {
    oracle::Table x;
    auto slot = [&](std::string_view name, const std::vector<double>& v) {
      const Projection* p = params.find(name);
      x.push_back(p ? oracle::project(p->weight, p->bias, v) : v);
    };
    for (const auto& d : depths) slot(kLlama2, d);
    slot(kBert, bert);
    slot(kRoberta, roberta);
    auto out = oracle::gram_pn(x, sigma);
    if (idx == 15) out = oracle::join({out, oracle::mean_rows(depths)});
    return out;
  }
  if (idx == 1) return depths[0];
  std::vector<double> llama;
  switch ((idx - 2) % 3) {
    case 0: llama = oracle::mean_rows(depths); break;
    case 1: llama = oracle::max_rows(depths); break;
    default: llama = oracle::join(depths); break;
  }
  oracle::Table parts{llama};
  if ((idx >= 5 && idx <= 7) || idx >= 11) parts.push_back(bert);
  if ((idx >= 8 && idx <= 10) || idx >= 11) parts.push_back(roberta);
  return oracle::join(parts);
}

std::vector<std::size_t> all_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

FusionStrategy strategy(int idx, double sigma = 0.3, std::uint32_t proj = 3) {
  FusionStrategy s = FusionStrategy::from_index(idx);
  s.sigma = sigma;
  s.projection_dim = proj;
  return s;
}

}  // namespace

TEST_CASE("avg_pool") {
  CHECK(oracle::to_std(avg_pool(stack_of({{1, 3}, {3, 5}}))) == std::vector<double>{2, 4});
  CHECK(oracle::to_std(avg_pool(stack_of({{1.5, -2, 7}}))) == std::vector<double>{1.5, -2, 7});
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto x = random_table(5, 7, rng);
    CHECK(oracle::to_std(avg_pool(stack_of(x))) == oracle::mean_rows(x));
  }
}

TEST_CASE("max_pool") {
  CHECK(oracle::to_std(max_pool(stack_of({{1, 3}, {3, 5}}))) == std::vector<double>{3, 5});
  CHECK(oracle::to_std(max_pool(stack_of({{4, -1}, {4, -1}, {4, -1}}))) == std::vector<double>{4, -1});
  std::mt19937_64 rng(2);
  for (int t = 0; t < 200; ++t) {
    const auto x = random_table(5, 7, rng);
    CHECK(oracle::to_std(max_pool(stack_of(x))) == oracle::max_rows(x));
  }
}

TEST_CASE("concat") {
  std::vector<Vector> parts{Vector::LinSpaced(2, 1, 2), Vector::Constant(1, 3)};
  CHECK(oracle::to_std(concat(parts)) == std::vector<double>{1, 2, 3});
  std::vector<Vector> one{Vector::LinSpaced(4, 0, 3)};
  CHECK(oracle::to_std(concat(one)) == std::vector<double>{0, 1, 2, 3});
  std::vector<Vector> wide{Vector::Zero(5 * 4096), Vector::Zero(1024), Vector::Zero(1024)};
  CHECK(concat(wide).size() == 22528);
}

TEST_CASE("power normalization values and closed forms") {
  for (double s : {0.1, 0.3, 0.5, 2.0}) CHECK(power_normalize(0.0, s) == 0.0);
  CHECK(power_normalize(1.0, 0.25) == doctest::Approx(0.462117).epsilon(1e-6));
  CHECK(power_normalize(1.0, 0.25) == std::tanh(0.5));
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int t = 0; t < 1000; ++t) {
    const double x = u(rng);
    for (double s : {0.1, 0.3, 0.5}) {
      CHECK(power_normalize(x, s) == -power_normalize(-x, s));
      CHECK(std::fabs(power_normalize(x, s) - power_normalize_logistic(x, s)) <= 1e-12);
    }
  }
  const Matrix m = stack_of({{-1, 0.5}, {2, 0}});
  const Matrix pm = power_normalize(m, 0.3);
  for (Eigen::Index i = 0; i < m.size(); ++i) CHECK(pm.data()[i] == oracle::pn(m.data()[i], 0.3));
}

TEST_CASE("cooccurrence") {
  const auto out = oracle::to_std(cooccurrence(Matrix::Identity(2, 2), 0.5));
  REQUIRE(out.size() == 4);
  CHECK(out[0] == doctest::Approx(0.761594).epsilon(1e-6));
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 0.0);
  CHECK(out[3] == doctest::Approx(0.761594).epsilon(1e-6));

  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    const std::size_t h = 1 + rng() % 7;
    const auto x = random_table(h, 1 + rng() % 40, rng);
    const auto got = oracle::to_std(cooccurrence(stack_of(x), 0.3));
    const auto want = oracle::gram_pn(x, 0.3);
    CHECK(oracle::max_abs_diff(got, want) <= 1e-12);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < h; ++j) CHECK(got[i * h + j] == got[j * h + i]);
  }
}

TEST_CASE("strategy parsing") {
  CHECK(FusionStrategy::parse("11").index == 11);
  CHECK(FusionStrategy::parse(" Cat + Co + Avg + Cat ").index == 15);
  CHECK(FusionStrategy::parse("cat+co").index == 14);
  CHECK(FusionStrategy::parse("avg").index == 2);
  CHECK(FusionStrategy::parse("MAX+CAT@bert").index == 6);
  CHECK(FusionStrategy::parse("cat@roberta").index == 10);
  for (int i = 1; i <= kStrategyCount; ++i) CHECK(FusionStrategy::parse(std::to_string(i)).index == i);
  for (const auto& a : strategy_aliases()) CHECK(FusionStrategy::parse(a.alias).index == a.index);
  for (const char* bad : {"16", "0", "-1", "", "avgg", "1.5"}) {
    try {
      FusionStrategy::parse(bad);
      FAIL("accepted " << bad);
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::argument);
      CHECK(std::string(e.what()).find("1-15") != std::string::npos);
    }
  }
}

TEST_CASE("required sources") {
  for (int i = 1; i <= 4; ++i) CHECK(FusionStrategy::from_index(i).required_sources().size() == 1);
  for (int i = 5; i <= 7; ++i)
    CHECK(FusionStrategy::from_index(i).required_sources() == std::vector<std::string_view>{kLlama2, kBert});
  for (int i = 8; i <= 10; ++i)
    CHECK(FusionStrategy::from_index(i).required_sources() == std::vector<std::string_view>{kLlama2, kRoberta});
  for (int i = 11; i <= 15; ++i) CHECK(FusionStrategy::from_index(i).required_sources().size() == 3);
}

TEST_CASE("fused_dim table for 5x4096, 1024, 1024") {
  const SourceLayout layout{SourceShape{5, 4096}, SourceShape{1, 1024}, SourceShape{1, 1024}};
  const std::size_t expected[] = {4096, 4096, 4096, 20480, 5120, 5120, 21504, 5120,
                                  5120, 21504, 6144, 6144, 22528, 49,    4145};
  for (int i = 1; i <= kStrategyCount; ++i) {
    CAPTURE(i);
    CHECK(fused_dim(FusionStrategy::from_index(i), layout) == expected[i - 1]);
  }
}

TEST_CASE("fused_dim names a missing source") {
  const SourceLayout layout{SourceShape{5, 16}, std::nullopt, SourceShape{1, 8}};
  try {
    fused_dim(FusionStrategy::from_index(5), layout);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::missing_source);
    CHECK(std::string(e.what()).find("bert") != std::string::npos);
  }
  CHECK(fused_dim(FusionStrategy::from_index(8), layout) == 24);
}

TEST_CASE("fixed strategies match the oracle composition") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto s = random_sources(4, 1 + rng() % 5, 1 + rng() % 6, 1 + rng() % 4, 1 + rng() % 4, rng);
    for (int idx = 1; idx <= 13; ++idx) {
      const auto st = strategy(idx);
      const FusedBatch b = fuse(s.set(), all_rows(4), st, ProjectionParams{});
      CHECK_FALSE(b.cache.has_value());
      REQUIRE(std::size_t(b.vectors.cols()) == fused_dim(st, s.set().layout()));
      for (std::size_t r = 0; r < 4; ++r) {
        CAPTURE(idx);
        CHECK(oracle::max_abs_diff(oracle::row_of(b.vectors, Eigen::Index(r)), reference_row(idx, s, r, {}, 0.3)) ==
              0.0);
      }
    }
  }
}

TEST_CASE("learnable strategies match the oracle composition") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    const std::uint32_t kstar = 2 + rng() % 3;
    const std::uint32_t kb = (t % 2) ? kstar : kstar + 1;
    const auto s = random_sources(3, 1 + rng() % 5, 2 + rng() % 5, kb, kstar, rng);
    for (int idx : {14, 15}) {
      const auto st = strategy(idx, 0.2, kstar);
      const auto params = ProjectionParams::init(st, s.set().layout(), rng());
      CHECK(params.find(kLlama2) != nullptr);
      CHECK((params.find(kBert) != nullptr) == (kb != kstar));
      CHECK(params.find(kRoberta) == nullptr);
      const FusedBatch b = fuse(s.set(), all_rows(3), st, params);
      REQUIRE(std::size_t(b.vectors.cols()) == fused_dim(st, s.set().layout()));
      for (std::size_t r = 0; r < 3; ++r) {
        CHECK(oracle::max_abs_diff(oracle::row_of(b.vectors, Eigen::Index(r)), reference_row(idx, s, r, params, 0.2)) <=
              1e-12);
      }
    }
  }
}

TEST_CASE("strategy 1 is the last block; strategy 2 of equal depths is that vector") {
  EmbeddingMatrix llama{"llama2", 1, 5, 3, {}};
  for (int d = 0; d < 5; ++d)
    for (float v : {0.25f, -1.0f, 4.0f}) llama.data.push_back(d == 0 ? v : v + float(d));
  const SourceSet only{&llama, nullptr, nullptr};
  const std::vector<std::size_t> row0{0};
  CHECK(oracle::row_of(fuse(only, row0, strategy(1), {}).vectors, 0) == std::vector<double>{0.25, -1.0, 4.0});
  EmbeddingMatrix same{"llama2", 1, 5, 3, {}};
  for (int d = 0; d < 5; ++d)
    for (float v : {0.1f, -7.0f, 3.0f}) same.data.push_back(v);
  const SourceSet s2{&same, nullptr, nullptr};
  const auto out = oracle::row_of(fuse(s2, row0, strategy(2), {}).vectors, 0);
  CHECK(out[0] == doctest::Approx(double(0.1f)).epsilon(1e-15));
  CHECK(out[1] == -7.0);
  CHECK(out[2] == 3.0);
}

TEST_CASE("strategy 11 on known vectors") {
  EmbeddingMatrix llama{"llama2", 1, 2, 2, {1, 2, 3, 6}};
  EmbeddingMatrix bert{"bert", 1, 1, 1, {9}};
  EmbeddingMatrix roberta{"roberta", 1, 1, 2, {-1, -2}};
  const SourceSet s{&llama, &bert, &roberta};
  const std::vector<std::size_t> row0{0};
  CHECK(oracle::row_of(fuse(s, row0, strategy(11), {}).vectors, 0) == std::vector<double>{2, 4, 9, -1, -2});
  CHECK(oracle::row_of(fuse(s, row0, strategy(12), {}).vectors, 0) == std::vector<double>{3, 6, 9, -1, -2});
  CHECK(oracle::row_of(fuse(s, row0, strategy(13), {}).vectors, 0) == std::vector<double>{1, 2, 3, 6, 9, -1, -2});
}

TEST_CASE("all 15 strategies at full width produce fused_dim columns") {
  std::mt19937_64 rng(8);
  const auto s = random_sources(2, 5, 4096, 1024, 1024, rng, 0.02);
  for (int idx = 1; idx <= kStrategyCount; ++idx) {
    const auto st = strategy(idx, 0.3, 1024);
    const auto params = ProjectionParams::init(st, s.set().layout(), 1);
    const FusedBatch b = fuse(s.set(), all_rows(2), st, params);
    CHECK(std::size_t(b.vectors.cols()) == fused_dim(st, s.set().layout()));
    CHECK(b.vectors.rows() == 2);
  }
}

TEST_CASE("batch fusion equals per-row fusion, any thread count") {
  std::mt19937_64 rng(9);
  const auto s = random_sources(9, 3, 5, 4, 3, rng);
  for (int idx = 1; idx <= kStrategyCount; ++idx) {
    const auto st = strategy(idx);
    const auto params = ProjectionParams::init(st, s.set().layout(), 17);
    const std::vector<std::size_t> rows{8, 2, 2, 5, 0};
    const FusedBatch batch = fuse(s.set(), rows, st, params, 1);
    const FusedBatch threaded = fuse(s.set(), rows, st, params, 3);
    CHECK(batch.vectors == threaded.vectors);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::vector<std::size_t> one{rows[i]};
      CHECK(fuse(s.set(), one, st, params).vectors.row(0) == batch.vectors.row(Eigen::Index(i)));
    }
  }
}

TEST_CASE("projection shape checks") {
  std::mt19937_64 rng(10);
  const auto s = random_sources(2, 2, 4, 3, 3, rng);
  auto st = strategy(14);
  CHECK_THROWS_AS(fuse(s.set(), all_rows(2), st, ProjectionParams{}), Error);
  auto params = ProjectionParams::init(st, s.set().layout(), 1);
  CHECK(params.parameter_count() == 4 * 3 + 3);
  params.layers[0].weight.resize(5, 3);
  CHECK_THROWS_AS(fuse(s.set(), all_rows(2), st, params), Error);
  const SourceSet no_bert{&s.llama2, nullptr, &s.roberta};
  CHECK_THROWS_AS(fuse(no_bert, all_rows(2), strategy(5), {}), Error);
}

TEST_CASE("fuse_backward matches central differences") {
  std::mt19937_64 rng(11);
  int checked = 0;
  for (int t = 0; t < 24; ++t) {
    const int idx = t % 2 ? 15 : 14;
    // K_m = 6, K* = 3, B = 2; every other case also projects bert.
    const std::uint32_t kb = (t % 4 < 2) ? 3 : 4;
    const auto s = random_sources(2, 5, 6, kb, 3, rng, 0.5);
    const auto st = strategy(idx, 0.3, 3);
    auto params = ProjectionParams::init(st, s.set().layout(), rng());
    for (auto& l : params.layers) l.bias = oracle::random_matrix(1, l.bias.size(), rng, 0.3).transpose();
    const auto rows = all_rows(2);
    const FusedBatch batch = fuse(s.set(), rows, st, params);
    const Matrix upstream = oracle::random_matrix(batch.vectors.rows(), batch.vectors.cols(), rng);
    const ProjectionGrads grads = fuse_backward(batch, upstream, st, params);
    REQUIRE(grads.layers.size() == params.layers.size());

    auto objective = [&] {
      const Matrix v = fuse(s.set(), rows, st, params).vectors;
      return (v.array() * upstream.array()).sum();
    };
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      auto& layer = params.layers[l];
      const auto nw = oracle::central_differences(layer.weight.data(), std::size_t(layer.weight.size()), objective);
      const auto nb = oracle::central_differences(layer.bias.data(), std::size_t(layer.bias.size()), objective);
      CHECK(oracle::relative_error(oracle::flat(grads.layers[l].weight), nw) <= 1e-5);
      CHECK(oracle::relative_error(oracle::flat(grads.layers[l].bias), nb) <= 1e-5);
      ++checked;
    }
  }
  CHECK(checked >= 24);
}

TEST_CASE("fuse_backward edge cases") {
  std::mt19937_64 rng(12);
  const auto s = random_sources(2, 3, 6, 3, 3, rng);
  for (int idx = 1; idx <= 13; ++idx) {
    const auto st = strategy(idx);
    const FusedBatch b = fuse(s.set(), all_rows(2), st, {});
    CHECK(fuse_backward(b, Matrix::Ones(b.vectors.rows(), b.vectors.cols()), st, {}).empty());
  }

  const auto st = strategy(15);
  auto params = ProjectionParams::init(st, s.set().layout(), 3);
  const FusedBatch b = fuse(s.set(), all_rows(2), st, params);
  const auto zero = fuse_backward(b, Matrix::Zero(b.vectors.rows(), b.vectors.cols()), st, params);
  for (const auto& l : zero.layers) {
    CHECK(l.weight.isZero(0.0));
    CHECK(l.bias.isZero(0.0));
  }

  CHECK_THROWS_AS(fuse_backward(b, Matrix::Zero(1, 1), st, params), Error);
  CHECK_THROWS_AS(fuse_backward(b, Matrix::Zero(b.vectors.rows(), b.vectors.cols()), strategy(14), params), Error);

  FusedBatch uncached = b;
  uncached.cache.reset();
  try {
    fuse_backward(uncached, Matrix::Zero(b.vectors.rows(), b.vectors.cols()), st, params);
    FAIL("missing cache accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::stale_cache);
  }
  params.touch();
  try {
    fuse_backward(b, Matrix::Zero(b.vectors.rows(), b.vectors.cols()), st, params);
    FAIL("stale cache accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::stale_cache);
  }
}

TEST_CASE("sigma must be positive") {
  auto st = strategy(14);
  st.sigma = 0.0;
  CHECK_THROWS_AS(st.validate(), Error);
  st.sigma = -0.1;
  CHECK_THROWS_AS(st.validate(), Error);
}
