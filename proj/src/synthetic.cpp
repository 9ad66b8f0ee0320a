#include "llmembed/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "llmembed/error.hpp"

namespace llmembed {

void SyntheticSpec::validate() const {
  if (n_classes < 2) {
    throw Error(ErrorCode::validation, "synthetic spec needs n_classes >= 2, got " + std::to_string(n_classes));
  }
  if (sources.empty()) throw Error(ErrorCode::validation, "synthetic spec has no sources");
  std::uint32_t widest = 0;
  for (const auto& s : sources) {
    if (s.depths < 1 || s.dim < 1) {
      throw Error(ErrorCode::validation, "synthetic source '" + s.name + "' needs depths >= 1 and dim >= 1");
    }
    widest = std::max(widest, s.dim);
  }
  if (widest < n_classes) {
    throw Error(ErrorCode::validation, "synthetic spec needs at least one source with dim >= n_classes (" +
                                           std::to_string(n_classes) + ") to separate class means");
  }
  if (!(separation > 0.0) || !std::isfinite(separation)) {
    throw Error(ErrorCode::validation, "synthetic separation must be a positive finite number");
  }
  if (!(noise >= 0.0) || !std::isfinite(noise)) {
    throw Error(ErrorCode::validation, "synthetic noise must be a non-negative finite number");
  }
  if (n_train_rows < n_classes) {
    throw Error(ErrorCode::validation, "synthetic train split needs at least one row per class");
  }
}

namespace {

// Decorrelates the train and test streams derived from one user seed.
std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

DatasetBundle draw(const SyntheticSpec& spec, std::size_t n_rows, Split split, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double amplitude = spec.separation / std::sqrt(2.0);

  DatasetBundle bundle;
  bundle.split = split;
  for (std::uint32_t c = 0; c < spec.n_classes; ++c) bundle.class_names.push_back("class" + std::to_string(c));
  bundle.labels.resize(n_rows);
  for (std::size_t i = 0; i < n_rows; ++i) bundle.labels[i] = static_cast<std::uint32_t>(i % spec.n_classes);

  for (const auto& src : spec.sources) {
    EmbeddingMatrix m;
    m.source_name = src.name;
    m.n_rows = n_rows;
    m.n_depths = src.depths;
    m.dim = src.dim;
    m.data.resize(n_rows * m.row_stride());
    bundle.sources.push_back(std::move(m));
  }

  // Row-major draw order keeps each row's values contiguous in the stream.
  for (std::size_t i = 0; i < n_rows; ++i) {
    const std::uint32_t label = bundle.labels[i];
    for (auto& m : bundle.sources) {
      for (std::uint32_t d = 0; d < m.n_depths; ++d) {
        float* out = m.data.data() + i * m.row_stride() + static_cast<std::size_t>(d) * m.dim;
        for (std::uint32_t k = 0; k < m.dim; ++k) {
          const double mean = (k == label % m.dim) ? amplitude : 0.0;
          const double z = gauss(rng);
          out[k] = static_cast<float>(spec.noise == 0.0 ? mean : mean + spec.noise * z);
        }
      }
    }
  }
  return bundle;
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  return SyntheticData{draw(spec, spec.n_train_rows, Split::train, splitmix64(spec.seed)),
                       draw(spec, spec.n_test_rows, Split::test, splitmix64(spec.seed ^ 0x5851f42d4c957f2dULL))};
}

}  // namespace llmembed
