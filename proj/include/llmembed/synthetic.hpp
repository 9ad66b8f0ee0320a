#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "llmembed/embedding_store.hpp"

namespace llmembed {

struct SyntheticSource {
  std::string name;
  std::uint32_t depths = 1;
  std::uint32_t dim = 1;
};

/// Desk-scale stand-in for frozen backbone outputs: Gaussian clusters around
/// per-class means.
struct SyntheticSpec {
  std::size_t n_train_rows = 2000;
  std::size_t n_test_rows = 500;
  std::uint32_t n_classes = 4;
  std::vector<SyntheticSource> sources = {{"llama2", 5, 64}, {"bert", 1, 32}, {"roberta", 1, 32}};
  double separation = 10.0;
  double noise = 0.1;
  std::uint64_t seed = 42;

  void validate() const;
};

struct SyntheticData {
  DatasetBundle train;
  DatasetBundle test;
};

/// Class c's mean places separation/sqrt(2) on coordinate (c mod dim) of every
/// depth vector of every source, so any two classes differ by at least
/// `separation` in the full row. Labels cycle 0..C-1. Pure function of `spec`.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace llmembed
