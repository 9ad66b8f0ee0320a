#pragma once

#include <chrono>
#include <string>

namespace llmembed {

struct PhaseTiming {
  std::string phase;
  double seconds = 0.0;
};

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}

  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace llmembed
