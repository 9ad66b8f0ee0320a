#include "llmembed/optimizer.hpp"

#include <cmath>
#include <string>

#include "llmembed/error.hpp"

namespace llmembed {

void AdamConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::argument, "learning rate must be a non-negative finite number");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw Error(ErrorCode::argument, "moment decay rates must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw Error(ErrorCode::argument, "epsilon must be positive");
}

AdamOptimizer::AdamOptimizer(AdamConfig config) : config_(config) { config_.validate(); }

void AdamOptimizer::update(std::size_t slot, std::span<double> param, std::span<const double> grad) {
  if (param.size() != grad.size()) {
    throw Error(ErrorCode::shape, "parameter and gradient sizes differ in optimizer slot " + std::to_string(slot));
  }
  if (step_ == 0) throw Error(ErrorCode::argument, "AdamOptimizer::update called before begin_step");
  if (slot >= moments_.size()) moments_.resize(slot + 1);
  Moments& m = moments_[slot];
  if (m.first.empty()) {
    m.first.assign(param.size(), 0.0);
    m.second.assign(param.size(), 0.0);
  } else if (m.first.size() != param.size()) {
    throw Error(ErrorCode::shape, "optimizer slot " + std::to_string(slot) + " changed size");
  }

  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double correction1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < param.size(); ++i) {
    m.first[i] = b1 * m.first[i] + (1.0 - b1) * grad[i];
    m.second[i] = b2 * m.second[i] + (1.0 - b2) * grad[i] * grad[i];
    const double m_hat = m.first[i] / correction1;
    const double v_hat = m.second[i] / correction2;
    param[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.epsilon);
  }
}

}  // namespace llmembed
