#include "sdt/optimizer.hpp"

#include <cmath>

#include "sdt/error.hpp"

namespace sdt {

void OptimizerConfig::validate() const {
  require(beta1 >= 0.0 && beta1 < 1.0, ErrorCode::kConfig, "optimizer.beta1: must lie in [0, 1)");
  require(beta2 >= 0.0 && beta2 < 1.0, ErrorCode::kConfig, "optimizer.beta2: must lie in [0, 1)");
  require(eps > 0.0, ErrorCode::kConfig, "optimizer.eps: must be positive");
  require(accumulate_every >= 1, ErrorCode::kConfig, "optimizer.accumulate_every: must be at least 1");
}

Adam::Adam(const OptimizerConfig& config) : config_(config) { config_.validate(); }

void Adam::step(const ParameterList& params, double lr) {
  require(std::isfinite(lr) && lr >= 0.0, ErrorCode::kNumeric, "adam: learning rate is not finite");
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    for (float g : p.grad())
      require(std::isfinite(g), ErrorCode::kNumeric, "adam: non-finite gradient in " + name);
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (const auto& [name, param] : params) {
    if (!param.has_grad()) continue;
    Tensor p = param;
    auto& state = moments_[name];
    const std::size_t n = p.numel();
    if (state.m.size() != n) {
      state.m.assign(n, 0.0f);
      state.v.assign(n, 0.0f);
    }
    auto value = p.values();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grad[i];
      const double m = b1 * state.m[i] + (1.0 - b1) * g;
      const double v = b2 * state.v[i] + (1.0 - b2) * g * g;
      state.m[i] = static_cast<float>(m);
      state.v[i] = static_cast<float>(v);
      value[i] = static_cast<float>(value[i] - lr * (m / c1) / (std::sqrt(v / c2) + config_.eps));
    }
  }
}

void Adam::reset() {
  moments_.clear();
  step_ = 0;
}

void Adam::retain(const ParameterList& params) {
  std::map<std::string, MomentState> kept;
  for (const auto& [name, p] : params) {
    auto it = moments_.find(name);
    if (it != moments_.end() && it->second.m.size() == p.numel()) kept.emplace(name, std::move(it->second));
  }
  moments_ = std::move(kept);
}

GradientAccumulator::GradientAccumulator(std::size_t every_n) : every_n_(every_n) {
  require(every_n_ >= 1, ErrorCode::kConfig, "accumulate_every must be at least 1");
}

bool GradientAccumulator::push() {
  ++pending_;
  return pending_ >= every_n_;
}

void GradientAccumulator::finalize(const ParameterList& params) {
  require(pending_ == every_n_, ErrorCode::kContract, "gradient accumulator finalized before the group was complete");
  const float inv = 1.0f / static_cast<float>(every_n_);
  if (every_n_ > 1)
    for (const auto& [name, param] : params)
      if (param.has_grad()) {
        Tensor p = param;
        for (float& g : p.grad()) g *= inv;
      }
  pending_ = 0;
}

}  // namespace sdt
