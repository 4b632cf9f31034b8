#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sdt/tensor.hpp"

namespace sdt {

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.997;
  double eps = 1e-8;
  // Micro-batches summed (then averaged) per optimizer step.
  std::size_t accumulate_every = 2;
  // Zero the moment buffers when the model grows.
  bool reset_moments_on_growth = true;

  void validate() const;
  friend bool operator==(const OptimizerConfig&, const OptimizerConfig&) = default;
};

struct MomentState {
  std::vector<float> m;
  std::vector<float> v;
};

using ParameterList = std::vector<std::pair<std::string, Tensor>>;

// Bias-corrected Adam. Moments are keyed by parameter name so that they
// survive model growth when moment reset is off.
class Adam {
 public:
  explicit Adam(const OptimizerConfig& config);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::uint64_t step_count() const noexcept { return step_; }
  void set_step_count(std::uint64_t step) noexcept { step_ = step; }

  // Applies one update from the gradients currently held by `params`.
  // Parameters without a gradient are left untouched. Throws kNumeric on
  // non-finite gradients, naming the parameter.
  void step(const ParameterList& params, double lr);

  // Drops all moments and the bias-correction counter.
  void reset();
  // Drops moments for names no longer in `params` (after growth).
  void retain(const ParameterList& params);

  const std::map<std::string, MomentState>& moments() const noexcept { return moments_; }
  std::map<std::string, MomentState>& moments() noexcept { return moments_; }

 private:
  OptimizerConfig config_;
  std::uint64_t step_ = 0;
  std::map<std::string, MomentState> moments_;
};

// Counts micro-batches; ready() turns true every n-th push.
class GradientAccumulator {
 public:
  explicit GradientAccumulator(std::size_t every_n);

  std::size_t every_n() const noexcept { return every_n_; }
  std::size_t pending() const noexcept { return pending_; }
  // Returns true when this push completes a group.
  bool push();
  // Divides accumulated gradients by n and resets the counter.
  void finalize(const ParameterList& params);

 private:
  std::size_t every_n_;
  std::size_t pending_ = 0;
};

}  // namespace sdt
