#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdt/schedule.hpp"
#include "sdt/transformer.hpp"

namespace sdt {

enum class CopyStrategy { kGTopMost, kTopOnly, kInterpolation };

// "g-top-most" | "top-only" | "interpolation"
CopyStrategy parse_copy_strategy(const std::string& name);
std::string to_string(CopyStrategy strategy);

struct StackPlan {
  std::size_t h = 0;
  std::size_t g = 0;
  CopyStrategy strategy = CopyStrategy::kGTopMost;

  void validate() const;
};

// Origin of one layer of the grown model: a 1-based source layer in A, and
// whether the slot is newly added (as opposed to carried over).
struct LayerOrigin {
  std::size_t source = 0;
  bool added = false;
};

// One entry per layer of B (h + g entries).
std::vector<LayerOrigin> layer_origins(const StackPlan& plan);

struct GrowOptions {
  // Off: added layers keep a fresh random initialization.
  bool copy_init = true;
  // With copy off, draw added layers from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  bool uniform_init = false;
  // Seeds the fresh tensors of the grown model.
  std::uint64_t seed = 0;
};

// Throws kIncompatibleCheckpoint unless the two configs agree on everything
// except encoder depth.
void check_growth_compatible(const ModelConfig& source, const ModelConfig& target);

Model grow_model(const Model& a, std::size_t g, CopyStrategy strategy, const GrowOptions& options = {});

struct StageCost {
  std::size_t depth = 0;
  std::uint64_t steps = 0;
  std::uint64_t layer_updates = 0;
  double wall_clock_sec = 0.0;
};

struct CostReport {
  std::vector<StageCost> stages;
  std::uint64_t total_steps = 0;
  std::uint64_t total_layer_updates = 0;
  std::size_t final_depth = 0;
  // total_layer_updates / (final_depth · total_steps)
  double layer_update_ratio = 1.0;
  double idealized_speedup = 1.0;
  double wall_clock_sec = 0.0;
};

CostReport estimate_layer_updates(const StageSchedule& schedule);

// Published figures kept for reports only.
struct ReferenceSpeedup {
  std::string strategy;
  double speedup_percent;
};
std::vector<ReferenceSpeedup> reference_speedups();

struct ReferenceBleu {
  std::string setting;
  double bleu;
};
// Reset-lr x copy-init ablation and copy-strategy comparison on the 48-layer system.
std::vector<ReferenceBleu> reference_ablation_bleu();

}  // namespace sdt
