#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace sdt {

struct ScheduleConfig {
  std::size_t d_model = 512;
  std::size_t warmup_steps = 8000;
  // When set, the inverse-sqrt formula is rescaled so its peak equals this value.
  std::optional<double> peak_lr = 2e-3;
  // Lower bound applied during the warmup ramp only.
  double floor_lr = 1e-7;

  void validate() const;
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

// lr(step) = scale · d^-0.5 · min(step · warmup^-1.5, step^-0.5)
class LearningRateSchedule {
 public:
  explicit LearningRateSchedule(const ScheduleConfig& config);

  const ScheduleConfig& config() const noexcept { return config_; }
  double peak() const noexcept { return peak_; }
  double scale() const noexcept { return scale_; }

  // step >= 1.
  double warmup_lr(std::uint64_t step) const;
  // Step counter of a restarted stage, offset so step 1 sits at the peak.
  double restart_lr(std::uint64_t step_in_stage) const;

 private:
  ScheduleConfig config_;
  double peak_;
  double scale_;
};

struct Stage {
  std::size_t encoder_depth = 0;
  std::uint64_t steps = 0;

  friend bool operator==(const Stage&, const Stage&) = default;
};

struct StageSchedule {
  std::vector<Stage> stages;
  // Leading stages trained under the continuous warmup schedule.
  std::size_t omega = 1;
  bool reset_lr = true;

  void validate() const;
  std::uint64_t total_steps() const;
  bool is_restart_stage(std::size_t stage_index) const { return reset_lr && stage_index >= omega; }

  // stage_index is 0-based; step_in_stage and global_step count optimizer steps from 1.
  double learning_rate(const LearningRateSchedule& schedule, std::size_t stage_index, std::uint64_t step_in_stage,
                       std::uint64_t global_step) const;
  // Throws when stage_index lies inside the warmup stages.
  double restart_lr(const LearningRateSchedule& schedule, std::size_t stage_index, std::uint64_t step_in_stage) const;
};

}  // namespace sdt
