#include "sdt/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sdt/error.hpp"

namespace sdt {

void ScheduleConfig::validate() const {
  require(d_model >= 1, ErrorCode::kConfig, "schedule.d_model: must be positive");
  require(warmup_steps >= 1, ErrorCode::kConfig, "schedule.warmup_steps: must be at least 1");
  require(floor_lr >= 0.0, ErrorCode::kConfig, "schedule.floor_lr: must be non-negative");
  if (peak_lr) require(*peak_lr > floor_lr, ErrorCode::kConfig, "schedule.peak_lr: must exceed floor_lr");
}

LearningRateSchedule::LearningRateSchedule(const ScheduleConfig& config) : config_(config) {
  config_.validate();
  const double unscaled_peak =
      1.0 / std::sqrt(static_cast<double>(config_.d_model)) / std::sqrt(static_cast<double>(config_.warmup_steps));
  peak_ = config_.peak_lr.value_or(unscaled_peak);
  scale_ = config_.peak_lr ? *config_.peak_lr / unscaled_peak : 1.0;
}

double LearningRateSchedule::warmup_lr(std::uint64_t step) const {
  require(step >= 1, ErrorCode::kContract, "warmup_lr: step must be at least 1");
  const double w = static_cast<double>(config_.warmup_steps);
  const double s = static_cast<double>(step);
  // Written relative to the peak so the ramp and the decay meet exactly at step == warmup.
  if (step <= config_.warmup_steps) return std::max(peak_ * (s / w), config_.floor_lr);
  return peak_ * std::sqrt(w / s);
}

double LearningRateSchedule::restart_lr(std::uint64_t step_in_stage) const {
  require(step_in_stage >= 1, ErrorCode::kContract, "restart_lr: step must be at least 1");
  const double w = static_cast<double>(config_.warmup_steps);
  return peak_ * std::sqrt(w / (w + static_cast<double>(step_in_stage - 1)));
}

void StageSchedule::validate() const {
  require(!stages.empty(), ErrorCode::kPlan, "stage schedule is empty");
  require(omega >= 1, ErrorCode::kPlan, "omega must be at least 1");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    require(stages[i].encoder_depth >= 1, ErrorCode::kPlan, "stage " + std::to_string(i + 1) + ": depth must be positive");
    require(stages[i].steps >= 1, ErrorCode::kPlan, "stage " + std::to_string(i + 1) + ": step budget must be positive");
    if (i > 0) {
      require(stages[i].encoder_depth > stages[i - 1].encoder_depth, ErrorCode::kPlan,
              "stage depths must increase strictly (" + std::to_string(stages[i - 1].encoder_depth) + " -> " +
                  std::to_string(stages[i].encoder_depth) + ")");
      require(stages[i].encoder_depth - stages[i - 1].encoder_depth <= stages[i - 1].encoder_depth, ErrorCode::kPlan,
              "stage " + std::to_string(i + 1) + " adds more layers than the current depth (" +
                  std::to_string(stages[i - 1].encoder_depth) + " -> " + std::to_string(stages[i].encoder_depth) + ")");
    }
  }
}

std::uint64_t StageSchedule::total_steps() const {
  std::uint64_t n = 0;
  for (const auto& s : stages) n += s.steps;
  return n;
}

double StageSchedule::learning_rate(const LearningRateSchedule& schedule, std::size_t stage_index,
                                    std::uint64_t step_in_stage, std::uint64_t global_step) const {
  if (is_restart_stage(stage_index)) return schedule.restart_lr(step_in_stage);
  return schedule.warmup_lr(global_step);
}

double StageSchedule::restart_lr(const LearningRateSchedule& schedule, std::size_t stage_index,
                                 std::uint64_t step_in_stage) const {
  require(stage_index >= omega, ErrorCode::kContract,
          "restart_lr: stage " + std::to_string(stage_index + 1) + " is a warmup stage (omega = " + std::to_string(omega) + ")");
  return schedule.restart_lr(step_in_stage);
}

}  // namespace sdt
