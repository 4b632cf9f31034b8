#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdt/model_config.hpp"
#include "sdt/optimizer.hpp"
#include "sdt/schedule.hpp"
#include "sdt/stacking.hpp"

namespace sdt {

struct DataConfig {
  std::string task = "copy";
  std::size_t alphabet_size = 10;
  std::size_t min_len = 3;
  std::size_t max_len = 8;
  std::size_t train_samples = 2000;
  std::size_t dev_samples = 200;
  // When set, replace the synthetic generator (tab-separated pair files).
  std::string train_file;
  std::string dev_file;
  std::size_t max_tokens = 512;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

// Stage depths plus per-stage step budgets; a per-stage budget stands in
// for the epoch interval of a newly stacked model.
struct StageConfig {
  std::vector<std::size_t> depths{4};
  std::vector<std::uint64_t> steps{1000};
  std::size_t omega = 1;
  bool reset_lr = true;
  CopyStrategy strategy = CopyStrategy::kGTopMost;
  bool copy_init = true;
  bool uniform_new_layers = false;
  // Optional starting checkpoint for the first stage.
  std::string init_checkpoint;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct TrainingConfig {
  double label_smoothing = 0.1;
  double inter_sim_lambda = 0.0;
  // Extra mid-stage checkpoints every n optimizer steps; 0 = stage ends only.
  std::uint64_t checkpoint_every = 0;
  std::uint64_t log_every = 10;

  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  ModelConfig model;
  OptimizerConfig optimizer;
  // Desk-scale warmup; the recipe default of 8000 steps belongs to far longer runs.
  ScheduleConfig schedule{32, 200, 2e-3, 1e-7};
  StageConfig stages;
  DataConfig data;
  TrainingConfig training;

  StageSchedule stage_schedule() const;
  // Model config at depth of stage 1.
  ModelConfig initial_model() const;
  void validate() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& config);
// Unknown or mistyped keys raise kConfig naming the dotted path. Missing
// keys keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace sdt
