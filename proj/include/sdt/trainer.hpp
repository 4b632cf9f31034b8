#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sdt/checkpoint.hpp"
#include "sdt/data.hpp"
#include "sdt/run_config.hpp"
#include "sdt/stacking.hpp"

namespace sdt {

struct StepLog {
  std::uint64_t step = 0;
  std::size_t stage_index = 0;  // 1-based
  std::size_t encoder_depth = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double tokens_per_sec = 0.0;
  double wall_clock_sec = 0.0;
};

struct GrowEvent {
  std::size_t from_depth = 0;
  std::size_t to_depth = 0;
  CopyStrategy strategy = CopyStrategy::kGTopMost;
  std::uint64_t step = 0;
};

class TrainingObserver {
 public:
  virtual ~TrainingObserver() = default;
  virtual void on_step(const StepLog&) {}
  virtual void on_grow(const GrowEvent&) {}
  // stage_index is 1-based; `final_stage` marks the last stage.
  virtual void on_checkpoint(const CheckpointBundle&, std::size_t /*stage_index*/, bool /*stage_end*/) {}
};

// Writes train_log.csv, events.jsonl and stage checkpoints under a directory.
class RunDirectoryWriter : public TrainingObserver {
 public:
  explicit RunDirectoryWriter(const std::filesystem::path& dir);

  void on_step(const StepLog& log) override;
  void on_grow(const GrowEvent& event) override;
  void on_checkpoint(const CheckpointBundle& bundle, std::size_t stage_index, bool stage_end) override;

  const std::filesystem::path& dir() const noexcept { return dir_; }
  std::filesystem::path last_checkpoint() const { return last_; }

 private:
  std::filesystem::path dir_;
  std::ofstream log_;
  std::ofstream events_;
  std::filesystem::path last_;
};

std::string grow_event_json(const GrowEvent& event);

struct SdtResult {
  Model model;
  CostReport cost;
  TrainingState state;
  std::vector<GrowEvent> grows;
  double final_loss = 0.0;
  CheckpointBundle final_checkpoint;
};

// Trains every stage of config.stages on `train`. The first stage starts from
// `init` when given (its depth must equal the first stage depth), otherwise
// from random initialization seeded by config.seed. Vocabulary size must be
// resolved in config.model.
// `vocab` is embedded in every checkpoint when given.
SdtResult run_sdt(const RunConfig& config, const Dataset& train, TrainingObserver* observer = nullptr,
                  const Model* init = nullptr, const Vocab* vocab = nullptr);

// Fraction of dev pairs whose greedy decode equals the target exactly.
double sequence_accuracy(const Model& model, const Dataset& dev, std::size_t batch_size = 64);

// Resolves data sources and vocabulary for a run.
struct RunData {
  Vocab vocab;
  Dataset train;
  Dataset dev;
};
RunData prepare_data(const RunConfig& config);
// Fills model.vocab_size from the data when zero.
RunConfig resolve_vocab(RunConfig config, const RunData& data);

}  // namespace sdt
