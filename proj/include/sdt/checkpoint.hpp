#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdt/optimizer.hpp"
#include "sdt/serialize.hpp"
#include "sdt/transformer.hpp"

namespace sdt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainingState {
  std::uint64_t global_step = 0;
  std::uint32_t stage_index = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_counter = 0;
  std::uint64_t adam_step = 0;
  // "<param>.m" / "<param>.v" moment tensors.
  std::vector<NamedTensor> moments;
};

// Layout: "SDTC", u32 version, u64 json length, json, u64 section length,
// section (u64 tensor count, tensors, training state), u64 FNV-1a of the section.
struct CheckpointBundle {
  // {"model": architecture, "run": run config, "vocab": token list}
  nlohmann::json config;
  std::vector<NamedTensor> tensors;
  TrainingState state;

  std::vector<std::uint8_t> serialize() const;
  static CheckpointBundle deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static CheckpointBundle load(const std::filesystem::path& path);

  ModelConfig model_config() const;
  // Empty when the checkpoint carries no vocabulary.
  std::vector<std::string> vocab_tokens() const;
};

CheckpointBundle make_bundle(const Model& model, const nlohmann::json& run_config, const TrainingState& state = {},
                             const std::vector<std::string>& vocab = {});
void store_moments(TrainingState& state, const Adam& adam, const ParameterList& params);
void restore_moments(const TrainingState& state, Adam& adam);
Model model_from_bundle(const CheckpointBundle& bundle);

// Element-wise mean of the parameters. Configuration and step count come
// from the bundle with the highest global step; optimizer moments are
// dropped. Exact for any input order.
CheckpointBundle average_checkpoints(const std::vector<CheckpointBundle>& bundles);
// Newest `last` *.sdtc files of a directory, ordered by global step then name.
// Files named averaged* are skipped.
std::vector<std::filesystem::path> latest_checkpoints(const std::filesystem::path& dir, std::size_t last);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace sdt
