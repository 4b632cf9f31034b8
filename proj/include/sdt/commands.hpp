#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sdt/error.hpp"
#include "sdt/run_config.hpp"

namespace sdt {

struct TrainOptions {
  std::string config_path;  // empty: built-in defaults
  std::optional<std::uint64_t> seed;
  std::optional<std::string> stages;           // "4,8"
  std::optional<std::string> steps_per_stage;  // "500" or "300,700"
  std::optional<std::string> block_size;       // integer or "inf"
  std::optional<std::string> strategy;
  std::optional<bool> reset_lr;
  std::optional<std::string> out;
};

// Config file plus flag overrides, validated.
RunConfig build_run_config(const TrainOptions& options);

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what);

int cmd_train(const TrainOptions& options, std::ostream& out);
int cmd_analyze(const std::string& checkpoint, const std::string& data, const std::string& out_dir, std::ostream& out);
int cmd_decode(const std::string& checkpoint, const std::string& input, std::size_t beam, double lenpen,
               const std::string& out_path, std::ostream& out);
int cmd_average(const std::string& dir, std::size_t last, const std::string& out_path, std::ostream& out);
int cmd_score(const std::string& hyp_path, const std::string& ref_path, std::ostream& out);

// Full command-line entry; errors print `error[<code>]: <message>` on `err`
// and return a nonzero status.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

int exit_status(ErrorCode code);

}  // namespace sdt
