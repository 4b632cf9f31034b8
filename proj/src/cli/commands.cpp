#include "sdt/commands.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "sdt/checkpoint.hpp"
#include "sdt/data.hpp"
#include "sdt/decoding.hpp"
#include "sdt/similarity.hpp"
#include "sdt/trainer.hpp"

namespace sdt {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// A line of a pair file contributes its source (column 0) or target (column 1);
// lines without a tab are taken whole.
std::string column(const std::string& line, int which) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) return line;
  return which == 0 ? line.substr(0, tab) : line.substr(tab + 1);
}

Vocab checkpoint_vocab(const CheckpointBundle& bundle) {
  const auto tokens = bundle.vocab_tokens();
  require(!tokens.empty(), ErrorCode::kIncompatibleCheckpoint, "checkpoint carries no vocabulary");
  return Vocab::from_tokens(tokens);
}

nlohmann::json cost_json(const CostReport& cost) {
  nlohmann::json j;
  j["total_steps"] = cost.total_steps;
  j["total_layer_updates"] = cost.total_layer_updates;
  j["final_depth"] = cost.final_depth;
  j["layer_update_ratio"] = cost.layer_update_ratio;
  j["idealized_speedup"] = cost.idealized_speedup;
  j["wall_clock_sec"] = cost.wall_clock_sec;
  j["stages"] = nlohmann::json::array();
  for (const auto& s : cost.stages)
    j["stages"].push_back({{"depth", s.depth},
                           {"steps", s.steps},
                           {"layer_updates", s.layer_updates},
                           {"wall_clock_sec", s.wall_clock_sec}});
  auto& ref = j["reference"];
  ref["wmt_speedup_percent"] = nlohmann::json::array();
  for (const auto& r : reference_speedups())
    ref["wmt_speedup_percent"].push_back({{"strategy", r.strategy}, {"speedup_percent", r.speedup_percent}});
  ref["wmt_bleu"] = nlohmann::json::array();
  for (const auto& r : reference_ablation_bleu()) ref["wmt_bleu"].push_back({{"setting", r.setting}, {"bleu", r.bleu}});
  return j;
}

bool parse_bool(const std::string& text) {
  if (text == "true") return true;
  if (text == "false") return false;
  fail(ErrorCode::kConfig, "--reset-lr: expected true or false, got '" + text + "'");
}

}  // namespace

int exit_status(ErrorCode code) { return 10 + static_cast<int>(code); }

std::vector<std::size_t> parse_size_list(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(used == item.size() && !item.empty() && item[0] != '-', ErrorCode::kConfig,
            what + ": '" + item + "' is not a non-negative integer");
    out.push_back(static_cast<std::size_t>(v));
  }
  require(!out.empty(), ErrorCode::kConfig, what + ": empty list");
  return out;
}

RunConfig build_run_config(const TrainOptions& o) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.config_path.empty()) c.schedule.d_model = c.model.d_model;
  if (o.seed) c.seed = *o.seed;
  if (o.stages) c.stages.depths = parse_size_list(*o.stages, "--stages");
  if (o.steps_per_stage) {
    const auto steps = parse_size_list(*o.steps_per_stage, "--steps-per-stage");
    if (steps.size() == 1) {
      c.stages.steps.assign(c.stages.depths.size(), steps[0]);
    } else {
      c.stages.steps.assign(steps.begin(), steps.end());
    }
  } else if (o.stages && c.stages.steps.size() != c.stages.depths.size() && c.stages.steps.size() == 1) {
    c.stages.steps.assign(c.stages.depths.size(), c.stages.steps[0]);
  }
  if (o.block_size) {
    if (*o.block_size == "inf") {
      c.model.block_size = BlockSize::unbounded();
    } else {
      const auto p = parse_size_list(*o.block_size, "--p");
      require(p.size() == 1 && p[0] >= 1, ErrorCode::kConfig, "--p: expected a positive integer or inf");
      c.model.block_size = BlockSize(p[0]);
    }
  }
  if (o.strategy) c.stages.strategy = parse_copy_strategy(*o.strategy);
  if (o.reset_lr) c.stages.reset_lr = *o.reset_lr;
  if (o.out) c.out_dir = *o.out;
  c.validate();
  return c;
}

int cmd_train(const TrainOptions& options, std::ostream& out) {
  RunConfig config = build_run_config(options);
  const RunData data = prepare_data(config);
  config = resolve_vocab(config, data);
  config.validate();

  std::optional<Model> init;
  if (!config.stages.init_checkpoint.empty()) {
    const auto bundle = CheckpointBundle::load(config.stages.init_checkpoint);
    const auto tokens = bundle.vocab_tokens();
    require(tokens.empty() || tokens == data.vocab.tokens(), ErrorCode::kIncompatibleCheckpoint,
            "initial checkpoint vocabulary differs from the run's data vocabulary");
    init = model_from_bundle(bundle);
    spdlog::info("starting from {} ({} encoder layers)", config.stages.init_checkpoint, init->config().enc_layers);
  }

  RunDirectoryWriter writer(config.out_dir);
  write_text(writer.dir() / "config.json", to_json(config).dump(2) + "\n");
  data.vocab.save(writer.dir() / "vocab.txt");
  write_dataset(writer.dir() / "dev.tsv", data.dev, data.vocab);

  const SdtResult result = run_sdt(config, data.train, &writer, init ? &*init : nullptr, &data.vocab);
  const double accuracy = sequence_accuracy(result.model, data.dev);

  write_text(writer.dir() / "cost_report.json", cost_json(result.cost).dump(2) + "\n");
  nlohmann::json summary;
  summary["final_train_loss"] = result.final_loss;
  summary["dev_sequence_accuracy"] = accuracy;
  summary["final_encoder_depth"] = result.model.config().enc_layers;
  summary["global_step"] = result.state.global_step;
  summary["checkpoint"] = writer.last_checkpoint().string();
  write_text(writer.dir() / "summary.json", summary.dump(2) + "\n");

  out << std::fixed << std::setprecision(4) << "final_train_loss " << result.final_loss << "\n"
      << "dev_sequence_accuracy " << accuracy << "\n"
      << "layer_update_ratio " << result.cost.layer_update_ratio << "\n"
      << "wall_clock_sec " << std::setprecision(2) << result.cost.wall_clock_sec << "\n"
      << "checkpoint " << writer.last_checkpoint().string() << "\n";
  return 0;
}

int cmd_analyze(const std::string& checkpoint, const std::string& data, const std::string& out_dir, std::ostream& out) {
  const auto bundle = CheckpointBundle::load(checkpoint);
  const Model model = model_from_bundle(bundle);
  const Vocab vocab = checkpoint_vocab(bundle);
  std::vector<std::vector<TokenId>> corpus;
  for (const auto& line : read_lines(data)) {
    const auto tokens = split_tokens(column(line, 0));
    if (!tokens.empty()) corpus.push_back(vocab.encode(tokens));
  }
  require(!corpus.empty(), ErrorCode::kData, data + ": no sentences");
  const SimilarityReport report = similarity_report(model, corpus);
  const std::filesystem::path dir(out_dir);
  write_text(dir / "similarity.csv", report_csv(report));
  write_text(dir / "reference_overlay.csv", reference_overlay_csv());
  if (model.config().enc_layers < 2) spdlog::warn("depth-1 model: adj_sim is NA for every layer");
  out << "layers " << model.config().enc_layers << " sentences " << report.sentences << " tokens " << report.tokens
      << "\n"
      << (dir / "similarity.csv").string() << "\n";
  return 0;
}

int cmd_decode(const std::string& checkpoint, const std::string& input, std::size_t beam, double lenpen,
               const std::string& out_path, std::ostream& out) {
  require(beam >= 1, ErrorCode::kConfig, "--beam: must be at least 1");
  const auto bundle = CheckpointBundle::load(checkpoint);
  const Model model = model_from_bundle(bundle);
  const Vocab vocab = checkpoint_vocab(bundle);
  std::ostringstream text;
  for (const auto& line : read_lines(input)) {
    const auto ids = vocab.encode(split_tokens(column(line, 0)));
    if (ids.empty()) {
      text << "\n";
      continue;
    }
    BeamOptions opts;
    opts.beam_size = beam;
    opts.length_penalty = lenpen;
    opts.max_len = 2 * ids.size() + 8;
    const auto hyp = vocab.decode(beam_decode(model, ids, opts));
    for (std::size_t i = 0; i < hyp.size(); ++i) text << (i ? " " : "") << hyp[i];
    text << "\n";
  }
  if (out_path.empty())
    out << text.str();
  else
    write_text(out_path, text.str());
  return 0;
}

int cmd_average(const std::string& dir, std::size_t last, const std::string& out_path, std::ostream& out) {
  require(last >= 1, ErrorCode::kConfig, "--last: must be at least 1");
  const auto paths = latest_checkpoints(dir, last);
  require(!paths.empty(), ErrorCode::kIo, "no checkpoints in " + dir);
  if (paths.size() < last) spdlog::warn("only {} checkpoints available, averaging all of them", paths.size());
  std::vector<CheckpointBundle> bundles;
  for (const auto& p : paths) bundles.push_back(CheckpointBundle::load(p));
  CheckpointBundle avg = average_checkpoints(bundles);
  const std::filesystem::path target = out_path.empty() ? std::filesystem::path(dir) / "averaged.sdtc" : std::filesystem::path(out_path);
  avg.save(target);
  for (const auto& p : paths) out << "averaged " << p.string() << "\n";
  out << "wrote " << target.string() << "\n";
  return 0;
}

int cmd_score(const std::string& hyp_path, const std::string& ref_path, std::ostream& out) {
  const auto hyp_lines = read_lines(hyp_path);
  const auto ref_lines = read_lines(ref_path);
  require(hyp_lines.size() == ref_lines.size(), ErrorCode::kData,
          std::to_string(hyp_lines.size()) + " hypotheses vs " + std::to_string(ref_lines.size()) + " references");
  std::vector<std::vector<std::string>> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(split_tokens(column(l, 1)));
  for (const auto& l : ref_lines) refs.push_back(split_tokens(column(l, 1)));
  out << std::fixed << std::setprecision(2) << bleu(hyps, refs) << "\n";
  return 0;
}

namespace {

void configure_logging() {
  auto logger = spdlog::get("sdt");
  if (!logger) logger = spdlog::stderr_color_mt("sdt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S] %l %v");
  const char* env = std::getenv("SDT_LOG_LEVEL");
  const std::string level = env ? env : "info";
  if (level == "error")
    spdlog::set_level(spdlog::level::err);
  else if (level == "warn")
    spdlog::set_level(spdlog::level::warn);
  else if (level == "info")
    spdlog::set_level(spdlog::level::info);
  else if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else
    fail(ErrorCode::kConfig, "SDT_LOG_LEVEL: expected error|warn|info|debug, got '" + level + "'");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Shallow-to-deep Transformer training lab"};
  app.require_subcommand(1);

  TrainOptions train;
  std::string reset_lr;
  std::uint64_t seed = 0;
  auto* t = app.add_subcommand("train", "train a model, growing the encoder between stages");
  t->add_option("--config", train.config_path, "JSON run config");
  auto* seed_opt = t->add_option("--seed", seed, "random seed");
  auto* stages_opt = t->add_option("--stages", "comma-separated encoder depths, e.g. 4,8");
  auto* steps_opt = t->add_option("--steps-per-stage", "optimizer steps per stage: one value or one per stage");
  auto* p_opt = t->add_option("--p", "layers per block, or inf");
  auto* strategy_opt = t->add_option("--strategy", "copy strategy")
                           ->check(CLI::IsMember({"g-top-most", "top-only", "interpolation"}));
  auto* reset_opt = t->add_option("--reset-lr", reset_lr, "restart the learning rate at each growth")
                        ->check(CLI::IsMember({"true", "false"}));
  auto* out_opt = t->add_option("--out", "output directory");

  std::string checkpoint, data, input, dir, hyp, ref;
  std::string analyze_out, decode_out, average_out;
  std::size_t beam = 4, last = 5;
  double lenpen = 0.6;
  auto* a = app.add_subcommand("analyze", "layer similarity report");
  a->add_option("checkpoint", checkpoint)->required();
  a->add_option("data", data, "sentences, one per line (pair files use the source column)")->required();
  a->add_option("--out", analyze_out, "output directory")->default_val("analysis");

  auto* d = app.add_subcommand("decode", "beam-search decode one sentence per line");
  d->add_option("checkpoint", checkpoint)->required();
  d->add_option("input", input)->required();
  d->add_option("--beam", beam)->default_val(4);
  d->add_option("--lenpen", lenpen)->default_val(0.6);
  d->add_option("--out", decode_out, "output file (stdout when omitted)");

  auto* v = app.add_subcommand("average", "average the newest checkpoints of a directory");
  v->add_option("dir", dir)->required();
  v->add_option("--last", last)->default_val(5);
  v->add_option("--out", average_out, "output checkpoint (default <dir>/averaged.sdtc)");

  auto* s = app.add_subcommand("score", "corpus BLEU of hypotheses against references");
  s->add_option("hyp", hyp)->required();
  s->add_option("ref", ref)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << e.what() << "\n";
      return 0;
    }
    err << "error[usage]: " << e.what() << "\n";
    return 2;
  }

  try {
    configure_logging();
    if (*t) {
      if (*seed_opt) train.seed = seed;
      if (*stages_opt) train.stages = stages_opt->as<std::string>();
      if (*steps_opt) train.steps_per_stage = steps_opt->as<std::string>();
      if (*p_opt) train.block_size = p_opt->as<std::string>();
      if (*strategy_opt) train.strategy = strategy_opt->as<std::string>();
      if (*reset_opt) train.reset_lr = parse_bool(reset_lr);
      if (*out_opt) train.out = out_opt->as<std::string>();
      return cmd_train(train, out);
    }
    if (*a) return cmd_analyze(checkpoint, data, analyze_out, out);
    if (*d) return cmd_decode(checkpoint, input, beam, lenpen, decode_out, out);
    if (*v) return cmd_average(dir, last, average_out, out);
    if (*s) return cmd_score(hyp, ref, out);
  } catch (const Error& e) {
    err << "error[" << error_code_name(e.code()) << "]: " << e.what() << "\n";
    return exit_status(e.code());
  } catch (const std::exception& e) {
    err << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace sdt
