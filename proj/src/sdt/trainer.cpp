#include "sdt/trainer.hpp"

#include <chrono>
#include <cstdio>

#include "sdt/decoding.hpp"
#include "sdt/error.hpp"
#include "sdt/rng.hpp"
#include "sdt/similarity.hpp"

namespace sdt {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

constexpr std::uint64_t kDropoutStream = 0xd50u;
constexpr std::uint64_t kBatchStream = 0xba7u;
constexpr std::uint64_t kInitStream = 0x1417u;

}  // namespace

std::string grow_event_json(const GrowEvent& e) {
  nlohmann::json j;
  j["event"] = "grow";
  j["from_depth"] = e.from_depth;
  j["to_depth"] = e.to_depth;
  j["strategy"] = to_string(e.strategy);
  j["step"] = e.step;
  return j.dump();
}

RunDirectoryWriter::RunDirectoryWriter(const std::filesystem::path& dir) : dir_(dir) {
  std::filesystem::create_directories(dir_);
  log_.open(dir_ / "train_log.csv", std::ios::trunc);
  events_.open(dir_ / "events.jsonl", std::ios::trunc);
  require(log_.good() && events_.good(), ErrorCode::kIo, "cannot write logs under " + dir_.string());
  log_ << "step,stage_index,encoder_depth,lr,train_loss,tokens_per_sec,wall_clock_sec\n";
}

void RunDirectoryWriter::on_step(const StepLog& s) {
  char line[256];
  std::snprintf(line, sizeof line, "%llu,%zu,%zu,%.9g,%.6f,%.1f,%.3f\n", static_cast<unsigned long long>(s.step),
                s.stage_index, s.encoder_depth, s.lr, s.train_loss, s.tokens_per_sec, s.wall_clock_sec);
  log_ << line;
  log_.flush();
}

void RunDirectoryWriter::on_grow(const GrowEvent& e) {
  events_ << grow_event_json(e) << '\n';
  events_.flush();
}

void RunDirectoryWriter::on_checkpoint(const CheckpointBundle& bundle, std::size_t stage_index, bool stage_end) {
  char name[64];
  if (stage_end)
    std::snprintf(name, sizeof name, "stage%zu.sdtc", stage_index);
  else
    std::snprintf(name, sizeof name, "step%08llu.sdtc", static_cast<unsigned long long>(bundle.state.global_step));
  last_ = dir_ / name;
  bundle.save(last_);
}

SdtResult run_sdt(const RunConfig& config, const Dataset& train, TrainingObserver* observer, const Model* init,
                  const Vocab* vocab) {
  config.validate();
  const StageSchedule plan = config.stage_schedule();
  require(config.model.vocab_size > 0, ErrorCode::kConfig, "model.vocab_size: unresolved");
  const ModelConfig first = config.initial_model();
  first.validate();

  Model model = init ? init->clone() : Model(first, hash_combine(config.seed, kInitStream));
  if (init) {
    check_growth_compatible(init->config(), first);
    require(init->config().enc_layers == first.enc_layers, ErrorCode::kPlan,
            "initial checkpoint depth " + std::to_string(init->config().enc_layers) + " != first stage depth " +
                std::to_string(first.enc_layers));
  }

  const LearningRateSchedule schedule(config.schedule);
  Adam adam(config.optimizer);
  GradientAccumulator acc(config.optimizer.accumulate_every);
  BatchStream batches(train, config.data.max_tokens, hash_combine(config.seed, kBatchStream));
  const std::uint64_t dropout_seed = hash_combine(config.seed, kDropoutStream);
  const nlohmann::json config_json = to_json(config);
  const std::vector<std::string> tokens = vocab ? vocab->tokens() : std::vector<std::string>{};

  SdtResult result{model.clone(), estimate_layer_updates(plan), {}, {}, 0.0, {}};
  std::uint64_t global_step = 0;
  std::uint64_t micro_step = 0;
  const auto run_start = Clock::now();

  auto snapshot = [&](std::size_t stage_index) {
    TrainingState st;
    st.global_step = global_step;
    st.stage_index = static_cast<std::uint32_t>(stage_index);
    st.rng_seed = config.seed;
    st.rng_counter = micro_step;
    ParameterList params = model.parameters();
    store_moments(st, adam, params);
    return st;
  };

  for (std::size_t si = 0; si < plan.stages.size(); ++si) {
    const Stage& stage = plan.stages[si];
    if (si > 0) {
      const std::size_t from = model.config().enc_layers;
      GrowOptions opts;
      opts.copy_init = config.stages.copy_init;
      opts.uniform_init = config.stages.uniform_new_layers;
      opts.seed = hash_combine(hash_combine(config.seed, kInitStream), si);
      model = grow_model(model, stage.encoder_depth - from, config.stages.strategy, opts);
      if (config.optimizer.reset_moments_on_growth)
        adam.reset();
      else
        adam.retain(model.parameters());
      GrowEvent ev{from, stage.encoder_depth, config.stages.strategy, global_step};
      result.grows.push_back(ev);
      if (observer) observer->on_grow(ev);
    }
    const ParameterList params = model.parameters();
    const auto stage_start = Clock::now();
    std::size_t window_tokens = 0;
    auto window_start = Clock::now();
    double loss_value = 0.0;
    for (std::uint64_t s = 1; s <= stage.steps; ++s) {
      ++global_step;
      double loss_sum = 0.0;
      bool ready = false;
      while (!ready) {
        const Batch& batch = batches.next();
        ForwardContext ctx{true, dropout_seed, micro_step++, 0};
        TapeF tape;
        TapeScope<float> scope(tape);
        const EncoderOutput<float> enc = model.encode(batch.source, ctx);
        const Tensor logits = model.decode_forward(batch.target_in, enc, ctx);
        Tensor loss = label_smoothed_nll(logits, std::span<const TokenId>(batch.target_out),
                                         config.training.label_smoothing, kPadId);
        if (config.training.inter_sim_lambda > 0.0)
          loss = add(loss, inter_sim_regularizer(enc.layers, config.training.inter_sim_lambda));
        loss_sum += loss.item();
        tape.backward(loss);
        window_tokens += batch.token_count;
        ready = acc.push();
      }
      acc.finalize(params);
      const double lr = plan.learning_rate(schedule, si, s, global_step);
      adam.step(params, lr);
      for (const auto& [name, p] : params) {
        Tensor t = p;
        t.clear_grad();
      }
      loss_value = loss_sum / static_cast<double>(acc.every_n());
      if (observer && (s % config.training.log_every == 0 || s == stage.steps)) {
        const double dt = seconds_since(window_start);
        StepLog log{global_step, si + 1, stage.encoder_depth, lr, loss_value,
                    dt > 0 ? static_cast<double>(window_tokens) / dt : 0.0, seconds_since(run_start)};
        observer->on_step(log);
        window_tokens = 0;
        window_start = Clock::now();
      }
      if (observer && config.training.checkpoint_every > 0 && global_step % config.training.checkpoint_every == 0 &&
          s != stage.steps)
        observer->on_checkpoint(make_bundle(model, config_json, snapshot(si + 1), tokens), si + 1, false);
    }
    result.cost.stages[si].wall_clock_sec = seconds_since(stage_start);
    result.final_loss = loss_value;
    CheckpointBundle bundle = make_bundle(model, config_json, snapshot(si + 1), tokens);
    if (observer) observer->on_checkpoint(bundle, si + 1, true);
    if (si + 1 == plan.stages.size()) {
      result.state = bundle.state;
      result.final_checkpoint = std::move(bundle);
    }
  }
  result.cost.wall_clock_sec = seconds_since(run_start);
  result.model = std::move(model);
  return result;
}

double sequence_accuracy(const Model& model, const Dataset& dev, std::size_t batch_size) {
  require(!dev.empty(), ErrorCode::kData, "dev set is empty");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < dev.size(); start += batch_size) {
    const std::size_t end = std::min(dev.size(), start + batch_size);
    std::vector<std::vector<TokenId>> sources;
    std::size_t longest = 0;
    for (std::size_t i = start; i < end; ++i) {
      sources.push_back(dev[i].source);
      longest = std::max(longest, dev[i].target.size());
    }
    const auto hyps = greedy_decode_batch(model, sources, longest + 2);
    for (std::size_t i = start; i < end; ++i) correct += hyps[i - start] == dev[i].target ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(dev.size());
}

RunData prepare_data(const RunConfig& config) {
  RunData d;
  if (!config.data.train_file.empty()) {
    d.train = read_dataset(config.data.train_file, d.vocab, true);
    d.dev = read_dataset(config.data.dev_file, d.vocab, true);
    return d;
  }
  d.vocab = Vocab::for_alphabet(config.data.alphabet_size);
  SyntheticTaskSpec spec;
  spec.kind = parse_task_kind(config.data.task);
  spec.alphabet_size = config.data.alphabet_size;
  spec.min_len = config.data.min_len;
  spec.max_len = config.data.max_len;
  spec.samples = config.data.train_samples;
  spec.seed = hash_combine(config.seed, 0x7a1aULL);
  d.train = generate(spec);
  spec.samples = config.data.dev_samples;
  spec.seed = hash_combine(config.seed, 0xde7ULL);
  d.dev = generate(spec);
  return d;
}

RunConfig resolve_vocab(RunConfig config, const RunData& data) {
  if (config.model.vocab_size == 0) config.model.vocab_size = data.vocab.size();
  require(config.model.vocab_size >= data.vocab.size(), ErrorCode::kConfig,
          "model.vocab_size: " + std::to_string(config.model.vocab_size) + " is smaller than the data vocabulary (" +
              std::to_string(data.vocab.size()) + ")");
  return config;
}

}  // namespace sdt
