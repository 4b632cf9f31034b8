#include "sdt/run_config.hpp"

#include <fstream>
#include <set>

#include "sdt/data.hpp"
#include "sdt/error.hpp"

namespace sdt {

using nlohmann::json;

namespace {

// Reads keys out of one JSON object and rejects the ones nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), ErrorCode::kConfig, where("") + ": expected an object");
  }

  std::string where(const std::string& key) const {
    if (path_.empty()) return key;
    return key.empty() ? path_ : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        require(v->is_boolean(), ErrorCode::kConfig, where(key) + ": expected true or false");
      } else if constexpr (std::is_integral_v<T>) {
        require(v->is_number_unsigned() || (v->is_number_integer() && v->get<long long>() >= 0), ErrorCode::kConfig,
                where(key) + ": expected a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        require(v->is_number(), ErrorCode::kConfig, where(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        require(v->is_string(), ErrorCode::kConfig, where(key) + ": expected a string");
      }
      out = v->get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kConfig, where(key) + ": " + e.what());
    }
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    const json* v = find(key);
    if (!v) return;
    require(v->is_array(), ErrorCode::kConfig, where(key) + ": expected an array of integers");
    std::vector<T> items;
    for (const auto& e : *v) {
      require(e.is_number_unsigned() || (e.is_number_integer() && e.get<long long>() >= 0), ErrorCode::kConfig,
              where(key) + ": expected an array of non-negative integers");
      items.push_back(e.get<T>());
    }
    out = std::move(items);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      require(seen_.count(it.key()) != 0, ErrorCode::kConfig, where(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

json to_json(const ModelConfig& c) {
  json j;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["d_ff"] = c.d_ff;
  j["enc_layers"] = c.enc_layers;
  j["dec_layers"] = c.dec_layers;
  j["dropout"] = c.dropout;
  j["rpr_enabled"] = c.rpr_enabled;
  j["rpr_clip_k"] = c.rpr_clip_k;
  j["vocab_size"] = c.vocab_size;
  j["shared_embeddings"] = c.shared_embeddings;
  if (c.block_size.is_unbounded())
    j["block_size"] = "inf";
  else
    j["block_size"] = c.block_size.layers();
  j["combiner_norm"] = c.combiner_norm;
  j["layer_norm_eps"] = c.layer_norm_eps;
  return j;
}

namespace {

ModelConfig read_model(const json& j, const std::string& path) {
  ModelConfig c;
  ObjectReader r(j, path);
  r.get("d_model", c.d_model);
  r.get("n_heads", c.n_heads);
  r.get("d_ff", c.d_ff);
  r.get("enc_layers", c.enc_layers);
  r.get("dec_layers", c.dec_layers);
  r.get("dropout", c.dropout);
  r.get("rpr_enabled", c.rpr_enabled);
  r.get("rpr_clip_k", c.rpr_clip_k);
  r.get("vocab_size", c.vocab_size);
  r.get("shared_embeddings", c.shared_embeddings);
  if (const json* p = r.find("block_size")) {
    if (p->is_string()) {
      require(p->get<std::string>() == "inf", ErrorCode::kConfig, r.where("block_size") + ": expected a positive integer or \"inf\"");
      c.block_size = BlockSize::unbounded();
    } else {
      require(p->is_number_integer() && p->get<long long>() >= 1, ErrorCode::kConfig,
              r.where("block_size") + ": expected a positive integer or \"inf\"");
      c.block_size = BlockSize(p->get<std::size_t>());
    }
  }
  r.get("combiner_norm", c.combiner_norm);
  r.get("layer_norm_eps", c.layer_norm_eps);
  r.finish();
  return c;
}

}  // namespace

ModelConfig model_config_from_json(const json& j) { return read_model(j, "model"); }

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["model"] = to_json(c.model);
  j["optimizer"] = {{"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps},
                    {"accumulate_every", c.optimizer.accumulate_every},
                    {"reset_moments_on_growth", c.optimizer.reset_moments_on_growth}};
  j["schedule"] = {{"d_model", c.schedule.d_model},
                   {"warmup_steps", c.schedule.warmup_steps},
                   {"peak_lr", c.schedule.peak_lr ? json(*c.schedule.peak_lr) : json(nullptr)},
                   {"floor_lr", c.schedule.floor_lr}};
  j["stages"] = {{"depths", c.stages.depths},
                 {"steps", c.stages.steps},
                 {"omega", c.stages.omega},
                 {"reset_lr", c.stages.reset_lr},
                 {"strategy", to_string(c.stages.strategy)},
                 {"copy_init", c.stages.copy_init},
                 {"uniform_new_layers", c.stages.uniform_new_layers},
                 {"init_checkpoint", c.stages.init_checkpoint}};
  j["data"] = {{"task", c.data.task},
               {"alphabet_size", c.data.alphabet_size},
               {"min_len", c.data.min_len},
               {"max_len", c.data.max_len},
               {"train_samples", c.data.train_samples},
               {"dev_samples", c.data.dev_samples},
               {"train_file", c.data.train_file},
               {"dev_file", c.data.dev_file},
               {"max_tokens", c.data.max_tokens}};
  j["training"] = {{"label_smoothing", c.training.label_smoothing},
                   {"inter_sim_lambda", c.training.inter_sim_lambda},
                   {"checkpoint_every", c.training.checkpoint_every},
                   {"log_every", c.training.log_every}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  ObjectReader top(j, "");
  top.get("seed", c.seed);
  top.get("out_dir", c.out_dir);
  if (const json* m = top.find("model")) c.model = read_model(*m, "model");
  bool schedule_d_model_set = false;
  if (const json* o = top.find("optimizer")) {
    ObjectReader r(*o, "optimizer");
    r.get("beta1", c.optimizer.beta1);
    r.get("beta2", c.optimizer.beta2);
    r.get("eps", c.optimizer.eps);
    r.get("accumulate_every", c.optimizer.accumulate_every);
    r.get("reset_moments_on_growth", c.optimizer.reset_moments_on_growth);
    r.finish();
  }
  if (const json* s = top.find("schedule")) {
    ObjectReader r(*s, "schedule");
    schedule_d_model_set = s->contains("d_model");
    r.get("d_model", c.schedule.d_model);
    r.get("warmup_steps", c.schedule.warmup_steps);
    if (const json* p = r.find("peak_lr")) {
      if (p->is_null()) {
        c.schedule.peak_lr.reset();
      } else {
        require(p->is_number(), ErrorCode::kConfig, "schedule.peak_lr: expected a number or null");
        c.schedule.peak_lr = p->get<double>();
      }
    }
    r.get("floor_lr", c.schedule.floor_lr);
    r.finish();
  }
  if (!schedule_d_model_set) c.schedule.d_model = c.model.d_model;
  if (const json* s = top.find("stages")) {
    ObjectReader r(*s, "stages");
    r.get_list("depths", c.stages.depths);
    r.get_list("steps", c.stages.steps);
    r.get("omega", c.stages.omega);
    r.get("reset_lr", c.stages.reset_lr);
    std::string strategy = to_string(c.stages.strategy);
    r.get("strategy", strategy);
    c.stages.strategy = parse_copy_strategy(strategy);
    r.get("copy_init", c.stages.copy_init);
    r.get("uniform_new_layers", c.stages.uniform_new_layers);
    r.get("init_checkpoint", c.stages.init_checkpoint);
    r.finish();
  }
  if (const json* d = top.find("data")) {
    ObjectReader r(*d, "data");
    r.get("task", c.data.task);
    r.get("alphabet_size", c.data.alphabet_size);
    r.get("min_len", c.data.min_len);
    r.get("max_len", c.data.max_len);
    r.get("train_samples", c.data.train_samples);
    r.get("dev_samples", c.data.dev_samples);
    r.get("train_file", c.data.train_file);
    r.get("dev_file", c.data.dev_file);
    r.get("max_tokens", c.data.max_tokens);
    r.finish();
  }
  if (const json* t = top.find("training")) {
    ObjectReader r(*t, "training");
    r.get("label_smoothing", c.training.label_smoothing);
    r.get("inter_sim_lambda", c.training.inter_sim_lambda);
    r.get("checkpoint_every", c.training.checkpoint_every);
    r.get("log_every", c.training.log_every);
    r.finish();
  }
  top.finish();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

StageSchedule RunConfig::stage_schedule() const {
  StageSchedule s;
  s.omega = stages.omega;
  s.reset_lr = stages.reset_lr;
  for (std::size_t i = 0; i < stages.depths.size(); ++i)
    s.stages.push_back({stages.depths[i], i < stages.steps.size() ? stages.steps[i] : 0});
  return s;
}

ModelConfig RunConfig::initial_model() const {
  ModelConfig m = model;
  if (!stages.depths.empty()) m.enc_layers = stages.depths.front();
  return m;
}

void RunConfig::validate() const {
  require(!stages.depths.empty(), ErrorCode::kConfig, "stages.depths: at least one stage is required");
  require(stages.steps.size() == stages.depths.size(), ErrorCode::kConfig,
          "stages.steps: " + std::to_string(stages.steps.size()) + " budgets for " + std::to_string(stages.depths.size()) +
              " stages");
  require(training.label_smoothing >= 0.0 && training.label_smoothing < 1.0, ErrorCode::kConfig,
          "training.label_smoothing: must lie in [0, 1)");
  require(training.inter_sim_lambda >= 0.0, ErrorCode::kConfig, "training.inter_sim_lambda: must be non-negative");
  require(training.log_every >= 1, ErrorCode::kConfig, "training.log_every: must be at least 1");
  require(data.max_tokens >= 2, ErrorCode::kConfig, "data.max_tokens: must be at least 2");
  require(data.train_file.empty() || !data.dev_file.empty(), ErrorCode::kConfig,
          "data.dev_file: required when data.train_file is set");
  if (data.train_file.empty()) {
    parse_task_kind(data.task);
    require(data.alphabet_size >= 2, ErrorCode::kConfig, "data.alphabet_size: must be at least 2");
    require(data.min_len >= 1 && data.min_len <= data.max_len, ErrorCode::kConfig,
            "data.min_len: need 1 <= min_len <= max_len");
    require(data.train_samples >= 1 && data.dev_samples >= 1, ErrorCode::kConfig, "data: sample counts must be positive");
  }
  optimizer.validate();
  schedule.validate();
  ModelConfig m = initial_model();
  if (m.vocab_size == 0) m.vocab_size = 4 + data.alphabet_size;
  m.validate();
  try {
    stage_schedule().validate();
  } catch (const Error& e) {
    fail(ErrorCode::kConfig, std::string("stages: ") + e.what());
  }
}

}  // namespace sdt
