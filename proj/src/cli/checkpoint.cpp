#include "sdt/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "sdt/error.hpp"
#include "sdt/run_config.hpp"

namespace sdt {

namespace {

constexpr char kMagic[4] = {'S', 'D', 'T', 'C'};

void write_section(ByteWriter& w, const CheckpointBundle& b) {
  w.u64(b.tensors.size());
  for (const auto& t : b.tensors) write_tensor(w, t.name, t.tensor);
  w.u64(b.state.global_step);
  w.u32(b.state.stage_index);
  w.u64(b.state.rng_seed);
  w.u64(b.state.rng_counter);
  w.u64(b.state.adam_step);
  w.u64(b.state.moments.size());
  for (const auto& t : b.state.moments) write_tensor(w, t.name, t.tensor);
}

}  // namespace

std::vector<std::uint8_t> CheckpointBundle::serialize() const {
  ByteWriter w;
  w.bytes(std::string_view(kMagic, 4));
  w.u32(kCheckpointVersion);
  const std::string cfg = config.dump();
  w.u64(cfg.size());
  w.bytes(cfg);
  ByteWriter section;
  write_section(section, *this);
  const auto& s = section.buffer();
  w.u64(s.size());
  w.buffer().insert(w.buffer().end(), s.begin(), s.end());
  w.u64(fnv1a64(s.data(), s.size()));
  return w.buffer();
}

CheckpointBundle CheckpointBundle::deserialize(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  const std::string magic = r.bytes(4);
  require(magic == std::string(kMagic, 4), ErrorCode::kIncompatibleCheckpoint, "not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::kIncompatibleCheckpoint,
          "unsupported checkpoint version " + std::to_string(version));
  CheckpointBundle b;
  const std::uint64_t cfg_len = r.u64();
  require(cfg_len <= r.remaining(), ErrorCode::kIo, "truncated checkpoint config");
  try {
    b.config = nlohmann::json::parse(r.bytes(cfg_len));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, std::string("corrupt checkpoint config: ") + e.what());
  }
  const std::uint64_t section_len = r.u64();
  require(section_len <= r.remaining(), ErrorCode::kIo, "truncated checkpoint tensor section");
  const std::size_t start = r.position();
  ByteReader s(bytes.data() + start, section_len);
  r.bytes(section_len);
  const std::uint64_t checksum = r.u64();
  require(r.remaining() == 0, ErrorCode::kIo, "trailing bytes after checkpoint checksum");
  require(checksum == fnv1a64(bytes.data() + start, section_len), ErrorCode::kIo, "checkpoint checksum mismatch");

  const std::uint64_t count = s.u64();
  for (std::uint64_t i = 0; i < count; ++i) b.tensors.push_back(read_tensor(s));
  b.state.global_step = s.u64();
  b.state.stage_index = s.u32();
  b.state.rng_seed = s.u64();
  b.state.rng_counter = s.u64();
  b.state.adam_step = s.u64();
  const std::uint64_t moments = s.u64();
  for (std::uint64_t i = 0; i < moments; ++i) b.state.moments.push_back(read_tensor(s));
  require(s.remaining() == 0, ErrorCode::kIo, "tensor count does not match the tensor section length");
  return b;
}

void CheckpointBundle::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

CheckpointBundle CheckpointBundle::load(const std::filesystem::path& path) {
  try {
    return deserialize(read_file_bytes(path));
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

ModelConfig CheckpointBundle::model_config() const {
  require(config.is_object() && config.contains("model"), ErrorCode::kIncompatibleCheckpoint,
          "checkpoint config has no model section");
  return model_config_from_json(config.at("model"));
}

std::vector<std::string> CheckpointBundle::vocab_tokens() const {
  if (!config.is_object() || !config.contains("vocab")) return {};
  try {
    return config.at("vocab").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIncompatibleCheckpoint, std::string("checkpoint vocabulary: ") + e.what());
  }
}

CheckpointBundle make_bundle(const Model& model, const nlohmann::json& run_config, const TrainingState& state,
                             const std::vector<std::string>& vocab) {
  CheckpointBundle b;
  b.config = nlohmann::json::object();
  b.config["model"] = to_json(model.config());
  if (!run_config.is_null()) b.config["run"] = run_config;
  if (!vocab.empty()) b.config["vocab"] = vocab;
  for (const auto& [name, t] : model.parameters()) b.tensors.push_back({name, t.clone()});
  b.state = state;
  return b;
}

void store_moments(TrainingState& state, const Adam& adam, const ParameterList& params) {
  state.adam_step = adam.step_count();
  state.moments.clear();
  for (const auto& [name, p] : params) {
    auto it = adam.moments().find(name);
    if (it == adam.moments().end()) continue;
    state.moments.push_back({name + ".m", Tensor::from_values(p.shape(), it->second.m)});
    state.moments.push_back({name + ".v", Tensor::from_values(p.shape(), it->second.v)});
  }
}

void restore_moments(const TrainingState& state, Adam& adam) {
  adam.reset();
  adam.set_step_count(state.adam_step);
  for (const auto& t : state.moments) {
    const std::string& n = t.name;
    require(n.size() > 2 && n[n.size() - 2] == '.', ErrorCode::kIncompatibleCheckpoint, "bad moment tensor name " + n);
    auto& m = adam.moments()[n.substr(0, n.size() - 2)];
    const auto v = t.tensor.values();
    (n.back() == 'm' ? m.m : m.v).assign(v.begin(), v.end());
  }
}

Model model_from_bundle(const CheckpointBundle& bundle) {
  Model model(bundle.model_config(), 0);
  const auto params = model.parameters();
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : bundle.tensors) by_name[t.name] = &t;
  std::string missing;
  for (const auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing += " " + name;
      continue;
    }
    require(it->second->tensor.shape() == p.shape(), ErrorCode::kIncompatibleCheckpoint,
            name + ": checkpoint shape " + shape_to_string(it->second->tensor.shape()) + " vs model " +
                shape_to_string(p.shape()));
    Tensor dst = p;
    std::copy(it->second->tensor.values().begin(), it->second->tensor.values().end(), dst.values().begin());
  }
  require(missing.empty(), ErrorCode::kIncompatibleCheckpoint, "checkpoint lacks tensors:" + missing);
  require(bundle.tensors.size() == params.size(), ErrorCode::kIncompatibleCheckpoint,
          "checkpoint holds " + std::to_string(bundle.tensors.size()) + " tensors, model expects " +
              std::to_string(params.size()));
  return model;
}

CheckpointBundle average_checkpoints(const std::vector<CheckpointBundle>& bundles) {
  require(!bundles.empty(), ErrorCode::kContract, "average_checkpoints: no checkpoints");
  const auto& ref = bundles.front().tensors;
  for (std::size_t k = 1; k < bundles.size(); ++k) {
    const auto& other = bundles[k].tensors;
    std::string diff;
    for (std::size_t i = 0; i < std::max(ref.size(), other.size()); ++i) {
      if (i >= ref.size()) {
        diff += " +" + other[i].name;
      } else if (i >= other.size()) {
        diff += " -" + ref[i].name;
      } else if (ref[i].name != other[i].name) {
        diff += " " + ref[i].name + "!=" + other[i].name;
      } else if (ref[i].tensor.shape() != other[i].tensor.shape()) {
        diff += " " + ref[i].name + shape_to_string(ref[i].tensor.shape()) + "!=" + shape_to_string(other[i].tensor.shape());
      }
    }
    require(diff.empty(), ErrorCode::kIncompatibleCheckpoint,
            "checkpoint " + std::to_string(k + 1) + " differs from checkpoint 1:" + diff);
  }
  const auto* latest = &bundles.front();
  for (const auto& b : bundles)
    if (b.state.global_step > latest->state.global_step) latest = &b;

  CheckpointBundle out;
  out.config = latest->config;
  out.state.global_step = latest->state.global_step;
  out.state.stage_index = latest->state.stage_index;
  out.state.rng_seed = latest->state.rng_seed;
  out.state.rng_counter = latest->state.rng_counter;
  const std::size_t k = bundles.size();
  std::vector<float> column(k);
  for (std::size_t t = 0; t < ref.size(); ++t) {
    Tensor avg = Tensor::zeros(ref[t].tensor.shape());
    auto dst = avg.values();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      for (std::size_t c = 0; c < k; ++c) column[c] = bundles[c].tensors[t].tensor.values()[i];
      // Summing in sorted order makes the result independent of input order.
      std::sort(column.begin(), column.end());
      double total = 0.0;
      for (float v : column) total += v;
      dst[i] = static_cast<float>(total / static_cast<double>(k));
    }
    out.tensors.push_back({ref[t].name, avg});
  }
  return out;
}

std::vector<std::filesystem::path> latest_checkpoints(const std::filesystem::path& dir, std::size_t last) {
  require(std::filesystem::is_directory(dir), ErrorCode::kIo, "not a directory: " + dir.string());
  std::vector<std::pair<std::uint64_t, std::filesystem::path>> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".sdtc") continue;
    if (entry.path().stem().string().rfind("averaged", 0) == 0) continue;
    const auto bundle = CheckpointBundle::load(entry.path());
    found.emplace_back(bundle.state.global_step, entry.path());
  }
  std::sort(found.begin(), found.end());
  std::vector<std::filesystem::path> out;
  const std::size_t skip = found.size() > last ? found.size() - last : 0;
  for (std::size_t i = skip; i < found.size(); ++i) out.push_back(found[i].second);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

}  // namespace sdt
