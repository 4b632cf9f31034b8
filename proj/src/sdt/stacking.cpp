#include "sdt/stacking.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "sdt/error.hpp"
#include "sdt/rng.hpp"

namespace sdt {

CopyStrategy parse_copy_strategy(const std::string& name) {
  if (name == "g-top-most") return CopyStrategy::kGTopMost;
  if (name == "top-only") return CopyStrategy::kTopOnly;
  if (name == "interpolation") return CopyStrategy::kInterpolation;
  fail(ErrorCode::kConfig, "strategy: unknown copy strategy '" + name + "' (g-top-most|top-only|interpolation)");
}

std::string to_string(CopyStrategy strategy) {
  switch (strategy) {
    case CopyStrategy::kGTopMost: return "g-top-most";
    case CopyStrategy::kTopOnly: return "top-only";
    case CopyStrategy::kInterpolation: return "interpolation";
  }
  return "g-top-most";
}

void StackPlan::validate() const {
  require(g >= 1, ErrorCode::kContract, "stack plan: g must be at least 1");
  require(h >= g, ErrorCode::kContract,
          "stack plan: h >= g required, got h=" + std::to_string(h) + " g=" + std::to_string(g));
}

std::vector<LayerOrigin> layer_origins(const StackPlan& plan) {
  plan.validate();
  const std::size_t h = plan.h, g = plan.g;
  std::vector<LayerOrigin> out;
  out.reserve(h + g);
  switch (plan.strategy) {
    case CopyStrategy::kGTopMost:
      for (std::size_t j = 1; j <= h; ++j) out.push_back({j, false});
      for (std::size_t i = 1; i <= g; ++i) out.push_back({h - g + i, true});
      break;
    case CopyStrategy::kTopOnly:
      for (std::size_t j = 1; j <= h; ++j) out.push_back({j, false});
      for (std::size_t i = 1; i <= g; ++i) out.push_back({h, true});
      break;
    case CopyStrategy::kInterpolation:
      for (std::size_t j = 1; j <= h - g; ++j) out.push_back({j, false});
      for (std::size_t j = h - g + 1; j <= h; ++j) {
        out.push_back({j, false});
        out.push_back({j, true});
      }
      break;
  }
  return out;
}

void check_growth_compatible(const ModelConfig& source, const ModelConfig& target) {
  ModelConfig a = source, b = target;
  a.enc_layers = b.enc_layers = 1;
  if (a == b) return;
  std::string diff;
  auto note = [&](bool differs, const char* field) {
    if (differs) diff += std::string(diff.empty() ? "" : ", ") + field;
  };
  note(a.d_model != b.d_model, "d_model");
  note(a.n_heads != b.n_heads, "n_heads");
  note(a.d_ff != b.d_ff, "d_ff");
  note(a.dec_layers != b.dec_layers, "dec_layers");
  note(a.dropout != b.dropout, "dropout");
  note(a.rpr_enabled != b.rpr_enabled, "rpr_enabled");
  note(a.rpr_clip_k != b.rpr_clip_k, "rpr_clip_k");
  note(a.vocab_size != b.vocab_size, "vocab_size");
  note(a.shared_embeddings != b.shared_embeddings, "shared_embeddings");
  note(!(a.block_size == b.block_size), "block_size");
  note(a.combiner_norm != b.combiner_norm, "combiner_norm");
  note(a.layer_norm_eps != b.layer_norm_eps, "layer_norm_eps");
  fail(ErrorCode::kIncompatibleCheckpoint, "model configs differ in: " + diff);
}

namespace {

void copy_values(const Tensor& from, Tensor to, const std::string& name) {
  require(from.shape() == to.shape(), ErrorCode::kIncompatibleCheckpoint,
          name + ": shape " + shape_to_string(from.shape()) + " vs " + shape_to_string(to.shape()));
  std::copy(from.values().begin(), from.values().end(), to.values().begin());
}

}  // namespace

Model grow_model(const Model& a, std::size_t g, CopyStrategy strategy, const GrowOptions& options) {
  const ModelConfig& ca = a.config();
  const StackPlan plan{ca.enc_layers, g, strategy};
  const auto origins = layer_origins(plan);

  ModelConfig cb = ca;
  cb.enc_layers = ca.enc_layers + g;
  Model b(cb, options.seed);

  std::unordered_map<std::string, Tensor> source;
  for (const auto& [name, t] : a.parameters()) source.emplace(name, t);

  if (!options.copy_init && options.uniform_init)
    for (std::size_t j = 1; j <= origins.size(); ++j)
      if (origins[j - 1].added)
        b.encoder_layers()[j - 1] = Model::make_encoder_layer(cb, hash_combine(options.seed, j), true);

  const std::string layer_tag = "encoder.layer";
  const std::string combiner_tag = "encoder.combiner.";
  for (const auto& [name, t] : b.parameters()) {
    if (name.rfind(combiner_tag, 0) == 0) continue;
    if (name.rfind(layer_tag, 0) == 0) {
      const std::size_t dot = name.find('.', layer_tag.size());
      const std::size_t j = std::stoul(name.substr(layer_tag.size(), dot - layer_tag.size()));
      const LayerOrigin& o = origins.at(j - 1);
      if (o.added && !options.copy_init) continue;
      const std::string src = encoder_layer_prefix(o.source) + name.substr(dot + 1);
      copy_values(source.at(src), t, name);
      continue;
    }
    copy_values(source.at(name), t, name);
  }

  const BlockTopology& ta = a.topology();
  const BlockTopology& tb = b.topology();
  if (tb.connected()) {
    auto& wb = b.combiner().weights;
    auto& nb = b.combiner().norms;
    const auto& wa = a.combiner().weights;
    const auto& na = a.combiner().norms;
    for (std::size_t blk = 1; blk <= tb.block_count(); ++blk) {
      if (blk <= ta.block_count()) {
        copy_values(wa[blk - 1], wb[blk - 1], "combiner weights");
        copy_values(na[blk - 1].gain, nb[blk - 1].gain, "combiner norm");
        copy_values(na[blk - 1].bias, nb[blk - 1].bias, "combiner norm");
        continue;
      }
      if (!options.copy_init) continue;
      const std::size_t src_layer = origins.at(tb.block(blk).second - 1).source;
      const std::size_t s = ta.block_of(src_layer);
      const auto ws = wa[s - 1].values();
      // History entries 0..s-1 keep the source proportions, blocks between
      // s and blk start unused, the self weight repeats the source's.
      std::vector<double> w(blk + 1, 0.0);
      for (std::size_t k = 0; k < s; ++k) w[k] = ws[k];
      w[blk] = ws[s];
      double total = 0.0;
      for (double x : w) total += x;
      auto dst = wb[blk - 1].values();
      for (std::size_t k = 0; k <= blk; ++k)
        dst[k] = std::abs(total) < 1e-12 ? 1.0f / static_cast<float>(blk + 1) : static_cast<float>(w[k] / total);
      copy_values(na[s - 1].gain, nb[blk - 1].gain, "combiner norm");
      copy_values(na[s - 1].bias, nb[blk - 1].bias, "combiner norm");
    }
  }
  return b;
}

CostReport estimate_layer_updates(const StageSchedule& schedule) {
  schedule.validate();
  CostReport r;
  for (const auto& s : schedule.stages) {
    StageCost c;
    c.depth = s.encoder_depth;
    c.steps = s.steps;
    c.layer_updates = static_cast<std::uint64_t>(s.encoder_depth) * s.steps;
    r.total_steps += c.steps;
    r.total_layer_updates += c.layer_updates;
    r.stages.push_back(c);
  }
  r.final_depth = schedule.stages.back().encoder_depth;
  const double scratch = static_cast<double>(r.final_depth) * static_cast<double>(r.total_steps);
  r.layer_update_ratio = static_cast<double>(r.total_layer_updates) / scratch;
  r.idealized_speedup = 1.0 / r.layer_update_ratio;
  return r;
}

std::vector<ReferenceSpeedup> reference_speedups() {
  return {{"g=3, interval 1", 36.7}, {"g=6, interval 2", 39.9}, {"g=9, interval 4", 42.1}, {"g=6,9,12,15, interval 4", 51.8}};
}

std::vector<ReferenceBleu> reference_ablation_bleu() {
  return {{"no reset-lr, no copy-init", 27.33},
          {"reset-lr, no copy-init", 27.98},
          {"no reset-lr, copy-init", 29.93},
          {"reset-lr, copy-init", 30.21},
          {"top-only", 29.20},
          {"interpolation", 29.46},
          {"g-top-most", 30.21}};
}

}  // namespace sdt
