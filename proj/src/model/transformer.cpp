#include "sdt/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>

#include "sdt/rng.hpp"
#include "sdt/serialize.hpp"

namespace sdt {

void ModelConfig::validate() const {
  auto check = [](bool ok, const std::string& field, const std::string& why) {
    require(ok, ErrorCode::kConfig, "model." + field + ": " + why);
  };
  check(d_model >= 1, "d_model", "must be positive");
  check(n_heads >= 1 && d_model % n_heads == 0, "n_heads", "must divide d_model");
  check(d_ff >= 1, "d_ff", "must be positive");
  check(enc_layers >= 1, "enc_layers", "must be at least 1");
  check(dec_layers >= 1, "dec_layers", "must be at least 1");
  check(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
  check(!rpr_enabled || rpr_clip_k >= 1, "rpr_clip_k", "must be at least 1 when rpr is enabled");
  check(vocab_size > static_cast<std::size_t>(kUnkId), "vocab_size", "must exceed the reserved ids");
  check(layer_norm_eps > 0.0, "layer_norm_eps", "must be positive");
}

BlockTopology::BlockTopology(std::size_t depth, BlockSize block_size) : depth_(depth), block_size_(block_size) {
  const std::size_t p = block_size.is_unbounded() ? std::max<std::size_t>(depth, 1) : block_size.layers();
  for (std::size_t first = 1; first <= depth; first += p) blocks_.emplace_back(first, std::min(depth, first + p - 1));
}

std::size_t BlockTopology::block_of(std::size_t layer) const {
  require(layer >= 1 && layer <= depth_, ErrorCode::kIndex,
          "layer " + std::to_string(layer) + " outside 1.." + std::to_string(depth_));
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    if (layer <= blocks_[b].second) return b + 1;
  return blocks_.size();
}

bool BlockTopology::is_block_end(std::size_t layer) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [layer](const auto& blk) { return blk.second == layer; });
}

TokenBatch TokenBatch::from_sequences(const std::vector<std::vector<TokenId>>& sequences) {
  TokenBatch batch;
  batch.layout.batch = sequences.size();
  for (const auto& s : sequences) batch.layout.length = std::max(batch.layout.length, s.size());
  const std::size_t L = batch.layout.length;
  batch.ids.assign(sequences.size() * L, kPadId);
  batch.layout.valid.assign(sequences.size() * L, 0);
  for (std::size_t b = 0; b < sequences.size(); ++b)
    for (std::size_t t = 0; t < sequences[b].size(); ++t) {
      batch.ids[b * L + t] = sequences[b][t];
      batch.layout.valid[b * L + t] = 1;
    }
  return batch;
}

TokenBatch TokenBatch::single(std::span<const TokenId> sequence) {
  return from_sequences({std::vector<TokenId>(sequence.begin(), sequence.end())});
}

std::size_t TokenBatch::token_count() const {
  std::size_t n = 0;
  for (std::size_t b = 0; b < layout.batch; ++b) n += layout.valid_count(b);
  return n;
}

std::vector<double> sinusoid_table(std::size_t length, std::size_t d) {
  std::vector<double> table(length * d);
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      table[t * d + i] = (i % 2 == 0) ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
    }
  return table;
}

std::string encoder_layer_prefix(std::size_t layer) { return "encoder.layer" + std::to_string(layer) + "."; }

template <typename T>
BasicTensor<T> multi_head_attention(const AttentionParams<T>& params, const BasicTensor<T>& query_in,
                                    const BasicTensor<T>& memory_in, const AttentionSpec& spec) {
  return params.o(attention(params.q(query_in), params.k(memory_in), params.v(memory_in), spec, params.rel_key));
}

template <typename T>
BasicTensor<T> feed_forward(const FeedForwardParams<T>& params, const BasicTensor<T>& x, double relu_dropout,
                            DropoutKey key) {
  return params.fc2(dropout(relu(params.fc1(x)), relu_dropout, key));
}

template <typename T>
BasicTensor<T> combine_blocks(std::span<const BasicTensor<T>> history, const BasicTensor<T>& weights,
                              const NormParams<T>* norm, double eps) {
  require(weights.numel() == history.size(), ErrorCode::kContract,
          "combine_blocks: weight vector of length " + std::to_string(weights.numel()) + " for " +
              std::to_string(history.size()) + " block outputs");
  BasicTensor<T> mixed = weighted_sum(history, weights);
  return norm ? layer_norm(mixed, norm->gain, norm->bias, eps) : mixed;
}

namespace {

// Deterministic per-tensor stream so initialization does not depend on the
// order parameters are created in.
CounterRng stream_for(std::uint64_t seed, std::string_view name) {
  return CounterRng(hash_combine(seed, fnv1a64(reinterpret_cast<const std::uint8_t*>(name.data()), name.size())));
}

template <typename T>
BasicTensor<T> uniform_tensor(Shape shape, double bound, CounterRng rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>::from_values(std::move(shape), std::move(v), true);
}

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, double stddev, CounterRng rng) {
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(stddev * rng.normal());
  return BasicTensor<T>::from_values(std::move(shape), std::move(v), true);
}

template <typename T>
LinearParams<T> make_linear(std::size_t in, std::size_t out, std::uint64_t seed, const std::string& name, bool uniform_init) {
  const double bound = uniform_init ? 1.0 / std::sqrt(static_cast<double>(in))
                                    : std::sqrt(6.0 / static_cast<double>(in + out));
  return {uniform_tensor<T>({in, out}, bound, stream_for(seed, name + ".weight")), BasicTensor<T>::zeros({out}, true)};
}

template <typename T>
NormParams<T> make_norm(std::size_t d) {
  return {BasicTensor<T>::filled({d}, T(1), true), BasicTensor<T>::zeros({d}, true)};
}

template <typename T>
AttentionParams<T> make_attention(const ModelConfig& c, std::uint64_t seed, const std::string& name, bool relative,
                                  bool uniform_init) {
  AttentionParams<T> a;
  a.q = make_linear<T>(c.d_model, c.d_model, seed, name + ".q", uniform_init);
  a.k = make_linear<T>(c.d_model, c.d_model, seed, name + ".k", uniform_init);
  a.v = make_linear<T>(c.d_model, c.d_model, seed, name + ".v", uniform_init);
  a.o = make_linear<T>(c.d_model, c.d_model, seed, name + ".o", uniform_init);
  if (relative) {
    const std::size_t dh = c.d_model / c.n_heads;
    const std::size_t rows = 2 * c.rpr_clip_k + 1;
    a.rel_key = uniform_tensor<T>({rows, dh}, std::sqrt(6.0 / static_cast<double>(rows + dh)),
                                  stream_for(seed, name + ".rel_key"));
  }
  return a;
}

template <typename T>
FeedForwardParams<T> make_ffn(const ModelConfig& c, std::uint64_t seed, const std::string& name, bool uniform_init) {
  return {make_linear<T>(c.d_model, c.d_ff, seed, name + ".fc1", uniform_init),
          make_linear<T>(c.d_ff, c.d_model, seed, name + ".fc2", uniform_init)};
}

template <typename T>
using ParamList = std::vector<std::pair<std::string, BasicTensor<T>>>;

template <typename T>
void push_linear(ParamList<T>& out, const std::string& name, const LinearParams<T>& l) {
  out.emplace_back(name + ".weight", l.weight);
  out.emplace_back(name + ".bias", l.bias);
}

template <typename T>
void push_norm(ParamList<T>& out, const std::string& name, const NormParams<T>& n) {
  out.emplace_back(name + ".gain", n.gain);
  out.emplace_back(name + ".bias", n.bias);
}

template <typename T>
void push_attention(ParamList<T>& out, const std::string& name, const AttentionParams<T>& a) {
  push_linear(out, name + ".q", a.q);
  push_linear(out, name + ".k", a.k);
  push_linear(out, name + ".v", a.v);
  push_linear(out, name + ".o", a.o);
  if (a.rel_key.defined()) out.emplace_back(name + ".rel_key", a.rel_key);
}

template <typename T>
void push_ffn(ParamList<T>& out, const std::string& name, const FeedForwardParams<T>& f) {
  push_linear(out, name + ".fc1", f.fc1);
  push_linear(out, name + ".fc2", f.fc2);
}

template <typename T>
BasicTensor<T> clone_param(const BasicTensor<T>& t) {
  return t.defined() ? t.clone() : t;
}

template <typename T>
NormParams<T> clone_norm(const NormParams<T>& n) {
  return {clone_param(n.gain), clone_param(n.bias)};
}

template <typename T>
LinearParams<T> clone_linear(const LinearParams<T>& l) {
  return {clone_param(l.weight), clone_param(l.bias)};
}

template <typename T>
AttentionParams<T> clone_attention(const AttentionParams<T>& a) {
  return {clone_linear(a.q), clone_linear(a.k), clone_linear(a.v), clone_linear(a.o), clone_param(a.rel_key)};
}

template <typename T>
FeedForwardParams<T> clone_ffn(const FeedForwardParams<T>& f) {
  return {clone_linear(f.fc1), clone_linear(f.fc2)};
}

}  // namespace

template <typename T>
EncoderLayerParams<T> Transformer<T>::make_encoder_layer(const ModelConfig& c, std::uint64_t seed, bool uniform_init) {
  EncoderLayerParams<T> layer;
  layer.attn_norm = make_norm<T>(c.d_model);
  layer.self_attn = make_attention<T>(c, seed, "self_attn", c.rpr_enabled, uniform_init);
  layer.ffn_norm = make_norm<T>(c.d_model);
  layer.ffn = make_ffn<T>(c, seed, "ffn", uniform_init);
  return layer;
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed)
    : config_(config), topology_(config.enc_layers, config.block_size) {
  config_.validate();
  const auto& c = config_;
  const double embed_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  if (c.shared_embeddings) {
    shared_embed_ = normal_tensor<T>({c.vocab_size, c.d_model}, embed_std, stream_for(seed, "embed.shared"));
  } else {
    src_embed_ = normal_tensor<T>({c.vocab_size, c.d_model}, embed_std, stream_for(seed, "embed.src"));
    tgt_embed_ = normal_tensor<T>({c.vocab_size, c.d_model}, embed_std, stream_for(seed, "embed.tgt"));
    out_proj_ = normal_tensor<T>({c.vocab_size, c.d_model}, embed_std, stream_for(seed, "output.proj"));
  }
  for (std::size_t j = 1; j <= c.enc_layers; ++j)
    encoder_layers_.push_back(make_encoder_layer(c, hash_combine(seed, j), false));
  encoder_norm_ = make_norm<T>(c.d_model);
  if (topology_.connected()) {
    for (std::size_t b = 1; b <= topology_.block_count(); ++b) {
      combiner_.weights.push_back(BasicTensor<T>::filled({b + 1}, T(1) / static_cast<T>(b + 1), true));
      combiner_.norms.push_back(make_norm<T>(c.d_model));
    }
  }
  for (std::size_t j = 1; j <= c.dec_layers; ++j) {
    const std::uint64_t s = hash_combine(seed, 1000 + j);
    DecoderLayerParams<T> layer;
    layer.self_norm = make_norm<T>(c.d_model);
    layer.self_attn = make_attention<T>(c, s, "self_attn", c.rpr_enabled, false);
    layer.cross_norm = make_norm<T>(c.d_model);
    layer.cross_attn = make_attention<T>(c, s, "cross_attn", false, false);
    layer.ffn_norm = make_norm<T>(c.d_model);
    layer.ffn = make_ffn<T>(c, s, "ffn", false);
    decoder_layers_.push_back(std::move(layer));
  }
  decoder_norm_ = make_norm<T>(c.d_model);
}

template <typename T>
BasicTensor<T> Transformer<T>::embed(const BasicTensor<T>& table, const TokenBatch& batch, ForwardContext& ctx) const {
  const std::size_t d = config_.d_model;
  const std::size_t L = batch.layout.length;
  const auto pe = sinusoid_table(L, d);
  std::vector<T> pos(batch.ids.size() * d);
  for (std::size_t b = 0; b < batch.layout.batch; ++b)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t i = 0; i < d; ++i) pos[(b * L + t) * d + i] = static_cast<T>(pe[t * d + i]);
  auto words = scale(embedding_lookup(table, batch.ids), static_cast<T>(std::sqrt(static_cast<double>(d))));
  auto x = add(words, BasicTensor<T>::from_values({batch.ids.size(), d}, std::move(pos)));
  return dropout(x, ctx.rate(config_.dropout), ctx.next_key());
}

template <typename T>
EncoderOutput<T> Transformer<T>::encode(const TokenBatch& source, ForwardContext& ctx) const {
  require(source.layout.batch >= 1 && source.layout.length >= 1, ErrorCode::kContract, "encode: empty source batch");
  for (std::size_t b = 0; b < source.layout.batch; ++b)
    require(source.layout.valid_count(b) >= 1, ErrorCode::kContract, "encode: empty source sequence");
  const auto& c = config_;
  const double p = ctx.rate(c.dropout);
  EncoderOutput<T> out;
  out.layers.layout = source.layout;
  AttentionSpec spec;
  spec.n_heads = c.n_heads;
  spec.queries = source.layout;
  spec.keys = source.layout;
  spec.rel_clip = c.rpr_clip_k;
  spec.dropout = p;

  BasicTensor<T> state = embed(source_embedding(), source, ctx);
  out.layers.y.push_back(state);
  std::vector<BasicTensor<T>> history{state};
  for (std::size_t j = 1; j <= c.enc_layers; ++j) {
    const auto& layer = encoder_layers_[j - 1];
    spec.dropout_key = ctx.next_key();
    state = pre_norm_sublayer(
        state, layer.attn_norm, c.layer_norm_eps,
        [&](const BasicTensor<T>& h) { return multi_head_attention(layer.self_attn, h, h, spec); }, p, ctx.next_key());
    const DropoutKey relu_key = ctx.next_key();
    state = pre_norm_sublayer(
        state, layer.ffn_norm, c.layer_norm_eps,
        [&](const BasicTensor<T>& h) { return feed_forward(layer.ffn, h, p, relu_key); }, p, ctx.next_key());
    out.layers.y.push_back(state);
    if (topology_.connected() && topology_.is_block_end(j)) {
      history.push_back(state);
      const std::size_t b = topology_.block_of(j);
      state = combine_blocks<T>(history, combiner_.weights[b - 1], c.combiner_norm ? &combiner_.norms[b - 1] : nullptr,
                                c.layer_norm_eps);
    }
  }
  out.output = layer_norm(state, encoder_norm_.gain, encoder_norm_.bias, c.layer_norm_eps);
  return out;
}

template <typename T>
LayerOutputs<T> Transformer<T>::encode_layers(std::span<const TokenId> source) const {
  ForwardContext ctx;
  return encode(TokenBatch::single(source), ctx).layers;
}

template <typename T>
BasicTensor<T> Transformer<T>::decode_forward(const TokenBatch& target_in, const EncoderOutput<T>& memory,
                                              ForwardContext& ctx) const {
  const auto& c = config_;
  require(target_in.layout.batch == memory.layers.layout.batch, ErrorCode::kContract,
          "decode_forward: target batch " + std::to_string(target_in.layout.batch) + " vs source batch " +
              std::to_string(memory.layers.layout.batch));
  const double p = ctx.rate(c.dropout);
  AttentionSpec self_spec;
  self_spec.n_heads = c.n_heads;
  self_spec.queries = target_in.layout;
  self_spec.keys = target_in.layout;
  self_spec.causal = true;
  self_spec.rel_clip = c.rpr_clip_k;
  self_spec.dropout = p;
  AttentionSpec cross_spec;
  cross_spec.n_heads = c.n_heads;
  cross_spec.queries = target_in.layout;
  cross_spec.keys = memory.layers.layout;
  cross_spec.dropout = p;

  BasicTensor<T> state = embed(target_embedding(), target_in, ctx);
  for (const auto& layer : decoder_layers_) {
    self_spec.dropout_key = ctx.next_key();
    state = pre_norm_sublayer(
        state, layer.self_norm, c.layer_norm_eps,
        [&](const BasicTensor<T>& h) { return multi_head_attention(layer.self_attn, h, h, self_spec); }, p,
        ctx.next_key());
    cross_spec.dropout_key = ctx.next_key();
    state = pre_norm_sublayer(
        state, layer.cross_norm, c.layer_norm_eps,
        [&](const BasicTensor<T>& h) { return multi_head_attention(layer.cross_attn, h, memory.output, cross_spec); },
        p, ctx.next_key());
    const DropoutKey relu_key = ctx.next_key();
    state = pre_norm_sublayer(
        state, layer.ffn_norm, c.layer_norm_eps,
        [&](const BasicTensor<T>& h) { return feed_forward(layer.ffn, h, p, relu_key); }, p, ctx.next_key());
  }
  state = layer_norm(state, decoder_norm_.gain, decoder_norm_.bias, c.layer_norm_eps);
  return matmul_nt(state, c.shared_embeddings ? shared_embed_ : out_proj_);
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>>> Transformer<T>::parameters() const {
  ParamList<T> out;
  if (config_.shared_embeddings) {
    out.emplace_back("embed.shared", shared_embed_);
  } else {
    out.emplace_back("embed.src", src_embed_);
    out.emplace_back("embed.tgt", tgt_embed_);
    out.emplace_back("output.proj", out_proj_);
  }
  for (std::size_t j = 1; j <= encoder_layers_.size(); ++j) {
    const auto& layer = encoder_layers_[j - 1];
    const std::string prefix = encoder_layer_prefix(j);
    push_norm(out, prefix + "attn_norm", layer.attn_norm);
    push_attention(out, prefix + "self_attn", layer.self_attn);
    push_norm(out, prefix + "ffn_norm", layer.ffn_norm);
    push_ffn(out, prefix + "ffn", layer.ffn);
  }
  push_norm(out, "encoder.final_norm", encoder_norm_);
  for (std::size_t b = 1; b <= combiner_.weights.size(); ++b) {
    const std::string prefix = "encoder.combiner.block" + std::to_string(b);
    out.emplace_back(prefix + ".weights", combiner_.weights[b - 1]);
    push_norm(out, prefix + ".norm", combiner_.norms[b - 1]);
  }
  for (std::size_t j = 1; j <= decoder_layers_.size(); ++j) {
    const auto& layer = decoder_layers_[j - 1];
    const std::string prefix = "decoder.layer" + std::to_string(j) + ".";
    push_norm(out, prefix + "self_norm", layer.self_norm);
    push_attention(out, prefix + "self_attn", layer.self_attn);
    push_norm(out, prefix + "cross_norm", layer.cross_norm);
    push_attention(out, prefix + "cross_attn", layer.cross_attn);
    push_norm(out, prefix + "ffn_norm", layer.ffn_norm);
    push_ffn(out, prefix + "ffn", layer.ffn);
  }
  push_norm(out, "decoder.final_norm", decoder_norm_);
  return out;
}

template <typename T>
BasicTensor<T> Transformer<T>::parameter(const std::string& name) const {
  for (auto& [n, t] : parameters())
    if (n == name) return t;
  fail(ErrorCode::kIndex, "no parameter named '" + name + "'");
}

template <typename T>
std::size_t Transformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

template <typename T>
Transformer<T> Transformer<T>::clone() const {
  Transformer copy = *this;
  copy.shared_embed_ = clone_param(shared_embed_);
  copy.src_embed_ = clone_param(src_embed_);
  copy.tgt_embed_ = clone_param(tgt_embed_);
  copy.out_proj_ = clone_param(out_proj_);
  for (auto& layer : copy.encoder_layers_) {
    layer.attn_norm = clone_norm(layer.attn_norm);
    layer.self_attn = clone_attention(layer.self_attn);
    layer.ffn_norm = clone_norm(layer.ffn_norm);
    layer.ffn = clone_ffn(layer.ffn);
  }
  copy.encoder_norm_ = clone_norm(encoder_norm_);
  for (auto& w : copy.combiner_.weights) w = w.clone();
  for (auto& n : copy.combiner_.norms) n = clone_norm(n);
  for (auto& layer : copy.decoder_layers_) {
    layer.self_norm = clone_norm(layer.self_norm);
    layer.self_attn = clone_attention(layer.self_attn);
    layer.cross_norm = clone_norm(layer.cross_norm);
    layer.cross_attn = clone_attention(layer.cross_attn);
    layer.ffn_norm = clone_norm(layer.ffn_norm);
    layer.ffn = clone_ffn(layer.ffn);
  }
  copy.decoder_norm_ = clone_norm(decoder_norm_);
  return copy;
}

template <typename T>
void Transformer<T>::zero_grad() {
  for (auto& [name, t] : parameters()) {
    auto tensor = t;
    tensor.zero_grad();
  }
}

template class Transformer<float>;
template class Transformer<double>;

#define SDT_INSTANTIATE_MODEL_OPS(T)                                                                        \
  template BasicTensor<T> multi_head_attention(const AttentionParams<T>&, const BasicTensor<T>&,          \
                                               const BasicTensor<T>&, const AttentionSpec&);              \
  template BasicTensor<T> feed_forward(const FeedForwardParams<T>&, const BasicTensor<T>&, double,         \
                                       DropoutKey);                                                        \
  template BasicTensor<T> combine_blocks(std::span<const BasicTensor<T>>, const BasicTensor<T>&,           \
                                         const NormParams<T>*, double);

SDT_INSTANTIATE_MODEL_OPS(float)
SDT_INSTANTIATE_MODEL_OPS(double)

}  // namespace sdt
