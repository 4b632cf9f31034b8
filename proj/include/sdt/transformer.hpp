#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdt/model_config.hpp"
#include "sdt/ops.hpp"
#include "sdt/tensor.hpp"

namespace sdt {

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;

// Padded token ids for a batch of sequences, row-major [batch, length].
struct TokenBatch {
  SequenceLayout layout;
  std::vector<TokenId> ids;

  static TokenBatch from_sequences(const std::vector<std::vector<TokenId>>& sequences);
  static TokenBatch single(std::span<const TokenId> sequence);
  std::size_t token_count() const;
};

// Dropout state for one forward pass. Every dropout site draws a fresh key
// from (seed, step, call index), so replaying a step is bit-identical.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint64_t calls = 0;

  DropoutKey next_key() { return DropoutKey{seed, (step << 20) ^ calls++}; }
  double rate(double p) const { return training ? p : 0.0; }
};

template <typename T>
struct LinearParams {
  BasicTensor<T> weight;  // [in, out]
  BasicTensor<T> bias;    // [out]

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return linear(x, weight, bias); }
};

template <typename T>
struct NormParams {
  BasicTensor<T> gain;
  BasicTensor<T> bias;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> q, k, v, o;
  BasicTensor<T> rel_key;  // [2k+1, d/heads] when relative keys are enabled
};

template <typename T>
struct FeedForwardParams {
  LinearParams<T> fc1, fc2;
};

template <typename T>
struct EncoderLayerParams {
  NormParams<T> attn_norm;
  AttentionParams<T> self_attn;
  NormParams<T> ffn_norm;
  FeedForwardParams<T> ffn;
};

template <typename T>
struct DecoderLayerParams {
  NormParams<T> self_norm;
  AttentionParams<T> self_attn;
  NormParams<T> cross_norm;
  AttentionParams<T> cross_attn;
  NormParams<T> ffn_norm;
  FeedForwardParams<T> ffn;
};

// Per block b (1-based): weights over the outputs of blocks 0..b, where block
// 0 is the embedding output, followed by an optional LayerNorm.
template <typename T>
struct BlockCombinerParams {
  std::vector<BasicTensor<T>> weights;
  std::vector<NormParams<T>> norms;
};

// y[0] is the post-embedding representation, y[j] the output of encoder layer
// j before any block combination or final normalization. Rows follow the
// batch layout.
template <typename T>
struct LayerOutputs {
  std::vector<BasicTensor<T>> y;
  SequenceLayout layout;
};

template <typename T>
struct EncoderOutput {
  LayerOutputs<T> layers;
  BasicTensor<T> output;  // after the final encoder LayerNorm
};

// Building blocks, exposed for direct testing.

// s + Sublayer(LayerNorm(s)), with residual dropout on the sublayer output.
template <typename T, typename Sublayer>
BasicTensor<T> pre_norm_sublayer(const BasicTensor<T>& s, const NormParams<T>& norm, double eps, Sublayer&& sublayer,
                                 double residual_dropout = 0.0, DropoutKey key = {}) {
  BasicTensor<T> inner = sublayer(layer_norm(s, norm.gain, norm.bias, eps));
  return add(s, dropout(inner, residual_dropout, key));
}

template <typename T>
BasicTensor<T> multi_head_attention(const AttentionParams<T>& params, const BasicTensor<T>& query_in,
                                    const BasicTensor<T>& memory_in, const AttentionSpec& spec);

template <typename T>
BasicTensor<T> feed_forward(const FeedForwardParams<T>& params, const BasicTensor<T>& x, double relu_dropout = 0.0,
                            DropoutKey key = {});

// LayerNorm(Σ_k w[k] · history[k]) (normalization optional).
template <typename T>
BasicTensor<T> combine_blocks(std::span<const BasicTensor<T>> history, const BasicTensor<T>& weights,
                              const NormParams<T>* norm, double eps);

// Sinusoidal position table [length, d].
std::vector<double> sinusoid_table(std::size_t length, std::size_t d);

template <typename T>
class Transformer {
 public:
  Transformer(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const BlockTopology& topology() const noexcept { return topology_; }

  EncoderOutput<T> encode(const TokenBatch& source, ForwardContext& ctx) const;
  LayerOutputs<T> encode_layers(std::span<const TokenId> source) const;

  // Next-token logits [batch * length, V] for teacher-forced target inputs.
  BasicTensor<T> decode_forward(const TokenBatch& target_in, const EncoderOutput<T>& memory, ForwardContext& ctx) const;

  // Ordered, deduplicated (name, tensor) list; tied tensors appear once.
  std::vector<std::pair<std::string, BasicTensor<T>>> parameters() const;
  BasicTensor<T> parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  // Deep copy.
  Transformer clone() const;

  std::vector<EncoderLayerParams<T>>& encoder_layers() noexcept { return encoder_layers_; }
  const std::vector<EncoderLayerParams<T>>& encoder_layers() const noexcept { return encoder_layers_; }
  std::vector<DecoderLayerParams<T>>& decoder_layers() noexcept { return decoder_layers_; }
  const std::vector<DecoderLayerParams<T>>& decoder_layers() const noexcept { return decoder_layers_; }
  BlockCombinerParams<T>& combiner() noexcept { return combiner_; }
  const BlockCombinerParams<T>& combiner() const noexcept { return combiner_; }
  NormParams<T>& encoder_norm() noexcept { return encoder_norm_; }

  void zero_grad();

  // Fresh randomly initialized encoder layer under the standard init scheme.
  static EncoderLayerParams<T> make_encoder_layer(const ModelConfig& config, std::uint64_t seed, bool uniform_init);

 private:
  BasicTensor<T> embed(const BasicTensor<T>& table, const TokenBatch& batch, ForwardContext& ctx) const;
  const BasicTensor<T>& source_embedding() const { return config_.shared_embeddings ? shared_embed_ : src_embed_; }
  const BasicTensor<T>& target_embedding() const { return config_.shared_embeddings ? shared_embed_ : tgt_embed_; }

  ModelConfig config_;
  BlockTopology topology_;
  BasicTensor<T> shared_embed_, src_embed_, tgt_embed_, out_proj_;
  std::vector<EncoderLayerParams<T>> encoder_layers_;
  NormParams<T> encoder_norm_;
  BlockCombinerParams<T> combiner_;
  std::vector<DecoderLayerParams<T>> decoder_layers_;
  NormParams<T> decoder_norm_;
};

using Model = Transformer<float>;

// Names of the parameters of encoder layer j (1-based), e.g. for copy checks.
std::string encoder_layer_prefix(std::size_t layer);

}  // namespace sdt
