#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sdt/tensor.hpp"

// Differentiable primitives. Every op records a backward closure on the
// active tape when at least one input requires a gradient; otherwise it runs
// as a plain forward computation.
namespace sdt {

using TokenId = std::int32_t;

// [m,k]·[k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// [m,k]·[n,k]ᵀ -> [m,n]; used for tied output projections.
template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[n,in]·W[in,out] + bias[out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;
};

// Inverted dropout: kept elements are scaled by 1/(1-p). p == 0 is the identity.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, DropoutKey key);

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                          double eps);

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const TokenId> ids);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x);

// Σ_k weights[k] · items[k]; all items share one shape, weights has one entry per item.
template <typename T>
BasicTensor<T> weighted_sum(std::span<const BasicTensor<T>> items, const BasicTensor<T>& weights);

// Row layout of a padded batch flattened to [batch * length, d].
struct SequenceLayout {
  std::size_t batch = 0;
  std::size_t length = 0;
  // batch * length flags; empty means every position is valid.
  std::vector<std::uint8_t> valid;

  bool is_valid(std::size_t b, std::size_t t) const { return valid.empty() || valid[b * length + t] != 0; }
  std::size_t valid_count(std::size_t b) const;
};

struct AttentionSpec {
  std::size_t n_heads = 1;
  SequenceLayout queries;
  SequenceLayout keys;
  // Disallow key positions after the query position (requires equal lengths).
  bool causal = false;
  // Learnable relative-key table [2 * clip + 1, d / n_heads]; undefined disables it.
  std::size_t rel_clip = 0;
  double dropout = 0.0;
  DropoutKey dropout_key{};
};

// Scaled dot-product attention for every (batch, head), heads concatenated.
// q: [Bq*Lq, d], k and v: [Bk*Lk, d] with Bq == Bk. Invalid keys and future
// keys (causal) are excluded before the softmax; a query with no admissible
// key produces a zero row.
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const AttentionSpec& spec, const BasicTensor<T>& rel_key = {});

// Mean over non-ignored positions of the cross-entropy against
// q = eps/V + (1-eps)·onehot(gold).
template <typename T>
BasicTensor<T> label_smoothed_nll(const BasicTensor<T>& logits, std::span<const TokenId> gold, double eps_ls,
                                  TokenId ignore_index = -1);

// Per sequence: mean over valid positions of cosine(x_l, mean_l x_l); the
// result is the average over the sequences in the layout.
template <typename T>
BasicTensor<T> mean_inter_cosine(const BasicTensor<T>& x, const SequenceLayout& layout);

}  // namespace sdt
