#pragma once

#include <functional>
#include <span>
#include <vector>

#include "sdt/transformer.hpp"

namespace sdt {

// Log-probabilities over the vocabulary for the token following `prefix`
// (generated tokens only; the decoder's bos is implicit).
using LogProbFn = std::function<std::vector<double>(std::span<const TokenId> prefix)>;

struct BeamOptions {
  std::size_t beam_size = 4;
  double length_penalty = 0.6;
  // Maximum number of non-eos tokens; a hypothesis reaching it is closed with eos.
  std::size_t max_len = 64;
  TokenId eos = kEosId;
};

struct Hypothesis {
  std::vector<TokenId> tokens;  // without the trailing eos
  double log_prob = 0.0;        // includes the eos transition
  double score = 0.0;           // log_prob / lp(tokens.size() + 1)
  std::size_t finished_step = 0;
};

// ((5 + len) / 6)^alpha
double length_penalty(std::size_t length, double alpha);

// Finished hypotheses are ranked by score, then by earlier finishing step,
// then by the lexicographically smaller token sequence.
Hypothesis beam_search(const LogProbFn& next, const BeamOptions& options);
Hypothesis greedy_search(const LogProbFn& next, std::size_t max_len, TokenId eos = kEosId);

std::vector<double> log_softmax(std::span<const float> logits);

template <typename T>
LogProbFn model_scorer(const Transformer<T>& model, std::span<const TokenId> source);

std::vector<TokenId> beam_decode(const Model& model, std::span<const TokenId> source, const BeamOptions& options);

// Batched greedy decoding; ties go to the smaller token id, matching greedy_search.
std::vector<std::vector<TokenId>> greedy_decode_batch(const Model& model,
                                                      const std::vector<std::vector<TokenId>>& sources,
                                                      std::size_t max_len);

}  // namespace sdt
