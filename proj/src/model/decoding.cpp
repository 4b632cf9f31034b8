#include "sdt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <tuple>

namespace sdt {

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

bool better_finished(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.finished_step != b.finished_step) return a.finished_step < b.finished_step;
  return a.tokens < b.tokens;
}

struct Live {
  std::vector<TokenId> tokens;
  double log_prob = 0.0;
};

}  // namespace

Hypothesis beam_search(const LogProbFn& next, const BeamOptions& options) {
  require(options.beam_size >= 1, ErrorCode::kContract, "beam_search: beam size must be at least 1");
  std::vector<Live> live{Live{}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 1; !live.empty(); ++step) {
    struct Candidate {
      std::size_t parent;
      TokenId token;
      double log_prob;
      std::vector<TokenId> sequence;
    };
    std::vector<Candidate> candidates;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const std::vector<double> lp = next(live[h].tokens);
      const bool forced = live[h].tokens.size() >= options.max_len;
      for (std::size_t v = 0; v < lp.size(); ++v) {
        const auto token = static_cast<TokenId>(v);
        if (forced && token != options.eos) continue;
        if (lp[v] == -std::numeric_limits<double>::infinity()) continue;
        Candidate c{h, token, live[h].log_prob + lp[v], live[h].tokens};
        c.sequence.push_back(token);
        candidates.push_back(std::move(c));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      return a.sequence < b.sequence;
    });
    if (candidates.size() > options.beam_size) candidates.resize(options.beam_size);
    std::vector<Live> next_live;
    for (auto& c : candidates) {
      if (c.token == options.eos) {
        Hypothesis hyp;
        hyp.tokens = live[c.parent].tokens;
        hyp.log_prob = c.log_prob;
        hyp.score = c.log_prob / length_penalty(hyp.tokens.size() + 1, options.length_penalty);
        hyp.finished_step = step;
        finished.push_back(std::move(hyp));
      } else {
        next_live.push_back(Live{std::move(c.sequence), c.log_prob});
      }
    }
    live = std::move(next_live);
    if (finished.size() >= options.beam_size) break;
  }
  require(!finished.empty(), ErrorCode::kNumeric, "beam_search: no hypothesis finished");
  return *std::min_element(finished.begin(), finished.end(), better_finished);
}

Hypothesis greedy_search(const LogProbFn& next, std::size_t max_len, TokenId eos) {
  Hypothesis hyp;
  for (std::size_t step = 1;; ++step) {
    const std::vector<double> lp = next(hyp.tokens);
    TokenId best = eos;
    if (hyp.tokens.size() < max_len) {
      best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
    }
    hyp.log_prob += lp[static_cast<std::size_t>(best)];
    if (best == eos) {
      hyp.finished_step = step;
      hyp.score = hyp.log_prob / length_penalty(hyp.tokens.size() + 1, 0.0);
      return hyp;
    }
    hyp.tokens.push_back(best);
  }
}

std::vector<double> log_softmax(std::span<const float> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double se = 0.0;
  for (float z : logits) se += std::exp(static_cast<double>(z) - mx);
  const double lse = mx + std::log(se);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

template <typename T>
LogProbFn model_scorer(const Transformer<T>& model, std::span<const TokenId> source) {
  NoGradScope<T> no_grad;
  ForwardContext ctx;
  auto memory = std::make_shared<EncoderOutput<T>>(model.encode(TokenBatch::single(source), ctx));
  return [&model, memory](std::span<const TokenId> prefix) {
    NoGradScope<T> inner;
    std::vector<TokenId> target_in{kBosId};
    target_in.insert(target_in.end(), prefix.begin(), prefix.end());
    ForwardContext ctx;
    const auto logits = model.decode_forward(TokenBatch::single(target_in), *memory, ctx);
    const std::size_t V = logits.dim(1);
    const auto row = logits.values().subspan(prefix.size() * V, V);
    std::vector<float> last(row.begin(), row.end());
    return log_softmax(last);
  };
}

std::vector<TokenId> beam_decode(const Model& model, std::span<const TokenId> source, const BeamOptions& options) {
  return beam_search(model_scorer(model, source), options).tokens;
}

std::vector<std::vector<TokenId>> greedy_decode_batch(const Model& model,
                                                      const std::vector<std::vector<TokenId>>& sources,
                                                      std::size_t max_len) {
  NoGradScope<float> no_grad;
  std::vector<std::vector<TokenId>> out(sources.size());
  if (sources.empty()) return out;
  ForwardContext ctx;
  const auto memory = model.encode(TokenBatch::from_sequences(sources), ctx);
  std::vector<bool> done(sources.size(), false);
  for (std::size_t step = 0; step <= max_len; ++step) {
    std::vector<std::vector<TokenId>> prefixes(sources.size());
    for (std::size_t b = 0; b < sources.size(); ++b) {
      prefixes[b].push_back(kBosId);
      prefixes[b].insert(prefixes[b].end(), out[b].begin(), out[b].end());
      prefixes[b].resize(step + 1, kPadId);
    }
    TokenBatch batch = TokenBatch::from_sequences(prefixes);
    // Finished rows keep decoding padding; their keys stay valid so no row is empty.
    ForwardContext dctx;
    const auto logits = model.decode_forward(batch, memory, dctx);
    const std::size_t V = logits.dim(1);
    bool all_done = true;
    for (std::size_t b = 0; b < sources.size(); ++b) {
      if (done[b]) continue;
      const auto row = logits.values().subspan((b * (step + 1) + step) * V, V);
      TokenId best = kEosId;
      if (out[b].size() < max_len) best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == kEosId) {
        done[b] = true;
      } else {
        out[b].push_back(best);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

template LogProbFn model_scorer(const Transformer<float>&, std::span<const TokenId>);
template LogProbFn model_scorer(const Transformer<double>&, std::span<const TokenId>);

}  // namespace sdt
