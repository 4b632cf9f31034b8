#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdt/transformer.hpp"

namespace sdt {

class Vocab {
 public:
  static constexpr std::size_t kReserved = 4;

  Vocab();
  // Alphabet tokens "a".."z", then "t26", "t27", ...
  static Vocab for_alphabet(std::size_t size);
  static Vocab load(const std::filesystem::path& path);
  // Full token list including the reserved entries, as returned by tokens().
  static Vocab from_tokens(const std::vector<std::string>& tokens);
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  void save(const std::filesystem::path& path) const;

  // Returns the existing id when already present.
  TokenId add(const std::string& token);
  // kUnkId for unknown tokens.
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  std::size_t size() const noexcept { return tokens_.size(); }

  std::vector<TokenId> encode(const std::vector<std::string>& tokens) const;
  // Stops at eos; drops pad and bos.
  std::vector<std::string> decode(const std::vector<TokenId>& ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

enum class TaskKind { kCopy, kReverse, kSortedUnique };

TaskKind parse_task_kind(const std::string& name);
std::string to_string(TaskKind kind);

struct SyntheticTaskSpec {
  TaskKind kind = TaskKind::kCopy;
  std::size_t alphabet_size = 10;
  std::size_t min_len = 2;
  std::size_t max_len = 8;
  std::size_t samples = 1000;
  std::uint64_t seed = 1;

  void validate() const;
};

// Unpadded ids without bos/eos.
struct SentencePair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;

  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

using Dataset = std::vector<SentencePair>;

// Token ids of the alphabet start right after the reserved block, matching
// Vocab::for_alphabet.
Dataset generate(const SyntheticTaskSpec& spec);
std::vector<TokenId> apply_task(TaskKind kind, const std::vector<TokenId>& source);

// One pair per line: source TAB target, tokens separated by spaces.
Dataset read_dataset(const std::filesystem::path& path, Vocab& vocab, bool grow_vocab);
void write_dataset(const std::filesystem::path& path, const Dataset& data, const Vocab& vocab);

struct Batch {
  TokenBatch source;
  TokenBatch target_in;              // bos + target
  std::vector<TokenId> target_out;   // target + eos, padded with kPadId, [B * L]
  std::vector<std::size_t> indices;  // dataset rows
  std::size_t token_count = 0;       // target_out tokens excluding padding
};

// Tokens a pair occupies in a batch row: the longer side plus one bos/eos.
std::size_t batch_row_cost(const SentencePair& pair);

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices);

struct BatchingStats {
  std::size_t skipped = 0;
};

// Sorts rows by length (random tie order), packs consecutive rows while
// rows · max_row_cost <= max_tokens, then shuffles the batch order.
std::vector<Batch> batch_by_length(const Dataset& data, std::size_t max_tokens, std::uint64_t seed,
                                   BatchingStats* stats = nullptr);

// Endless epochs over the dataset, reshuffled per epoch.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t max_tokens, std::uint64_t seed);

  const Batch& next();
  std::uint64_t epoch() const noexcept { return epoch_; }
  std::uint64_t consumed() const noexcept { return consumed_; }
  std::size_t skipped() const noexcept { return skipped_; }

 private:
  void refill();

  const Dataset& data_;
  std::size_t max_tokens_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::uint64_t consumed_ = 0;
  std::size_t skipped_ = 0;
  std::size_t cursor_ = 0;
  std::vector<Batch> batches_;
};

// Corpus BLEU-4 in percent with add-one smoothing of zero precisions for n >= 2.
double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references);
double bleu(const std::vector<std::vector<TokenId>>& hypotheses, const std::vector<std::vector<TokenId>>& references);

std::vector<std::string> split_tokens(const std::string& line);

}  // namespace sdt
