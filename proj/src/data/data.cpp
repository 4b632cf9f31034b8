#include "sdt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "sdt/error.hpp"
#include "sdt/rng.hpp"

namespace sdt {

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
}

Vocab Vocab::for_alphabet(std::size_t size) {
  Vocab v;
  for (std::size_t i = 0; i < size; ++i)
    v.add(i < 26 ? std::string(1, static_cast<char>('a' + i)) : "t" + std::to_string(i));
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open vocabulary " + path.string());
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    require(!line.empty(), ErrorCode::kData, "empty line in vocabulary " + path.string());
    require(!v.contains(line), ErrorCode::kData, "duplicate vocabulary token '" + line + "'");
    v.add(line);
  }
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& tokens) {
  Vocab v;
  require(tokens.size() >= kReserved, ErrorCode::kData, "vocabulary lacks the reserved tokens");
  for (std::size_t i = 0; i < kReserved; ++i)
    require(tokens[i] == v.tokens_[i], ErrorCode::kData, "vocabulary reserved token " + std::to_string(i) + " is '" + tokens[i] + "'");
  for (std::size_t i = kReserved; i < tokens.size(); ++i) {
    require(!v.contains(tokens[i]), ErrorCode::kData, "duplicate vocabulary token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write vocabulary " + path.string());
  for (std::size_t i = kReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

TokenId Vocab::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

TokenId Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(TokenId id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::kIndex,
          "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<TokenId>& ids) const {
  std::vector<std::string> out;
  for (TokenId t : ids) {
    if (t == kEosId) break;
    if (t == kPadId || t == kBosId) continue;
    out.push_back(token(t));
  }
  return out;
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "sorted-unique") return TaskKind::kSortedUnique;
  fail(ErrorCode::kConfig, "data.task: unknown task '" + name + "' (copy|reverse|sorted-unique)");
}

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy: return "copy";
    case TaskKind::kReverse: return "reverse";
    case TaskKind::kSortedUnique: return "sorted-unique";
  }
  return "copy";
}

void SyntheticTaskSpec::validate() const {
  require(alphabet_size >= 2, ErrorCode::kContract, "synthetic task: alphabet must hold at least 2 symbols");
  require(min_len >= 1 && min_len <= max_len, ErrorCode::kContract, "synthetic task: need 1 <= min_len <= max_len");
  require(samples >= 1, ErrorCode::kContract, "synthetic task: sample count must be positive");
}

std::vector<TokenId> apply_task(TaskKind kind, const std::vector<TokenId>& source) {
  std::vector<TokenId> t = source;
  switch (kind) {
    case TaskKind::kCopy: break;
    case TaskKind::kReverse: std::reverse(t.begin(), t.end()); break;
    case TaskKind::kSortedUnique:
      std::sort(t.begin(), t.end());
      t.erase(std::unique(t.begin(), t.end()), t.end());
      break;
  }
  return t;
}

Dataset generate(const SyntheticTaskSpec& spec) {
  spec.validate();
  CounterRng rng(hash_combine(spec.seed, 0x5eedda7aULL));
  Dataset data;
  data.reserve(spec.samples);
  const std::size_t span = spec.max_len - spec.min_len + 1;
  for (std::size_t s = 0; s < spec.samples; ++s) {
    const std::size_t len = spec.min_len + rng.below(span);
    std::vector<TokenId> src(len);
    for (auto& t : src) t = static_cast<TokenId>(Vocab::kReserved + rng.below(spec.alphabet_size));
    data.push_back({src, apply_task(spec.kind, src)});
  }
  return data;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  std::string t;
  while (in >> t) out.push_back(t);
  return out;
}

Dataset read_dataset(const std::filesystem::path& path, Vocab& vocab, bool grow_vocab) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open dataset " + path.string());
  Dataset data;
  std::string line;
  std::size_t line_no = 0;
  auto to_ids = [&](const std::string& part) {
    std::vector<TokenId> ids;
    for (const auto& tok : split_tokens(part)) ids.push_back(grow_vocab ? vocab.add(tok) : vocab.id(tok));
    return ids;
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    require(tab != std::string::npos, ErrorCode::kData,
            path.string() + ":" + std::to_string(line_no) + ": expected source<TAB>target");
    SentencePair pair{to_ids(line.substr(0, tab)), to_ids(line.substr(tab + 1))};
    require(!pair.source.empty(), ErrorCode::kData, path.string() + ":" + std::to_string(line_no) + ": empty source");
    data.push_back(std::move(pair));
  }
  return data;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data, const Vocab& vocab) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write dataset " + path.string());
  auto join = [&](const std::vector<TokenId>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ' ';
      s += vocab.token(ids[i]);
    }
    return s;
  };
  for (const auto& p : data) out << join(p.source) << '\t' << join(p.target) << '\n';
}

std::size_t batch_row_cost(const SentencePair& pair) { return std::max(pair.source.size(), pair.target.size()) + 1; }

Batch make_batch(const Dataset& data, const std::vector<std::size_t>& indices) {
  require(!indices.empty(), ErrorCode::kContract, "make_batch: empty batch");
  std::vector<std::vector<TokenId>> src, tin, tout;
  for (std::size_t i : indices) {
    const auto& p = data.at(i);
    src.push_back(p.source);
    std::vector<TokenId> in{kBosId};
    in.insert(in.end(), p.target.begin(), p.target.end());
    std::vector<TokenId> out = p.target;
    out.push_back(kEosId);
    tin.push_back(std::move(in));
    tout.push_back(std::move(out));
  }
  Batch b;
  b.source = TokenBatch::from_sequences(src);
  b.target_in = TokenBatch::from_sequences(tin);
  const TokenBatch out = TokenBatch::from_sequences(tout);
  b.target_out = out.ids;
  b.token_count = out.token_count();
  b.indices = indices;
  return b;
}

std::vector<Batch> batch_by_length(const Dataset& data, std::size_t max_tokens, std::uint64_t seed,
                                   BatchingStats* stats) {
  CounterRng rng(hash_combine(seed, 0xba7c4ULL));
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (batch_row_cost(data[i]) > max_tokens) {
      ++skipped;
      continue;
    }
    order.emplace_back(rng.next_u64(), i);
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    const auto ca = batch_row_cost(data[a.second]), cb = batch_row_cost(data[b.second]);
    return ca != cb ? ca < cb : a < b;
  });
  std::vector<std::vector<std::size_t>> groups;
  std::size_t widest = 0;
  for (const auto& [key, i] : order) {
    const std::size_t cost = batch_row_cost(data[i]);
    if (!groups.empty() && (groups.back().size() + 1) * std::max(widest, cost) <= max_tokens) {
      groups.back().push_back(i);
      widest = std::max(widest, cost);
    } else {
      groups.push_back({i});
      widest = cost;
    }
  }
  // Fisher-Yates over batches.
  for (std::size_t i = groups.size(); i > 1; --i) std::swap(groups[i - 1], groups[rng.below(i)]);
  std::vector<Batch> batches;
  batches.reserve(groups.size());
  for (const auto& g : groups) batches.push_back(make_batch(data, g));
  if (stats) stats->skipped = skipped;
  return batches;
}

BatchStream::BatchStream(const Dataset& data, std::size_t max_tokens, std::uint64_t seed)
    : data_(data), max_tokens_(max_tokens), seed_(seed) {
  require(!data_.empty(), ErrorCode::kData, "training data is empty");
  refill();
}

void BatchStream::refill() {
  BatchingStats stats;
  batches_ = batch_by_length(data_, max_tokens_, hash_combine(seed_, epoch_), &stats);
  skipped_ = stats.skipped;
  require(!batches_.empty(), ErrorCode::kData,
          "every sentence exceeds the token budget of " + std::to_string(max_tokens_));
  cursor_ = 0;
}

const Batch& BatchStream::next() {
  if (cursor_ == batches_.size()) {
    ++epoch_;
    refill();
  }
  ++consumed_;
  return batches_[cursor_++];
}

namespace {

template <typename Tok>
double corpus_bleu(const std::vector<std::vector<Tok>>& hyps, const std::vector<std::vector<Tok>>& refs) {
  require(!hyps.empty(), ErrorCode::kContract, "bleu: empty corpus");
  require(hyps.size() == refs.size(), ErrorCode::kContract,
          "bleu: " + std::to_string(hyps.size()) + " hypotheses vs " + std::to_string(refs.size()) + " references");
  constexpr std::size_t kOrder = 4;
  double match[kOrder] = {}, total[kOrder] = {};
  double hyp_len = 0, ref_len = 0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= kOrder; ++n) {
      if (h.size() < n) continue;
      std::map<std::vector<Tok>, std::size_t> ref_counts;
      if (r.size() >= n)
        for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[std::vector<Tok>(r.begin() + i, r.begin() + i + n)];
      std::map<std::vector<Tok>, std::size_t> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[std::vector<Tok>(h.begin() + i, h.begin() + i + n)];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) match[n - 1] += static_cast<double>(std::min(c, it->second));
      }
      total[n - 1] += static_cast<double>(h.size() - n + 1);
    }
  }
  if (hyp_len == 0 || match[0] == 0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < kOrder; ++n) {
    double m = match[n], t = total[n];
    if (m == 0) {
      m += 1.0;
      t += 1.0;
    }
    log_p += std::log(m / t) / kOrder;
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return 100.0 * bp * std::exp(log_p);
}

}  // namespace

double bleu(const std::vector<std::vector<std::string>>& hypotheses,
            const std::vector<std::vector<std::string>>& references) {
  return corpus_bleu(hypotheses, references);
}

double bleu(const std::vector<std::vector<TokenId>>& hypotheses, const std::vector<std::vector<TokenId>>& references) {
  return corpus_bleu(hypotheses, references);
}

}  // namespace sdt
