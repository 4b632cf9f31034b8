#include "sdt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "sdt/rng.hpp"

namespace sdt {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatMap<T> as_matrix(const std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
MatMap<T> as_matrix(std::vector<T>& v, std::size_t rows, std::size_t cols) {
  return MatMap<T>(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T, typename... Ts>
bool should_record(const Ts&... inputs) {
  return Tape<T>::active() != nullptr && (inputs.requires_grad() || ...);
}

template <typename T>
BasicTensor<T> make_output(Shape shape, bool record) {
  return BasicTensor<T>::zeros(std::move(shape), record);
}

void require_rank2(const Shape& s, const char* op, const char* what) {
  require(s.size() == 2, ErrorCode::kDimension,
          std::string(op) + ": " + what + " must be rank 2, got " + shape_to_string(s));
}

// Treats rank-1 [d] as [1, d].
std::pair<std::size_t, std::size_t> rows_cols(const Shape& s, const char* op) {
  if (s.size() == 1) return {1, s[0]};
  require(s.size() == 2, ErrorCode::kDimension, std::string(op) + ": expected rank 1 or 2, got " + shape_to_string(s));
  return {s[0], s[1]};
}

}  // namespace

std::size_t SequenceLayout::valid_count(std::size_t b) const {
  if (valid.empty()) return length;
  std::size_t n = 0;
  for (std::size_t t = 0; t < length; ++t) n += valid[b * length + t] != 0;
  return n;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a.shape(), "matmul", "lhs");
  require_rank2(b.shape(), "matmul", "rhs");
  require(a.dim(1) == b.dim(0), ErrorCode::kDimension,
          "matmul: inner dimensions differ for " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool record = should_record<T>(a, b);
  auto out = make_output<T>({m, n}, record);
  as_matrix(out.storage()->value, m, n).noalias() = as_matrix(a.storage()->value, m, k) * as_matrix(b.storage()->value, k, n);
  if (record) {
    Tape<T>::active()->record([sa = a.storage(), sb = b.storage(), so = out.storage(), m, k, n] {
      const auto dc = as_matrix(so->ensure_grad(), m, n);
      if (sa->requires_grad) as_matrix(sa->ensure_grad(), m, k).noalias() += dc * as_matrix(sb->value, k, n).transpose();
      if (sb->requires_grad) as_matrix(sb->ensure_grad(), k, n).noalias() += as_matrix(sa->value, m, k).transpose() * dc;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank2(a.shape(), "matmul_nt", "lhs");
  require_rank2(b.shape(), "matmul_nt", "rhs");
  require(a.dim(1) == b.dim(1), ErrorCode::kDimension,
          "matmul_nt: inner dimensions differ for " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()) + "^T");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const bool record = should_record<T>(a, b);
  auto out = make_output<T>({m, n}, record);
  as_matrix(out.storage()->value, m, n).noalias() =
      as_matrix(a.storage()->value, m, k) * as_matrix(b.storage()->value, n, k).transpose();
  if (record) {
    Tape<T>::active()->record([sa = a.storage(), sb = b.storage(), so = out.storage(), m, k, n] {
      const auto dc = as_matrix(so->ensure_grad(), m, n);
      if (sa->requires_grad) as_matrix(sa->ensure_grad(), m, k).noalias() += dc * as_matrix(sb->value, n, k);
      if (sb->requires_grad) as_matrix(sb->ensure_grad(), n, k).noalias() += dc.transpose() * as_matrix(sa->value, m, k);
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  require_rank2(x.shape(), "linear", "input");
  require_rank2(weight.shape(), "linear", "weight");
  require(x.dim(1) == weight.dim(0), ErrorCode::kDimension,
          "linear: input " + shape_to_string(x.shape()) + " does not match weight " + shape_to_string(weight.shape()));
  require(bias.rank() == 1 && bias.dim(0) == weight.dim(1), ErrorCode::kDimension,
          "linear: bias " + shape_to_string(bias.shape()) + " does not match weight " + shape_to_string(weight.shape()));
  const std::size_t n = x.dim(0), in = x.dim(1), outd = weight.dim(1);
  const bool record = should_record<T>(x, weight, bias);
  auto out = make_output<T>({n, outd}, record);
  auto y = as_matrix(out.storage()->value, n, outd);
  y.noalias() = as_matrix(x.storage()->value, n, in) * as_matrix(weight.storage()->value, in, outd);
  y.rowwise() += as_matrix(bias.storage()->value, 1, outd).row(0);
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), sw = weight.storage(), sb = bias.storage(), so = out.storage(), n, in, outd] {
      const auto dy = as_matrix(so->ensure_grad(), n, outd);
      if (sx->requires_grad) as_matrix(sx->ensure_grad(), n, in).noalias() += dy * as_matrix(sw->value, in, outd).transpose();
      if (sw->requires_grad) as_matrix(sw->ensure_grad(), in, outd).noalias() += as_matrix(sx->value, n, in).transpose() * dy;
      if (sb->requires_grad) as_matrix(sb->ensure_grad(), 1, outd) += dy.colwise().sum();
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.shape() == b.shape(), ErrorCode::kDimension,
          "add: shapes differ " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  const bool record = should_record<T>(a, b);
  auto out = make_output<T>(a.shape(), record);
  auto& o = out.storage()->value;
  const auto& av = a.storage()->value;
  const auto& bv = b.storage()->value;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (record) {
    Tape<T>::active()->record([sa = a.storage(), sb = b.storage(), so = out.storage()] {
      const auto& g = so->ensure_grad();
      for (auto* s : {sa.get(), sb.get()}) {
        if (!s->requires_grad) continue;
        auto& dst = s->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  const bool record = should_record<T>(x);
  auto out = make_output<T>(x.shape(), record);
  auto& o = out.storage()->value;
  const auto& xv = x.storage()->value;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage(), factor] {
      const auto& g = so->ensure_grad();
      auto& dst = sx->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  const bool record = should_record<T>(x);
  auto out = make_output<T>(x.shape(), record);
  auto& o = out.storage()->value;
  const auto& xv = x.storage()->value;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage()] {
      const auto& g = so->ensure_grad();
      auto& dst = sx->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (sx->value[i] > T(0)) dst[i] += g[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double p, DropoutKey key) {
  require(p >= 0.0 && p < 1.0, ErrorCode::kContract, "dropout: probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const bool record = should_record<T>(x);
  auto out = make_output<T>(x.shape(), record);
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> factor(x.numel());
  const std::uint64_t base = hash_combine(key.seed, key.stream);
  for (std::size_t i = 0; i < factor.size(); ++i) factor[i] = to_unit(hash_combine(base, i)) >= p ? keep_scale : T(0);
  auto& o = out.storage()->value;
  const auto& xv = x.storage()->value;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor[i];
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage(), factor = std::move(factor)] {
      const auto& g = so->ensure_grad();
      auto& dst = sx->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * factor[i];
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias, double eps) {
  const auto [n, d] = rows_cols(x.shape(), "layer_norm");
  require(d >= 1, ErrorCode::kDimension, "layer_norm: empty feature dimension");
  require(eps > 0.0, ErrorCode::kContract, "layer_norm: eps must be positive");
  require(gain.numel() == d && bias.numel() == d, ErrorCode::kDimension,
          "layer_norm: gain/bias " + shape_to_string(gain.shape()) + "/" + shape_to_string(bias.shape()) +
              " do not match feature width " + std::to_string(d));
  const bool record = should_record<T>(x, gain, bias);
  auto out = make_output<T>(x.shape(), record);
  std::vector<T> xhat(n * d);
  std::vector<T> rstd(n);
  const auto& xv = x.storage()->value;
  const auto& gv = gain.storage()->value;
  const auto& bv = bias.storage()->value;
  auto& o = out.storage()->value;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = row[c] - mu;
      var += z * z;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<T>(inv);
    for (std::size_t c = 0; c < d; ++c) {
      const T h = static_cast<T>((row[c] - mu) * inv);
      xhat[r * d + c] = h;
      o[r * d + c] = gv[c] * h + bv[c];
    }
  }
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), sg = gain.storage(), sb = bias.storage(), so = out.storage(),
                               xhat = std::move(xhat), rstd = std::move(rstd), n = n, d = d] {
      const auto& dy = so->ensure_grad();
      if (sg->requires_grad) {
        auto& dg = sg->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) dg[c] += dy[r * d + c] * xhat[r * d + c];
      }
      if (sb->requires_grad) {
        auto& db = sb->ensure_grad();
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t c = 0; c < d; ++c) db[c] += dy[r * d + c];
      }
      if (sx->requires_grad) {
        auto& dx = sx->ensure_grad();
        const auto& gv = sg->value;
        for (std::size_t r = 0; r < n; ++r) {
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double g = dy[r * d + c] * gv[c];
            mean_g += g;
            mean_gx += g * xhat[r * d + c];
          }
          mean_g /= static_cast<double>(d);
          mean_gx /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const double g = dy[r * d + c] * gv[c];
            dx[r * d + c] += static_cast<T>(rstd[r] * (g - mean_g - xhat[r * d + c] * mean_gx));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  const auto [n, d] = rows_cols(x.shape(), "softmax_rows");
  const bool record = should_record<T>(x);
  auto out = make_output<T>(x.shape(), record);
  const auto& xv = x.storage()->value;
  auto& o = out.storage()->value;
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = xv.data() + r * d;
    T* dst = o.data() + r * d;
    const T mx = *std::max_element(row, row + d);
    T total = 0;
    for (std::size_t c = 0; c < d; ++c) total += (dst[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < d; ++c) dst[c] /= total;
  }
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage(), n = n, d = d] {
      const auto& dy = so->ensure_grad();
      const auto& y = so->value;
      auto& dx = sx->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += dy[r * d + c] * y[r * d + c];
        for (std::size_t c = 0; c < d; ++c) dx[r * d + c] += y[r * d + c] * (dy[r * d + c] - dot);
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const TokenId> ids) {
  require_rank2(table.shape(), "embedding_lookup", "table");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (TokenId id : ids)
    require(id >= 0 && static_cast<std::size_t>(id) < vocab, ErrorCode::kIndex,
            "embedding_lookup: token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
  const bool record = should_record<T>(table);
  auto out = make_output<T>({ids.size(), d}, record);
  const auto& tv = table.storage()->value;
  auto& o = out.storage()->value;
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  if (record) {
    Tape<T>::active()->record([st = table.storage(), so = out.storage(), ids = std::vector<TokenId>(ids.begin(), ids.end()), d] {
      const auto& g = so->ensure_grad();
      auto& dt = st->ensure_grad();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        T* row = dt.data() + static_cast<std::size_t>(ids[i]) * d;
        for (std::size_t c = 0; c < d; ++c) row[c] += g[i * d + c];
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  const bool record = should_record<T>(x);
  T total = 0;
  for (T v : x.values()) total += v;
  auto out = BasicTensor<T>::scalar(total, record);
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage()] {
      const T g = so->ensure_grad()[0];
      for (auto& v : sx->ensure_grad()) v += g;
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  require(x.numel() > 0, ErrorCode::kContract, "mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> weighted_sum(std::span<const BasicTensor<T>> items, const BasicTensor<T>& weights) {
  require(!items.empty(), ErrorCode::kContract, "weighted_sum: no items");
  require(weights.numel() == items.size(), ErrorCode::kContract,
          "weighted_sum: " + std::to_string(weights.numel()) + " weights for " + std::to_string(items.size()) + " items");
  const Shape& shape = items[0].shape();
  bool record = should_record<T>(weights);
  for (const auto& it : items) {
    require(it.shape() == shape, ErrorCode::kDimension,
            "weighted_sum: item shape " + shape_to_string(it.shape()) + " differs from " + shape_to_string(shape));
    record = record || should_record<T>(it);
  }
  auto out = make_output<T>(shape, record);
  auto& o = out.storage()->value;
  const auto& w = weights.storage()->value;
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& v = items[k].storage()->value;
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += w[k] * v[i];
  }
  if (record) {
    std::vector<StoragePtr<T>> srcs;
    for (const auto& it : items) srcs.push_back(it.storage());
    Tape<T>::active()->record([srcs = std::move(srcs), sw = weights.storage(), so = out.storage()] {
      const auto& g = so->ensure_grad();
      for (std::size_t k = 0; k < srcs.size(); ++k) {
        const auto& s = srcs[k];
        if (sw->requires_grad) {
          T dot = 0;
          for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * s->value[i];
          sw->ensure_grad()[k] += dot;
        }
        if (s->requires_grad) {
          auto& dst = s->ensure_grad();
          const T wk = sw->value[k];
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += wk * g[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         const AttentionSpec& spec, const BasicTensor<T>& rel_key) {
  require_rank2(q.shape(), "attention", "queries");
  require_rank2(k.shape(), "attention", "keys");
  require(k.shape() == v.shape(), ErrorCode::kDimension,
          "attention: keys " + shape_to_string(k.shape()) + " and values " + shape_to_string(v.shape()) + " differ");
  const std::size_t d = q.dim(1);
  const std::size_t heads = spec.n_heads;
  require(heads >= 1 && d % heads == 0, ErrorCode::kContract,
          "attention: width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  require(k.dim(1) == d, ErrorCode::kDimension, "attention: query and key widths differ");
  const auto& ql = spec.queries;
  const auto& kl = spec.keys;
  require(ql.batch == kl.batch, ErrorCode::kContract, "attention: query and key batch sizes differ");
  require(ql.batch * ql.length == q.dim(0), ErrorCode::kContract,
          "attention: query layout " + std::to_string(ql.batch) + "x" + std::to_string(ql.length) +
              " does not cover " + std::to_string(q.dim(0)) + " rows");
  require(kl.batch * kl.length == k.dim(0), ErrorCode::kContract,
          "attention: key layout " + std::to_string(kl.batch) + "x" + std::to_string(kl.length) +
              " does not cover " + std::to_string(k.dim(0)) + " rows");
  require(ql.valid.empty() || ql.valid.size() == q.dim(0), ErrorCode::kContract, "attention: query mask size mismatch");
  require(kl.valid.empty() || kl.valid.size() == k.dim(0), ErrorCode::kContract, "attention: key mask size mismatch");
  require(!spec.causal || ql.length == kl.length, ErrorCode::kContract, "attention: causal mask needs equal lengths");
  const std::size_t dh = d / heads;
  const bool use_rel = rel_key.defined();
  if (use_rel) {
    require(ql.length == kl.length, ErrorCode::kContract, "attention: relative keys need self-attention layouts");
    require(rel_key.rank() == 2 && rel_key.dim(0) == 2 * spec.rel_clip + 1 && rel_key.dim(1) == dh,
            ErrorCode::kDimension,
            "attention: relative key table " + shape_to_string(rel_key.shape()) + " expected [" +
                std::to_string(2 * spec.rel_clip + 1) + "," + std::to_string(dh) + "]");
  }
  require(spec.dropout >= 0.0 && spec.dropout < 1.0, ErrorCode::kContract, "attention: dropout outside [0, 1)");

  const std::size_t B = ql.batch, Lq = ql.length, Lk = kl.length;
  const bool record = should_record<T>(q, k, v) || (use_rel && should_record<T>(rel_key));
  auto out = make_output<T>({q.dim(0), d}, record);
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  const auto& qv = q.storage()->value;
  const auto& kv = k.storage()->value;
  const auto& vv = v.storage()->value;
  const T* rv = use_rel ? rel_key.data() : nullptr;
  auto& o = out.storage()->value;
  const auto clip = static_cast<std::ptrdiff_t>(spec.rel_clip);
  auto rel_index = [clip](std::size_t i, std::size_t j) {
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(i);
    r = std::clamp(r, -clip, clip);
    return static_cast<std::size_t>(r + clip);
  };
  auto admissible = [&](std::size_t b, std::size_t i, std::size_t j) {
    return kl.is_valid(b, j) && (!spec.causal || j <= i);
  };

  // probs: softmax output; factor: dropout multiplier applied on top of it.
  std::vector<T> probs(B * heads * Lq * Lk, T(0));
  std::vector<T> factor;
  const bool drop = spec.dropout > 0.0;
  if (drop) factor.resize(probs.size());
  const std::uint64_t drop_base = hash_combine(spec.dropout_key.seed, spec.dropout_key.stream);
  const T keep_scale = drop ? T(1.0 / (1.0 - spec.dropout)) : T(1);
  std::vector<T> logits(Lk);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const T* qi = qv.data() + (b * Lq + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!admissible(b, i, j)) continue;
          const T* kj = kv.data() + (b * Lk + j) * d + h * dh;
          T s = 0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          if (use_rel) {
            const T* a = rv + rel_index(i, j) * dh;
            for (std::size_t c = 0; c < dh; ++c) s += qi[c] * a[c];
          }
          logits[j] = s * scale_factor;
          mx = std::max(mx, logits[j]);
        }
        if (mx == -std::numeric_limits<T>::infinity()) continue;
        T* p = probs.data() + ((b * heads + h) * Lq + i) * Lk;
        T total = 0;
        for (std::size_t j = 0; j < Lk; ++j)
          if (admissible(b, i, j)) total += (p[j] = std::exp(logits[j] - mx));
        for (std::size_t j = 0; j < Lk; ++j) p[j] /= total;
        T* oi = o.data() + (b * Lq + i) * d + h * dh;
        for (std::size_t j = 0; j < Lk; ++j) {
          T w = p[j];
          if (drop) {
            const std::size_t idx = ((b * heads + h) * Lq + i) * Lk + j;
            factor[idx] = to_unit(hash_combine(drop_base, idx)) >= spec.dropout ? keep_scale : T(0);
            w *= factor[idx];
          }
          if (w == T(0)) continue;
          const T* vj = vv.data() + (b * Lk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }

  if (record) {
    StoragePtr<T> sr = use_rel ? rel_key.storage() : nullptr;
    Tape<T>::active()->record([sq = q.storage(), sk = k.storage(), sv = v.storage(), sr, so = out.storage(),
                               probs = std::move(probs), factor = std::move(factor), B, Lq, Lk, heads, dh, d,
                               scale_factor, rel_index] {
      const auto& dout = so->ensure_grad();
      const auto& qv = sq->value;
      const auto& kv = sk->value;
      const auto& vv = sv->value;
      T* dq = sq->requires_grad ? sq->ensure_grad().data() : nullptr;
      T* dk = sk->requires_grad ? sk->ensure_grad().data() : nullptr;
      T* dv = sv->requires_grad ? sv->ensure_grad().data() : nullptr;
      T* dr = (sr && sr->requires_grad) ? sr->ensure_grad().data() : nullptr;
      const T* rv = sr ? sr->value.data() : nullptr;
      std::vector<T> dp(Lk);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < Lq; ++i) {
            const std::size_t prow = ((b * heads + h) * Lq + i) * Lk;
            const T* p = probs.data() + prow;
            const T* go = dout.data() + (b * Lq + i) * d + h * dh;
            T dot = 0;
            for (std::size_t j = 0; j < Lk; ++j) {
              if (p[j] == T(0)) {
                dp[j] = 0;
                continue;
              }
              const T f = factor.empty() ? T(1) : factor[prow + j];
              const T* vj = vv.data() + (b * Lk + j) * d + h * dh;
              T s = 0;
              for (std::size_t c = 0; c < dh; ++c) s += go[c] * vj[c];
              dp[j] = s * f;
              dot += dp[j] * p[j];
              if (dv && f != T(0)) {
                T* dvj = dv + (b * Lk + j) * d + h * dh;
                const T w = p[j] * f;
                for (std::size_t c = 0; c < dh; ++c) dvj[c] += w * go[c];
              }
            }
            const T* qi = qv.data() + (b * Lq + i) * d + h * dh;
            for (std::size_t j = 0; j < Lk; ++j) {
              if (p[j] == T(0)) continue;
              const T ds = p[j] * (dp[j] - dot) * scale_factor;
              if (ds == T(0)) continue;
              const T* kj = kv.data() + (b * Lk + j) * d + h * dh;
              if (dq) {
                T* dqi = dq + (b * Lq + i) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                if (rv) {
                  const T* a = rv + rel_index(i, j) * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * a[c];
                }
              }
              if (dk) {
                T* dkj = dk + (b * Lk + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
              if (dr) {
                T* da = dr + rel_index(i, j) * dh;
                for (std::size_t c = 0; c < dh; ++c) da[c] += ds * qi[c];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> label_smoothed_nll(const BasicTensor<T>& logits, std::span<const TokenId> gold, double eps_ls,
                                  TokenId ignore_index) {
  require_rank2(logits.shape(), "label_smoothed_nll", "logits");
  require(eps_ls >= 0.0 && eps_ls < 1.0, ErrorCode::kContract, "label_smoothed_nll: eps_ls must lie in [0, 1)");
  const std::size_t n = logits.dim(0), V = logits.dim(1);
  require(gold.size() == n, ErrorCode::kDimension,
          "label_smoothed_nll: " + std::to_string(gold.size()) + " gold ids for " + std::to_string(n) + " rows");
  for (TokenId g : gold)
    require(g == ignore_index || (g >= 0 && static_cast<std::size_t>(g) < V), ErrorCode::kIndex,
            "label_smoothed_nll: gold id " + std::to_string(g) + " outside vocabulary of size " + std::to_string(V));
  const bool record = should_record<T>(logits);
  const auto& z = logits.storage()->value;
  const double uniform = eps_ls / static_cast<double>(V);
  std::vector<T> probs(record ? n * V : 0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (gold[r] == ignore_index) continue;
    const T* row = z.data() + r * V;
    const double mx = *std::max_element(row, row + V);
    double se = 0.0;
    for (std::size_t c = 0; c < V; ++c) se += std::exp(row[c] - mx);
    const double lse = mx + std::log(se);
    double target_dot = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      const double qc = uniform + (static_cast<TokenId>(c) == gold[r] ? 1.0 - eps_ls : 0.0);
      target_dot += qc * row[c];
      if (record) probs[r * V + c] = static_cast<T>(std::exp(row[c] - lse));
    }
    total += lse - target_dot;
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / denom), record);
  if (record) {
    Tape<T>::active()->record([sz = logits.storage(), so = out.storage(), probs = std::move(probs),
                               gold = std::vector<TokenId>(gold.begin(), gold.end()), n, V, uniform, eps_ls, denom,
                               ignore_index] {
      const T g = so->ensure_grad()[0];
      auto& dz = sz->ensure_grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (gold[r] == ignore_index) continue;
        for (std::size_t c = 0; c < V; ++c) {
          const double qc = uniform + (static_cast<TokenId>(c) == gold[r] ? 1.0 - eps_ls : 0.0);
          dz[r * V + c] += static_cast<T>(g * (probs[r * V + c] - qc) / denom);
        }
      }
    });
  }
  return out;
}

template <typename T>
BasicTensor<T> mean_inter_cosine(const BasicTensor<T>& x, const SequenceLayout& layout) {
  require_rank2(x.shape(), "mean_inter_cosine", "states");
  require(layout.batch * layout.length == x.dim(0), ErrorCode::kContract,
          "mean_inter_cosine: layout does not cover " + std::to_string(x.dim(0)) + " rows");
  const std::size_t d = x.dim(1);
  const bool record = should_record<T>(x);
  const auto& xv = x.storage()->value;
  std::vector<double> means(layout.batch * d, 0.0);
  std::vector<std::size_t> counts(layout.batch);
  std::size_t sequences = 0;
  double total = 0.0;
  for (std::size_t b = 0; b < layout.batch; ++b) {
    counts[b] = layout.valid_count(b);
    if (counts[b] == 0) continue;
    ++sequences;
    double* m = means.data() + b * d;
    for (std::size_t t = 0; t < layout.length; ++t) {
      if (!layout.is_valid(b, t)) continue;
      const T* row = xv.data() + (b * layout.length + t) * d;
      for (std::size_t c = 0; c < d; ++c) m[c] += row[c];
    }
    for (std::size_t c = 0; c < d; ++c) m[c] /= static_cast<double>(counts[b]);
    double mnorm = 0.0;
    for (std::size_t c = 0; c < d; ++c) mnorm += m[c] * m[c];
    mnorm = std::sqrt(mnorm);
    double s = 0.0;
    for (std::size_t t = 0; t < layout.length; ++t) {
      if (!layout.is_valid(b, t)) continue;
      const T* row = xv.data() + (b * layout.length + t) * d;
      double dot = 0.0, an = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        dot += row[c] * m[c];
        an += static_cast<double>(row[c]) * row[c];
      }
      an = std::sqrt(an);
      if (an > 0.0 && mnorm > 0.0) s += dot / (an * mnorm);
    }
    total += s / static_cast<double>(counts[b]);
  }
  const double denom = sequences ? static_cast<double>(sequences) : 1.0;
  auto out = BasicTensor<T>::scalar(static_cast<T>(total / denom), record);
  if (record) {
    Tape<T>::active()->record([sx = x.storage(), so = out.storage(), layout, means = std::move(means),
                               counts = std::move(counts), denom, d] {
      const double g = so->ensure_grad()[0];
      const auto& xv = sx->value;
      auto& dx = sx->ensure_grad();
      std::vector<double> dm(d);
      for (std::size_t b = 0; b < layout.batch; ++b) {
        if (counts[b] == 0) continue;
        const double* m = means.data() + b * d;
        double mnorm = 0.0;
        for (std::size_t c = 0; c < d; ++c) mnorm += m[c] * m[c];
        mnorm = std::sqrt(mnorm);
        if (mnorm == 0.0) continue;
        const double w = g / (denom * static_cast<double>(counts[b]));
        std::fill(dm.begin(), dm.end(), 0.0);
        for (std::size_t t = 0; t < layout.length; ++t) {
          if (!layout.is_valid(b, t)) continue;
          const std::size_t r = (b * layout.length + t) * d;
          double dot = 0.0, an = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            dot += xv[r + c] * m[c];
            an += static_cast<double>(xv[r + c]) * xv[r + c];
          }
          an = std::sqrt(an);
          if (an == 0.0) continue;
          const double cosv = dot / (an * mnorm);
          for (std::size_t c = 0; c < d; ++c) {
            dx[r + c] += static_cast<T>(w * (m[c] / (an * mnorm) - cosv * xv[r + c] / (an * an)));
            dm[c] += w * (xv[r + c] / (an * mnorm) - cosv * m[c] / (mnorm * mnorm));
          }
        }
        const double share = 1.0 / static_cast<double>(counts[b]);
        for (std::size_t t = 0; t < layout.length; ++t) {
          if (!layout.is_valid(b, t)) continue;
          const std::size_t r = (b * layout.length + t) * d;
          for (std::size_t c = 0; c < d; ++c) dx[r + c] += static_cast<T>(dm[c] * share);
        }
      }
    });
  }
  return out;
}

#define SDT_INSTANTIATE_OPS(T)                                                                                  \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                                \
  template BasicTensor<T> matmul_nt(const BasicTensor<T>&, const BasicTensor<T>&);                             \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                                     \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> dropout(const BasicTensor<T>&, double, DropoutKey);                                  \
  template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,      \
                                     double);                                                                  \
  template BasicTensor<T> softmax_rows(const BasicTensor<T>&);                                                 \
  template BasicTensor<T> embedding_lookup(const BasicTensor<T>&, std::span<const TokenId>);                   \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                                         \
  template BasicTensor<T> weighted_sum(std::span<const BasicTensor<T>>, const BasicTensor<T>&);                \
  template BasicTensor<T> attention(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,       \
                                    const AttentionSpec&, const BasicTensor<T>&);                              \
  template BasicTensor<T> label_smoothed_nll(const BasicTensor<T>&, std::span<const TokenId>, double, TokenId); \
  template BasicTensor<T> mean_inter_cosine(const BasicTensor<T>&, const SequenceLayout&);

SDT_INSTANTIATE_OPS(float)
SDT_INSTANTIATE_OPS(double)

}  // namespace sdt
