#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>

#include "doctest.h"
#include "reference.hpp"
#include "sdt/decoding.hpp"
#include "sdt/error.hpp"
#include "sdt/transformer.hpp"

using namespace sdt;
using ref::Mat;

namespace {

ModelConfig tiny_config(std::size_t layers, BlockSize p, bool rpr) {
  ModelConfig c;
  c.d_model = 4;
  c.n_heads = 2;
  c.d_ff = 6;
  c.enc_layers = layers;
  c.dec_layers = 1;
  c.dropout = 0.1;
  c.rpr_enabled = rpr;
  c.rpr_clip_k = 2;
  c.vocab_size = 9;
  c.block_size = p;
  return c;
}

// Overwrite every parameter with random values so zero biases and unit gains
// do not hide wiring mistakes.
void scramble(Model& m, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::uniform_real_distribution<float> u(-0.6f, 0.6f);
  for (auto& [name, t] : m.parameters()) {
    const bool gain = name.ends_with(".gain");
    for (auto& v : t.values()) v = gain ? 1.0f + u(g) * 0.5f : u(g);
  }
}

Tensor tensor(Shape shape, std::vector<float> v) { return Tensor::from_values(shape, v); }

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

// ---- independent double-precision forward ----

struct Oracle {
  const Model& m;
  std::vector<double> vec(const std::string& name) const {
    const auto t = m.parameter(name);
    return {t.values().begin(), t.values().end()};
  }
  Mat mat(const std::string& name) const { return ref::to_mat(m.parameter(name)); }

  Mat linear(const Mat& x, const std::string& name) const {
    Mat y = ref::matmul(x, mat(name + ".weight"));
    const auto b = vec(name + ".bias");
    for (auto& row : y)
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += b[j];
    return y;
  }
  Mat norm(const Mat& x, const std::string& name) const {
    const auto g = vec(name + ".gain"), b = vec(name + ".bias");
    Mat y;
    for (const auto& row : x) {
      auto r = ref::layer_norm_row(row, m.config().layer_norm_eps);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] = r[j] * g[j] + b[j];
      y.push_back(r);
    }
    return y;
  }
  static Mat add(Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    return a;
  }
  Mat mha(const std::string& name, const Mat& qin, const Mat& mem, bool causal, bool rel) const {
    const Mat q = linear(qin, name + ".q"), k = linear(mem, name + ".k"), v = linear(mem, name + ".v");
    const std::size_t heads = m.config().n_heads, dh = m.config().d_model / heads;
    Mat rel_table;
    if (rel) rel_table = mat(name + ".rel_key");
    Mat concat(qin.size(), std::vector<double>(m.config().d_model));
    for (std::size_t h = 0; h < heads; ++h) {
      auto slice = [&](const Mat& x) {
        Mat s;
        for (const auto& row : x) s.emplace_back(row.begin() + h * dh, row.begin() + (h + 1) * dh);
        return s;
      };
      const Mat out = ref::attention(slice(q), slice(k), slice(v), std::vector<bool>(mem.size(), true), causal,
                                     rel ? &rel_table : nullptr, static_cast<int>(m.config().rpr_clip_k));
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t c = 0; c < dh; ++c) concat[i][h * dh + c] = out[i][c];
    }
    return linear(concat, name + ".o");
  }
  Mat ffn(const Mat& x, const std::string& name) const {
    Mat h = linear(x, name + ".fc1");
    for (auto& row : h)
      for (auto& v : row) v = std::max(0.0, v);
    return linear(h, name + ".fc2");
  }
  Mat embed(const std::vector<TokenId>& ids, const std::string& table) const {
    const std::size_t d = m.config().d_model;
    const Mat e = mat(table);
    Mat x;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      std::vector<double> row(d);
      for (std::size_t i = 0; i < d; ++i) {
        const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
        const double pos = (i % 2 == 0) ? std::sin(t * rate) : std::cos(t * rate);
        row[i] = e[static_cast<std::size_t>(ids[t])][i] * std::sqrt(static_cast<double>(d)) + pos;
      }
      x.push_back(row);
    }
    return x;
  }

  // Returns y_0..y_N and fills `output` with the final-normed encoder state.
  std::vector<Mat> encode(const std::vector<TokenId>& src, Mat& output) const {
    const auto& c = m.config();
    std::vector<Mat> ys{embed(src, c.shared_embeddings ? "embed.shared" : "embed.src")};
    Mat state = ys[0];
    std::vector<Mat> history{state};
    for (std::size_t j = 1; j <= c.enc_layers; ++j) {
      const std::string p = "encoder.layer" + std::to_string(j) + ".";
      state = add(state, mha(p + "self_attn", norm(state, p + "attn_norm"), norm(state, p + "attn_norm"), false,
                             c.rpr_enabled));
      state = add(state, ffn(norm(state, p + "ffn_norm"), p + "ffn"));
      ys.push_back(state);
      const std::size_t pl = c.block_size.layers();
      if (!c.block_size.is_unbounded() && (j % pl == 0 || j == c.enc_layers)) {
        history.push_back(state);
        const std::size_t b = (j + pl - 1) / pl;
        const std::string cp = "encoder.combiner.block" + std::to_string(b);
        const auto w = vec(cp + ".weights");
        Mat mix(state.size(), std::vector<double>(state[0].size(), 0.0));
        for (std::size_t k = 0; k < history.size(); ++k)
          for (std::size_t i = 0; i < mix.size(); ++i)
            for (std::size_t d = 0; d < mix[i].size(); ++d) mix[i][d] += w[k] * history[k][i][d];
        state = c.combiner_norm ? norm(mix, cp + ".norm") : mix;
      }
    }
    output = norm(state, "encoder.final_norm");
    return ys;
  }

  Mat logits(const std::vector<TokenId>& src, const std::vector<TokenId>& tgt_in) const {
    const auto& c = m.config();
    Mat memory;
    encode(src, memory);
    Mat state = embed(tgt_in, c.shared_embeddings ? "embed.shared" : "embed.tgt");
    for (std::size_t j = 1; j <= c.dec_layers; ++j) {
      const std::string p = "decoder.layer" + std::to_string(j) + ".";
      const Mat s = norm(state, p + "self_norm");
      state = add(state, mha(p + "self_attn", s, s, true, c.rpr_enabled));
      state = add(state, mha(p + "cross_attn", norm(state, p + "cross_norm"), memory, false, false));
      state = add(state, ffn(norm(state, p + "ffn_norm"), p + "ffn"));
    }
    state = norm(state, "decoder.final_norm");
    const Mat e = mat(c.shared_embeddings ? "embed.shared" : "output.proj");
    Mat out(state.size(), std::vector<double>(e.size(), 0.0));
    for (std::size_t i = 0; i < state.size(); ++i)
      for (std::size_t v = 0; v < e.size(); ++v)
        for (std::size_t d = 0; d < e[v].size(); ++d) out[i][v] += state[i][d] * e[v][d];
    return out;
  }
};

}  // namespace

TEST_CASE("pre-norm sublayer with a zeroed output projection is the identity") {
  std::mt19937_64 g(1);
  const auto s = ref::random_tensor_f({3, 4}, g);
  NormParams<float> norm{ref::random_tensor_f({4}, g), ref::random_tensor_f({4}, g)};
  FeedForwardParams<float> ffn{{ref::random_tensor_f({4, 6}, g), ref::random_tensor_f({6}, g)},
                               {Tensor::zeros({6, 4}), Tensor::zeros({4})}};
  const auto out = pre_norm_sublayer(s, norm, 1e-5, [&](const Tensor& h) { return feed_forward(ffn, h); });
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(out[i] == s[i]);
}

TEST_CASE("pre-norm sublayer on zero input with identity sublayer yields the norm bias") {
  std::mt19937_64 g(2);
  NormParams<float> norm{ref::random_tensor_f({4}, g), ref::random_tensor_f({4}, g)};
  const auto out = pre_norm_sublayer(Tensor::zeros({2, 4}), norm, 1e-5, [](const Tensor& h) { return h; });
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(r, j) == doctest::Approx(norm.bias[j]));
}

TEST_CASE("multi-head attention special cases") {
  std::mt19937_64 g(3);
  auto lin = [&](std::size_t in, std::size_t out) -> LinearParams<float> {
    return {ref::random_tensor_f({in, out}, g), ref::random_tensor_f({out}, g)};
  };
  AttentionParams<float> p{lin(4, 4), lin(4, 4), lin(4, 4), lin(4, 4), {}};

  SUBCASE("a single key passes the value projection through") {
    const auto x = ref::random_tensor_f({1, 4}, g);
    AttentionSpec spec;
    spec.n_heads = 2;
    spec.queries = {1, 1, {}};
    spec.keys = {1, 1, {}};
    check_close(multi_head_attention(p, x, x, spec), p.o(p.v(x)), 1e-6);
  }

  SUBCASE("identical keys give the mean of the value projections") {
    p.k.weight = Tensor::zeros({4, 4});
    const auto q = ref::random_tensor_f({2, 4}, g), mem = ref::random_tensor_f({3, 4}, g);
    AttentionSpec spec;
    spec.n_heads = 2;
    spec.queries = {1, 2, {}};
    spec.keys = {1, 3, {}};
    const auto v = p.v(mem);
    std::vector<float> mean(8);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t j = 0; j < 4; ++j) mean[r * 4 + j] = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0f;
    check_close(multi_head_attention(p, q, mem, spec), p.o(tensor({2, 4}, mean)), 1e-5);
  }

  SUBCASE("an all-zero relative table leaves the logits untouched") {
    const auto x = ref::random_tensor_f({5, 4}, g);
    AttentionSpec spec;
    spec.n_heads = 2;
    spec.queries = {1, 5, {}};
    spec.keys = {1, 5, {}};
    const auto plain = multi_head_attention(p, x, x, spec);
    spec.rel_clip = 2;
    p.rel_key = Tensor::zeros({5, 2});
    const auto with_rel = multi_head_attention(p, x, x, spec);
    for (std::size_t i = 0; i < plain.numel(); ++i) CHECK(plain[i] == with_rel[i]);
  }

  SUBCASE("agrees with a per-head reference including relative keys and a causal mask") {
    const auto x = ref::random_tensor_f({4, 4}, g);
    p.rel_key = ref::random_tensor_f({3, 2}, g);
    AttentionSpec spec;
    spec.n_heads = 2;
    spec.queries = {1, 4, {}};
    spec.keys = {1, 4, {}};
    spec.causal = true;
    spec.rel_clip = 1;
    const auto got = multi_head_attention(p, x, x, spec);
    const auto q = ref::to_mat(p.q(x)), k = ref::to_mat(p.k(x)), v = ref::to_mat(p.v(x));
    const auto rel = ref::to_mat(p.rel_key);
    Mat concat(4, std::vector<double>(4));
    for (std::size_t h = 0; h < 2; ++h) {
      auto slice = [&](const Mat& m) {
        Mat s;
        for (const auto& row : m) s.emplace_back(row.begin() + 2 * h, row.begin() + 2 * h + 2);
        return s;
      };
      const auto out = ref::attention(slice(q), slice(k), slice(v), std::vector<bool>(4, true), true, &rel, 1);
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 2; ++c) concat[i][2 * h + c] = out[i][c];
    }
    const auto o = ref::to_mat(p.o.weight);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double s = p.o.bias[j];
        for (std::size_t c = 0; c < 4; ++c) s += concat[i][c] * o[c][j];
        CHECK(got.at(i, j) == doctest::Approx(s).epsilon(1e-5));
      }
  }

  SUBCASE("a causal spec with unequal lengths is a contract error") {
    AttentionSpec spec;
    spec.queries = {1, 2, {}};
    spec.keys = {1, 3, {}};
    spec.causal = true;
    spec.n_heads = 2;
    CHECK_THROWS_AS(multi_head_attention(p, ref::random_tensor_f({2, 4}, g), ref::random_tensor_f({3, 4}, g), spec),
                    Error);
  }
}

TEST_CASE("feed-forward examples") {
  FeedForwardParams<float> f{{tensor({2, 2}, {1, -1, 2, 0}), tensor({2}, {0, 0.5f})},
                             {tensor({2, 2}, {1, 2, 3, 4}), tensor({2}, {1, 1})}};
  // x W1 + b1 = (5, -0.5) -> relu (5, 0) -> (5, 10) + 1
  const auto y = feed_forward(f, tensor({1, 2}, {1, 2}));
  CHECK(y[0] == doctest::Approx(6.0));
  CHECK(y[1] == doctest::Approx(11.0));
  f.fc2 = {Tensor::zeros({2, 2}), Tensor::zeros({2})};
  const auto z = feed_forward(f, tensor({1, 2}, {1, 2}));
  CHECK(z[0] == 0.0f);
  CHECK(z[1] == 0.0f);
}

TEST_CASE("combine_blocks examples") {
  const auto a = tensor({1, 3}, {1, 2, 6}), b = tensor({1, 3}, {3, 0, 0});
  const std::vector<Tensor> history{a, b};
  NormParams<float> unit{Tensor::filled({3}, 1.0f), Tensor::zeros({3})};
  const auto self_only = combine_blocks<float>(history, tensor({2}, {0, 1}), &unit, 1e-5);
  const auto expect_b = ref::layer_norm_row({3, 0, 0}, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) CHECK(self_only[j] == doctest::Approx(expect_b[j]).epsilon(1e-5));
  const auto mean = combine_blocks<float>(history, tensor({2}, {0.5f, 0.5f}), &unit, 1e-5);
  const auto expect_mean = ref::layer_norm_row({2, 1, 3}, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) CHECK(mean[j] == doctest::Approx(expect_mean[j]).epsilon(1e-5));
  CHECK_THROWS_AS(combine_blocks<float>(history, tensor({3}, {1, 1, 1}), &unit, 1e-5), Error);
}

TEST_CASE("block topology partitions layers") {
  const BlockTopology t(5, BlockSize(2));
  CHECK(t.connected());
  CHECK(t.block_count() == 3);
  CHECK(t.block(1) == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK(t.block(3) == std::pair<std::size_t, std::size_t>{5, 5});
  CHECK(t.block_of(4) == 2);
  CHECK(t.is_block_end(2));
  CHECK_FALSE(t.is_block_end(3));
  CHECK(t.is_block_end(5));
  CHECK(BlockTopology(4, BlockSize(1)).block_count() == 4);
  CHECK_FALSE(BlockTopology(4, BlockSize::unbounded()).connected());
}

TEST_CASE("model config validation names the field") {
  auto c = tiny_config(2, BlockSize::unbounded(), false);
  c.n_heads = 3;
  try {
    c.validate();
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    CHECK(std::string(e.what()).find("n_heads") != std::string::npos);
  }
  c = tiny_config(0, BlockSize::unbounded(), false);
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("encoder and decoder agree with an independent forward") {
  for (const bool rpr : {false, true})
    for (const BlockSize p : {BlockSize::unbounded(), BlockSize(1), BlockSize(2)}) {
      CAPTURE(rpr);
      CAPTURE(p.to_string());
      Model m(tiny_config(3, p, rpr), 11);
      scramble(m, 5);
      Oracle o{m};
      const std::vector<TokenId> src{4, 7, 5, 8, 6}, tin{1, 5, 6, 4};
      Mat expected_out;
      const auto ys = o.encode(src, expected_out);
      ForwardContext ctx;
      const auto enc = m.encode(TokenBatch::single(src), ctx);
      REQUIRE(enc.layers.y.size() == 4);
      for (std::size_t j = 0; j < ys.size(); ++j)
        for (std::size_t i = 0; i < src.size(); ++i)
          for (std::size_t d = 0; d < 4; ++d)
            CHECK(enc.layers.y[j].at(i, d) == doctest::Approx(ys[j][i][d]).epsilon(1e-4));
      for (std::size_t i = 0; i < src.size(); ++i)
        for (std::size_t d = 0; d < 4; ++d)
          CHECK(enc.output.at(i, d) == doctest::Approx(expected_out[i][d]).epsilon(1e-4));
      const auto logits = m.decode_forward(TokenBatch::single(tin), enc, ctx);
      const auto expect = o.logits(src, tin);
      for (std::size_t i = 0; i < tin.size(); ++i)
        for (std::size_t v = 0; v < 9; ++v) CHECK(logits.at(i, v) == doctest::Approx(expect[i][v]).epsilon(1e-4));
    }
}

TEST_CASE("encode with one layer and no combiner is the two sublayers unrolled") {
  Model m(tiny_config(1, BlockSize::unbounded(), false), 4);
  scramble(m, 9);
  const std::vector<TokenId> src{5, 6, 7};
  ForwardContext ctx;
  const auto enc = m.encode(TokenBatch::single(src), ctx);
  const auto& layer = m.encoder_layers()[0];
  AttentionSpec spec;
  spec.n_heads = 2;
  spec.queries = {1, 3, {}};
  spec.keys = {1, 3, {}};
  spec.rel_clip = m.config().rpr_clip_k;
  auto s = pre_norm_sublayer(enc.layers.y[0], layer.attn_norm, 1e-5,
                             [&](const Tensor& h) { return multi_head_attention(layer.self_attn, h, h, spec); });
  s = pre_norm_sublayer(s, layer.ffn_norm, 1e-5, [&](const Tensor& h) { return feed_forward(layer.ffn, h); });
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(enc.layers.y[1][i] == s[i]);
  CHECK(m.combiner().weights.empty());
  for (const auto& [name, t] : m.parameters()) CHECK(name.find("combiner") == std::string::npos);
}

TEST_CASE("a self-only combiner without normalization reproduces the unconnected encoder") {
  std::mt19937_64 g(21);
  for (const BlockSize p : {BlockSize(1), BlockSize(2), BlockSize(3)}) {
    auto cfg = tiny_config(4, p, true);
    cfg.combiner_norm = false;
    Model connected(cfg, 7);
    auto base_cfg = cfg;
    base_cfg.block_size = BlockSize::unbounded();
    Model base(base_cfg, 7);
    for (auto& w : connected.combiner().weights) {
      for (auto& v : w.values()) v = 0.0f;
      w.values()[w.numel() - 1] = 1.0f;
    }
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<TokenId> src(1 + trial);
      for (auto& t : src) t = static_cast<TokenId>(4 + g() % 5);
      const auto a = connected.encode_layers(src), b = base.encode_layers(src);
      for (std::size_t j = 0; j < a.y.size(); ++j)
        for (std::size_t i = 0; i < a.y[j].numel(); ++i) CHECK(std::abs(a.y[j][i] - b.y[j][i]) <= 1e-6);
    }
  }
}

TEST_CASE("combiner weights start uniform") {
  Model m(tiny_config(4, BlockSize(2), false), 3);
  REQUIRE(m.combiner().weights.size() == 2);
  CHECK(m.combiner().weights[0].numel() == 2);
  CHECK(m.combiner().weights[1].numel() == 3);
  for (float v : m.combiner().weights[1].values()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("empty source is a contract error") {
  Model m(tiny_config(1, BlockSize::unbounded(), false), 1);
  ForwardContext ctx;
  TokenBatch empty;
  empty.layout = {1, 0, {}};
  CHECK_THROWS_AS(m.encode(empty, ctx), Error);
}

TEST_CASE("decoder logits are causal") {
  Model m(tiny_config(2, BlockSize(1), true), 8);
  scramble(m, 2);
  const std::vector<TokenId> src{4, 5, 6};
  ForwardContext ctx;
  const auto enc = m.encode(TokenBatch::single(src), ctx);
  const std::vector<TokenId> base{1, 4, 5, 6, 7};
  const auto ref_logits = m.decode_forward(TokenBatch::single(base), enc, ctx);
  for (std::size_t t = 1; t < base.size(); ++t) {
    auto changed = base;
    changed[t] = changed[t] == 8 ? 4 : 8;
    const auto logits = m.decode_forward(TokenBatch::single(changed), enc, ctx);
    for (std::size_t row = 0; row < t; ++row)
      for (std::size_t v = 0; v < 9; ++v) CHECK(logits.at(row, v) == ref_logits.at(row, v));
    bool moved = false;
    for (std::size_t v = 0; v < 9; ++v) moved |= logits.at(t, v) != ref_logits.at(t, v);
    CHECK(moved);
  }
}

TEST_CASE("forward is deterministic, and dropout replays under the same context") {
  Model m(tiny_config(2, BlockSize(1), false), 3);
  const auto batch = TokenBatch::from_sequences({{4, 5, 6}, {7, 8}});
  ForwardContext a{true, 5, 9, 0}, b{true, 5, 9, 0}, c{true, 5, 10, 0};
  const auto x = m.encode(batch, a).output, y = m.encode(batch, b).output, z = m.encode(batch, c).output;
  bool differs = false;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    CHECK(x[i] == y[i]);
    differs |= x[i] != z[i];
  }
  CHECK(differs);
}

TEST_CASE("padding does not leak into valid positions") {
  Model m(tiny_config(2, BlockSize(1), true), 6);
  scramble(m, 6);
  ForwardContext ctx;
  const auto batch = m.encode(TokenBatch::from_sequences({{4, 5, 6, 7}, {8, 5}}), ctx);
  const auto alone = m.encode(TokenBatch::single(std::vector<TokenId>{8, 5}), ctx);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t d = 0; d < 4; ++d)
      CHECK(batch.output.at(4 + t, d) == doctest::Approx(alone.output.at(t, d)).epsilon(1e-5));
}

TEST_CASE("parameters are named, unique and tied once") {
  auto cfg = tiny_config(2, BlockSize(1), true);
  Model shared(cfg, 1);
  cfg.shared_embeddings = false;
  Model untied(cfg, 1);
  std::map<std::string, int> seen;
  for (const auto& [name, t] : shared.parameters()) ++seen[name];
  for (const auto& [name, count] : seen) CHECK(count == 1);
  CHECK(seen.count("embed.shared") == 1);
  CHECK(seen.count("encoder.layer2.self_attn.rel_key") == 1);
  CHECK(seen.count("decoder.layer1.cross_attn.rel_key") == 0);
  CHECK(untied.parameter_count() > shared.parameter_count());
  CHECK_THROWS_AS(shared.parameter("nope"), Error);
}

// ---- decoding ----

namespace {

// Log-probabilities from a fixed random table keyed by the prefix.
LogProbFn toy_scorer(std::uint64_t seed, std::size_t V) {
  auto table = std::make_shared<std::map<std::vector<TokenId>, std::vector<double>>>();
  return [table, seed, V](std::span<const TokenId> prefix) {
    const std::vector<TokenId> key(prefix.begin(), prefix.end());
    auto it = table->find(key);
    if (it == table->end()) {
      std::uint64_t h = seed;
      for (TokenId t : key) h = h * 1000003ULL + static_cast<std::uint64_t>(t) + 1;
      std::mt19937_64 g(h);
      std::normal_distribution<double> n(0.0, 1.5);
      std::vector<double> z(V);
      for (auto& v : z) v = n(g);
      double mx = *std::max_element(z.begin(), z.end()), s = 0;
      for (double v : z) s += std::exp(v - mx);
      for (auto& v : z) v = v - mx - std::log(s);
      it = table->emplace(key, z).first;
    }
    return it->second;
  };
}

Hypothesis brute_force(const LogProbFn& next, std::size_t V, std::size_t max_len, double alpha) {
  std::optional<Hypothesis> best;
  std::function<void(std::vector<TokenId>, double)> walk = [&](std::vector<TokenId> prefix, double lp) {
    const auto dist = next(prefix);
    Hypothesis h{prefix, lp + dist[kEosId], 0.0, prefix.size() + 1};
    h.score = h.log_prob / std::pow((5.0 + static_cast<double>(prefix.size() + 1)) / 6.0, alpha);
    if (!best || h.score > best->score ||
        (h.score == best->score && (h.finished_step < best->finished_step ||
                                    (h.finished_step == best->finished_step && h.tokens < best->tokens))))
      best = h;
    if (prefix.size() == max_len) return;
    for (std::size_t v = 0; v < V; ++v) {
      if (static_cast<TokenId>(v) == kEosId) continue;
      auto p = prefix;
      p.push_back(static_cast<TokenId>(v));
      walk(p, lp + dist[v]);
    }
  };
  walk({}, 0.0);
  return *best;
}

}  // namespace

TEST_CASE("length penalty closed form") {
  CHECK(length_penalty(1, 0.6) == doctest::Approx(1.0));
  CHECK(length_penalty(7, 0.6) == doctest::Approx(std::pow(2.0, 0.6)));
  CHECK(length_penalty(13, 0.0) == 1.0);
}

TEST_CASE("beam search matches exhaustive enumeration on V=3, length at most 2") {
  for (std::uint64_t seed = 1; seed <= 60; ++seed)
    for (const double alpha : {0.0, 0.6, 1.5}) {
      const auto next = toy_scorer(seed, 3);
      BeamOptions opt;
      opt.beam_size = 16;
      opt.length_penalty = alpha;
      opt.max_len = 2;
      const auto got = beam_search(next, opt);
      const auto want = brute_force(next, 3, 2, alpha);
      CAPTURE(seed);
      CAPTURE(alpha);
      CHECK(got.tokens == want.tokens);
      CHECK(got.log_prob == doctest::Approx(want.log_prob).epsilon(1e-12));
    }
}

TEST_CASE("beam size one is greedy") {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    const auto next = toy_scorer(seed, 5);
    BeamOptions opt;
    opt.beam_size = 1;
    opt.max_len = 6;
    const auto beam = beam_search(next, opt);
    const auto greedy = greedy_search(next, 6);
    CHECK(beam.tokens == greedy.tokens);
    CHECK(beam.log_prob == greedy.log_prob);
  }
}

TEST_CASE("alpha zero ranks by log-probability alone") {
  const auto next = toy_scorer(77, 4);
  BeamOptions opt;
  opt.beam_size = 32;
  opt.length_penalty = 0.0;
  opt.max_len = 3;
  const auto got = beam_search(next, opt);
  CHECK(got.score == got.log_prob);
  CHECK(got.tokens == brute_force(next, 4, 3, 0.0).tokens);
}

TEST_CASE("hypotheses reaching max_len are closed with eos") {
  // eos is never likely: the best hypothesis must stop at max_len.
  const LogProbFn next = [](std::span<const TokenId>) { return std::vector<double>{-50, -50, -40, -0.01}; };
  BeamOptions opt;
  opt.max_len = 3;
  const auto h = beam_search(next, opt);
  CHECK(h.tokens == std::vector<TokenId>{3, 3, 3});
  CHECK(greedy_search(next, 3).tokens == std::vector<TokenId>{3, 3, 3});
  opt.beam_size = 0;
  CHECK_THROWS_AS(beam_search(next, opt), Error);
}

TEST_CASE("model beam=1 decoding equals batched greedy decoding") {
  auto cfg = tiny_config(2, BlockSize(1), true);
  cfg.d_model = 8;
  cfg.vocab_size = 12;
  Model m(cfg, 13);
  scramble(m, 13);
  const std::vector<std::vector<TokenId>> sources{{4, 5, 6}, {7, 8, 9, 10, 11}, {4}};
  const auto greedy = greedy_decode_batch(m, sources, 7);
  BeamOptions opt;
  opt.beam_size = 1;
  opt.max_len = 7;
  for (std::size_t i = 0; i < sources.size(); ++i) CHECK(beam_decode(m, sources[i], opt) == greedy[i]);
}
