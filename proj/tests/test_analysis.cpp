#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "reference.hpp"
#include "sdt/error.hpp"
#include "sdt/similarity.hpp"

using namespace sdt;

namespace {

LayerOutputs<float> outputs(std::vector<std::vector<std::vector<float>>> layers) {
  LayerOutputs<float> o;
  const std::size_t n = layers[0].size(), d = layers[0][0].size();
  for (const auto& layer : layers) {
    std::vector<float> flat;
    for (const auto& row : layer) flat.insert(flat.end(), row.begin(), row.end());
    o.y.push_back(Tensor::from_values({n, d}, flat));
  }
  o.layout = {1, n, {}};
  return o;
}

LayerOutputs<float> random_outputs(std::size_t layers, std::size_t n, std::size_t d, std::mt19937_64& g) {
  LayerOutputs<float> o;
  for (std::size_t i = 0; i < layers; ++i) o.y.push_back(ref::random_tensor_f({n, d}, g));
  o.layout = {1, n, {}};
  return o;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  std::vector<double> v(t.dim(1));
  for (std::size_t c = 0; c < v.size(); ++c) v[c] = t.at(r, c);
  return v;
}

ModelConfig toy(std::size_t layers) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.enc_layers = layers;
  c.vocab_size = 12;
  c.block_size = BlockSize(1);
  return c;
}

}  // namespace

TEST_CASE("pairwise similarity examples") {
  const auto orth = outputs({{{1, 0}}, {{0, 1}}});
  CHECK(pairwise_sim(orth, 0, 1) == 0.0);
  CHECK(pairwise_sim(orth, 1, 1) == doctest::Approx(1.0));
  const auto mixed = outputs({{{1, 0}, {1, 0}}, {{2, 0}, {0, 3}}});
  CHECK(pairwise_sim(mixed, 0, 1) == doctest::Approx(0.5));
  const auto zero = outputs({{{0, 0}}, {{1, 2}}});
  CHECK(pairwise_sim(zero, 0, 1) == 0.0);
  CHECK_THROWS_AS(pairwise_sim(orth, 0, 2), Error);
  try {
    pairwise_sim(orth, 5, 0);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kContract);
  }
}

TEST_CASE("inter similarity examples") {
  CHECK(inter_sim(outputs({{{1, 0}, {0, 1}}}), 0) == doctest::Approx(std::sqrt(0.5)));
  CHECK(inter_sim(outputs({{{0.3f, -2}, {0.3f, -2}, {0.3f, -2}}}), 0) == doctest::Approx(1.0));
  CHECK(inter_sim(outputs({{{4, 1, -1}}}), 0) == doctest::Approx(1.0));
}

TEST_CASE("similarity invariants on random states") {
  std::mt19937_64 g(8);
  std::uniform_real_distribution<float> pos(0.1f, 10.0f);
  for (int trial = 0; trial < 50; ++trial) {
    auto o = random_outputs(4, 1 + trial % 6, 5, g);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(pairwise_sim(o, i, i) == doctest::Approx(1.0).epsilon(1e-6));
      for (std::size_t j = 0; j < 4; ++j) {
        const double s = pairwise_sim(o, i, j);
        CHECK(std::abs(s - pairwise_sim(o, j, i)) <= 1e-12);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
      }
      const double in = inter_sim(o, i);
      CHECK(in >= -1.0);
      CHECK(in <= 1.0);
    }
    // Positive per-position rescaling leaves pairwise values untouched. Inter
    // similarity is only invariant under one common factor across positions.
    auto scaled = o;
    const float common = pos(g);
    for (auto& y : scaled.y) {
      y = y.clone();
      const std::size_t d = y.dim(1);
      for (std::size_t r = 0; r < y.dim(0); ++r) {
        const float f = pos(g);
        for (std::size_t c = 0; c < d; ++c) y.values()[r * d + c] *= f;
      }
    }
    auto uniform = o;
    for (auto& y : uniform.y) {
      y = y.clone();
      for (auto& v : y.values()) v *= common;
    }
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(inter_sim(uniform, i) == doctest::Approx(inter_sim(o, i)).epsilon(1e-6));
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(pairwise_sim(scaled, i, j) == doctest::Approx(pairwise_sim(o, i, j)).epsilon(1e-6));
    }
  }
}

TEST_CASE("report agrees with a brute-force recomputation") {
  Model m(toy(3), 4);
  const std::vector<std::vector<TokenId>> corpus{{4, 5, 6, 7}, {8, 9, 10}};
  const auto report = similarity_report(m, corpus);
  REQUIRE(report.layers.size() == 4);
  CHECK(report.sentences == 2);
  CHECK(report.tokens == 7);
  std::vector<double> emb(4, 0), adj(4, 0), in(4, 0);
  for (const auto& s : corpus) {
    const auto o = m.encode_layers(s);
    for (std::size_t i = 0; i <= 3; ++i) {
      double e = 0, a = 0, c = 0;
      std::vector<double> mean(8, 0);
      for (std::size_t l = 0; l < s.size(); ++l)
        for (std::size_t k = 0; k < 8; ++k) mean[k] += o.y[i].at(l, k) / static_cast<double>(s.size());
      for (std::size_t l = 0; l < s.size(); ++l) {
        e += ref::cosine(row(o.y[i], l), row(o.y[0], l));
        if (i >= 1) a += ref::cosine(row(o.y[i], l), row(o.y[i - 1], l));
        c += ref::cosine(row(o.y[i], l), mean);
      }
      emb[i] += e / static_cast<double>(s.size()) / 2;
      adj[i] += a / static_cast<double>(s.size()) / 2;
      in[i] += c / static_cast<double>(s.size()) / 2;
    }
  }
  for (std::size_t i = 0; i <= 3; ++i) {
    CHECK(report.layers[i].layer == i);
    CHECK(std::abs(report.layers[i].emb_sim - emb[i]) <= 1e-6);
    CHECK(std::abs(report.layers[i].inter_sim - in[i]) <= 1e-6);
    CHECK(report.layers[i].adj_sim.has_value() == (i >= 2));
    if (i >= 2) CHECK(std::abs(*report.layers[i].adj_sim - adj[i]) <= 1e-6);
  }
  CHECK(report.layers[0].emb_sim == doctest::Approx(1.0));
  CHECK_THROWS_AS(similarity_report(m, {}), Error);
}

TEST_CASE("report CSV has one row per layer and NA below layer 2") {
  Model m(toy(1), 2);
  const auto csv = report_csv(similarity_report(m, {{4, 5, 6}}));
  std::istringstream in(csv);
  std::string header, r0, r1, extra;
  std::getline(in, header);
  std::getline(in, r0);
  std::getline(in, r1);
  CHECK(header == "layer,emb_sim,adj_sim,inter_sim");
  CHECK(r0.rfind("0,", 0) == 0);
  CHECK(r1.find(",NA,") != std::string::npos);
  CHECK_FALSE(std::getline(in, extra));
}

TEST_CASE("reference curves") {
  const auto& curves = load_reference_curves();
  auto find = [&](const std::string& sys, const std::string& metric) -> const ReferenceCurve& {
    for (const auto& c : curves)
      if (c.system == sys && c.metric == metric) return c;
    FAIL("missing curve " << sys << " " << metric);
    return curves.front();
  };
  auto value_at = [](const ReferenceCurve& c, double layer) {
    for (const auto& p : c.points)
      if (p.layer == layer) return p.value;
    return -1.0;
  };
  const auto& emb6 = find("Base6", "emb_sim");
  CHECK(value_at(emb6, 1) == doctest::Approx(0.8720).epsilon(1e-4));
  CHECK(value_at(emb6, 4) == doctest::Approx(0.6329).epsilon(1e-4));
  CHECK(value_at(emb6, 6) == doctest::Approx(0.5507).epsilon(1e-4));
  const auto& in48 = find("Base48", "inter_sim");
  CHECK(value_at(in48, 0) == doctest::Approx(0.4127).epsilon(1e-4));
  CHECK(value_at(in48, 1) == doctest::Approx(0.9004).epsilon(1e-4));
  CHECK(value_at(in48, 48) == doctest::Approx(0.8720).epsilon(1e-4));
  const auto& adj6 = find("Base6", "adj_sim");
  CHECK(value_at(adj6, 2) == doctest::Approx(0.9035).epsilon(1e-4));
  CHECK(value_at(adj6, 6) == doctest::Approx(0.9176).epsilon(1e-4));
  CHECK(curves.size() == 15);
  for (const auto& c : curves)
    for (std::size_t i = 1; i < c.points.size(); ++i) CHECK(c.points[i].layer > c.points[i - 1].layer);
  const auto overlay = reference_overlay_csv();
  CHECK(overlay.rfind("curve,metric,layer,value\n", 0) == 0);
  CHECK(overlay.find("Base48,inter_sim,48,0.872029688") != std::string::npos);
}

TEST_CASE("inter-sim regularizer") {
  std::mt19937_64 g(5);
  const auto o = random_outputs(4, 5, 6, g);
  const auto off = inter_sim_regularizer(o, 0.0);
  CHECK(off.item() == 0.0f);
  const Tensor loss = Tensor::scalar(1.2345f);
  CHECK(add(loss, off).item() == loss.item());

  const auto same = outputs({{{1, 2}, {1, 2}}, {{0.5f, -1}, {0.5f, -1}}, {{3, 3}, {3, 3}}});
  CHECK(inter_sim_regularizer(same, 0.7).item() == doctest::Approx(0.0).epsilon(1e-7));

  double expect = 0;
  for (std::size_t i = 1; i <= 3; ++i) expect += 1.0 - inter_sim(o, i);
  CHECK(inter_sim_regularizer(o, 0.1).item() == doctest::Approx(0.1 * expect / 3).epsilon(1e-5));
  CHECK_THROWS_AS(inter_sim_regularizer(o, -1.0), Error);
}
