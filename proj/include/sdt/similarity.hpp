#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sdt/transformer.hpp"

namespace sdt {

// Cosine of two vectors; 0 when either is the zero vector.
double cosine(std::span<const float> a, std::span<const float> b);

// (1/n) Σ_l cosine(y_i(l), y_j(l)) for a single sequence (one batch row).
double pairwise_sim(const LayerOutputs<float>& outputs, std::size_t i, std::size_t j);

// (1/n) Σ_l cosine(y_i(l), ȳ_i) with ȳ_i the positional mean.
double inter_sim(const LayerOutputs<float>& outputs, std::size_t i);

struct LayerSimilarity {
  std::size_t layer = 0;
  double emb_sim = 0.0;
  // sim(i, i-1); reported from layer 2 on.
  std::optional<double> adj_sim;
  double inter_sim = 0.0;
};

struct SimilarityReport {
  std::vector<LayerSimilarity> layers;  // layer 0 (embedding) through N
  std::size_t sentences = 0;
  std::size_t tokens = 0;
};

// Evaluation-mode report; every value is averaged over positions within a
// sentence first and then over sentences.
SimilarityReport similarity_report(const Model& model, const std::vector<std::vector<TokenId>>& corpus);

// Columns layer,emb_sim,adj_sim,inter_sim; a missing adj_sim is written as NA.
std::string report_csv(const SimilarityReport& report);

// lambda · (1/N) Σ_{i=1..N} (1 - sim_in(i)), averaged over the batch; differentiable.
template <typename T>
BasicTensor<T> inter_sim_regularizer(const LayerOutputs<T>& outputs, double lambda);

struct ReferencePoint {
  double layer;
  double value;
};

struct ReferenceCurve {
  std::string system;  // Base6, Base12, ...
  std::string metric;  // emb_sim, adj_sim, inter_sim
  std::vector<ReferencePoint> points;
};

// Digitized layer-similarity curves of 6- to 48-layer WMT En-De baselines,
// for overlays and trend comparison only.
const std::vector<ReferenceCurve>& load_reference_curves();

// Columns curve,metric,layer,value.
std::string reference_overlay_csv();

}  // namespace sdt
