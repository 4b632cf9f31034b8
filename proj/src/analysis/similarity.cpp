#include "sdt/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace sdt {

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

void check_single(const LayerOutputs<float>& outputs, std::size_t i, const char* op) {
  require(outputs.layout.batch == 1, ErrorCode::kContract, std::string(op) + ": expects a single sequence");
  require(i < outputs.y.size(), ErrorCode::kContract,
          std::string(op) + ": layer " + std::to_string(i) + " outside 0.." + std::to_string(outputs.y.size() - 1));
}

std::span<const float> row(const Tensor& t, std::size_t r) {
  const std::size_t d = t.dim(1);
  return t.values().subspan(r * d, d);
}

}  // namespace

double pairwise_sim(const LayerOutputs<float>& outputs, std::size_t i, std::size_t j) {
  check_single(outputs, i, "pairwise_sim");
  check_single(outputs, j, "pairwise_sim");
  const auto& layout = outputs.layout;
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < layout.length; ++l) {
    if (!layout.is_valid(0, l)) continue;
    total += cosine(row(outputs.y[i], l), row(outputs.y[j], l));
    ++n;
  }
  require(n >= 1, ErrorCode::kContract, "pairwise_sim: empty sequence");
  return total / static_cast<double>(n);
}

double inter_sim(const LayerOutputs<float>& outputs, std::size_t i) {
  check_single(outputs, i, "inter_sim");
  const auto& layout = outputs.layout;
  const Tensor& y = outputs.y[i];
  const std::size_t d = y.dim(1);
  std::vector<double> mean(d, 0.0);
  std::size_t n = 0;
  for (std::size_t l = 0; l < layout.length; ++l) {
    if (!layout.is_valid(0, l)) continue;
    const auto r = row(y, l);
    for (std::size_t c = 0; c < d; ++c) mean[c] += r[c];
    ++n;
  }
  require(n >= 1, ErrorCode::kContract, "inter_sim: empty sequence");
  std::vector<float> mean_f(d);
  for (std::size_t c = 0; c < d; ++c) mean_f[c] = static_cast<float>(mean[c] / static_cast<double>(n));
  double total = 0.0;
  for (std::size_t l = 0; l < layout.length; ++l)
    if (layout.is_valid(0, l)) total += cosine(row(y, l), mean_f);
  return total / static_cast<double>(n);
}

SimilarityReport similarity_report(const Model& model, const std::vector<std::vector<TokenId>>& corpus) {
  require(!corpus.empty(), ErrorCode::kContract, "similarity_report: empty corpus");
  NoGradScope<float> no_grad;
  const std::size_t N = model.config().enc_layers;
  SimilarityReport report;
  report.layers.resize(N + 1);
  std::vector<double> adj(N + 1, 0.0);
  for (const auto& sentence : corpus) {
    const auto outputs = model.encode_layers(sentence);
    for (std::size_t i = 0; i <= N; ++i) {
      report.layers[i].emb_sim += pairwise_sim(outputs, i, 0);
      if (i >= 1) adj[i] += pairwise_sim(outputs, i, i - 1);
      report.layers[i].inter_sim += inter_sim(outputs, i);
    }
    ++report.sentences;
    report.tokens += sentence.size();
  }
  const double n = static_cast<double>(report.sentences);
  for (std::size_t i = 0; i <= N; ++i) {
    auto& L = report.layers[i];
    L.layer = i;
    L.emb_sim /= n;
    L.inter_sim /= n;
    if (i >= 2) L.adj_sim = adj[i] / n;
  }
  return report;
}

std::string report_csv(const SimilarityReport& report) {
  std::ostringstream out;
  out << "layer,emb_sim,adj_sim,inter_sim\n";
  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.9f", v);
    return std::string(buf);
  };
  for (const auto& L : report.layers)
    out << L.layer << ',' << fmt(L.emb_sim) << ',' << (L.adj_sim ? fmt(*L.adj_sim) : "NA") << ','
        << fmt(L.inter_sim) << '\n';
  return out.str();
}

template <typename T>
BasicTensor<T> inter_sim_regularizer(const LayerOutputs<T>& outputs, double lambda) {
  require(lambda >= 0.0, ErrorCode::kContract, "inter_sim_regularizer: lambda must be non-negative");
  const std::size_t N = outputs.y.size() - 1;
  if (lambda == 0.0 || N == 0) return BasicTensor<T>::scalar(T(0));
  BasicTensor<T> total;
  for (std::size_t i = 1; i <= N; ++i) {
    auto s = mean_inter_cosine(outputs.y[i], outputs.layout);
    total = total.defined() ? add(total, s) : s;
  }
  // lambda/N · (N - Σ sim_in)
  auto gap = add(BasicTensor<T>::scalar(static_cast<T>(N)), scale(total, T(-1)));
  return scale(gap, static_cast<T>(lambda / static_cast<double>(N)));
}

template BasicTensor<float> inter_sim_regularizer(const LayerOutputs<float>&, double);
template BasicTensor<double> inter_sim_regularizer(const LayerOutputs<double>&, double);

const std::vector<ReferenceCurve>& load_reference_curves() {
  static const std::vector<ReferenceCurve> curves = {
      {"Base6", "emb_sim", {{1, 0.871965587}, {4, 0.632949352}, {6, 0.550674677}}},
      {"Base12", "emb_sim", {{1, 0.758689106}, {5, 0.472507477}, {9, 0.416343808}, {12, 0.377091814}}},
      {"Base18", "emb_sim", {{1, 0.697655082}, {2, 0.544426024}, {5, 0.395011961}, {8, 0.341954261}, {13, 0.333031645}, {18, 0.323633075}}},
      {"Base36", "emb_sim", {{1, 0.498284519}, {2, 0.388617694}, {4, 0.315523803}, {7, 0.257814914}, {11, 0.246643215}, {15, 0.225816488}, {19, 0.202714607}, {23, 0.213578179}, {27, 0.217394873}, {31, 0.237006098}, {35, 0.197583184}}},
      {"Base48", "emb_sim", {{1, 0.276715934}, {2, 0.173591197}, {5, 0.164033324}, {9, 0.146789342}, {13, 0.138284281}, {19, 0.139886647}, {25, 0.142813057}, {31, 0.144191474}, {37, 0.137800246}, {43, 0.148809344}, {48, 0.152258441}}},
      {"Base6", "adj_sim", {{2, 0.903458607}, {4, 0.905398012}, {6, 0.917587481}}},
      {"Base12", "adj_sim", {{2, 0.917758119}, {5, 0.929079545}, {7, 0.936668229}, {9, 0.928464782}, {12, 0.932150733}}},
      {"Base18", "adj_sim", {{2, 0.937423558}, {3, 0.948920987}, {5, 0.956073604}, {8, 0.949292443}, {11, 0.955019674}, {13, 0.948849878}, {16, 0.954676659}, {18, 0.951589427}}},
      {"Base36", "adj_sim", {{2, 0.95394382}, {3, 0.964007409}, {6, 0.96711138}, {10, 0.966033967}, {15, 0.968376012}, {20, 0.967553647}, {25, 0.963756592}, {30, 0.960248084}, {35, 0.966572077}}},
      {"Base48", "adj_sim", {{2, 0.98249208}, {3, 0.988625755}, {7, 0.989191105}, {13, 0.988671174}, {19, 0.988605788}, {25, 0.988211682}, {31, 0.985691597}, {37, 0.984065762}, {43, 0.984721949}, {48, 0.98744904}}},
      {"Base6", "inter_sim", {{0, 0.407}, {3, 0.470}, {6, 0.566}}},
      {"Base12", "inter_sim", {{0, 0.397243053}, {2, 0.683173289}, {7, 0.745820155}, {12, 0.753071179}}},
      {"Base18", "inter_sim", {{0, 0.405344933}, {1, 0.689856999}, {2, 0.786493652}, {6, 0.814697964}, {10, 0.804633372}, {15, 0.786718886}, {18, 0.773134542}}},
      {"Base36", "inter_sim", {{0, 0.408574224}, {1, 0.854825985}, {5, 0.881507151}, {10, 0.860796235}, {15, 0.842295201}, {20, 0.8296614}, {25, 0.819406729}, {30, 0.80345588}, {35, 0.802439125}}},
      {"Base48", "inter_sim", {{0, 0.412673861}, {1, 0.900417936}, {2, 0.930948329}, {3, 0.932455492}, {7, 0.927961659}, {13, 0.915562642}, {19, 0.905633998}, {25, 0.891421807}, {31, 0.882193008}, {37, 0.875020916}, {43, 0.872368582}, {48, 0.872029688}}},
  };
  return curves;
}

std::string reference_overlay_csv() {
  std::ostringstream out;
  out.precision(10);
  out << "curve,metric,layer,value\n";
  for (const auto& c : load_reference_curves())
    for (const auto& p : c.points) out << c.system << ',' << c.metric << ',' << p.layer << ',' << p.value << '\n';
  return out.str();
}

}  // namespace sdt
