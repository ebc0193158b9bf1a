#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ebats/common.hpp"
#include "ebats/model.hpp"

namespace ebats::stats {

using model::ModelWeights;
using model::Utterance;

/// Source-domain statistics the losses align against: per-layer
/// centroids of utterance-level embeddings plus per-(token, layer)
/// mean/std vectors pooled over pseudo-labelled frames. Storage is
/// O(L*d) + O(|V|*L*d); no per-sample source data is kept.
struct SourceStats {
  std::vector<Vector> centroids;  // L+1 entries, length d
  std::map<std::pair<int, int>, Vector> token_means;  // (v, l) -> length d
  std::map<std::pair<int, int>, Vector> token_stds;   // (v, l) -> length d
  std::map<std::pair<int, int>, std::int64_t> frame_counts;
  std::uint64_t vocab_hash = 0;
  std::uint64_t model_hash = 0;
  int layer_count = 0;  // L+1
  int dim = 0;

  bool has_token(int v, int l) const {
    return token_means.count({v, l}) > 0;
  }
};

inline SourceStats extract_stats(const ModelWeights& weights,
                                 const std::vector<Utterance>& corpus) {
  if (corpus.empty())
    throw std::invalid_argument("extract_stats: corpus is empty");

  const int layer_count = weights.dims.layers + 1;
  const int d = weights.dims.d;
  const int blank = weights.vocab.blank_index;

  std::vector<KahanVector> centroid_acc(layer_count, KahanVector(d));
  std::map<std::pair<int, int>, KahanVector> sum_acc;
  std::map<std::pair<int, int>, KahanVector> sumsq_acc;
  std::map<std::pair<int, int>, std::int64_t> counts;

  for (const auto& utt : corpus) {
    const auto bundle = model::forward(weights, utt);
    const Eigen::Index n = bundle.posteriors.rows();
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      int arg = 0;
      bundle.posteriors.row(i).maxCoeff(&arg);
      labels[static_cast<std::size_t>(i)] = arg;
    }
    for (int l = 0; l < layer_count; ++l) {
      const Matrix& states = bundle.layer_states[static_cast<std::size_t>(l)];
      centroid_acc[static_cast<std::size_t>(l)].add(
          states.colwise().mean().transpose());
      for (Eigen::Index i = 0; i < n; ++i) {
        const int v = labels[static_cast<std::size_t>(i)];
        if (v == blank) continue;
        const auto key = std::make_pair(v, l);
        auto [it, inserted] = sum_acc.try_emplace(key, KahanVector(d));
        auto [it2, inserted2] = sumsq_acc.try_emplace(key, KahanVector(d));
        const Vector row = states.row(i).transpose();
        it->second.add(row);
        it2->second.add(row.cwiseProduct(row));
        ++counts[key];
      }
    }
  }

  SourceStats out;
  out.layer_count = layer_count;
  out.dim = d;
  out.vocab_hash = weights.vocab.hash();
  out.model_hash = weights.hash();
  out.centroids.reserve(static_cast<std::size_t>(layer_count));
  const double num_utts = static_cast<double>(corpus.size());
  for (int l = 0; l < layer_count; ++l)
    out.centroids.push_back(centroid_acc[static_cast<std::size_t>(l)].value() /
                            num_utts);
  for (const auto& [key, acc] : sum_acc) {
    const double n = static_cast<double>(counts.at(key));
    const Vector mean = acc.value() / n;
    const Vector meansq = sumsq_acc.at(key).value() / n;
    // Population variance; tiny negatives from rounding clip to zero.
    const Vector var = (meansq - mean.cwiseProduct(mean)).cwiseMax(0.0);
    out.token_means.emplace(key, mean);
    out.token_stds.emplace(key, var.cwiseSqrt());
    out.frame_counts.emplace(key, counts.at(key));
  }
  return out;
}

/// Frechet decomposition of the gap between two embedding populations:
/// squared distance of the means plus the covariance term
/// Tr(S_src + S_tgt - 2 (S_src S_tgt)^{1/2}).
struct ShiftReport {
  double mean_shift = 0.0;
  double covariance_shift = 0.0;
  std::optional<double> ratio;
  std::int64_t samples_src = 0;
  std::int64_t samples_tgt = 0;
};

namespace detail {

inline Matrix spd_sqrt(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> solver(m);
  if (solver.info() != Eigen::Success)
    throw NumericError("shift_report: eigendecomposition failed");
  const Vector roots = solver.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return solver.eigenvectors() * roots.asDiagonal() *
         solver.eigenvectors().transpose();
}

struct MeanCov {
  Vector mean;
  Matrix cov;
};

inline MeanCov mean_and_cov(const std::vector<Vector>& samples, double jitter) {
  const Eigen::Index d = samples.front().size();
  KahanVector sum(d);
  for (const auto& s : samples) sum.add(s);
  MeanCov mc;
  mc.mean = sum.value() / static_cast<double>(samples.size());
  mc.cov = Matrix::Zero(d, d);
  for (const auto& s : samples) {
    const Vector c = s - mc.mean;
    mc.cov.noalias() += c * c.transpose();
  }
  mc.cov /= static_cast<double>(samples.size() - 1);
  mc.cov += jitter * Matrix::Identity(d, d);
  return mc;
}

}  // namespace detail

inline ShiftReport shift_report(const std::vector<Vector>& embeddings_src,
                                const std::vector<Vector>& embeddings_tgt,
                                double jitter = 1e-6) {
  if (embeddings_src.size() < 2 || embeddings_tgt.size() < 2)
    throw std::invalid_argument("shift_report: need at least 2 samples per side");
  if (jitter < 0.0)
    throw std::invalid_argument("shift_report: jitter must be >= 0");

  const auto src = detail::mean_and_cov(embeddings_src, jitter);
  const auto tgt = detail::mean_and_cov(embeddings_tgt, jitter);

  ShiftReport report;
  report.samples_src = static_cast<std::int64_t>(embeddings_src.size());
  report.samples_tgt = static_cast<std::int64_t>(embeddings_tgt.size());
  report.mean_shift = (src.mean - tgt.mean).squaredNorm();

  // Tr((S_src S_tgt)^{1/2}) via the symmetric product
  // S_src^{1/2} S_tgt S_src^{1/2}, which is guaranteed real.
  const Matrix root_src = detail::spd_sqrt(src.cov);
  const Matrix inner = root_src * tgt.cov * root_src;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(0.5 * (inner + inner.transpose()));
  if (solver.info() != Eigen::Success)
    throw NumericError("shift_report: inner eigendecomposition failed");
  const double cross_trace =
      solver.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  report.covariance_shift = src.cov.trace() + tgt.cov.trace() - 2.0 * cross_trace;
  if (report.covariance_shift > 1e-12)
    report.ratio = report.mean_shift / report.covariance_shift;
  return report;
}

/// Utterance-level embeddings at one layer (default: the CNN output).
inline std::vector<Vector> utterance_embeddings(
    const ModelWeights& weights, const std::vector<Utterance>& corpus,
    int layer = 0) {
  std::vector<Vector> out;
  out.reserve(corpus.size());
  for (const auto& utt : corpus) {
    const auto bundle = model::forward(weights, utt);
    out.push_back(bundle.layer_states[static_cast<std::size_t>(layer)]
                      .colwise()
                      .mean()
                      .transpose());
  }
  return out;
}

struct ConditionShift {
  std::string label;
  ShiftReport report;
};

inline std::vector<ConditionShift> characterize_conditions(
    const ModelWeights& weights, const std::vector<Utterance>& source_corpus,
    const std::vector<std::pair<std::string, std::vector<Utterance>>>&
        condition_corpora,
    int layer = 0, double jitter = 1e-6) {
  const auto src = utterance_embeddings(weights, source_corpus, layer);
  std::vector<ConditionShift> table;
  table.reserve(condition_corpora.size());
  for (const auto& [label, corpus] : condition_corpora) {
    const auto tgt = utterance_embeddings(weights, corpus, layer);
    table.push_back({label, shift_report(src, tgt, jitter)});
  }
  return table;
}

}  // namespace ebats::stats
