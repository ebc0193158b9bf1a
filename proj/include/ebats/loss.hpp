#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "ebats/common.hpp"
#include "ebats/model.hpp"
#include "ebats/source_stats.hpp"

namespace ebats::loss {

using model::LatentBundle;
using stats::SourceStats;

struct LossConfig {
  double alpha = 1.0;
  double beta = 2.0;
  double h_min = 0.0;
  double h_max = 5.0;
  double c_max = 2.0;
  double epsilon = 1e-8;
  // Ablation toggle: when false the token term is dropped (c forced to 0).
  // The utterance term is ablated by setting beta to 0.
  bool use_token = true;
};

struct LossBreakdown {
  double l_ent = 0.0;
  double l_utt = 0.0;
  double l_token = 0.0;
  double confidence_c = 0.0;
  double total = 0.0;
  std::int64_t non_blank_count = 0;
  std::set<int> present_classes;
};

/// Mean Shannon entropy (natural log) over frames whose argmax is not
/// blank, with the selected frame count. (0, 0) when every frame
/// predicts blank — the trivial-solution regime the utterance loss
/// exists to penalize.
inline std::pair<double, std::int64_t> entropy_loss(const Matrix& posteriors,
                                                    int blank_index) {
  KahanSum total;
  std::int64_t selected = 0;
  for (Eigen::Index i = 0; i < posteriors.rows(); ++i) {
    int arg = 0;
    posteriors.row(i).maxCoeff(&arg);
    if (arg == blank_index) continue;
    ++selected;
    double h = 0.0;
    for (Eigen::Index j = 0; j < posteriors.cols(); ++j) {
      const double p = posteriors(i, j);
      if (p > 0.0) h -= p * std::log(p);
    }
    total.add(h);
  }
  if (selected == 0) return {0.0, 0};
  return {total.value() / static_cast<double>(selected), selected};
}

/// Mean over the L+1 layers of the squared distance between the
/// utterance's per-layer centroid and the stored source centroid.
inline double utterance_alignment_loss(
    const std::vector<Matrix>& layer_states,
    const std::vector<Vector>& source_centroids) {
  if (layer_states.size() != source_centroids.size())
    throw std::invalid_argument(
        "utterance_alignment_loss: layer count mismatch");
  KahanSum acc;
  for (std::size_t l = 0; l < layer_states.size(); ++l) {
    if (layer_states[l].cols() != source_centroids[l].size())
      throw std::invalid_argument(
          "utterance_alignment_loss: dimension mismatch");
    const Vector centroid = layer_states[l].colwise().mean().transpose();
    acc.add((centroid - source_centroids[l]).squaredNorm());
  }
  return acc.value() / static_cast<double>(layer_states.size());
}

/// Pseudo-labels frames by posterior argmax and, for every non-blank
/// class present both in the utterance and in the source statistics,
/// accumulates the squared distances of per-dimension means and
/// population stds, averaged over layers and compared classes.
inline std::pair<double, std::set<int>> token_alignment_loss(
    const std::vector<Matrix>& layer_states, const Matrix& posteriors,
    int blank_index, const SourceStats& source) {
  const Eigen::Index n = posteriors.rows();
  std::vector<int> labels(static_cast<std::size_t>(n));
  std::set<int> target_classes;
  for (Eigen::Index i = 0; i < n; ++i) {
    int arg = 0;
    posteriors.row(i).maxCoeff(&arg);
    labels[static_cast<std::size_t>(i)] = arg;
    if (arg != blank_index) target_classes.insert(arg);
  }

  std::set<int> compared;
  for (int v : target_classes)
    if (source.has_token(v, 0)) compared.insert(v);
  if (compared.empty()) return {0.0, {}};

  const auto layer_count = static_cast<int>(layer_states.size());
  KahanSum acc;
  for (int v : compared) {
    // Collect this class's frames once; identical rows for every layer.
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (labels[static_cast<std::size_t>(i)] == v) rows.push_back(i);
    const double count = static_cast<double>(rows.size());
    for (int l = 0; l < layer_count; ++l) {
      const Matrix& states = layer_states[static_cast<std::size_t>(l)];
      Vector mean = Vector::Zero(states.cols());
      for (const auto r : rows) mean += states.row(r).transpose();
      mean /= count;
      Vector var = Vector::Zero(states.cols());
      for (const auto r : rows) {
        const Vector c = states.row(r).transpose() - mean;
        var += c.cwiseProduct(c);
      }
      var /= count;  // population variance; a single frame gives std = 0
      const Vector std_dev = var.cwiseSqrt();
      acc.add((mean - source.token_means.at({v, l})).squaredNorm());
      acc.add((std_dev - source.token_stds.at({v, l})).squaredNorm());
    }
  }
  const double denom =
      static_cast<double>(layer_count) * static_cast<double>(compared.size());
  return {acc.value() / denom, compared};
}

/// Clamped min-max confidence: c = c_max - (H - h_min)/(h_max - h_min + eps)
/// with H = l_ent + l_utt clamped into [h_min, h_max].
inline double adaptive_confidence(double l_ent, double l_utt,
                                  const LossConfig& config) {
  const double h =
      std::clamp(l_ent + l_utt, config.h_min, config.h_max);
  return config.c_max -
         (h - config.h_min) / (config.h_max - config.h_min + config.epsilon);
}

/// Assembles the weighted total from already-computed terms. Split out
/// so ablation variants and arithmetic fixtures share one code path.
inline LossBreakdown combine_terms(double l_ent, std::int64_t non_blank_count,
                                   double l_utt, double l_token,
                                   std::set<int> present_classes,
                                   const LossConfig& config) {
  LossBreakdown b;
  b.l_ent = l_ent;
  b.non_blank_count = non_blank_count;
  b.l_utt = l_utt;
  b.l_token = l_token;
  b.present_classes = std::move(present_classes);
  b.confidence_c =
      config.use_token ? adaptive_confidence(l_ent, l_utt, config) : 0.0;
  b.total = config.alpha * b.l_ent + config.beta * b.l_utt +
            b.confidence_c * b.l_token;
  return b;
}

inline LossBreakdown total_loss(const LatentBundle& bundle,
                                const SourceStats& source,
                                const LossConfig& config, int blank_index) {
  if (static_cast<int>(bundle.layer_states.size()) != source.layer_count)
    throw std::invalid_argument("total_loss: stats layer count mismatch");
  const auto [l_ent, non_blank] = entropy_loss(bundle.posteriors, blank_index);
  const double l_utt =
      utterance_alignment_loss(bundle.layer_states, source.centroids);
  double l_token = 0.0;
  std::set<int> compared;
  if (config.use_token) {
    std::tie(l_token, compared) = token_alignment_loss(
        bundle.layer_states, bundle.posteriors, blank_index, source);
  }
  return combine_terms(l_ent, non_blank, l_utt, l_token, std::move(compared),
                       config);
}

}  // namespace ebats::loss
