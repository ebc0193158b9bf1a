#pragma once

#include <future>
#include <limits>
#include <string>
#include <vector>

#include "ebats/cma_es.hpp"
#include "ebats/common.hpp"
#include "ebats/config.hpp"
#include "ebats/ctc.hpp"
#include "ebats/loss.hpp"
#include "ebats/model.hpp"
#include "ebats/source_stats.hpp"

namespace ebats::adapt {

using model::ModelWeights;
using model::Utterance;

struct AdaptOutcome {
  Vector best_prompt;
  double best_loss = std::numeric_limits<double>::infinity();
  std::string decoded;
  int iterations_run = 0;
  std::vector<double> loss_trace;      // per-iteration best losses
  loss::LossBreakdown breakdown;       // at the best prompt
  cma::CmaState final_cma;
  std::int64_t evaluations = 0;        // candidate forward passes
  std::int64_t non_finite_candidates = 0;
};

namespace detail {

struct Evaluation {
  loss::LossBreakdown breakdown;
  Matrix posteriors;
};

inline Evaluation evaluate_prompt(const ModelWeights& weights,
                                  const stats::SourceStats& source,
                                  const loss::LossConfig& config,
                                  const Matrix& cnn_out, const Vector& prompt) {
  Matrix latent = cnn_out;
  latent.rowwise() += prompt.transpose();
  auto bundle = model::forward_from_latent(weights, latent);
  Evaluation ev;
  ev.breakdown =
      loss::total_loss(bundle, source, config, weights.vocab.blank_index);
  ev.posteriors = std::move(bundle.posteriors);
  return ev;
}

}  // namespace detail

/// One utterance of lightweight prompt adaptation: sample J prompts per
/// iteration, score each with the multi-scale loss over a shared cached
/// CNN output, keep the best prompt seen anywhere in the trajectory,
/// update CMA-ES, and stop early when the running best stalls. The model
/// weights are never modified.
inline AdaptOutcome adapt_utterance(const ModelWeights& weights,
                                    const stats::SourceStats& source,
                                    const Utterance& utterance,
                                    const cma::CmaState& cma_in,
                                    const AdaptConfig& config,
                                    std::uint64_t rng_seed) {
  if (cma_in.dim() != weights.dims.d)
    throw std::invalid_argument("adapt_utterance: prompt dimension != d");

  // h runs exactly once per utterance; only g re-runs per candidate.
  const Matrix cnn_out = model::encode_cnn(weights, utterance);

  AdaptOutcome outcome;
  outcome.best_prompt = Vector::Zero(weights.dims.d);
  cma::CmaState cma_state = cma_in;
  Matrix best_posteriors;
  bool have_best = false;

  const int width = std::max(1, config.parallel_eval_width);
  for (int k = 1; k <= config.max_iterations; ++k) {
    auto candidates = cma::cma_sample(cma_state, mix_seed(rng_seed, k));
    const int j_count = static_cast<int>(candidates.size());
    std::vector<detail::Evaluation> evals(static_cast<std::size_t>(j_count));

    if (width <= 1) {
      for (int j = 0; j < j_count; ++j)
        evals[static_cast<std::size_t>(j)] = detail::evaluate_prompt(
            weights, source, config.loss, cnn_out,
            candidates[static_cast<std::size_t>(j)].vector);
    } else {
      std::vector<std::future<void>> tasks;
      tasks.reserve(static_cast<std::size_t>(width));
      for (int w = 0; w < width; ++w) {
        tasks.push_back(std::async(std::launch::async, [&, w]() {
          for (int j = w; j < j_count; j += width)
            evals[static_cast<std::size_t>(j)] = detail::evaluate_prompt(
                weights, source, config.loss, cnn_out,
                candidates[static_cast<std::size_t>(j)].vector);
        }));
      }
      for (auto& t : tasks) t.get();
    }

    double generation_best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < j_count; ++j) {
      auto& cand = candidates[static_cast<std::size_t>(j)];
      const auto& ev = evals[static_cast<std::size_t>(j)];
      double fitness = ev.breakdown.total;
      if (!std::isfinite(fitness)) {
        fitness = std::numeric_limits<double>::infinity();
        ++outcome.non_finite_candidates;
      } else {
        if (fitness < outcome.best_loss) {
          outcome.best_loss = fitness;
          outcome.best_prompt = cand.vector;
          outcome.breakdown = ev.breakdown;
          best_posteriors = ev.posteriors;
          have_best = true;
        }
        generation_best = std::min(generation_best, fitness);
      }
      cand.fitness = fitness;
    }
    outcome.evaluations += j_count;

    cma_state = cma::cma_update(cma_state, candidates);
    outcome.loss_trace.push_back(generation_best);
    outcome.iterations_run = k;
    if (cma::cma_should_stop(outcome.loss_trace, config.early_stop.min_delta,
                             config.early_stop.patience))
      break;
  }

  if (!have_best) {
    // Every candidate in every generation was non-finite; fall back to
    // the identity prompt so the stream keeps moving.
    const auto ev = detail::evaluate_prompt(weights, source, config.loss,
                                            cnn_out, outcome.best_prompt);
    best_posteriors = ev.posteriors;
    outcome.breakdown = ev.breakdown;
  }
  outcome.decoded = ctc::greedy_decode(best_posteriors, weights.vocab);
  outcome.final_cma = std::move(cma_state);
  return outcome;
}

}  // namespace ebats::adapt
