#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "ebats/common.hpp"

namespace ebats::cma {

/// Search distribution of a (mu/mu_w, lambda) CMA-ES over R^d: mean,
/// full covariance, step size, and the two evolution paths, together
/// with the fixed recombination schedule.
struct CmaState {
  Vector mean;
  Matrix covariance;
  double step_size = 0.0;
  Vector path_sigma;
  Vector path_c;
  std::int64_t generation_count = 0;
  int population_size = 0;  // lambda
  int parent_count = 0;     // mu
  Vector recombination_weights;

  Eigen::Index dim() const { return mean.size(); }

  /// Total scalars carried across utterances; the engine's memory claim
  /// is asserted against this.
  std::int64_t state_element_count() const {
    return mean.size() + covariance.size() + path_sigma.size() +
           path_c.size() + recombination_weights.size() + 4;
  }
};

struct Candidate {
  Vector vector;
  std::optional<double> fitness;
};

namespace detail {

struct Eigensystem {
  Matrix basis;          // B, eigenvectors in columns
  Vector scales;         // D, sqrt of eigenvalues
  Vector scales_inverse; // 1/D
};

/// Eigendecomposition of the covariance with the jitter policy: one
/// retry with 1e-10*I added, then numeric-failure.
inline Eigensystem decompose(const Matrix& covariance) {
  Matrix c = covariance;
  for (int attempt = 0; attempt < 2; ++attempt) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(c);
    if (solver.info() == Eigen::Success &&
        solver.eigenvalues().minCoeff() >= 1e-12) {
      Eigensystem sys;
      sys.basis = solver.eigenvectors();
      sys.scales = solver.eigenvalues().cwiseSqrt();
      sys.scales_inverse = sys.scales.cwiseInverse();
      return sys;
    }
    c += 1e-10 * Matrix::Identity(c.rows(), c.cols());
  }
  throw NumericError("covariance matrix is numerically indefinite");
}

struct LearningRates {
  double mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n;
};

inline LearningRates rates_for(const CmaState& s) {
  const double d = static_cast<double>(s.dim());
  LearningRates r;
  r.mu_eff = 1.0 / s.recombination_weights.squaredNorm();
  r.c_sigma = (r.mu_eff + 2.0) / (d + r.mu_eff + 5.0);
  r.d_sigma =
      1.0 + 2.0 * std::max(0.0, std::sqrt((r.mu_eff - 1.0) / (d + 1.0)) - 1.0) +
      r.c_sigma;
  r.c_c = (4.0 + r.mu_eff / d) / (d + 4.0 + 2.0 * r.mu_eff / d);
  r.c_1 = 2.0 / ((d + 1.3) * (d + 1.3) + r.mu_eff);
  r.c_mu = std::min(1.0 - r.c_1, 2.0 * (r.mu_eff - 2.0 + 1.0 / r.mu_eff) /
                                     ((d + 2.0) * (d + 2.0) + r.mu_eff));
  r.chi_n = std::sqrt(d) * (1.0 - 1.0 / (4.0 * d) + 1.0 / (21.0 * d * d));
  return r;
}

}  // namespace detail

inline CmaState cma_init(int dim, int population_size, double initial_step,
                         const Vector& initial_mean) {
  if (dim < 1) throw std::invalid_argument("cma_init: dim must be >= 1");
  if (population_size < 4)
    throw std::invalid_argument("cma_init: population_size must be >= 4");
  if (!(initial_step > 0.0))
    throw std::invalid_argument("cma_init: initial_step must be > 0");
  if (initial_mean.size() != dim)
    throw std::invalid_argument("cma_init: initial_mean length != dim");

  CmaState s;
  s.mean = initial_mean;
  s.covariance = Matrix::Identity(dim, dim);
  s.step_size = initial_step;
  s.path_sigma = Vector::Zero(dim);
  s.path_c = Vector::Zero(dim);
  s.generation_count = 0;
  s.population_size = population_size;
  s.parent_count = population_size / 2;
  s.recombination_weights = Vector(s.parent_count);
  for (int i = 0; i < s.parent_count; ++i) {
    s.recombination_weights(i) =
        std::log(s.parent_count + 0.5) - std::log(i + 1.0);
  }
  s.recombination_weights /= s.recombination_weights.sum();
  return s;
}

/// Draws the full population m + sigma * B * D * z. Deterministic in the
/// seed; two calls with the same seed return identical lists.
inline std::vector<Candidate> cma_sample(const CmaState& state,
                                         std::uint64_t rng_seed) {
  const auto sys = detail::decompose(state.covariance);
  Rng rng(rng_seed);
  std::vector<Candidate> out(static_cast<std::size_t>(state.population_size));
  for (auto& cand : out) {
    const Vector z = rng.normal_vector(state.dim());
    cand.vector =
        state.mean + state.step_size * (sys.basis * (sys.scales.asDiagonal() * z));
  }
  return out;
}

/// One generation of the canonical update: weighted recombination of the
/// best mu candidates, rank-one + rank-mu covariance adaptation, and
/// cumulative step-size adaptation. Depends on fitness only through
/// ranks; ties break by candidate index.
inline CmaState cma_update(const CmaState& state,
                           const std::vector<Candidate>& candidates) {
  if (static_cast<int>(candidates.size()) != state.population_size)
    throw std::invalid_argument("cma_update: candidate count != population size");
  for (const auto& c : candidates) {
    if (!c.fitness.has_value() || std::isnan(*c.fitness))
      throw std::invalid_argument("cma_update: candidate fitness unset or NaN");
    if (c.vector.size() != state.dim())
      throw std::invalid_argument("cma_update: candidate dimension mismatch");
  }

  std::vector<int> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return *candidates[a].fitness < *candidates[b].fitness;
  });

  const auto rates = detail::rates_for(state);
  const auto sys = detail::decompose(state.covariance);
  const int mu = state.parent_count;

  CmaState next = state;
  next.mean = Vector::Zero(state.dim());
  for (int i = 0; i < mu; ++i)
    next.mean += state.recombination_weights(i) * candidates[order[i]].vector;

  const Vector y_w = (next.mean - state.mean) / state.step_size;

  // C^{-1/2} * y_w for the isotropic path.
  const Vector whitened =
      sys.basis * (sys.scales_inverse.asDiagonal() * (sys.basis.transpose() * y_w));
  next.path_sigma = (1.0 - rates.c_sigma) * state.path_sigma +
                    std::sqrt(rates.c_sigma * (2.0 - rates.c_sigma) * rates.mu_eff) *
                        whitened;

  const double gen = static_cast<double>(state.generation_count) + 1.0;
  const double ps_norm = next.path_sigma.norm();
  const bool hsig =
      ps_norm / std::sqrt(1.0 - std::pow(1.0 - rates.c_sigma, 2.0 * gen)) /
          rates.chi_n <
      1.4 + 2.0 / (static_cast<double>(state.dim()) + 1.0);

  next.path_c = (1.0 - rates.c_c) * state.path_c;
  if (hsig)
    next.path_c += std::sqrt(rates.c_c * (2.0 - rates.c_c) * rates.mu_eff) * y_w;

  Matrix rank_mu = Matrix::Zero(state.dim(), state.dim());
  for (int i = 0; i < mu; ++i) {
    const Vector y_i =
        (candidates[order[i]].vector - state.mean) / state.step_size;
    rank_mu.noalias() += state.recombination_weights(i) * (y_i * y_i.transpose());
  }
  const double hsig_correction =
      hsig ? 0.0 : rates.c_c * (2.0 - rates.c_c);
  next.covariance =
      (1.0 - rates.c_1 - rates.c_mu) * state.covariance +
      rates.c_1 * (next.path_c * next.path_c.transpose() +
                   hsig_correction * state.covariance) +
      rates.c_mu * rank_mu;
  next.covariance = 0.5 * (next.covariance + next.covariance.transpose()).eval();

  next.step_size =
      state.step_size *
      std::exp((rates.c_sigma / rates.d_sigma) * (ps_norm / rates.chi_n - 1.0));
  next.generation_count = state.generation_count + 1;
  return next;
}

/// True when the running best of the trace has failed to improve by at
/// least min_delta for the trailing `patience` entries.
inline bool cma_should_stop(const std::vector<double>& loss_trace,
                            double min_delta, int patience) {
  if (patience < 1)
    throw std::invalid_argument("cma_should_stop: patience must be >= 1");
  if (loss_trace.size() < 2) return false;
  double best = loss_trace.front();
  int streak = 0;
  for (std::size_t i = 1; i < loss_trace.size(); ++i) {
    const double x = loss_trace[i];
    if (best - x >= min_delta)
      streak = 0;
    else
      ++streak;
    best = std::min(best, x);
  }
  return streak >= patience;
}

/// Invariant check used by tests and by deserialization: symmetry,
/// positive definiteness, positive step, normalized weights.
inline void validate(const CmaState& s) {
  if (!(s.step_size > 0.0)) throw NumericError("CmaState: step_size <= 0");
  const double asym =
      (s.covariance - s.covariance.transpose()).cwiseAbs().maxCoeff();
  if (asym >= 1e-10) throw NumericError("CmaState: covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s.covariance);
  if (solver.info() != Eigen::Success || solver.eigenvalues().minCoeff() <= 0.0)
    throw NumericError("CmaState: covariance not positive definite");
  if (std::abs(s.recombination_weights.sum() - 1.0) > 1e-12)
    throw NumericError("CmaState: recombination weights do not sum to 1");
  for (Eigen::Index i = 1; i < s.recombination_weights.size(); ++i) {
    if (s.recombination_weights(i) > s.recombination_weights(i - 1))
      throw NumericError("CmaState: recombination weights not non-increasing");
  }
}

}  // namespace ebats::cma
