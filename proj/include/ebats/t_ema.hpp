#pragma once

#include "ebats/cma_es.hpp"
#include "ebats/common.hpp"

namespace ebats::tema {

enum class Mode { t_ema, reset, continuous };

inline const char* mode_name(Mode m) {
  switch (m) {
    case Mode::t_ema: return "t_ema";
    case Mode::reset: return "reset";
    case Mode::continuous: return "continuous";
  }
  return "?";
}

/// Exponentially smoothed CMA-ES statistics carried across the utterance
/// stream, plus the frozen initial state for the reset ablation.
struct EmaState {
  Vector mean_ema;
  Matrix cov_ema;
  double step_ema = 0.0;
  double gamma = 0.9;
  cma::CmaState initial;
};

inline EmaState ema_init(const cma::CmaState& initial, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0))
    throw std::invalid_argument("ema_init: gamma must be in [0, 1)");
  EmaState s;
  s.mean_ema = initial.mean;
  s.cov_ema = initial.covariance;
  s.step_ema = initial.step_size;
  s.gamma = gamma;
  s.initial = initial;
  return s;
}

/// Blends mean, covariance, and step size with weight gamma on the old
/// value. Entrywise convex combination, so SPD is preserved.
inline EmaState ema_update(const EmaState& state,
                           const cma::CmaState& finished) {
  if (finished.dim() != state.mean_ema.size())
    throw std::invalid_argument("ema_update: dimension mismatch");
  EmaState next = state;
  const double g = state.gamma;
  next.mean_ema = g * state.mean_ema + (1.0 - g) * finished.mean;
  next.cov_ema = g * state.cov_ema + (1.0 - g) * finished.covariance;
  next.step_ema = g * state.step_ema + (1.0 - g) * finished.step_size;
  return next;
}

/// Produces the CMA-ES state the next utterance starts from. t_ema seeds
/// from the smoothed statistics with evolution paths zeroed (path
/// momentum is stale across utterances); reset replays the frozen
/// initial state; continuous passes the finished state through.
inline cma::CmaState next_init(const EmaState& state, Mode mode,
                               const cma::CmaState& finished) {
  switch (mode) {
    case Mode::reset:
      return state.initial;
    case Mode::continuous:
      return finished;
    case Mode::t_ema: {
      cma::CmaState s = state.initial;
      s.mean = state.mean_ema;
      s.covariance = state.cov_ema;
      s.step_size = state.step_ema;
      s.path_sigma = Vector::Zero(s.dim());
      s.path_c = Vector::Zero(s.dim());
      s.generation_count = 0;
      return s;
    }
  }
  throw std::invalid_argument("next_init: unknown mode");
}

}  // namespace ebats::tema
