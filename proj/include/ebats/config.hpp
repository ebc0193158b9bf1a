#pragma once

#include <cstdint>

#include "ebats/loss.hpp"
#include "ebats/t_ema.hpp"

namespace ebats {

struct EarlyStop {
  double min_delta = 0.001;
  int patience = 3;
};

struct EmaConfig {
  tema::Mode mode = tema::Mode::t_ema;
  double gamma = 0.9;
};

/// Knobs of the per-utterance adaptation loop and the stream driver.
struct AdaptConfig {
  int population_size = 50;  // J
  int max_iterations = 20;   // K
  EarlyStop early_stop;
  double sigma0 = 0.1;
  loss::LossConfig loss;
  EmaConfig ema;
  std::uint64_t seed = 0;
  int parallel_eval_width = 1;

  void validate() const {
    if (population_size < 4)
      throw ConfigError("population_size must be >= 4");
    if (max_iterations < 1) throw ConfigError("max_iterations must be >= 1");
    if (!(sigma0 > 0.0)) throw ConfigError("sigma0 must be > 0");
    if (early_stop.patience < 1) throw ConfigError("patience must be >= 1");
    if (!(ema.gamma >= 0.0 && ema.gamma < 1.0))
      throw ConfigError("gamma must be in [0, 1)");
    if (!(loss.h_max > loss.h_min)) throw ConfigError("h_max must exceed h_min");
    if (!(loss.c_max > 0.0)) throw ConfigError("c_max must be > 0");
    if (!(loss.epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
    if (parallel_eval_width < 1)
      throw ConfigError("parallel_eval_width must be >= 1");
  }
};

}  // namespace ebats
