#pragma once

#include "ebats/cma_es.hpp"
#include "ebats/common.hpp"
#include "ebats/config.hpp"
#include "ebats/corpus.hpp"
#include "ebats/ctc.hpp"
#include "ebats/harness.hpp"
#include "ebats/io.hpp"
#include "ebats/loss.hpp"
#include "ebats/model.hpp"
#include "ebats/prompt_adapt.hpp"
#include "ebats/source_stats.hpp"
#include "ebats/t_ema.hpp"
#include "ebats/vocab.hpp"
