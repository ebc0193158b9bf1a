#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebats/config.hpp"
#include "ebats/ctc.hpp"
#include "ebats/io.hpp"
#include "ebats/prompt_adapt.hpp"
#include "ebats/source_stats.hpp"
#include "ebats/t_ema.hpp"

namespace ebats::harness {

using model::ModelWeights;
using model::Utterance;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config snapshots
// ---------------------------------------------------------------------------

inline json config_to_json(const AdaptConfig& c) {
  json j;
  j["population_size"] = c.population_size;
  j["max_iterations"] = c.max_iterations;
  j["early_stop"] = {{"min_delta", c.early_stop.min_delta},
                     {"patience", c.early_stop.patience}};
  j["sigma0"] = c.sigma0;
  j["loss"] = {{"alpha", c.loss.alpha},     {"beta", c.loss.beta},
               {"h_min", c.loss.h_min},     {"h_max", c.loss.h_max},
               {"c_max", c.loss.c_max},     {"epsilon", c.loss.epsilon},
               {"use_token", c.loss.use_token}};
  j["ema"] = {{"mode", tema::mode_name(c.ema.mode)}, {"gamma", c.ema.gamma}};
  j["seed"] = c.seed;
  j["parallel_eval_width"] = c.parallel_eval_width;
  return j;
}

inline tema::Mode mode_from_name(const std::string& name) {
  if (name == "t_ema") return tema::Mode::t_ema;
  if (name == "reset") return tema::Mode::reset;
  if (name == "continuous") return tema::Mode::continuous;
  throw ConfigError("unknown ema mode: " + name);
}

inline AdaptConfig config_from_json(const json& j) {
  AdaptConfig c;
  c.population_size = j.at("population_size");
  c.max_iterations = j.at("max_iterations");
  c.early_stop.min_delta = j.at("early_stop").at("min_delta");
  c.early_stop.patience = j.at("early_stop").at("patience");
  c.sigma0 = j.at("sigma0");
  const json& l = j.at("loss");
  c.loss.alpha = l.at("alpha");
  c.loss.beta = l.at("beta");
  c.loss.h_min = l.at("h_min");
  c.loss.h_max = l.at("h_max");
  c.loss.c_max = l.at("c_max");
  c.loss.epsilon = l.at("epsilon");
  c.loss.use_token = l.at("use_token");
  c.ema.mode = mode_from_name(j.at("ema").at("mode"));
  c.ema.gamma = j.at("ema").at("gamma");
  c.seed = j.at("seed");
  c.parallel_eval_width = j.at("parallel_eval_width");
  return c;
}

inline std::uint64_t config_hash(const AdaptConfig& c) {
  return fnv1a64(config_to_json(c).dump());
}

// ---------------------------------------------------------------------------
// Per-utterance records and aggregates
// ---------------------------------------------------------------------------

struct UtteranceRecord {
  int index = 0;
  std::string utterance_id, domain_tag, reference;
  std::string source_decoded, adapted_decoded;
  std::int64_t source_edit = 0, adapted_edit = 0, ref_words = 0;
  int iterations = 0;
  std::int64_t evaluations = 0;
  double best_loss = 0.0;
  std::vector<double> loss_trace;
  loss::LossBreakdown breakdown;
  std::int64_t frames = 0, source_non_blank = 0, adapted_non_blank = 0;
  std::int64_t non_finite_candidates = 0;

  double source_wer() const {
    return ref_words ? static_cast<double>(source_edit) / ref_words : 0.0;
  }
  double adapted_wer() const {
    return ref_words ? static_cast<double>(adapted_edit) / ref_words : 0.0;
  }
};

inline json record_to_json(const UtteranceRecord& r) {
  json b;
  b["l_ent"] = r.breakdown.l_ent;
  b["l_utt"] = r.breakdown.l_utt;
  b["l_token"] = r.breakdown.l_token;
  b["confidence_c"] = r.breakdown.confidence_c;
  b["total"] = r.breakdown.total;
  b["non_blank_count"] = r.breakdown.non_blank_count;
  b["present_classes"] = r.breakdown.present_classes;
  json j;
  j["index"] = r.index;
  j["utterance_id"] = r.utterance_id;
  j["domain_tag"] = r.domain_tag;
  j["reference"] = r.reference;
  j["source_decoded"] = r.source_decoded;
  j["adapted_decoded"] = r.adapted_decoded;
  j["source_edit_distance"] = r.source_edit;
  j["adapted_edit_distance"] = r.adapted_edit;
  j["ref_word_count"] = r.ref_words;
  j["source_wer"] = r.source_wer();
  j["adapted_wer"] = r.adapted_wer();
  j["iterations"] = r.iterations;
  j["evaluations"] = r.evaluations;
  j["best_loss"] = r.best_loss;
  j["loss_trace"] = r.loss_trace;
  j["breakdown"] = b;
  j["frames"] = r.frames;
  j["source_non_blank"] = r.source_non_blank;
  j["adapted_non_blank"] = r.adapted_non_blank;
  j["non_finite_candidates"] = r.non_finite_candidates;
  return j;
}

inline UtteranceRecord record_from_json(const json& j) {
  UtteranceRecord r;
  r.index = j.at("index");
  r.utterance_id = j.at("utterance_id");
  r.domain_tag = j.at("domain_tag");
  r.reference = j.at("reference");
  r.source_decoded = j.at("source_decoded");
  r.adapted_decoded = j.at("adapted_decoded");
  r.source_edit = j.at("source_edit_distance");
  r.adapted_edit = j.at("adapted_edit_distance");
  r.ref_words = j.at("ref_word_count");
  r.iterations = j.at("iterations");
  r.evaluations = j.at("evaluations");
  r.best_loss = j.at("best_loss");
  r.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  const json& b = j.at("breakdown");
  r.breakdown.l_ent = b.at("l_ent");
  r.breakdown.l_utt = b.at("l_utt");
  r.breakdown.l_token = b.at("l_token");
  r.breakdown.confidence_c = b.at("confidence_c");
  r.breakdown.total = b.at("total");
  r.breakdown.non_blank_count = b.at("non_blank_count");
  for (const auto& v : b.at("present_classes"))
    r.breakdown.present_classes.insert(v.get<int>());
  r.frames = j.at("frames");
  r.source_non_blank = j.at("source_non_blank");
  r.adapted_non_blank = j.at("adapted_non_blank");
  r.non_finite_candidates = j.at("non_finite_candidates");
  return r;
}

struct Aggregates {
  std::int64_t utterances = 0, ref_words = 0;
  std::int64_t source_edit = 0, adapted_edit = 0;
  std::int64_t evaluations = 0, unadapted_passes = 0;
  std::int64_t frames = 0, source_non_blank = 0, adapted_non_blank = 0;
  std::int64_t iterations = 0;

  void add(const UtteranceRecord& r) {
    ++utterances;
    ref_words += r.ref_words;
    source_edit += r.source_edit;
    adapted_edit += r.adapted_edit;
    evaluations += r.evaluations;
    ++unadapted_passes;
    frames += r.frames;
    source_non_blank += r.source_non_blank;
    adapted_non_blank += r.adapted_non_blank;
    iterations += r.iterations;
  }

  double source_wer() const {
    return ref_words ? static_cast<double>(source_edit) / ref_words : 0.0;
  }
  double adapted_wer() const {
    return ref_words ? static_cast<double>(adapted_edit) / ref_words : 0.0;
  }
  double mean_iterations() const {
    return utterances ? static_cast<double>(iterations) / utterances : 0.0;
  }
  double source_blank_fraction() const {
    return frames ? 1.0 - static_cast<double>(source_non_blank) / frames : 0.0;
  }
  double adapted_blank_fraction() const {
    return frames ? 1.0 - static_cast<double>(adapted_non_blank) / frames : 0.0;
  }
  std::int64_t total_forward_passes() const {
    return evaluations + unadapted_passes;
  }
};

struct RunResult {
  std::vector<UtteranceRecord> records;
  Aggregates aggregates;
  json config_snapshot;
  double wall_clock_sec = 0.0;
};

// ---------------------------------------------------------------------------
// Stream driver
// ---------------------------------------------------------------------------

struct StreamState {
  tema::EmaState ema;
  cma::CmaState next_cma;
};

inline StreamState initial_stream_state(const AdaptConfig& config, int dim) {
  const auto cma0 = cma::cma_init(dim, config.population_size, config.sigma0,
                                  Vector::Zero(dim));
  StreamState s{tema::ema_init(cma0, config.ema.gamma), cma0};
  return s;
}

/// Sequential per-utterance adaptation chained through the configured
/// T-EMA mode, with the unadapted decode recorded for comparison. The
/// per-utterance RNG seed derives from (config.seed, index), so a stream
/// resumed from a checkpoint replays identically.
inline RunResult run_stream(
    const AdaptConfig& config, const ModelWeights& weights,
    const stats::SourceStats& source, const std::vector<Utterance>& stream,
    const std::function<void(const UtteranceRecord&, const StreamState&)>&
        sink = {},
    std::optional<StreamState> start_state = std::nullopt, int start_index = 0,
    std::optional<int> stop_before = std::nullopt) {
  config.validate();
  if (source.model_hash != weights.hash())
    throw InputMismatchError("run_stream: stats were built for a different model");
  if (source.vocab_hash != weights.vocab.hash())
    throw InputMismatchError("run_stream: stats vocab mismatch");

  RunResult result;
  result.config_snapshot = config_to_json(config);
  StreamState state = start_state.has_value()
                          ? *start_state
                          : initial_stream_state(config, weights.dims.d);

  const int end = stop_before.has_value()
                      ? std::min<int>(*stop_before, static_cast<int>(stream.size()))
                      : static_cast<int>(stream.size());
  for (int t = start_index; t < end; ++t) {
    const Utterance& utt = stream[static_cast<std::size_t>(t)];

    const auto source_bundle = model::forward(weights, utt);
    const std::string source_decoded =
        ctc::greedy_decode(source_bundle.posteriors, weights.vocab);
    std::int64_t source_non_blank = 0;
    for (Eigen::Index i = 0; i < source_bundle.posteriors.rows(); ++i) {
      int arg = 0;
      source_bundle.posteriors.row(i).maxCoeff(&arg);
      if (arg != weights.vocab.blank_index) ++source_non_blank;
    }

    const auto outcome =
        adapt::adapt_utterance(weights, source, utt, state.next_cma, config,
                               mix_seed(config.seed, static_cast<std::uint64_t>(t)));

    UtteranceRecord r;
    r.index = t;
    r.utterance_id = utt.utterance_id;
    r.domain_tag = utt.domain_tag;
    r.reference = utt.reference.value_or("");
    r.source_decoded = source_decoded;
    r.adapted_decoded = outcome.decoded;
    const auto ref_words = ctc::split_words(r.reference);
    r.ref_words = static_cast<std::int64_t>(ref_words.size());
    r.source_edit =
        ctc::word_edit_distance(ctc::split_words(source_decoded), ref_words);
    r.adapted_edit =
        ctc::word_edit_distance(ctc::split_words(outcome.decoded), ref_words);
    r.iterations = outcome.iterations_run;
    r.evaluations = outcome.evaluations;
    r.best_loss = outcome.best_loss;
    r.loss_trace = outcome.loss_trace;
    r.breakdown = outcome.breakdown;
    r.frames = utt.frame_count();
    r.source_non_blank = source_non_blank;
    r.adapted_non_blank = outcome.breakdown.non_blank_count;
    r.non_finite_candidates = outcome.non_finite_candidates;

    state.ema = tema::ema_update(state.ema, outcome.final_cma);
    state.next_cma = tema::next_init(state.ema, config.ema.mode, outcome.final_cma);

    result.aggregates.add(r);
    if (sink) sink(r, state);
    result.records.push_back(std::move(r));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string loss_variant;  // "ent" | "ent+utt" | "full"
  tema::Mode ema_mode = tema::Mode::t_ema;
};

struct AblationRow {
  AblationVariant variant;
  double source_wer = 0.0;
  double adapted_wer = 0.0;
  double source_blank_fraction = 0.0;
  double adapted_blank_fraction = 0.0;
  double mean_iterations = 0.0;
};

inline AdaptConfig apply_variant(const AdaptConfig& base,
                                 const AblationVariant& variant) {
  AdaptConfig c = base;
  c.ema.mode = variant.ema_mode;
  if (variant.loss_variant == "ent") {
    c.loss.beta = 0.0;
    c.loss.use_token = false;
  } else if (variant.loss_variant == "ent+utt") {
    c.loss.use_token = false;
  } else if (variant.loss_variant != "full") {
    throw ConfigError("unknown loss variant: " + variant.loss_variant);
  }
  return c;
}

inline std::vector<AblationVariant> default_ablation_grid() {
  std::vector<AblationVariant> grid;
  for (const auto* lv : {"ent", "ent+utt", "full"})
    for (const auto mode :
         {tema::Mode::t_ema, tema::Mode::reset, tema::Mode::continuous})
      grid.push_back({lv, mode});
  return grid;
}

inline std::vector<AblationRow> run_ablation(
    const AdaptConfig& base, const ModelWeights& weights,
    const stats::SourceStats& source, const std::vector<Utterance>& stream,
    const std::vector<AblationVariant>& grid) {
  std::vector<AblationRow> rows;
  rows.reserve(grid.size());
  for (const auto& variant : grid) {
    const auto result =
        run_stream(apply_variant(base, variant), weights, source, stream);
    AblationRow row;
    row.variant = variant;
    row.source_wer = result.aggregates.source_wer();
    row.adapted_wer = result.aggregates.adapted_wer();
    row.source_blank_fraction = result.aggregates.source_blank_fraction();
    row.adapted_blank_fraction = result.aggregates.adapted_blank_fraction();
    row.mean_iterations = result.aggregates.mean_iterations();
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Run directory: streaming records, checkpoints, summaries
// ---------------------------------------------------------------------------

struct RunPaths {
  std::filesystem::path dir, result_json, utterances_jsonl, summary_csv,
      checkpoint, plot_svg;

  static RunPaths in(const std::filesystem::path& dir) {
    return {dir,
            dir / "result.json",
            dir / "utterances.jsonl",
            dir / "summary.csv",
            dir / "checkpoint.ebt",
            dir / "wer_by_condition.svg"};
  }
};

namespace detail {

struct TagGroup {
  Aggregates agg;
};

inline std::map<std::string, Aggregates> group_by_tag(
    const std::vector<UtteranceRecord>& records) {
  std::map<std::string, Aggregates> groups;
  for (const auto& r : records) groups[r.domain_tag].add(r);
  return groups;
}

inline std::string csv_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace detail

inline void write_summary_csv(const std::filesystem::path& path,
                              const std::vector<UtteranceRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "domain_tag,utterances,ref_words,source_wer,adapted_wer,"
         "mean_iterations,source_blank_fraction,adapted_blank_fraction\n";
  auto emit = [&](const std::string& tag, const Aggregates& a) {
    out << tag << ',' << a.utterances << ',' << a.ref_words << ','
        << detail::csv_double(a.source_wer()) << ','
        << detail::csv_double(a.adapted_wer()) << ','
        << detail::csv_double(a.mean_iterations()) << ','
        << detail::csv_double(a.source_blank_fraction()) << ','
        << detail::csv_double(a.adapted_blank_fraction()) << '\n';
  };
  Aggregates total;
  for (const auto& r : records) total.add(r);
  for (const auto& [tag, agg] : detail::group_by_tag(records)) emit(tag, agg);
  emit("TOTAL", total);
}

inline void write_ablation_csv(const std::filesystem::path& path,
                               const std::vector<AblationRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "loss_variant,ema_mode,source_wer,adapted_wer,"
         "source_blank_fraction,adapted_blank_fraction,mean_iterations\n";
  for (const auto& r : rows) {
    out << r.variant.loss_variant << ',' << tema::mode_name(r.variant.ema_mode)
        << ',' << detail::csv_double(r.source_wer) << ','
        << detail::csv_double(r.adapted_wer) << ','
        << detail::csv_double(r.source_blank_fraction) << ','
        << detail::csv_double(r.adapted_blank_fraction) << ','
        << detail::csv_double(r.mean_iterations) << '\n';
  }
}

inline void write_shift_csv(const std::filesystem::path& path,
                            const std::vector<stats::ConditionShift>& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "condition,mean_shift,covariance_shift,ratio,samples_src,samples_tgt\n";
  for (const auto& row : table) {
    out << row.label << ',' << detail::csv_double(row.report.mean_shift) << ','
        << detail::csv_double(row.report.covariance_shift) << ',';
    if (row.report.ratio.has_value())
      out << detail::csv_double(*row.report.ratio);
    out << ',' << row.report.samples_src << ',' << row.report.samples_tgt
        << '\n';
  }
}

/// Minimal static bar chart: source vs adapted WER per domain tag.
inline void write_wer_plot_svg(const std::filesystem::path& path,
                               const std::vector<UtteranceRecord>& records) {
  const auto groups = detail::group_by_tag(records);
  const int n = static_cast<int>(groups.size());
  const int width = 120 + n * 140, height = 320;
  double max_wer = 0.05;
  for (const auto& [tag, a] : groups)
    max_wer = std::max({max_wer, a.source_wer(), a.adapted_wer()});

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width
      << "' height='" << height << "'>\n";
  out << "<text x='10' y='20' font-size='14'>WER by condition (dark: source, "
         "light: adapted)</text>\n";
  int i = 0;
  for (const auto& [tag, a] : groups) {
    const int x0 = 60 + i * 140;
    const double src_h = 240.0 * a.source_wer() / max_wer;
    const double adp_h = 240.0 * a.adapted_wer() / max_wer;
    out << "<rect x='" << x0 << "' y='" << 280.0 - src_h
        << "' width='50' height='" << src_h << "' fill='#38508c'/>\n";
    out << "<rect x='" << x0 + 55 << "' y='" << 280.0 - adp_h
        << "' width='50' height='" << adp_h << "' fill='#7fa4d8'/>\n";
    out << "<text x='" << x0 << "' y='300' font-size='11'>" << tag
        << "</text>\n";
    ++i;
  }
  out << "</svg>\n";
}

/// Runs (or resumes) a stream into a run directory: appends one JSON
/// line per utterance, checkpoints after each, and writes result.json
/// and summary.csv on completion. Resuming replays nothing: finished
/// records are read back and the stream continues from the checkpoint.
inline RunResult run_to_dir(const AdaptConfig& config,
                            const ModelWeights& weights,
                            const stats::SourceStats& source,
                            const std::vector<Utterance>& stream,
                            const std::filesystem::path& dir, bool resume,
                            std::optional<int> stop_before = std::nullopt,
                            bool plot = false) {
  namespace fs = std::filesystem;
  const auto paths = RunPaths::in(dir);
  fs::create_directories(dir);
  const std::uint64_t cfg_hash = config_hash(config);

  std::vector<UtteranceRecord> finished;
  std::optional<StreamState> state;
  int start_index = 0;

  if (resume && fs::exists(paths.checkpoint)) {
    const auto cp = io::load_checkpoint(paths.checkpoint);
    if (cp.config_hash != cfg_hash)
      throw InputMismatchError("resume: config differs from checkpointed run");
    std::ifstream in(paths.utterances_jsonl);
    std::string line;
    while (std::getline(in, line) &&
           static_cast<int>(finished.size()) < cp.next_index) {
      if (!line.empty()) finished.push_back(record_from_json(json::parse(line)));
    }
    if (static_cast<int>(finished.size()) != cp.next_index)
      throw InputMismatchError("resume: record log shorter than checkpoint");
    in.close();
    // Drop any partial lines written after the last checkpoint.
    std::ofstream rewrite(paths.utterances_jsonl, std::ios::trunc);
    for (const auto& r : finished) rewrite << record_to_json(r).dump() << "\n";
    rewrite.close();
    start_index = cp.next_index;
    state = StreamState{cp.ema, cp.next_cma};
  } else {
    std::ofstream truncate(paths.utterances_jsonl, std::ios::trunc);
  }

  std::ofstream log(paths.utterances_jsonl, std::ios::app);
  if (!log) throw ConfigError("cannot write " + paths.utterances_jsonl.string());

  const auto t0 = std::chrono::steady_clock::now();
  auto sink = [&](const UtteranceRecord& r, const StreamState& s) {
    log << record_to_json(r).dump() << "\n";
    log.flush();
    io::StreamCheckpoint cp;
    cp.next_index = r.index + 1;
    cp.config_hash = cfg_hash;
    cp.ema = s.ema;
    cp.next_cma = s.next_cma;
    io::save_checkpoint(paths.checkpoint, cp);
  };
  auto partial = run_stream(config, weights, source, stream, sink, state,
                            start_index, stop_before);
  const auto t1 = std::chrono::steady_clock::now();

  RunResult result;
  result.config_snapshot = config_to_json(config);
  result.wall_clock_sec = std::chrono::duration<double>(t1 - t0).count();
  result.records = std::move(finished);
  for (auto& r : partial.records) result.records.push_back(std::move(r));
  for (const auto& r : result.records) result.aggregates.add(r);

  if (result.records.size() == stream.size()) {
    write_summary_csv(paths.summary_csv, result.records);
    json res;
    res["format_version"] = io::kFormatVersion;
    res["config"] = result.config_snapshot;
    res["aggregates"] = {
        {"utterances", result.aggregates.utterances},
        {"ref_words", result.aggregates.ref_words},
        {"source_edit_distance", result.aggregates.source_edit},
        {"adapted_edit_distance", result.aggregates.adapted_edit},
        {"source_wer", result.aggregates.source_wer()},
        {"adapted_wer", result.aggregates.adapted_wer()},
        {"mean_iterations", result.aggregates.mean_iterations()},
        {"total_forward_passes", result.aggregates.total_forward_passes()},
        {"evaluations", result.aggregates.evaluations},
        {"source_blank_fraction", result.aggregates.source_blank_fraction()},
        {"adapted_blank_fraction", result.aggregates.adapted_blank_fraction()}};
    res["wall_clock_sec"] = result.wall_clock_sec;
    std::ofstream out(paths.result_json, std::ios::trunc);
    out << res.dump(2) << "\n";
    if (plot) write_wer_plot_svg(paths.plot_svg, result.records);
  }
  return result;
}

}  // namespace ebats::harness
