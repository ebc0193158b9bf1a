#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ebats/common.hpp"
#include "ebats/ctc.hpp"
#include "ebats/model.hpp"
#include "ebats/vocab.hpp"

namespace ebats::corpus {

using model::ModelWeights;
using model::Utterance;

// ---------------------------------------------------------------------------
// Oracle model construction
// ---------------------------------------------------------------------------

struct OracleOptions {
  double jitter_radius = 0.12;    // clean frame jitter, uniform in a ball
  double min_separation = 1.2;    // prototype pairwise + origin distance
  double prototype_radius = 3.0;  // prototypes drawn inside this ball
  double side_tap = 0.05;         // relative weight of the outer kernel taps
  double gelu_bias = 12.0;        // holds conv2 pre-activations in the flat
                                  // tail of the nonlinearity
  double residual_scale = 5e-3;   // transformer residual output scale
  double posterior_tau = 0.15;    // classifier temperature
  double blank_margin = 0.0;      // additive blank logit bias (distance^2 units)
  int max_attempts = 64;
};

/// Constructed model plus everything the corpus generator and the tests
/// need to reason about it analytically: the input-space prototypes, their
/// latent images, the blank anchor, and the CNN's effective linear map A
/// (latent shift per unit constant input shift).
struct Oracle {
  ModelWeights weights;
  Matrix prototypes;     // (|V|-1) x d_in, row v-1 for non-blank class v
  Matrix latent_images;  // (|V|-1) x d
  Vector blank_image;    // latent image of the zero frame
  Matrix effective_map;  // A, d x d_in
  double jitter_radius = 0.0;
  int attempts_used = 0;

  Vector prototype_for(int class_id) const {
    return prototypes.row(class_id - 1).transpose();
  }

  /// Input-space vector whose induced latent shift is exactly `latent_shift`.
  Vector input_shift_for(const Vector& latent_shift) const {
    const Matrix gram = effective_map * effective_map.transpose();
    return effective_map.transpose() * gram.ldlt().solve(latent_shift);
  }
};

namespace detail {

inline Matrix random_orthogonal(Rng& rng, Eigen::Index n) {
  Matrix g(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  // Fix signs so the factorization is unique given the draw.
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

inline Matrix random_gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                              double scale) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
  return m;
}

/// Latent image of a frame vector inside a long constant segment.
inline Vector constant_segment_image(const ModelWeights& weights,
                                     const Vector& input_frame) {
  Utterance utt;
  utt.frames = Matrix::Zero(3, input_frame.size());
  utt.frames.rowwise() = input_frame.transpose();
  return model::encode_cnn(weights, utt).row(1).transpose();
}

}  // namespace detail

inline Oracle build_oracle(std::uint64_t seed, const model::Dims& dims,
                           const OracleOptions& opts = {}) {
  if (dims.d > dims.d_in)
    throw std::invalid_argument("build_oracle: requires d <= d_in");
  if (dims.d % dims.heads != 0)
    throw std::invalid_argument("build_oracle: d must divide by heads");

  const Vocab vocab = default_vocab();
  const int num_protos = vocab.size() - 1;

  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(attempt)));

    ModelWeights w;
    w.dims = dims;
    w.dims.vocab = vocab.size();
    w.vocab = vocab;

    // conv1: purely linear, orthonormal-row center tap.
    const Matrix base =
        detail::random_orthogonal(rng, dims.d_in).topRows(dims.d);
    w.conv1.k_center = base;
    w.conv1.k_prev = opts.side_tap * base;
    w.conv1.k_next = opts.side_tap * base;
    w.conv1.bias = Vector::Zero(dims.d);
    w.conv1.gelu_activation = false;

    // conv2: orthogonal rotation with a large positive bias; the smooth
    // nonlinearity then acts as identity-plus-constant to ~1e-15, which
    // is what makes the translation law exact for this model.
    const Matrix rot = detail::random_orthogonal(rng, dims.d);
    w.conv2.k_center = rot;
    w.conv2.k_prev = opts.side_tap * rot;
    w.conv2.k_next = opts.side_tap * rot;
    w.conv2.bias = Vector::Constant(dims.d, opts.gelu_bias);
    w.conv2.gelu_activation = true;

    const double tap_gain = (1.0 + 2.0 * opts.side_tap);
    const Matrix effective_map = (tap_gain * tap_gain) * (rot * base);

    // Prototypes by dart throwing, kept away from each other and from
    // the origin (the blank anchor).
    Matrix prototypes(num_protos, dims.d_in);
    bool placed_all = true;
    for (int p = 0; p < num_protos && placed_all; ++p) {
      bool placed = false;
      for (int trial = 0; trial < 10000; ++trial) {
        const Vector x = rng.ball(dims.d_in, opts.prototype_radius);
        if (x.norm() < opts.min_separation) continue;
        bool ok = true;
        for (int q = 0; q < p; ++q) {
          if ((x - prototypes.row(q).transpose()).norm() < opts.min_separation) {
            ok = false;
            break;
          }
        }
        if (ok) {
          prototypes.row(p) = x.transpose();
          placed = true;
          break;
        }
      }
      placed_all = placed;
    }
    if (!placed_all) continue;

    // Transformer stack: residual branches scaled near zero so layer
    // states stay close to the injected latent.
    w.layers.clear();
    for (int l = 0; l < dims.layers; ++l) {
      model::TransformerLayer layer;
      layer.ln1_scale = Vector::Ones(dims.d);
      layer.ln1_offset = Vector::Zero(dims.d);
      const double qk_scale = 0.3 / std::sqrt(static_cast<double>(dims.d));
      layer.wq = detail::random_gaussian(rng, dims.d, dims.d, qk_scale);
      layer.wk = detail::random_gaussian(rng, dims.d, dims.d, qk_scale);
      layer.wv = detail::random_gaussian(rng, dims.d, dims.d, qk_scale);
      layer.wo = detail::random_gaussian(
          rng, dims.d, dims.d,
          opts.residual_scale / std::sqrt(static_cast<double>(dims.d)));
      layer.bq = Vector::Zero(dims.d);
      layer.bk = Vector::Zero(dims.d);
      layer.bv = Vector::Zero(dims.d);
      layer.bo = Vector::Zero(dims.d);
      layer.ln2_scale = Vector::Ones(dims.d);
      layer.ln2_offset = Vector::Zero(dims.d);
      layer.ffn_w1 = detail::random_gaussian(
          rng, dims.ffn, dims.d, 0.3 / std::sqrt(static_cast<double>(dims.d)));
      layer.ffn_b1 = Vector::Zero(dims.ffn);
      layer.ffn_w2 = detail::random_gaussian(
          rng, dims.d, dims.ffn,
          opts.residual_scale / std::sqrt(static_cast<double>(dims.ffn)));
      layer.ffn_b2 = Vector::Zero(dims.d);
      w.layers.push_back(std::move(layer));
    }

    // Latent geometry.
    const Vector blank_image =
        detail::constant_segment_image(w, Vector::Zero(dims.d_in));
    Matrix latent_images(num_protos, dims.d);
    for (int p = 0; p < num_protos; ++p)
      latent_images.row(p) =
          detail::constant_segment_image(w, prototypes.row(p).transpose())
              .transpose();

    // Latent separation must dominate the worst-case latent jitter.
    const double latent_jitter_bound =
        tap_gain * tap_gain * opts.jitter_radius;
    double min_latent_sep = std::numeric_limits<double>::infinity();
    for (int p = 0; p < num_protos; ++p) {
      min_latent_sep = std::min(
          min_latent_sep,
          (latent_images.row(p).transpose() - blank_image).norm());
      for (int q = p + 1; q < num_protos; ++q)
        min_latent_sep =
            std::min(min_latent_sep,
                     (latent_images.row(p) - latent_images.row(q)).norm());
    }
    if (min_latent_sep < 4.0 * latent_jitter_bound) continue;

    // Nearest-image classifier in linear form:
    // logit_v = (2 <z, img_v> - ||img_v||^2) / tau.
    const double tau = opts.posterior_tau;
    w.classifier_weight = Matrix::Zero(vocab.size(), dims.d);
    w.classifier_bias = Vector::Zero(vocab.size());
    w.classifier_weight.row(vocab.blank_index) =
        (2.0 / tau) * blank_image.transpose();
    w.classifier_bias(vocab.blank_index) =
        (-blank_image.squaredNorm() + opts.blank_margin) / tau;
    for (int p = 0; p < num_protos; ++p) {
      const int v = p + 1;
      w.classifier_weight.row(v) = (2.0 / tau) * latent_images.row(p);
      w.classifier_bias(v) = -latent_images.row(p).squaredNorm() / tau;
    }

    // Constructive decode check: every class's isolated segment must
    // decode to exactly its own token.
    bool decodable = true;
    for (int p = 0; p < num_protos && decodable; ++p) {
      Utterance probe;
      probe.frames = Matrix::Zero(6, dims.d_in);
      probe.frames.row(2) = prototypes.row(p);
      probe.frames.row(3) = prototypes.row(p);
      const auto bundle = model::forward(w, probe);
      const std::string expect =
          (p + 1 == vocab.word_sep_index)
              ? " "
              : vocab.tokens[static_cast<std::size_t>(p + 1)];
      decodable = ctc::greedy_decode(bundle.posteriors, vocab) == expect;
    }
    if (!decodable) continue;

    Oracle oracle;
    oracle.weights = std::move(w);
    oracle.prototypes = std::move(prototypes);
    oracle.latent_images = std::move(latent_images);
    oracle.blank_image = blank_image;
    oracle.effective_map = effective_map;
    oracle.jitter_radius = opts.jitter_radius;
    oracle.attempts_used = attempt + 1;
    return oracle;
  }
  throw GenerationError("build_oracle: separation constraint unsatisfiable",
                        opts.max_attempts);
}

// ---------------------------------------------------------------------------
// Corpus specification and generation
// ---------------------------------------------------------------------------

enum class ConditionKind { clean, gaussian, translation, covariance_scale, mixed };

struct Condition {
  ConditionKind kind = ConditionKind::clean;
  std::string label;          // domain tag; defaulted from the kind
  double sigma = 0.0;         // gaussian
  Vector shift;               // translation, input space
  double scale_lo = 1.0;      // covariance_scale
  double scale_hi = 1.0;
  std::vector<std::pair<Condition, int>> segments;  // mixed

  std::string tag() const {
    if (!label.empty()) return label;
    switch (kind) {
      case ConditionKind::clean: return "clean";
      case ConditionKind::gaussian: {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "gaussian(%.6g)", sigma);
        return buf;
      }
      case ConditionKind::translation: return "translation";
      case ConditionKind::covariance_scale: return "covariance_scale";
      case ConditionKind::mixed: return "mixed";
    }
    return "?";
  }

  static Condition clean_cond() { return {}; }
  static Condition gaussian_cond(double sigma) {
    Condition c;
    c.kind = ConditionKind::gaussian;
    c.sigma = sigma;
    return c;
  }
  static Condition translation_cond(Vector shift, std::string label = {}) {
    Condition c;
    c.kind = ConditionKind::translation;
    c.shift = std::move(shift);
    c.label = std::move(label);
    return c;
  }
  static Condition covariance_scale_cond(double lo, double hi) {
    Condition c;
    c.kind = ConditionKind::covariance_scale;
    c.scale_lo = lo;
    c.scale_hi = hi;
    return c;
  }
  static Condition mixed_cond(std::vector<std::pair<Condition, int>> segments) {
    Condition c;
    c.kind = ConditionKind::mixed;
    c.segments = std::move(segments);
    return c;
  }
};

struct CorpusSpec {
  std::uint64_t seed = 0;
  int num_utterances = 0;
  int tokens_min = 6, tokens_max = 12;            // letters per utterance
  int frames_per_token_min = 2, frames_per_token_max = 4;
  int gap_min = 1, gap_max = 3;                   // blank frames between tokens
  int d_in = 24;
  Condition condition;
  std::string id_prefix = "utt";
};

namespace detail {

inline void apply_condition(const Condition& cond, Matrix& frames, Rng& rng,
                            std::string& tag) {
  tag = cond.tag();
  switch (cond.kind) {
    case ConditionKind::clean:
      break;
    case ConditionKind::gaussian:
      for (Eigen::Index i = 0; i < frames.rows(); ++i)
        for (Eigen::Index j = 0; j < frames.cols(); ++j)
          frames(i, j) += cond.sigma * rng.normal();
      break;
    case ConditionKind::translation:
      if (cond.shift.size() != frames.cols())
        throw std::invalid_argument("translation shift dimension mismatch");
      frames.rowwise() += cond.shift.transpose();
      break;
    case ConditionKind::covariance_scale:
      frames *= rng.uniform(cond.scale_lo, cond.scale_hi);
      break;
    case ConditionKind::mixed:
      throw std::invalid_argument("mixed condition must be resolved per segment");
  }
}

inline const Condition& segment_condition(const Condition& mixed, int index) {
  int cursor = 0;
  for (const auto& [sub, count] : mixed.segments) {
    cursor += count;
    if (index < cursor) return sub;
  }
  return mixed.segments.back().first;
}

}  // namespace detail

/// Deterministic synthetic stream: random words over a-z rendered as
/// prototype segments with jitter, separated by blank gaps, with the
/// spec's condition applied on top. Content draws and condition draws
/// use independent per-utterance streams, so two specs differing only in
/// condition share identical underlying clean utterances.
inline std::vector<Utterance> generate(const CorpusSpec& spec,
                                       const Oracle& oracle) {
  if (spec.d_in != oracle.weights.dims.d_in)
    throw std::invalid_argument("generate: d_in mismatch with oracle");
  if (spec.tokens_min < 1 || spec.tokens_max < spec.tokens_min ||
      spec.frames_per_token_min < 1 ||
      spec.frames_per_token_max < spec.frames_per_token_min ||
      spec.gap_min < 0 || spec.gap_max < spec.gap_min)
    throw std::invalid_argument("generate: empty range in spec");

  const Vocab& vocab = oracle.weights.vocab;
  std::vector<Utterance> corpus;
  corpus.reserve(static_cast<std::size_t>(spec.num_utterances));

  for (int t = 0; t < spec.num_utterances; ++t) {
    Rng content(mix_seed(mix_seed(spec.seed, 0xC0DEC5ULL),
                         static_cast<std::uint64_t>(t)));
    Rng noise(mix_seed(mix_seed(spec.seed, 0x5EED5ULL),
                       static_cast<std::uint64_t>(t)));

    const int letter_total = static_cast<int>(
        content.uniform_int(spec.tokens_min, spec.tokens_max));
    std::vector<int> token_ids;
    std::string reference;
    int remaining = letter_total;
    while (remaining > 0) {
      const int word_len =
          std::min<int>(remaining, static_cast<int>(content.uniform_int(1, 4)));
      if (!reference.empty()) {
        reference += ' ';
        token_ids.push_back(vocab.word_sep_index);
      }
      for (int i = 0; i < word_len; ++i) {
        const char c = static_cast<char>('a' + content.uniform_int(0, 25));
        reference += c;
        token_ids.push_back(letter_index(c));
      }
      remaining -= word_len;
    }

    std::vector<Vector> rows;
    auto emit_gap = [&]() {
      const int g = static_cast<int>(content.uniform_int(spec.gap_min, spec.gap_max));
      for (int i = 0; i < g; ++i)
        rows.push_back(content.ball(spec.d_in, oracle.jitter_radius));
    };
    emit_gap();
    for (const int id : token_ids) {
      const int f = static_cast<int>(content.uniform_int(
          spec.frames_per_token_min, spec.frames_per_token_max));
      const Vector proto = oracle.prototype_for(id);
      for (int i = 0; i < f; ++i)
        rows.push_back(proto + content.ball(spec.d_in, oracle.jitter_radius));
      emit_gap();
    }

    Utterance utt;
    utt.frames = Matrix(static_cast<Eigen::Index>(rows.size()), spec.d_in);
    for (std::size_t i = 0; i < rows.size(); ++i)
      utt.frames.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    utt.reference = reference;

    const Condition& cond =
        spec.condition.kind == ConditionKind::mixed
            ? detail::segment_condition(spec.condition, t)
            : spec.condition;
    detail::apply_condition(cond, utt.frames, noise, utt.domain_tag);

    char id_buf[64];
    std::snprintf(id_buf, sizeof(id_buf), "%s-%05d", spec.id_prefix.c_str(), t);
    utt.utterance_id = id_buf;
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Calibration of the shipped shift conditions
// ---------------------------------------------------------------------------

/// Corpus WER of plain greedy decoding, no adaptation.
inline double unadapted_wer(const ModelWeights& weights,
                            const std::vector<Utterance>& corpus) {
  std::int64_t edits = 0, words = 0;
  for (const auto& utt : corpus) {
    const auto bundle = model::forward(weights, utt);
    const std::string hyp = ctc::greedy_decode(bundle.posteriors, weights.vocab);
    const auto ref_words = ctc::split_words(*utt.reference);
    edits += ctc::word_edit_distance(ctc::split_words(hyp), ref_words);
    words += static_cast<std::int64_t>(ref_words.size());
  }
  return static_cast<double>(edits) / static_cast<double>(words);
}

/// Latent direction of the shipped translation shift: from the letter
/// image centroid toward the blank anchor, the direction along which
/// entropy-only adaptation can collapse to all-blank predictions.
inline Vector shift_latent_direction(const Oracle& oracle) {
  const Vector centroid =
      oracle.latent_images.colwise().mean().transpose();
  Vector dir = oracle.blank_image - centroid;
  return dir / dir.norm();
}

struct CalibrationResult {
  double value = 0.0;   // shift magnitude or noise sigma
  double wer = 0.0;     // unadapted WER it produces on the probe corpus
};

namespace detail {

/// Smallest x in [lo, hi] (log-bisection) whose probe WER lands in
/// [target_lo, target_hi]; falls back to the closest endpoint seen.
template <typename WerFn>
CalibrationResult bisect_to_window(WerFn&& wer_of, double lo, double hi,
                                   double target_lo, double target_hi) {
  double wer_hi = wer_of(hi);
  int expand = 0;
  while (wer_hi < target_lo && expand++ < 6) {
    hi *= 2.0;
    wer_hi = wer_of(hi);
  }
  CalibrationResult best{hi, wer_hi};
  for (int iter = 0; iter < 24; ++iter) {
    const double mid = std::sqrt(lo * hi);
    const double w = wer_of(mid);
    if (w >= target_lo && w <= target_hi) return {mid, w};
    if (w < target_lo)
      lo = mid;
    else {
      hi = mid;
      best = {mid, w};
    }
  }
  return best;
}

}  // namespace detail

/// Scales the translation shift until the probe corpus degrades into the
/// target unadapted-WER window. Deterministic given seeds.
inline CalibrationResult calibrate_translation_scale(
    const Oracle& oracle, const CorpusSpec& base_spec, double target_lo = 0.35,
    double target_hi = 0.55, int probe_utterances = 40) {
  const Vector dir = shift_latent_direction(oracle);
  auto wer_of = [&](double scale) {
    CorpusSpec probe = base_spec;
    probe.num_utterances = probe_utterances;
    probe.condition =
        Condition::translation_cond(oracle.input_shift_for(scale * dir));
    return unadapted_wer(oracle.weights, generate(probe, oracle));
  };
  return detail::bisect_to_window(wer_of, 0.01, 1.0, target_lo, target_hi);
}

/// Finds the top rung of the graded-noise ladder: the sigma whose probe
/// WER lands in the target window.
inline CalibrationResult calibrate_noise_sigma(const Oracle& oracle,
                                               const CorpusSpec& base_spec,
                                               double target_lo = 0.40,
                                               double target_hi = 0.60,
                                               int probe_utterances = 40) {
  auto wer_of = [&](double sigma) {
    CorpusSpec probe = base_spec;
    probe.num_utterances = probe_utterances;
    probe.condition = Condition::gaussian_cond(sigma);
    return unadapted_wer(oracle.weights, generate(probe, oracle));
  };
  return detail::bisect_to_window(wer_of, 1e-3, 0.5, target_lo, target_hi);
}

}  // namespace ebats::corpus
