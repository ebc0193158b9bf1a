#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ebats/common.hpp"
#include "ebats/vocab.hpp"

namespace ebats::model {

struct Dims {
  int d_in = 24;
  int d = 24;
  int layers = 2;
  int heads = 2;
  int ffn = 48;
  int vocab = 32;
};

struct Utterance {
  Matrix frames;  // N_t x d_in
  std::optional<std::string> reference;
  std::string utterance_id;
  std::string domain_tag;

  Eigen::Index frame_count() const { return frames.rows(); }
};

/// Everything the forward pass records for one utterance: the CNN
/// latents, the L+1 per-layer states (index 0 is the CNN output seen by
/// the transformer, 1..L the transformer layer outputs), and the
/// frame-level posteriors.
struct LatentBundle {
  Matrix cnn_out;                   // N_t x d
  std::vector<Matrix> layer_states; // L+1 entries, each N_t x d
  Matrix posteriors;                // N_t x |V|, row-stochastic
};

/// One width-3, stride-1 convolution layer with edge-replication padding.
struct ConvLayer {
  Matrix k_prev, k_center, k_next;  // each out_dim x in_dim
  Vector bias;
  bool gelu_activation = false;
};

struct TransformerLayer {
  Vector ln1_scale, ln1_offset;
  Matrix wq, wk, wv, wo;  // d x d, heads packed along rows
  Vector bq, bk, bv, bo;
  Vector ln2_scale, ln2_offset;
  Matrix ffn_w1;  // ffn x d
  Vector ffn_b1;
  Matrix ffn_w2;  // d x ffn
  Vector ffn_b2;
};

struct ModelWeights {
  Dims dims;
  Vocab vocab;
  ConvLayer conv1;  // linear
  ConvLayer conv2;  // smooth nonlinearity
  std::vector<TransformerLayer> layers;
  Matrix classifier_weight;  // |V| x d
  Vector classifier_bias;

  /// Hash over dims and all tensor payloads (f32-canonical), used to pin
  /// stats files to the model that produced them and to assert the
  /// forward-only contract.
  std::uint64_t hash() const;
};

namespace detail {

inline void hash_matrix(const Matrix& m, std::uint64_t& h) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const float f = static_cast<float>(m(i, j));
      h = fnv1a64(&f, sizeof(f), h);
    }
}

inline void hash_vector(const Vector& v, std::uint64_t& h) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const float f = static_cast<float>(v(i));
    h = fnv1a64(&f, sizeof(f), h);
  }
}

inline Matrix layer_norm(const Matrix& x, const Vector& scale,
                         const Vector& offset) {
  Matrix out(x.rows(), x.cols());
  constexpr double kEps = 1e-5;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double inv = 1.0 / std::sqrt(var + kEps);
    out.row(i) = ((x.row(i).array() - mean) * inv).matrix()
                     .cwiseProduct(scale.transpose()) +
                 offset.transpose();
  }
  return out;
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    out.row(i) = (e / e.sum()).matrix();
  }
  return out;
}

inline Matrix apply_conv(const ConvLayer& layer, const Matrix& input) {
  const Eigen::Index n = input.rows();
  Matrix out(n, layer.bias.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Index prev = std::max<Eigen::Index>(i - 1, 0);
    const Eigen::Index next = std::min<Eigen::Index>(i + 1, n - 1);
    Vector y = layer.k_prev * input.row(prev).transpose() +
               layer.k_center * input.row(i).transpose() +
               layer.k_next * input.row(next).transpose() + layer.bias;
    if (layer.gelu_activation)
      for (Eigen::Index j = 0; j < y.size(); ++j) y(j) = gelu(y(j));
    out.row(i) = y.transpose();
  }
  return out;
}

inline Matrix attention(const TransformerLayer& layer, const Matrix& x,
                        int heads) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index hd = d / heads;
  const Matrix q = x * layer.wq.transpose() +
                   Vector::Ones(n) * layer.bq.transpose();
  const Matrix k = x * layer.wk.transpose() +
                   Vector::Ones(n) * layer.bk.transpose();
  const Matrix v = x * layer.wv.transpose() +
                   Vector::Ones(n) * layer.bv.transpose();
  Matrix concat(n, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * hd, hd);
    const auto kh = k.middleCols(h * hd, hd);
    const auto vh = v.middleCols(h * hd, hd);
    const Matrix scores = softmax_rows(scale * (qh * kh.transpose()));
    concat.middleCols(h * hd, hd) = scores * vh;
  }
  return concat * layer.wo.transpose() + Vector::Ones(n) * layer.bo.transpose();
}

}  // namespace detail

inline std::uint64_t ModelWeights::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = fnv1a64(&dims, sizeof(dims), h);
  for (const ConvLayer* c : {&conv1, &conv2}) {
    detail::hash_matrix(c->k_prev, h);
    detail::hash_matrix(c->k_center, h);
    detail::hash_matrix(c->k_next, h);
    detail::hash_vector(c->bias, h);
  }
  for (const auto& l : layers) {
    detail::hash_vector(l.ln1_scale, h);
    detail::hash_vector(l.ln1_offset, h);
    detail::hash_matrix(l.wq, h);
    detail::hash_matrix(l.wk, h);
    detail::hash_matrix(l.wv, h);
    detail::hash_matrix(l.wo, h);
    detail::hash_vector(l.bq, h);
    detail::hash_vector(l.bk, h);
    detail::hash_vector(l.bv, h);
    detail::hash_vector(l.bo, h);
    detail::hash_vector(l.ln2_scale, h);
    detail::hash_vector(l.ln2_offset, h);
    detail::hash_matrix(l.ffn_w1, h);
    detail::hash_vector(l.ffn_b1, h);
    detail::hash_matrix(l.ffn_w2, h);
    detail::hash_vector(l.ffn_b2, h);
  }
  detail::hash_matrix(classifier_weight, h);
  detail::hash_vector(classifier_bias, h);
  return h;
}

/// Frame encoder h: two width-3 stride-1 convolutions, the first purely
/// linear and the second with a smooth nonlinearity. Output length
/// equals input length.
inline Matrix encode_cnn(const ModelWeights& weights, const Utterance& utt) {
  if (utt.frames.cols() != weights.dims.d_in)
    throw std::invalid_argument("encode_cnn: frame dimension != d_in");
  if (utt.frames.rows() < 1)
    throw std::invalid_argument("encode_cnn: utterance has no frames");
  const Matrix h1 = detail::apply_conv(weights.conv1, utt.frames);
  return detail::apply_conv(weights.conv2, h1);
}

/// Classifier stack g: pre-norm transformer layers with residual
/// connections, then a softmax head. Records all L+1 layer states.
inline LatentBundle forward_from_latent(const ModelWeights& weights,
                                        const Matrix& latent) {
  if (latent.cols() != weights.dims.d)
    throw std::invalid_argument("forward_from_latent: latent width != d");
  if (!latent.allFinite())
    throw std::invalid_argument("forward_from_latent: latent not finite");

  LatentBundle bundle;
  bundle.cnn_out = latent;
  bundle.layer_states.reserve(weights.layers.size() + 1);
  bundle.layer_states.push_back(latent);

  Matrix x = latent;
  const Eigen::Index n = x.rows();
  for (const auto& layer : weights.layers) {
    const Matrix normed = detail::layer_norm(x, layer.ln1_scale, layer.ln1_offset);
    x += detail::attention(layer, normed, weights.dims.heads);
    const Matrix normed2 = detail::layer_norm(x, layer.ln2_scale, layer.ln2_offset);
    Matrix hidden = normed2 * layer.ffn_w1.transpose() +
                    Vector::Ones(n) * layer.ffn_b1.transpose();
    for (Eigen::Index i = 0; i < hidden.rows(); ++i)
      for (Eigen::Index j = 0; j < hidden.cols(); ++j)
        hidden(i, j) = gelu(hidden(i, j));
    x += hidden * layer.ffn_w2.transpose() +
         Vector::Ones(n) * layer.ffn_b2.transpose();
    bundle.layer_states.push_back(x);
  }

  const Matrix logits = x * weights.classifier_weight.transpose() +
                        Vector::Ones(n) * weights.classifier_bias.transpose();
  bundle.posteriors = detail::softmax_rows(logits);
  return bundle;
}

/// Full pass with optional prompt injection: the prompt vector is added
/// to every row of the CNN output before the transformer stack runs.
inline LatentBundle forward(const ModelWeights& weights, const Utterance& utt,
                            const std::optional<Vector>& prompt = std::nullopt) {
  Matrix latent = encode_cnn(weights, utt);
  if (prompt.has_value()) {
    if (prompt->size() != weights.dims.d)
      throw std::invalid_argument("forward: prompt length != d");
    latent.rowwise() += prompt->transpose();
  }
  return forward_from_latent(weights, latent);
}

}  // namespace ebats::model
