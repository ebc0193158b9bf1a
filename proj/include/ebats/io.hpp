#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebats/cma_es.hpp"
#include "ebats/common.hpp"
#include "ebats/corpus.hpp"
#include "ebats/model.hpp"
#include "ebats/source_stats.hpp"
#include "ebats/t_ema.hpp"

namespace ebats::io {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Shared binary container: magic, little-endian u64 header length, JSON
// header, raw little-endian float payload. Weight archives use f32
// tensors; stats and checkpoints use f64 so save/load is lossless.
// ---------------------------------------------------------------------------

inline constexpr char kMagic[8] = {'E', 'B', 'A', 'T', 'S', 'B', 'I', 'N'};
inline constexpr int kFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Matrix data;  // vectors as n x 1
  std::string dtype = "f32";
};

struct Container {
  json header;
  std::map<std::string, Matrix> tensors;

  const Matrix& tensor(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw InputMismatchError("container: missing tensor '" + name + "'");
    return it->second;
  }
  Vector vector_tensor(const std::string& name) const {
    const Matrix& m = tensor(name);
    if (m.cols() != 1)
      throw InputMismatchError("container: tensor '" + name + "' is not a vector");
    return m.col(0);
  }
};

inline void write_container(const std::filesystem::path& path,
                            const std::string& kind, const json& meta,
                            const std::vector<NamedTensor>& tensors) {
  json header;
  header["format_version"] = kFormatVersion;
  header["kind"] = kind;
  header["meta"] = meta;
  header["tensors"] = json::array();

  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::uint64_t elems =
        static_cast<std::uint64_t>(t.data.rows()) *
        static_cast<std::uint64_t>(t.data.cols());
    const std::uint64_t bytes = elems * (t.dtype == "f64" ? 8 : 4);
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", {t.data.rows(), t.data.cols()}},
                                 {"dtype", t.dtype},
                                 {"offset", offset},
                                 {"byte_length", bytes}});
    offset += bytes;
  }

  const std::string header_text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write file: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t header_len = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(),
            static_cast<std::streamsize>(header_text.size()));
  for (const auto& t : tensors) {
    if (t.dtype == "f64") {
      for (Eigen::Index i = 0; i < t.data.rows(); ++i)
        for (Eigen::Index j = 0; j < t.data.cols(); ++j) {
          const double v = t.data(i, j);
          out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    } else {
      for (Eigen::Index i = 0; i < t.data.rows(); ++i)
        for (Eigen::Index j = 0; j < t.data.cols(); ++j) {
          const float v = static_cast<float>(t.data(i, j));
          out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
  }
  if (!out) throw ConfigError("write failed: " + path.string());
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw InputMismatchError("not an EBATS container: " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw InputMismatchError("truncated container: " + path.string());

  Container c;
  c.header = json::parse(header_text);
  if (c.header.value("format_version", -1) != kFormatVersion)
    throw InputMismatchError("unsupported format_version in " + path.string());

  const std::streampos payload_start = in.tellg();
  for (const auto& t : c.header.at("tensors")) {
    const std::string name = t.at("name");
    const Eigen::Index rows = t.at("shape")[0];
    const Eigen::Index cols = t.at("shape")[1];
    const std::string dtype = t.at("dtype");
    const std::uint64_t offset = t.at("offset");
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    Matrix m(rows, cols);
    if (dtype == "f64") {
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          double v;
          in.read(reinterpret_cast<char*>(&v), sizeof(v));
          m(i, j) = v;
        }
    } else if (dtype == "f32") {
      for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          float v;
          in.read(reinterpret_cast<char*>(&v), sizeof(v));
          m(i, j) = static_cast<double>(v);
        }
    } else {
      throw InputMismatchError("unknown dtype '" + dtype + "' in " +
                               path.string());
    }
    if (!in) throw InputMismatchError("truncated payload: " + path.string());
    c.tensors.emplace(name, std::move(m));
  }
  return c;
}

/// Header JSON without loading the payload; backs `inspect` and
/// `model describe`.
inline json read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw InputMismatchError("not an EBATS container: " + path.string());
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw InputMismatchError("truncated container: " + path.string());
  return json::parse(header_text);
}

// ---------------------------------------------------------------------------
// Model weight archive (oracle extras included when saving an Oracle)
// ---------------------------------------------------------------------------

namespace detail {

inline void push_conv(std::vector<NamedTensor>& out, const std::string& prefix,
                      const model::ConvLayer& c) {
  out.push_back({prefix + ".k_prev", c.k_prev});
  out.push_back({prefix + ".k_center", c.k_center});
  out.push_back({prefix + ".k_next", c.k_next});
  out.push_back({prefix + ".bias", c.bias});
}

inline model::ConvLayer read_conv(const Container& c, const std::string& prefix,
                                  bool gelu_activation) {
  model::ConvLayer layer;
  layer.k_prev = c.tensor(prefix + ".k_prev");
  layer.k_center = c.tensor(prefix + ".k_center");
  layer.k_next = c.tensor(prefix + ".k_next");
  layer.bias = c.vector_tensor(prefix + ".bias");
  layer.gelu_activation = gelu_activation;
  return layer;
}

inline std::vector<NamedTensor> model_tensors(const model::ModelWeights& w) {
  std::vector<NamedTensor> out;
  push_conv(out, "conv1", w.conv1);
  push_conv(out, "conv2", w.conv2);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& layer = w.layers[l];
    const std::string p = "layer" + std::to_string(l);
    out.push_back({p + ".ln1.scale", layer.ln1_scale});
    out.push_back({p + ".ln1.offset", layer.ln1_offset});
    out.push_back({p + ".attn.wq", layer.wq});
    out.push_back({p + ".attn.wk", layer.wk});
    out.push_back({p + ".attn.wv", layer.wv});
    out.push_back({p + ".attn.wo", layer.wo});
    out.push_back({p + ".attn.bq", layer.bq});
    out.push_back({p + ".attn.bk", layer.bk});
    out.push_back({p + ".attn.bv", layer.bv});
    out.push_back({p + ".attn.bo", layer.bo});
    out.push_back({p + ".ln2.scale", layer.ln2_scale});
    out.push_back({p + ".ln2.offset", layer.ln2_offset});
    out.push_back({p + ".ffn.w1", layer.ffn_w1});
    out.push_back({p + ".ffn.b1", layer.ffn_b1});
    out.push_back({p + ".ffn.w2", layer.ffn_w2});
    out.push_back({p + ".ffn.b2", layer.ffn_b2});
  }
  out.push_back({"classifier.weight", w.classifier_weight});
  out.push_back({"classifier.bias", w.classifier_bias});
  return out;
}

}  // namespace detail

inline json dims_to_json(const model::Dims& d) {
  return {{"d_in", d.d_in}, {"d", d.d},       {"layers", d.layers},
          {"heads", d.heads}, {"ffn", d.ffn}, {"vocab", d.vocab}};
}

inline model::Dims dims_from_json(const json& j) {
  model::Dims d;
  d.d_in = j.at("d_in");
  d.d = j.at("d");
  d.layers = j.at("layers");
  d.heads = j.at("heads");
  d.ffn = j.at("ffn");
  d.vocab = j.at("vocab");
  return d;
}

inline void save_oracle(const std::filesystem::path& path,
                        const corpus::Oracle& oracle) {
  const auto& w = oracle.weights;
  json meta;
  meta["dims"] = dims_to_json(w.dims);
  meta["vocab"] = w.vocab.tokens;
  meta["blank_index"] = w.vocab.blank_index;
  meta["word_sep_index"] = w.vocab.word_sep_index;
  meta["model_hash"] = hash_hex(w.hash());
  meta["vocab_hash"] = hash_hex(w.vocab.hash());
  meta["oracle"] = {{"jitter_radius", oracle.jitter_radius},
                    {"attempts_used", oracle.attempts_used}};

  auto tensors = detail::model_tensors(w);
  tensors.push_back({"oracle.prototypes", oracle.prototypes, "f64"});
  tensors.push_back({"oracle.latent_images", oracle.latent_images, "f64"});
  tensors.push_back({"oracle.blank_image", oracle.blank_image, "f64"});
  tensors.push_back({"oracle.effective_map", oracle.effective_map, "f64"});
  write_container(path, "model", meta, tensors);
}

inline corpus::Oracle load_oracle(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.header.at("kind") != "model")
    throw InputMismatchError("not a model archive: " + path.string());
  const json& meta = c.header.at("meta");

  corpus::Oracle oracle;
  model::ModelWeights& w = oracle.weights;
  w.dims = dims_from_json(meta.at("dims"));
  w.vocab.tokens = meta.at("vocab").get<std::vector<std::string>>();
  w.vocab.blank_index = meta.at("blank_index");
  w.vocab.word_sep_index = meta.at("word_sep_index");
  w.conv1 = detail::read_conv(c, "conv1", false);
  w.conv2 = detail::read_conv(c, "conv2", true);
  for (int l = 0; l < w.dims.layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    model::TransformerLayer layer;
    layer.ln1_scale = c.vector_tensor(p + ".ln1.scale");
    layer.ln1_offset = c.vector_tensor(p + ".ln1.offset");
    layer.wq = c.tensor(p + ".attn.wq");
    layer.wk = c.tensor(p + ".attn.wk");
    layer.wv = c.tensor(p + ".attn.wv");
    layer.wo = c.tensor(p + ".attn.wo");
    layer.bq = c.vector_tensor(p + ".attn.bq");
    layer.bk = c.vector_tensor(p + ".attn.bk");
    layer.bv = c.vector_tensor(p + ".attn.bv");
    layer.bo = c.vector_tensor(p + ".attn.bo");
    layer.ln2_scale = c.vector_tensor(p + ".ln2.scale");
    layer.ln2_offset = c.vector_tensor(p + ".ln2.offset");
    layer.ffn_w1 = c.tensor(p + ".ffn.w1");
    layer.ffn_b1 = c.vector_tensor(p + ".ffn.b1");
    layer.ffn_w2 = c.tensor(p + ".ffn.w2");
    layer.ffn_b2 = c.vector_tensor(p + ".ffn.b2");
    w.layers.push_back(std::move(layer));
  }
  w.classifier_weight = c.tensor("classifier.weight");
  w.classifier_bias = c.vector_tensor("classifier.bias");

  oracle.prototypes = c.tensor("oracle.prototypes");
  oracle.latent_images = c.tensor("oracle.latent_images");
  oracle.blank_image = c.vector_tensor("oracle.blank_image");
  oracle.effective_map = c.tensor("oracle.effective_map");
  oracle.jitter_radius = meta.at("oracle").at("jitter_radius");
  oracle.attempts_used = meta.at("oracle").at("attempts_used");
  return oracle;
}

// ---------------------------------------------------------------------------
// Stats archive
// ---------------------------------------------------------------------------

inline void save_stats(const std::filesystem::path& path,
                       const stats::SourceStats& s) {
  json meta;
  meta["layer_count"] = s.layer_count;
  meta["dim"] = s.dim;
  meta["vocab_hash"] = hash_hex(s.vocab_hash);
  meta["model_hash"] = hash_hex(s.model_hash);
  json counts = json::object();
  for (const auto& [key, n] : s.frame_counts)
    counts[std::to_string(key.first) + "," + std::to_string(key.second)] = n;
  meta["frame_counts"] = counts;

  std::vector<NamedTensor> tensors;
  for (std::size_t l = 0; l < s.centroids.size(); ++l)
    tensors.push_back(
        {"centroid." + std::to_string(l), s.centroids[l], "f64"});
  for (const auto& [key, v] : s.token_means)
    tensors.push_back({"token_mean." + std::to_string(key.first) + "." +
                           std::to_string(key.second),
                       v, "f64"});
  for (const auto& [key, v] : s.token_stds)
    tensors.push_back({"token_std." + std::to_string(key.first) + "." +
                           std::to_string(key.second),
                       v, "f64"});
  write_container(path, "stats", meta, tensors);
}

inline stats::SourceStats load_stats(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.header.at("kind") != "stats")
    throw InputMismatchError("not a stats archive: " + path.string());
  const json& meta = c.header.at("meta");

  stats::SourceStats s;
  s.layer_count = meta.at("layer_count");
  s.dim = meta.at("dim");
  s.vocab_hash = std::stoull(meta.at("vocab_hash").get<std::string>(), nullptr, 16);
  s.model_hash = std::stoull(meta.at("model_hash").get<std::string>(), nullptr, 16);
  for (int l = 0; l < s.layer_count; ++l)
    s.centroids.push_back(c.vector_tensor("centroid." + std::to_string(l)));
  for (const auto& [key_text, n] : meta.at("frame_counts").items()) {
    const auto comma = key_text.find(',');
    const int v = std::stoi(key_text.substr(0, comma));
    const int l = std::stoi(key_text.substr(comma + 1));
    s.frame_counts[{v, l}] = n.get<std::int64_t>();
    s.token_means[{v, l}] = c.vector_tensor(
        "token_mean." + std::to_string(v) + "." + std::to_string(l));
    s.token_stds[{v, l}] = c.vector_tensor(
        "token_std." + std::to_string(v) + "." + std::to_string(l));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Corpus: JSON-lines manifest + frame payload container
// ---------------------------------------------------------------------------

inline std::filesystem::path frames_path_for(
    const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  p.replace_extension(".bin");
  return p;
}

inline void save_corpus(const std::filesystem::path& manifest_path,
                        const std::vector<model::Utterance>& corpus) {
  std::ofstream manifest(manifest_path, std::ios::trunc);
  if (!manifest)
    throw ConfigError("cannot write manifest: " + manifest_path.string());
  std::vector<NamedTensor> tensors;
  tensors.reserve(corpus.size());
  for (const auto& utt : corpus) {
    json line;
    line["utterance_id"] = utt.utterance_id;
    line["reference"] = utt.reference.value_or("");
    line["domain_tag"] = utt.domain_tag;
    line["frame_count"] = utt.frames.rows();
    line["dim"] = utt.frames.cols();
    manifest << line.dump() << "\n";
    tensors.push_back({utt.utterance_id, utt.frames, "f32"});
  }
  json meta;
  meta["num_utterances"] = corpus.size();
  meta["format_version"] = kFormatVersion;
  write_container(frames_path_for(manifest_path), "corpus-frames", meta,
                  tensors);
}

inline std::vector<model::Utterance> load_corpus(
    const std::filesystem::path& manifest_path) {
  std::ifstream manifest(manifest_path);
  if (!manifest)
    throw ConfigError("cannot read manifest: " + manifest_path.string());
  const Container frames = read_container(frames_path_for(manifest_path));
  if (frames.header.at("kind") != "corpus-frames")
    throw InputMismatchError("not a corpus payload next to: " +
                             manifest_path.string());
  std::vector<model::Utterance> corpus;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    model::Utterance utt;
    utt.utterance_id = j.at("utterance_id");
    const std::string ref = j.at("reference");
    if (!ref.empty()) utt.reference = ref;
    utt.domain_tag = j.at("domain_tag");
    utt.frames = frames.tensor(utt.utterance_id);
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Stream checkpoint (lossless f64)
// ---------------------------------------------------------------------------

namespace detail {

inline void push_cma(std::vector<NamedTensor>& tensors, json& meta,
                     const std::string& prefix, const cma::CmaState& s) {
  tensors.push_back({prefix + ".mean", s.mean, "f64"});
  tensors.push_back({prefix + ".covariance", s.covariance, "f64"});
  tensors.push_back({prefix + ".path_sigma", s.path_sigma, "f64"});
  tensors.push_back({prefix + ".path_c", s.path_c, "f64"});
  tensors.push_back({prefix + ".weights", s.recombination_weights, "f64"});
  tensors.push_back(
      {prefix + ".step_size", Matrix::Constant(1, 1, s.step_size), "f64"});
  meta[prefix] = {{"generation_count", s.generation_count},
                  {"population_size", s.population_size},
                  {"parent_count", s.parent_count}};
}

inline cma::CmaState read_cma(const Container& c, const std::string& prefix) {
  cma::CmaState s;
  s.mean = c.vector_tensor(prefix + ".mean");
  s.covariance = c.tensor(prefix + ".covariance");
  s.path_sigma = c.vector_tensor(prefix + ".path_sigma");
  s.path_c = c.vector_tensor(prefix + ".path_c");
  s.recombination_weights = c.vector_tensor(prefix + ".weights");
  s.step_size = c.tensor(prefix + ".step_size")(0, 0);
  const json& meta = c.header.at("meta").at(prefix);
  s.generation_count = meta.at("generation_count");
  s.population_size = meta.at("population_size");
  s.parent_count = meta.at("parent_count");
  return s;
}

}  // namespace detail

struct StreamCheckpoint {
  int next_index = 0;
  std::uint64_t config_hash = 0;
  tema::EmaState ema;
  cma::CmaState next_cma;
};

inline void save_checkpoint(const std::filesystem::path& path,
                            const StreamCheckpoint& cp) {
  json meta;
  meta["next_index"] = cp.next_index;
  meta["config_hash"] = hash_hex(cp.config_hash);
  meta["gamma"] = cp.ema.gamma;
  std::vector<NamedTensor> tensors;
  tensors.push_back({"ema.mean", cp.ema.mean_ema, "f64"});
  tensors.push_back({"ema.covariance", cp.ema.cov_ema, "f64"});
  tensors.push_back(
      {"ema.step_size", Matrix::Constant(1, 1, cp.ema.step_ema), "f64"});
  detail::push_cma(tensors, meta, "initial", cp.ema.initial);
  detail::push_cma(tensors, meta, "next", cp.next_cma);

  // Write-then-rename so a crash mid-write cannot corrupt the checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_container(tmp, "checkpoint", meta, tensors);
  std::filesystem::rename(tmp, path);
}

inline StreamCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.header.at("kind") != "checkpoint")
    throw InputMismatchError("not a checkpoint: " + path.string());
  const json& meta = c.header.at("meta");
  StreamCheckpoint cp;
  cp.next_index = meta.at("next_index");
  cp.config_hash =
      std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
  cp.ema.gamma = meta.at("gamma");
  cp.ema.mean_ema = c.vector_tensor("ema.mean");
  cp.ema.cov_ema = c.tensor("ema.covariance");
  cp.ema.step_ema = c.tensor("ema.step_size")(0, 0);
  cp.ema.initial = detail::read_cma(c, "initial");
  cp.next_cma = detail::read_cma(c, "next");
  return cp;
}

}  // namespace ebats::io
