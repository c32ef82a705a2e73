#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/corpus/feature_io.hpp"
#include "mmasr/model/asr_model.hpp"

// Checkpoint directory:
//   config.json  model configuration, including the variant tag
//   params.bin   u32 tensor count, then per tensor: u32 name length, name
//                bytes, u32 rank, rank x u32 dims, little-endian float32 values

namespace mmasr::model {

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

template <typename T>
void write_params(const std::filesystem::path& path, const nn::ParameterSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  using corpus::detail::put_f32;
  using corpus::detail::put_u32;
  put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(os, static_cast<std::uint32_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    const auto& shape = p->tensor.shape();
    put_u32(os, static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
    const auto& m = p->value();
    for (Eigen::Index i = 0; i < m.size(); ++i) put_f32(os, static_cast<float>(m.data()[i]));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::vector<NamedTensor> read_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing parameter file " + path.string());
  using corpus::detail::get_f32;
  using corpus::detail::get_u32;
  const auto count = get_u32(is);
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count && is; ++k) {
    NamedTensor t;
    const auto len = get_u32(is);
    if (len > 4096) throw IoError(path.string() + ": implausible parameter name length");
    t.name.resize(len);
    is.read(t.name.data(), len);
    const auto rank = get_u32(is);
    if (rank > 8) throw IoError(path.string() + ": implausible rank for " + t.name);
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.dims.push_back(get_u32(is));
      n *= t.dims.back();
    }
    if (!is) break;
    t.values.resize(n);
    for (auto& v : t.values) v = get_f32(is);
    out.push_back(std::move(t));
  }
  if (!is || out.size() != count) throw IoError("truncated parameter file " + path.string());
  return out;
}

inline ModelConfig read_checkpoint_config(const std::filesystem::path& dir) {
  std::ifstream is(dir / "config.json");
  if (!is) throw IoError("checkpoint " + dir.string() + " has no config.json");
  try {
    return nlohmann::json::parse(is).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint " + dir.string() + ": bad config.json: " + e.what());
  }
}

template <typename T>
void save_checkpoint(const AsrModel<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "config.json");
    if (!os) throw IoError("cannot write " + (dir / "config.json").string());
    os << nlohmann::json(model.config()).dump(2) << '\n';
  }
  write_params(dir / "params.bin", model.parameters());
}

// Everything except the vocabulary size must agree.
inline void require_compatible(const ModelConfig& have, const ModelConfig& want, bool allow_vocab_change) {
  auto fail = [&](const std::string& what) {
    throw IncompatibleCheckpointError("checkpoint " + what + " differs from model configuration");
  };
  if (have.variant != want.variant) {
    throw IncompatibleCheckpointError("checkpoint variant " + to_string(have.variant) + " cannot load into a " +
                                      to_string(want.variant) + " model");
  }
  if (have.feature_dim != want.feature_dim) fail("feature_dim");
  if (have.enc_layers != want.enc_layers) fail("enc_layers");
  if (have.enc_hidden != want.enc_hidden) fail("enc_hidden");
  if (have.subsample_layers != want.subsample_layers) fail("subsample_layers");
  if (have.dec_hidden != want.dec_hidden) fail("dec_hidden");
  if (have.emb_dim != want.emb_dim) fail("emb_dim");
  if (have.att_dim != want.att_dim) fail("att_dim");
  if (have.tie_embeddings != want.tie_embeddings) fail("tie_embeddings");
  if (is_multimodal(want.variant)) {
    if (have.visual_in_dim != want.visual_in_dim) fail("visual_in_dim");
    if (have.visual_proj_dim != want.visual_proj_dim) fail("visual_proj_dim");
    if (have.n_proposals != want.n_proposals) fail("n_proposals");
  }
  if (!allow_vocab_change && have.vocab_size != want.vocab_size) fail("vocab_size");
}

/// Loads into an existing model of the same configuration.
template <typename T>
void load_checkpoint_into(AsrModel<T>& model, const std::filesystem::path& dir) {
  require_compatible(read_checkpoint_config(dir), model.config(), false);
  const auto tensors = read_params(dir / "params.bin");
  if (tensors.size() != model.parameters().size()) {
    throw IncompatibleCheckpointError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model has " +
                                      std::to_string(model.parameters().size()));
  }
  for (const auto& t : tensors) {
    auto* p = model.parameters().find(t.name);
    if (!p) throw IncompatibleCheckpointError("checkpoint tensor " + t.name + " has no counterpart in the model");
    if (t.values.size() != p->tensor.size()) throw IncompatibleCheckpointError("checkpoint tensor " + t.name + " has the wrong size");
    for (std::size_t i = 0; i < t.values.size(); ++i) p->value().data()[i] = static_cast<T>(t.values[i]);
  }
}

template <typename T = float>
AsrModel<T> load_checkpoint(const std::filesystem::path& dir) {
  AsrModel<T> model(read_checkpoint_config(dir), 0);
  load_checkpoint_into(model, dir);
  return model;
}

}  // namespace mmasr::model
