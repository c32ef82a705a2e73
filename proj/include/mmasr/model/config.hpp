#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/error.hpp"

namespace mmasr::model {

enum class Variant { Unimodal, Mag, Maop };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Unimodal: return "unimodal";
    case Variant::Mag: return "mag";
    case Variant::Maop: return "maop";
  }
  return "unknown";
}

inline Variant parse_variant(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "unimodal") return Variant::Unimodal;
  if (s == "mag") return Variant::Mag;
  if (s == "maop") return Variant::Maop;
  throw ConfigError("unknown model variant '" + s + "' (expected unimodal, mag or maop)");
}

inline bool is_multimodal(Variant v) { return v != Variant::Unimodal; }

NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::Unimodal, "unimodal"}, {Variant::Mag, "mag"}, {Variant::Maop, "maop"}})

struct ModelConfig {
  Variant variant = Variant::Unimodal;
  std::size_t feature_dim = 43;
  std::size_t enc_layers = 6;
  std::size_t enc_hidden = 256;  // bidirectional output width; each direction gets half
  std::vector<std::size_t> subsample_layers = {3, 4};  // 1-based
  std::size_t dec_hidden = 256;
  std::size_t emb_dim = 256;
  std::size_t att_dim = 256;
  std::size_t vocab_size = 0;
  std::size_t n_proposals = 36;
  std::size_t visual_in_dim = 2048;
  std::size_t visual_proj_dim = 256;
  bool tie_embeddings = true;
  std::size_t max_decode_len = 60;

  std::size_t direction_hidden() const { return enc_hidden / 2; }

  // Output length of the encoder for a source of `frames` timesteps.
  std::size_t encoded_length(std::size_t frames) const {
    for (std::size_t i = 0; i < subsample_layers.size(); ++i) frames = (frames + 1) / 2;
    return frames;
  }

  // Shortest source the encoder accepts.
  std::size_t min_source_length() const { return std::size_t{1} << subsample_layers.size(); }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
    };
    positive(feature_dim, "feature_dim");
    positive(enc_layers, "enc_layers");
    positive(dec_hidden, "dec_hidden");
    positive(emb_dim, "emb_dim");
    positive(att_dim, "att_dim");
    positive(vocab_size, "vocab_size");
    if (enc_hidden < 2 || enc_hidden % 2) throw ConfigError("model config: enc_hidden must be even and >= 2");
    for (auto l : subsample_layers) {
      if (l < 1 || l > enc_layers) throw ConfigError("model config: subsample layer outside [1, enc_layers]");
    }
    if (tie_embeddings && emb_dim != dec_hidden) {
      throw ConfigError("model config: tied embeddings need emb_dim == dec_hidden");
    }
    if (is_multimodal(variant)) {
      positive(visual_in_dim, "visual_in_dim");
      positive(n_proposals, "n_proposals");
      // The hierarchical layer attends over {z_t, v}, so both live in one space.
      if (visual_proj_dim != enc_hidden) {
        throw ConfigError("model config: visual_proj_dim must equal enc_hidden for multimodal variants");
      }
    }
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, variant, feature_dim, enc_layers, enc_hidden,
                                                subsample_layers, dec_hidden, emb_dim, att_dim, vocab_size,
                                                n_proposals, visual_in_dim, visual_proj_dim, tie_embeddings,
                                                max_decode_len)

}  // namespace mmasr::model
