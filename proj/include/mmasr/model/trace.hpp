#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/error.hpp"

namespace mmasr::model {

// Attention read-out of one decode step. Encoder weights cover the valid
// (unpadded) encoder positions only. Proposal weights are filled for the
// object-proposal variant, the modality pair for both multimodal variants.
struct TraceStep {
  std::vector<double> encoder_weights;
  std::vector<double> proposal_weights;
  std::optional<double> alpha_a;
  std::optional<double> alpha_v;
  bool operator==(const TraceStep&) const = default;
};

struct AttentionTrace {
  std::vector<TraceStep> steps;
  bool operator==(const AttentionTrace&) const = default;
};

struct Hypothesis {
  std::vector<std::string> words;
  std::vector<int> ids;  // emitted tokens, eos included when terminated
  AttentionTrace trace;  // one step per emitted token
  bool terminated = false;
  bool operator==(const Hypothesis&) const = default;
};

inline void to_json(nlohmann::json& j, const TraceStep& s) {
  j = nlohmann::json{{"encoder", s.encoder_weights}};
  if (!s.proposal_weights.empty()) j["proposals"] = s.proposal_weights;
  if (s.alpha_a) j["alpha_a"] = *s.alpha_a;
  if (s.alpha_v) j["alpha_v"] = *s.alpha_v;
}

inline void from_json(const nlohmann::json& j, TraceStep& s) {
  s = {};
  j.at("encoder").get_to(s.encoder_weights);
  if (j.contains("proposals")) j.at("proposals").get_to(s.proposal_weights);
  if (j.contains("alpha_a")) s.alpha_a = j.at("alpha_a").get<double>();
  if (j.contains("alpha_v")) s.alpha_v = j.at("alpha_v").get<double>();
}

}  // namespace mmasr::model
