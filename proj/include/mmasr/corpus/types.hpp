#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmasr/core/error.hpp"
#include "mmasr/core/tensor.hpp"

namespace mmasr::corpus {

using FeatureMatrix = nn::Matrix<float>;

// Frame hop of the filterbank features.
inline constexpr double kFrameHopSec = 0.01;
// Allowed overhang of the last aligned word past the final frame.
inline constexpr double kAlignmentSlackSec = 0.05;
inline constexpr std::size_t kDefaultFeatureDim = 43;
inline constexpr std::size_t kDefaultProposals = 36;
inline constexpr std::size_t kDefaultVisualDim = 2048;

struct WordSpan {
  double start_sec = 0.0;
  double end_sec = 0.0;
  bool operator==(const WordSpan&) const = default;
};

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool well_formed() const { return x1 < x2 && y1 < y2; }
  double area() const { return well_formed() ? (x2 - x1) * (y2 - y1) : 0.0; }
  bool operator==(const Box&) const = default;
};

struct Utterance {
  std::string id;
  std::vector<std::string> words;
  std::vector<WordSpan> alignments;
  FeatureMatrix features;  // frames x feature_dim

  std::size_t frames() const { return static_cast<std::size_t>(features.rows()); }
  double duration_sec() const { return static_cast<double>(frames()) * kFrameHopSec; }
};

struct VisualContext {
  std::string image_id;
  FeatureMatrix global_feature;  // 1 x visual_dim
  std::vector<Box> boxes;        // one per proposal
  FeatureMatrix proposals;       // n_proposals x visual_dim

  std::size_t n_proposals() const { return boxes.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(global_feature.cols()); }

  // Absolute paths of the feature files this context was read from, if any.
  std::string global_file;
  std::string proposal_file;
};

struct AnnotationEntry {
  std::vector<std::size_t> word_indices;
  Box box;
  bool operator==(const AnnotationEntry&) const = default;
};

struct GroundTruthAnnotation {
  std::string utterance_id;
  std::vector<AnnotationEntry> entries;
};

struct FrameSpan {
  std::size_t start = 0;
  std::size_t end = 0;  // exclusive
  std::size_t length() const { return end - start; }
  bool operator==(const FrameSpan&) const = default;
  auto operator<=>(const FrameSpan&) const = default;
};

struct MaskSpec {
  std::string utterance_id;
  std::vector<std::size_t> masked_word_indices;  // sorted, unique
  std::vector<FrameSpan> masked_frame_spans;     // merged, sorted
  bool operator==(const MaskSpec&) const = default;
};

// Mask bookkeeping stored next to a masked dataset.
struct MaskRecord {
  std::string base_id;
  double probability = 0.0;  // negative for category masks
  MaskSpec spec;
};

struct WordCategoryList {
  std::string name;
  std::set<std::string> words;
};

struct Corpus {
  std::vector<Utterance> utterances;
  std::map<std::string, std::shared_ptr<const VisualContext>> images;
  std::map<std::string, std::string> links;  // utterance id -> image id
  std::map<std::string, GroundTruthAnnotation> annotations;
  std::map<std::string, MaskRecord> masks;  // non-empty for masked datasets

  bool is_masked() const { return !masks.empty(); }

  const VisualContext* visual_for(const std::string& utterance_id) const {
    auto it = links.find(utterance_id);
    if (it == links.end()) return nullptr;
    auto img = images.find(it->second);
    return img == images.end() ? nullptr : img->second.get();
  }

  // True when every utterance links to an image carrying proposals.
  bool has_visual() const {
    if (utterances.empty()) return false;
    for (const auto& u : utterances) {
      const auto* v = visual_for(u.id);
      if (!v || v->n_proposals() == 0) return false;
    }
    return true;
  }

  const Utterance* find(const std::string& id) const {
    for (const auto& u : utterances) {
      if (u.id == id) return &u;
    }
    return nullptr;
  }
};

/// Seconds to a [start, end) frame range at the fixed 10 ms hop.
inline FrameSpan seconds_to_frames(WordSpan span, std::size_t n_frames) {
  if (span.start_sec < 0.0 || span.end_sec < 0.0) throw ArgumentError("seconds_to_frames: negative time");
  if (span.start_sec > span.end_sec) throw ArgumentError("seconds_to_frames: start after end");
  // The epsilon absorbs representation error in values like 0.75 / 0.01.
  constexpr double eps = 1e-6;
  const auto start = static_cast<std::size_t>(std::floor(span.start_sec / kFrameHopSec + eps));
  const auto end_raw = static_cast<std::size_t>(std::ceil(span.end_sec / kFrameHopSec - eps));
  const std::size_t end = std::min(end_raw, n_frames);
  return {std::min(start, end), end};
}

inline std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace mmasr::corpus
