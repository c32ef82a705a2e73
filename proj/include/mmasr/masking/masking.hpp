#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmasr/core/seed.hpp"
#include "mmasr/corpus/types.hpp"

namespace mmasr::masking {

using corpus::Corpus;
using corpus::FeatureMatrix;
using corpus::FrameSpan;
using corpus::MaskRecord;
using corpus::MaskSpec;
using corpus::Utterance;
using corpus::WordCategoryList;
using corpus::WordSpan;

inline constexpr std::array<double, 4> kAugmentProbabilities = {0.0, 0.2, 0.4, 0.6};
inline constexpr std::size_t kSilenceFrames = 50;  // 0.5 s at a 10 ms hop
inline constexpr double kExpansionFraction = 0.25;

struct MaskOptions {
  bool expand = true;
  double expansion_fraction = kExpansionFraction;
  std::size_t silence_frames = kSilenceFrames;
  // Empty means an all-zero frame of the utterance's feature width.
  std::vector<float> silence;
};

struct AugmentedSample {
  std::string base_id;
  double probability = 0.0;
  MaskSpec mask;
  FeatureMatrix masked_features;
};

/// Each position is masked independently with probability p.
inline std::vector<std::size_t> select_random_mask(const std::vector<std::string>& words, double p,
                                                   std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("select_random_mask: probability must lie in [0, 1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (u(rng) < p) out.push_back(i);
  }
  return out;
}

/// Every position whose lowercased word belongs to the category.
inline std::vector<std::size_t> select_category_mask(const std::vector<std::string>& words,
                                                     const WordCategoryList& category) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (category.words.count(corpus::lowercase(words[i]))) out.push_back(i);
  }
  return out;
}

/// Widens a span by `fraction` of its duration on both sides, clamped to
/// [0, duration].
inline WordSpan expand_span(WordSpan span, double utterance_duration, double fraction = kExpansionFraction) {
  if (span.start_sec > span.end_sec) throw ArgumentError("expand_span: start after end");
  const double d = span.end_sec - span.start_sec;
  return {std::max(0.0, span.start_sec - fraction * d), std::min(utterance_duration, span.end_sec + fraction * d)};
}

/// Union of frame intervals as maximal disjoint intervals, sorted. Touching
/// intervals are joined; empty intervals carry no frames and are dropped.
inline std::vector<FrameSpan> merge_spans(std::vector<FrameSpan> spans) {
  std::erase_if(spans, [](const FrameSpan& s) { return s.end <= s.start; });
  std::sort(spans.begin(), spans.end());
  std::vector<FrameSpan> out;
  for (const auto& s : spans) {
    if (!out.empty() && s.start <= out.back().end) {
      out.back().end = std::max(out.back().end, s.end);
    } else {
      out.push_back(s);
    }
  }
  return out;
}

/// Replaces each span with `silence_frames` copies of the silence vector.
/// Spans must already be sorted and non-overlapping.
inline FeatureMatrix apply_mask(const FeatureMatrix& features, const std::vector<FrameSpan>& spans,
                                std::size_t silence_frames = kSilenceFrames, const std::vector<float>& silence = {}) {
  const auto n = static_cast<std::size_t>(features.rows());
  const auto dim = features.cols();
  if (!silence.empty() && static_cast<Eigen::Index>(silence.size()) != dim) {
    throw ArgumentError("apply_mask: silence vector width differs from features");
  }
  std::size_t removed = 0;
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.start > s.end || s.end > n) throw ArgumentError("apply_mask: span outside [0, frames]");
    if (i > 0 && s.start < spans[i - 1].end) throw ArgumentError("apply_mask: spans unsorted or overlapping (merge first)");
    removed += s.length();
  }
  const std::size_t out_rows = n - removed + spans.size() * silence_frames;
  FeatureMatrix out(static_cast<Eigen::Index>(out_rows), dim);
  Eigen::Matrix<float, 1, Eigen::Dynamic> sil = Eigen::Matrix<float, 1, Eigen::Dynamic>::Zero(dim);
  for (std::size_t c = 0; c < silence.size(); ++c) sil(static_cast<Eigen::Index>(c)) = silence[c];

  std::size_t src = 0, dst = 0;
  auto copy_until = [&](std::size_t stop) {
    const auto len = stop - src;
    if (len) {
      out.middleRows(static_cast<Eigen::Index>(dst), static_cast<Eigen::Index>(len)) =
          features.middleRows(static_cast<Eigen::Index>(src), static_cast<Eigen::Index>(len));
    }
    dst += len;
    src = stop;
  };
  for (const auto& s : spans) {
    copy_until(s.start);
    for (std::size_t k = 0; k < silence_frames; ++k) out.row(static_cast<Eigen::Index>(dst++)) = sil;
    src = s.end;
  }
  copy_until(n);
  return out;
}

/// Expands each masked word's alignment, converts to frames and merges.
inline MaskSpec build_mask_spec(const Utterance& u, std::vector<std::size_t> indices, const MaskOptions& options = {}) {
  std::sort(indices.begin(), indices.end());
  indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
  MaskSpec spec;
  spec.utterance_id = u.id;
  const double duration = u.duration_sec();
  std::vector<FrameSpan> frames;
  for (auto i : indices) {
    if (i >= u.words.size() || i >= u.alignments.size()) {
      throw ArgumentError(u.id + ": masked word index " + std::to_string(i) + " out of range");
    }
    auto span = u.alignments[i];
    if (options.expand) span = expand_span(span, duration, options.expansion_fraction);
    frames.push_back(corpus::seconds_to_frames(span, u.frames()));
  }
  spec.masked_word_indices = std::move(indices);
  spec.masked_frame_spans = merge_spans(std::move(frames));
  return spec;
}

inline AugmentedSample mask_utterance(const Utterance& u, std::vector<std::size_t> indices, double probability,
                                      const MaskOptions& options = {}) {
  AugmentedSample s;
  s.base_id = u.id;
  s.probability = probability;
  s.mask = build_mask_spec(u, std::move(indices), options);
  s.masked_features = apply_mask(u.features, s.mask.masked_frame_spans, options.silence_frames, options.silence);
  return s;
}

inline std::string probability_tag(double p) {
  return "p" + std::to_string(static_cast<int>(std::lround(p * 100.0)));
}

// Per-utterance stream so masking is independent of corpus order.
inline std::mt19937_64 utterance_rng(std::uint64_t seed, const std::string& utterance_id, double p) {
  return std::mt19937_64(derive_seed(seed, "mask/" + utterance_id + "/" + probability_tag(p)));
}

/// Four samples per utterance, masked at 0, 20, 40 and 60 percent.
inline std::vector<AugmentedSample> augment(const Corpus& corpus, std::uint64_t seed, const MaskOptions& options = {}) {
  std::vector<AugmentedSample> out;
  out.reserve(corpus.utterances.size() * kAugmentProbabilities.size());
  for (const auto& u : corpus.utterances) {
    for (double p : kAugmentProbabilities) {
      auto rng = utterance_rng(seed, u.id, p);
      out.push_back(mask_utterance(u, select_random_mask(u.words, p, rng), p, options));
    }
  }
  return out;
}

/// Materializes samples as a corpus whose utterances carry the masked
/// features; transcripts, images and annotations are those of the base.
/// `suffix_ids` appends the probability tag so augmented copies stay unique.
inline Corpus to_masked_corpus(const Corpus& base, const std::vector<AugmentedSample>& samples, bool suffix_ids) {
  Corpus out;
  out.images = base.images;
  std::map<std::string, const Utterance*> by_id;
  for (const auto& u : base.utterances) by_id[u.id] = &u;
  for (const auto& s : samples) {
    auto it = by_id.find(s.base_id);
    if (it == by_id.end()) throw LookupError("masked sample names unknown utterance " + s.base_id);
    Utterance u = *it->second;
    if (suffix_ids) u.id = s.base_id + "@" + (s.probability < 0 ? std::string("cat") : probability_tag(s.probability));
    u.features = s.masked_features;
    MaskRecord rec{s.base_id, s.probability, s.mask};
    rec.spec.utterance_id = u.id;
    if (auto l = base.links.find(s.base_id); l != base.links.end()) out.links[u.id] = l->second;
    if (auto a = base.annotations.find(s.base_id); a != base.annotations.end()) {
      auto ann = a->second;
      ann.utterance_id = u.id;
      out.annotations[u.id] = std::move(ann);
    }
    out.masks[u.id] = std::move(rec);
    out.utterances.push_back(std::move(u));
  }
  return out;
}

inline Corpus augment_corpus(const Corpus& corpus, std::uint64_t seed, const MaskOptions& options = {}) {
  return to_masked_corpus(corpus, augment(corpus, seed, options), true);
}

inline Corpus mask_with_probability(const Corpus& corpus, double p, std::uint64_t seed, const MaskOptions& options = {}) {
  std::vector<AugmentedSample> samples;
  for (const auto& u : corpus.utterances) {
    auto rng = utterance_rng(seed, u.id, p);
    samples.push_back(mask_utterance(u, select_random_mask(u.words, p, rng), p, options));
  }
  return to_masked_corpus(corpus, samples, false);
}

// Category masks record probability -1.
inline Corpus mask_by_category(const Corpus& corpus, const WordCategoryList& category, const MaskOptions& options = {}) {
  std::vector<AugmentedSample> samples;
  for (const auto& u : corpus.utterances) {
    samples.push_back(mask_utterance(u, select_category_mask(u.words, category), -1.0, options));
  }
  return to_masked_corpus(corpus, samples, false);
}

}  // namespace mmasr::masking
