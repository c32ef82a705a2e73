#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

#include "mmasr/corpus/types.hpp"
#include "mmasr/eval/metrics.hpp"

namespace mmasr::eval {

using corpus::Box;

/// Intersection over union. A zero-area box scores 0 unless both boxes are
/// identical.
inline double iou(const Box& a, const Box& b) {
  if (!a.well_formed() || !b.well_formed()) return a == b ? 1.0 : 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

inline constexpr double kIouHit = 0.5;

// One recovered word to localize: the proposal attention at the step that
// emitted it, the proposal boxes, and the ground-truth boxes of every
// annotated phrase containing the word.
struct GroundingQuery {
  std::vector<double> weights;
  std::vector<Box> proposals;
  std::vector<Box> truth;
};

/// Queries for recovered words that carry at least one ground-truth box.
inline std::vector<GroundingQuery> grounding_queries(const std::vector<AlignedPair>& pairs,
                                                     const std::vector<RecoveredWord>& words, const corpus::Corpus& corpus) {
  std::vector<GroundingQuery> out;
  for (const auto& w : words) {
    const auto& p = pairs[w.pair];
    auto ann = corpus.annotations.find(p.utterance_id);
    if (ann == corpus.annotations.end()) continue;
    GroundingQuery q;
    for (const auto& e : ann->second.entries) {
      if (std::find(e.word_indices.begin(), e.word_indices.end(), w.ref_index) != e.word_indices.end()) q.truth.push_back(e.box);
    }
    if (q.truth.empty()) continue;
    const auto* visual = corpus.visual_for(p.utterance_id);
    if (!visual) throw LookupError(p.utterance_id + ": annotated utterance has no image");
    if (!p.trace || w.hyp_index >= p.trace->steps.size()) throw ArgumentError(p.utterance_id + ": missing trace step");
    q.weights = p.trace->steps[w.hyp_index].proposal_weights;
    if (q.weights.empty()) throw UnsupportedVariantError("IoU precision needs proposal attention weights");
    if (q.weights.size() != visual->boxes.size()) throw ShapeError(p.utterance_id + ": proposal weights do not match boxes");
    q.proposals = visual->boxes;
    out.push_back(std::move(q));
  }
  return out;
}

namespace detail {

inline bool hit(const GroundingQuery& q, const std::vector<std::size_t>& chosen) {
  for (auto c : chosen) {
    for (const auto& t : q.truth) {
      if (iou(q.proposals[c], t) > kIouHit) return true;
    }
  }
  return false;
}

inline void require_k(const GroundingQuery& q, std::size_t k) {
  if (k == 0 || k > q.proposals.size()) {
    throw ArgumentError("IoU precision: K=" + std::to_string(k) + " outside [1, " + std::to_string(q.proposals.size()) + "]");
  }
}

// Indices sorted by descending weight, ties by index.
inline std::vector<std::size_t> ranked(const std::vector<double>& w) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return w[a] > w[b]; });
  return idx;
}

}  // namespace detail

/// Share of queries whose K most attended proposals overlap a ground-truth
/// box with IoU above 0.5.
inline Rate iou_precision_at_k(const std::vector<GroundingQuery>& queries, std::size_t k) {
  Rate r;
  for (const auto& q : queries) {
    detail::require_k(q, k);
    auto order = detail::ranked(q.weights);
    order.resize(k);
    ++r.denominator;
    r.numerator += detail::hit(q, order) ? 1 : 0;
  }
  return r;
}

/// Same procedure with K proposals drawn uniformly without replacement.
inline Rate random_k_baseline(const std::vector<GroundingQuery>& queries, std::size_t k, std::mt19937_64& rng) {
  Rate r;
  for (const auto& q : queries) {
    detail::require_k(q, k);
    std::vector<std::size_t> idx(q.proposals.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<std::size_t> chosen;
    std::sample(idx.begin(), idx.end(), std::back_inserter(chosen), static_cast<std::ptrdiff_t>(k), rng);
    ++r.denominator;
    r.numerator += detail::hit(q, chosen) ? 1 : 0;
  }
  return r;
}

/// Mean attention mass at each rank after sorting every query's weights in
/// descending order. Empty when there are no queries.
inline std::vector<double> attention_rank_concentration(const std::vector<std::vector<double>>& weights) {
  if (weights.empty()) return {};
  const std::size_t n = weights.front().size();
  std::vector<double> mean(n, 0.0);
  for (const auto& w : weights) {
    if (w.size() != n) throw ShapeError("attention_rank_concentration: ragged weight vectors");
    auto sorted = w;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    for (std::size_t r = 0; r < n; ++r) mean[r] += sorted[r];
  }
  for (auto& m : mean) m /= static_cast<double>(weights.size());
  return mean;
}

}  // namespace mmasr::eval
