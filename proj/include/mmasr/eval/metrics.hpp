#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/error.hpp"
#include "mmasr/corpus/types.hpp"
#include "mmasr/model/trace.hpp"

namespace mmasr::eval {

using Words = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Rates

/// A count ratio. A zero denominator means the metric is absent, which is
/// reported as such rather than as zero.
struct Rate {
  std::size_t numerator = 0;
  std::size_t denominator = 0;

  bool absent() const { return denominator == 0; }
  std::optional<double> fraction() const {
    if (absent()) return std::nullopt;
    return static_cast<double>(numerator) / static_cast<double>(denominator);
  }
  std::optional<double> percent() const {
    auto f = fraction();
    return f ? std::optional<double>(*f * 100.0) : std::nullopt;
  }
  Rate& operator+=(const Rate& o) {
    numerator += o.numerator;
    denominator += o.denominator;
    return *this;
  }
  bool operator==(const Rate&) const = default;
};

inline void to_json(nlohmann::json& j, const Rate& r) {
  j = nlohmann::json{{"numerator", r.numerator}, {"denominator", r.denominator}};
  if (auto p = r.percent()) {
    j["percent"] = *p;
  } else {
    j["percent"] = "absent";
  }
}

inline void from_json(const nlohmann::json& j, Rate& r) {
  j.at("numerator").get_to(r.numerator);
  j.at("denominator").get_to(r.denominator);
}

// ---------------------------------------------------------------------------
// Minimum edit distance alignment

enum class EditOp { Match, Substitute, Delete, Insert };

struct AlignStep {
  EditOp op;
  long ref = -1;  // -1 for insertions
  long hyp = -1;  // -1 for deletions
  bool operator==(const AlignStep&) const = default;
};

struct Alignment {
  std::vector<AlignStep> steps;
  std::size_t substitutions = 0, deletions = 0, insertions = 0;
  std::vector<long> ref_to_hyp;  // hypothesis position aligned to each reference word, -1 if deleted

  std::size_t errors() const { return substitutions + deletions + insertions; }
  bool matched(std::size_t ref_index) const;
};

/// Levenshtein alignment. Ties between equal-cost paths are broken while
/// scanning left to right, preferring match, then substitution, deletion,
/// insertion. The table holds suffix distances so that the scan can start
/// at the first word.
inline Alignment align(const Words& ref, const Words& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = n + 1; i-- > 0;) {
    for (std::size_t j = m + 1; j-- > 0;) {
      if (i == n) {
        at(i, j) = m - j;
      } else if (j == m) {
        at(i, j) = n - i;
      } else {
        const std::size_t diag = at(i + 1, j + 1) + (ref[i] == hyp[j] ? 0 : 1);
        at(i, j) = std::min({diag, at(i + 1, j) + 1, at(i, j + 1) + 1});
      }
    }
  }
  Alignment a;
  a.ref_to_hyp.assign(n, -1);
  std::size_t i = 0, j = 0;
  while (i < n || j < m) {
    const long li = static_cast<long>(i), lj = static_cast<long>(j);
    if (i < n && j < m && ref[i] == hyp[j] && at(i, j) == at(i + 1, j + 1)) {
      a.steps.push_back({EditOp::Match, li, lj});
      a.ref_to_hyp[i] = lj;
      ++i, ++j;
    } else if (i < n && j < m && at(i, j) == at(i + 1, j + 1) + 1) {
      a.steps.push_back({EditOp::Substitute, li, lj});
      a.ref_to_hyp[i] = lj;
      ++a.substitutions;
      ++i, ++j;
    } else if (i < n && at(i, j) == at(i + 1, j) + 1) {
      a.steps.push_back({EditOp::Delete, li, -1});
      ++a.deletions;
      ++i;
    } else {
      a.steps.push_back({EditOp::Insert, -1, lj});
      ++a.insertions;
      ++j;
    }
  }
  return a;
}

inline bool Alignment::matched(std::size_t ref_index) const {
  for (const auto& s : steps) {
    if (s.ref == static_cast<long>(ref_index)) return s.op == EditOp::Match;
  }
  return false;
}

/// Word error rate of one pair; may exceed 1.
inline double wer(const Words& ref, const Words& hyp) {
  if (ref.empty()) throw ArgumentError("wer: empty reference");
  return static_cast<double>(align(ref, hyp).errors()) / static_cast<double>(ref.size());
}

// A scored reference/hypothesis pair plus what the decoder attended to.
struct AlignedPair {
  std::string utterance_id;
  Words reference;
  Words hypothesis;
  Alignment alignment;
  const model::AttentionTrace* trace = nullptr;  // optional
};

inline AlignedPair make_pair(std::string id, Words ref, Words hyp, const model::AttentionTrace* trace = nullptr) {
  AlignedPair p{std::move(id), std::move(ref), std::move(hyp), {}, trace};
  p.alignment = align(p.reference, p.hypothesis);
  return p;
}

/// Errors over reference words, summed across the dataset.
inline Rate corpus_wer(const std::vector<AlignedPair>& pairs) {
  Rate r;
  for (const auto& p : pairs) {
    r.numerator += p.alignment.errors();
    r.denominator += p.reference.size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Recovery

struct RecoveredWord {
  std::size_t pair = 0;      // index into the pair list
  std::size_t ref_index = 0;
  std::size_t hyp_index = 0;  // decode step that emitted the word
  std::string word;
};

struct RecoveryResult {
  Rate rate;
  std::vector<RecoveredWord> recovered;
};

using MaskLookup = std::map<std::string, corpus::MaskSpec>;

/// A masked reference word is recovered when the alignment matches it to
/// an identical hypothesis word. `keep` optionally restricts which masked
/// words are counted.
template <typename Keep>
RecoveryResult recovery(const std::vector<AlignedPair>& pairs, const MaskLookup& masks, Keep keep) {
  RecoveryResult out;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    const auto& p = pairs[k];
    auto it = masks.find(p.utterance_id);
    if (it == masks.end()) throw LookupError("no mask specification for utterance " + p.utterance_id);
    for (auto i : it->second.masked_word_indices) {
      if (i >= p.reference.size()) {
        throw ArgumentError(p.utterance_id + ": masked index " + std::to_string(i) + " beyond reference length");
      }
      if (!keep(p.reference[i])) continue;
      ++out.rate.denominator;
      const long j = p.alignment.ref_to_hyp[i];
      if (j >= 0 && p.hypothesis[static_cast<std::size_t>(j)] == p.reference[i]) {
        ++out.rate.numerator;
        out.recovered.push_back({k, i, static_cast<std::size_t>(j), p.reference[i]});
      }
    }
  }
  return out;
}

inline RecoveryResult recovery(const std::vector<AlignedPair>& pairs, const MaskLookup& masks) {
  return recovery(pairs, masks, [](const std::string&) { return true; });
}

inline Rate recovery_rate(const std::vector<AlignedPair>& pairs, const MaskLookup& masks) {
  return recovery(pairs, masks).rate;
}

// ---------------------------------------------------------------------------
// Visual attention statistics

/// Mean of alpha_v over every decode step of every trace.
inline double expected_visual_attention(const std::vector<const model::AttentionTrace*>& traces) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto* t : traces) {
    for (const auto& s : t->steps) {
      if (!s.alpha_v) throw UnsupportedVariantError("expected_visual_attention: trace has no modality weights");
      total += *s.alpha_v;
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("expected_visual_attention: no decode steps");
  return total / static_cast<double>(count);
}

/// alpha_v at the step that emitted each recovered word.
inline std::vector<double> recovered_alpha_v(const std::vector<AlignedPair>& pairs,
                                             const std::vector<RecoveredWord>& words) {
  std::vector<double> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    const auto* trace = pairs[w.pair].trace;
    if (!trace || w.hyp_index >= trace->steps.size()) {
      throw ArgumentError(pairs[w.pair].utterance_id + ": no trace step for hypothesis position " + std::to_string(w.hyp_index));
    }
    const auto& s = trace->steps[w.hyp_index];
    if (!s.alpha_v) throw UnsupportedVariantError("grounding needs modality weights in the trace");
    out.push_back(*s.alpha_v);
  }
  return out;
}

/// Share of recovered words whose alpha_v exceeds the threshold.
inline Rate grounding_rate(const std::vector<double>& recovered_alphas, double threshold) {
  Rate r;
  r.denominator = recovered_alphas.size();
  for (double a : recovered_alphas) r.numerator += a > threshold ? 1 : 0;
  return r;
}

// ---------------------------------------------------------------------------
// Word accuracy on clean speech

/// Share of reference occurrences of category words that the alignment
/// matches to an identical hypothesis word.
inline Rate word_accuracy(const corpus::WordCategoryList& category, const std::vector<AlignedPair>& pairs) {
  Rate r;
  for (const auto& p : pairs) {
    for (std::size_t i = 0; i < p.reference.size(); ++i) {
      if (!category.words.count(corpus::lowercase(p.reference[i]))) continue;
      ++r.denominator;
      const long j = p.alignment.ref_to_hyp[i];
      if (j >= 0 && p.hypothesis[static_cast<std::size_t>(j)] == p.reference[i]) ++r.numerator;
    }
  }
  return r;
}

}  // namespace mmasr::eval
