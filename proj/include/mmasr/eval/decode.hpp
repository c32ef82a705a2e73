#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mmasr/corpus/vocab.hpp"
#include "mmasr/eval/metrics.hpp"
#include "mmasr/model/asr_model.hpp"

namespace mmasr::eval {

struct Decoded {
  std::string utterance_id;
  Words reference;
  model::Hypothesis hypothesis;
};

/// Greedy-decodes every utterance, in corpus order. Batches are formed over
/// utterances sorted by length; results do not depend on the batching.
/// `substitute`, when given, replaces every utterance's visual context.
template <typename T>
std::vector<Decoded> decode_corpus(const model::AsrModel<T>& m, const corpus::Corpus& corpus,
                                   const corpus::Vocabulary& vocab, std::size_t batch_size = 36,
                                   const corpus::VisualContext* substitute = nullptr) {
  if (batch_size == 0) throw ArgumentError("decode_corpus: batch size must be positive");
  const auto& utts = corpus.utterances;
  std::vector<std::size_t> order(utts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return utts[a].frames() < utts[b].frames(); });

  const bool multimodal = model::is_multimodal(m.variant());
  std::vector<Decoded> out(utts.size());
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<model::DecodeRequest> reqs;
    for (std::size_t k = start; k < end; ++k) {
      const auto& u = utts[order[k]];
      const corpus::VisualContext* v = nullptr;
      if (multimodal) v = substitute ? substitute : corpus.visual_for(u.id);
      reqs.push_back({&u.features, v, model::default_max_len(u.words.size(), m.config())});
    }
    auto hyps = m.greedy_decode(reqs, vocab);
    for (std::size_t k = start; k < end; ++k) {
      const auto& u = utts[order[k]];
      out[order[k]] = {u.id, u.words, std::move(hyps[k - start])};
    }
  }
  return out;
}

/// Pairs pointing into `decoded`, which must outlive them.
inline std::vector<AlignedPair> align_decoded(const std::vector<Decoded>& decoded) {
  std::vector<AlignedPair> pairs;
  pairs.reserve(decoded.size());
  for (const auto& d : decoded) pairs.push_back(make_pair(d.utterance_id, d.reference, d.hypothesis.words, &d.hypothesis.trace));
  return pairs;
}

inline MaskLookup mask_lookup(const corpus::Corpus& corpus) {
  MaskLookup out;
  for (const auto& [id, rec] : corpus.masks) out[id] = rec.spec;
  return out;
}

/// Recovery rate of `target` (every masked word when empty) when each
/// sample is decoded with `context` in place of its own image.
template <typename T>
Rate image_swap_probe(const model::AsrModel<T>& m, const corpus::Corpus& samples, const corpus::VisualContext& context,
                      const corpus::Vocabulary& vocab, const std::string& target = {}) {
  if (!model::is_multimodal(m.variant())) throw UnsupportedVariantError("image_swap_probe needs a multimodal model");
  if (!samples.is_masked()) throw ArgumentError("image_swap_probe: samples carry no masks");
  const auto decoded = decode_corpus(m, samples, vocab, 36, &context);
  const auto pairs = align_decoded(decoded);
  return recovery(pairs, mask_lookup(samples), [&](const std::string& w) { return target.empty() || w == target; }).rate;
}

}  // namespace mmasr::eval
