#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include <gtest/gtest.h>

#include "mmasr/corpus/synth.hpp"
#include "mmasr/eval/report.hpp"
#include "mmasr/masking/masking.hpp"
#include "test_support.hpp"

using namespace mmasr;
using namespace mmasr::eval;
using corpus::Box;

namespace {

// Minimum over every monotone alignment path, enumerated without memoization.
std::size_t edit_distance_by_enumeration(const Words& a, const Words& b, std::size_t i = 0, std::size_t j = 0) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  return std::min({edit_distance_by_enumeration(a, b, i + 1, j + 1) + (a[i] == b[j] ? 0 : 1),
                   edit_distance_by_enumeration(a, b, i + 1, j) + 1, edit_distance_by_enumeration(a, b, i, j + 1) + 1});
}

// Every sequence over {x, y, z} of length <= max_len.
std::vector<Words> all_sequences(std::size_t max_len) {
  std::vector<Words> out{{}};
  for (std::size_t start = 0; start < out.size(); ++start) {
    if (out[start].size() == max_len) continue;
    for (const char* s : {"x", "y", "z"}) {
      auto w = out[start];
      w.push_back(s);
      out.push_back(std::move(w));
    }
  }
  return out;
}

void expect_well_formed(const Alignment& a, const Words& ref, const Words& hyp) {
  std::size_t i = 0, j = 0, s = 0, d = 0, ins = 0;
  for (const auto& step : a.steps) {
    switch (step.op) {
      case EditOp::Match:
        ASSERT_EQ(step.ref, static_cast<long>(i));
        ASSERT_EQ(step.hyp, static_cast<long>(j));
        ASSERT_EQ(ref[i++], hyp[j++]);
        break;
      case EditOp::Substitute:
        ASSERT_EQ(step.ref, static_cast<long>(i));
        ASSERT_EQ(step.hyp, static_cast<long>(j));
        ASSERT_NE(ref[i++], hyp[j++]);
        ++s;
        break;
      case EditOp::Delete:
        ASSERT_EQ(step.ref, static_cast<long>(i++));
        ++d;
        break;
      case EditOp::Insert:
        ASSERT_EQ(step.hyp, static_cast<long>(j++));
        ++ins;
        break;
    }
  }
  EXPECT_EQ(i, ref.size());
  EXPECT_EQ(j, hyp.size());
  EXPECT_EQ(s, a.substitutions);
  EXPECT_EQ(d, a.deletions);
  EXPECT_EQ(ins, a.insertions);
}

std::vector<AlignedPair> pairs_of(const std::vector<std::pair<Words, Words>>& v) {
  std::vector<AlignedPair> out;
  for (std::size_t k = 0; k < v.size(); ++k) out.push_back(make_pair("u" + std::to_string(k), v[k].first, v[k].second));
  return out;
}

MaskLookup masks_of(const std::vector<std::vector<std::size_t>>& v) {
  MaskLookup out;
  for (std::size_t k = 0; k < v.size(); ++k) out["u" + std::to_string(k)] = {"u" + std::to_string(k), v[k], {}};
  return out;
}

model::AttentionTrace alpha_trace(std::vector<double> alphas) {
  model::AttentionTrace t;
  for (double a : alphas) t.steps.push_back({{1.0}, {}, 1.0 - a, a});
  return t;
}

// Unit-grid area enumeration for integer boxes.
double iou_by_cells(const Box& a, const Box& b) {
  long inter = 0, uni = 0;
  const long x0 = static_cast<long>(std::min(a.x1, b.x1)), x1 = static_cast<long>(std::max(a.x2, b.x2));
  const long y0 = static_cast<long>(std::min(a.y1, b.y1)), y1 = static_cast<long>(std::max(a.y2, b.y2));
  auto inside = [](const Box& r, long x, long y) { return x >= r.x1 && x + 1 <= r.x2 && y >= r.y1 && y + 1 <= r.y2; };
  for (long x = x0; x < x1; ++x)
    for (long y = y0; y < y1; ++y) {
      const bool ia = inside(a, x, y), ib = inside(b, x, y);
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Box random_box(std::mt19937_64& rng, int extent = 12) {
  std::uniform_int_distribution<int> c(0, extent);
  int x1 = c(rng), x2 = c(rng), y1 = c(rng), y2 = c(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  if (x1 == x2) ++x2;
  if (y1 == y2) ++y2;
  return {double(x1), double(y1), double(x2), double(y2)};
}

// N proposals where only index `correct` overlaps the single truth box.
GroundingQuery planted_query(std::size_t n, std::size_t correct, std::vector<double> weights) {
  GroundingQuery q;
  for (std::size_t j = 0; j < n; ++j) q.proposals.push_back({10.0 * j, 0, 10.0 * j + 8, 8});
  q.truth = {q.proposals[correct]};
  q.weights = std::move(weights);
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------
// WER

TEST(Wer, BasicCases) {
  EXPECT_EQ(wer({"a", "b", "c"}, {"a", "b", "c"}), 0.0);
  EXPECT_DOUBLE_EQ(wer({"a", "b", "c"}, {"a", "c"}), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(wer({"a"}, {"b", "c", "d"}), 3.0);
  EXPECT_THROW(wer({}, {"a"}), ArgumentError);
}

TEST(Wer, ExhaustiveAgainstPathEnumeration) {
  const auto seqs = all_sequences(8);
  std::size_t checked = 0;
  for (const auto& ref : seqs) {
    if (ref.empty()) continue;
    for (const auto& hyp : seqs) {
      if (ref.size() + hyp.size() > 8) continue;
      const auto a = align(ref, hyp);
      ASSERT_EQ(a.errors(), edit_distance_by_enumeration(ref, hyp));
      ++checked;
    }
  }
  EXPECT_EQ(checked, 73812u);  // pairs with a non-empty ref and combined length <= 8
}

TEST(Wer, RandomLongPairsAgainstPathEnumeration) {
  std::mt19937_64 rng(1);
  const char* sym[] = {"x", "y", "z"};
  for (int k = 0; k < 300; ++k) {
    Words ref(1 + rng() % 8), hyp(rng() % 9);
    for (auto& w : ref) w = sym[rng() % 3];
    for (auto& w : hyp) w = sym[rng() % 3];
    const auto a = align(ref, hyp);
    ASSERT_EQ(a.errors(), edit_distance_by_enumeration(ref, hyp));
    expect_well_formed(a, ref, hyp);
  }
}

TEST(Wer, AlignmentsCoverEveryPositionOnce) {
  for (const auto& ref : all_sequences(4))
    for (const auto& hyp : all_sequences(4)) expect_well_formed(align(ref, hyp), ref, hyp);
}

TEST(Wer, CorpusRateSumsErrorsOverReferenceWords) {
  const auto r = corpus_wer(pairs_of({{{"a", "b"}, {"a"}}, {{"c", "d", "e"}, {"c", "x", "e", "f"}}}));
  EXPECT_EQ(r, (Rate{3, 5}));
}

// ---------------------------------------------------------------------------
// Recovery rate

TEST(RecoveryRate, PerfectAndAbsentHypotheses) {
  EXPECT_EQ(recovery_rate(pairs_of({{{"a", "b", "c"}, {"a", "b", "c"}}}), masks_of({{0, 2}})), (Rate{2, 2}));
  EXPECT_EQ(recovery_rate(pairs_of({{{"a", "b", "c"}, {"b"}}}), masks_of({{0, 2}})), (Rate{0, 2}));
}

TEST(RecoveryRate, RepeatedWordFollowsTheAlignment) {
  const auto r = recovery(pairs_of({{{"a", "b", "a"}, {"a", "b"}}}), masks_of({{0, 2}}));
  EXPECT_EQ(r.rate, (Rate{1, 2}));
  ASSERT_EQ(r.recovered.size(), 1u);
  EXPECT_EQ(r.recovered[0].ref_index, 0u);
  EXPECT_EQ(r.recovered[0].hyp_index, 0u);
}

TEST(RecoveryRate, SubstitutionIsNotRecovery) {
  EXPECT_EQ(recovery_rate(pairs_of({{{"a", "b", "c"}, {"a", "x", "c"}}}), masks_of({{1}})), (Rate{0, 1}));
}

TEST(RecoveryRate, MissingMaskOrBadIndexIsAnError) {
  const auto pairs = pairs_of({{{"a"}, {"a"}}});
  EXPECT_THROW(recovery_rate(pairs, {}), LookupError);
  EXPECT_THROW(recovery_rate(pairs, masks_of({{3}})), ArgumentError);
}

TEST(RecoveryRate, ShardOrderInvariantAndBounded) {
  std::mt19937_64 rng(2);
  const char* sym[] = {"x", "y", "z", "w"};
  std::vector<std::pair<Words, Words>> data;
  std::vector<std::vector<std::size_t>> masks;
  for (int k = 0; k < 200; ++k) {
    Words ref(1 + rng() % 7), hyp(rng() % 8);
    for (auto& w : ref) w = sym[rng() % 4];
    for (auto& w : hyp) w = sym[rng() % 4];
    std::vector<std::size_t> m;
    for (std::size_t i = 0; i < ref.size(); ++i)
      if (rng() % 2) m.push_back(i);
    data.emplace_back(ref, hyp);
    masks.push_back(m);
  }
  const auto lookup = masks_of(masks);
  const auto full = recovery_rate(pairs_of(data), lookup);
  EXPECT_LE(full.numerator, full.denominator);
  auto pairs = pairs_of(data);
  std::shuffle(pairs.begin(), pairs.end(), rng);
  Rate sharded;
  for (std::size_t s = 0; s < pairs.size(); s += 37) {
    std::vector<AlignedPair> shard(pairs.begin() + static_cast<long>(s), pairs.begin() + static_cast<long>(std::min(pairs.size(), s + 37)));
    sharded += recovery_rate(shard, lookup);
  }
  EXPECT_EQ(sharded, full);
}

// ---------------------------------------------------------------------------
// Visual attention and grounding rate

TEST(ExpectedVisualAttention, ConstantAndFlatMean) {
  const auto t = alpha_trace({0.3, 0.3, 0.3});
  EXPECT_DOUBLE_EQ(expected_visual_attention({&t}), 0.3);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<model::AttentionTrace> traces;
  double sum = 0.0;
  std::size_t n = 0;
  for (int k = 0; k < 20; ++k) {
    std::vector<double> a(1 + rng() % 9);
    for (auto& x : a) {
      x = u(rng);
      sum += x;
      ++n;
    }
    traces.push_back(alpha_trace(a));
  }
  std::vector<const model::AttentionTrace*> ptrs;
  for (const auto& t2 : traces) ptrs.push_back(&t2);
  const double e = expected_visual_attention(ptrs);
  EXPECT_NEAR(e, sum / static_cast<double>(n), 1e-12);
  EXPECT_GT(e, 0.0);
  EXPECT_LT(e, 1.0);
}

TEST(ExpectedVisualAttention, UnimodalTracesAreUnsupported) {
  model::AttentionTrace t;
  t.steps.push_back({{1.0}, {}, std::nullopt, std::nullopt});
  EXPECT_THROW(expected_visual_attention({&t}), UnsupportedVariantError);
}

TEST(GroundingRate, ThresholdBoundaries) {
  EXPECT_EQ(grounding_rate({0.6, 0.7, 0.9}, 0.5), (Rate{3, 3}));
  EXPECT_EQ(grounding_rate({0.6, 0.7, 0.9}, 1.0), (Rate{0, 3}));
  EXPECT_EQ(grounding_rate({0.01, 0.2}, 0.0), (Rate{2, 2}));
  EXPECT_TRUE(grounding_rate({}, 0.5).absent());
}

TEST(GroundingRate, ThreeOfFourFixture) {
  // Four recovered words emitted at steps whose alpha_v straddle 0.5.
  const auto t0 = alpha_trace({0.9, 0.2, 0.8});
  const auto t1 = alpha_trace({0.1, 0.6});
  std::vector<AlignedPair> pairs = {make_pair("u0", {"a", "b", "c"}, {"a", "b", "c"}, &t0),
                                    make_pair("u1", {"d", "e"}, {"d", "e"}, &t1)};
  const auto rec = recovery(pairs, masks_of({{0, 2}, {0, 1}}));
  ASSERT_EQ(rec.rate, (Rate{4, 4}));
  EXPECT_EQ(recovered_alpha_v(pairs, rec.recovered), (std::vector<double>{0.9, 0.8, 0.1, 0.6}));
  const auto gr = grounding_rate(recovered_alpha_v(pairs, rec.recovered), 0.5);
  EXPECT_EQ(gr, (Rate{3, 4}));
  EXPECT_DOUBLE_EQ(*gr.percent(), 75.0);
}

TEST(GroundingRate, AttributionUsesTheEmittingStep) {
  // The hypothesis has an extra word first, so the masked word is emitted at step 1.
  const auto t = alpha_trace({0.1, 0.9});
  std::vector<AlignedPair> pairs = {make_pair("u0", {"cat"}, {"the", "cat"}, &t)};
  const auto rec = recovery(pairs, masks_of({{0}}));
  EXPECT_EQ(recovered_alpha_v(pairs, rec.recovered), (std::vector<double>{0.9}));
}

// ---------------------------------------------------------------------------
// IoU

TEST(Iou, Examples) {
  const Box a{0, 0, 2, 2};
  EXPECT_EQ(iou(a, a), 1.0);
  EXPECT_EQ(iou(a, {5, 5, 6, 6}), 0.0);
  EXPECT_DOUBLE_EQ(iou(a, {1, 1, 3, 3}), 1.0 / 7.0);
  EXPECT_EQ(iou(a, {2, 0, 4, 2}), 0.0);  // touching edges share no area
}

TEST(Iou, DegenerateBoxes) {
  const Box line{1, 1, 1, 5};
  EXPECT_EQ(iou(line, {0, 0, 4, 4}), 0.0);
  EXPECT_EQ(iou(line, line), 1.0);
}

TEST(Iou, MatchesUnitGridEnumeration) {
  std::mt19937_64 rng(4);
  for (int k = 0; k < 1000; ++k) {
    const auto a = random_box(rng), b = random_box(rng);
    ASSERT_EQ(iou(a, b), iou_by_cells(a, b)) << k;
    ASSERT_EQ(iou(a, b), iou(b, a));
  }
}

TEST(Iou, ShrinkingAwayIsMonotone) {
  const Box fixed{0, 0, 10, 10};
  double prev = 1.0;
  for (double x1 = 0; x1 < 10; x1 += 1.0) {
    const double v = iou(fixed, {x1, 0, 10, 10});
    EXPECT_LE(v, prev);
    prev = v;
  }
}

// ---------------------------------------------------------------------------
// IoU precision and the random baseline

TEST(IouPrecision, PlantedTopProposalScoresFull) {
  std::vector<GroundingQuery> qs;
  for (std::size_t c = 0; c < 6; ++c) {
    std::vector<double> w(6, 0.02);
    w[c] = 0.9;
    qs.push_back(planted_query(6, c, w));
  }
  EXPECT_EQ(iou_precision_at_k(qs, 1), (Rate{6, 6}));
}

TEST(IouPrecision, NonDecreasingInK) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<GroundingQuery> qs;
  for (int k = 0; k < 200; ++k) {
    std::vector<double> w(8);
    for (auto& x : w) x = u(rng);
    qs.push_back(planted_query(8, rng() % 8, w));
  }
  std::size_t prev = 0;
  for (std::size_t k = 1; k <= 8; ++k) {
    const auto r = iou_precision_at_k(qs, k);
    EXPECT_GE(r.numerator, prev);
    prev = r.numerator;
  }
  EXPECT_EQ(prev, qs.size());
}

TEST(IouPrecision, KOutsideRangeIsAnError) {
  const std::vector<GroundingQuery> qs = {planted_query(4, 0, {0.25, 0.25, 0.25, 0.25})};
  EXPECT_THROW(iou_precision_at_k(qs, 5), ArgumentError);
  EXPECT_THROW(iou_precision_at_k(qs, 0), ArgumentError);
  std::mt19937_64 rng(1);
  EXPECT_THROW(random_k_baseline(qs, 5, rng), ArgumentError);
}

TEST(IouPrecision, NoAnnotatedWordsIsAbsent) { EXPECT_TRUE(iou_precision_at_k({}, 1).absent()); }

TEST(RandomBaseline, FullKEqualsTopK) {
  std::vector<GroundingQuery> qs;
  for (std::size_t c = 0; c < 5; ++c) qs.push_back(planted_query(5, c, {0.2, 0.2, 0.2, 0.2, 0.2}));
  std::mt19937_64 rng(6);
  EXPECT_EQ(random_k_baseline(qs, 5, rng), iou_precision_at_k(qs, 5));
}

TEST(RandomBaseline, HitRateFollowsTheBinomial) {
  std::vector<double> w(36, 1.0 / 36);
  const std::vector<GroundingQuery> qs(20000, planted_query(36, 7, w));
  std::mt19937_64 rng(7);
  for (std::size_t k : {1u, 3u, 5u}) {
    const auto r = random_k_baseline(qs, k, rng);
    const double p = static_cast<double>(k) / 36.0;
    const double sigma = std::sqrt(p * (1 - p) / static_cast<double>(qs.size()));
    EXPECT_NEAR(*r.fraction(), p, 3 * sigma) << k;
  }
}

TEST(RandomBaseline, DeterministicGivenSeed) {
  std::vector<GroundingQuery> qs;
  for (std::size_t c = 0; c < 50; ++c) qs.push_back(planted_query(10, c % 10, std::vector<double>(10, 0.1)));
  std::mt19937_64 a(8), b(8);
  EXPECT_EQ(random_k_baseline(qs, 2, a), random_k_baseline(qs, 2, b));
}

TEST(GroundingQueries, CollectsTruthBoxesAndSkipsUnannotatedWords) {
  corpus::Corpus c;
  auto v = std::make_shared<corpus::VisualContext>();
  v->image_id = "img";
  v->boxes = {{0, 0, 4, 4}, {10, 10, 14, 14}};
  v->proposals = corpus::FeatureMatrix::Zero(2, 1);
  c.images["img"] = v;
  c.links["u0"] = "img";
  c.annotations["u0"] = {"u0", {{{1}, {10, 10, 14, 14}}, {{1, 2}, {0, 0, 4, 5}}}};
  model::AttentionTrace t;
  for (int s = 0; s < 3; ++s) t.steps.push_back({{1.0}, {0.3, 0.7}, 0.5, 0.5});
  std::vector<AlignedPair> pairs = {make_pair("u0", {"the", "dog", "runs"}, {"the", "dog", "runs"}, &t)};
  const auto rec = recovery(pairs, masks_of({{0, 1}}));
  const auto qs = grounding_queries(pairs, rec.recovered, c);
  ASSERT_EQ(qs.size(), 1u);  // "the" carries no box
  EXPECT_EQ(qs[0].truth.size(), 2u);
  EXPECT_EQ(iou_precision_at_k(qs, 1), (Rate{1, 1}));
}

// ---------------------------------------------------------------------------
// Word accuracy and rank concentration

TEST(WordAccuracy, Fixtures) {
  const corpus::WordCategoryList colors{"colors", {"red", "blue"}};
  EXPECT_EQ(word_accuracy(colors, pairs_of({{{"red", "car"}, {"red", "car"}}})), (Rate{1, 1}));
  EXPECT_TRUE(word_accuracy(colors, pairs_of({{{"a", "car"}, {"a", "car"}}})).absent());
  std::vector<std::pair<Words, Words>> data;
  for (int i = 0; i < 10; ++i) data.push_back({{"one", "red"}, {"one", i == 3 ? "blue" : "red"}});
  EXPECT_EQ(word_accuracy(colors, pairs_of(data)), (Rate{9, 10}));
}

TEST(RankConcentration, UniformOneHotAndOrdering) {
  const auto uni = attention_rank_concentration({std::vector<double>(36, 1.0 / 36), std::vector<double>(36, 1.0 / 36)});
  for (double x : uni) EXPECT_NEAR(x, 1.0 / 36, 1e-15);
  std::vector<double> hot(36, 0.0);
  hot[17] = 1.0;
  const auto h = attention_rank_concentration({hot});
  EXPECT_EQ(h[0], 1.0);
  EXPECT_EQ(std::accumulate(h.begin() + 1, h.end(), 0.0), 0.0);

  std::mt19937_64 rng(9);
  std::vector<std::vector<double>> ws;
  for (int k = 0; k < 50; ++k) {
    std::vector<double> w(6);
    double s = 0;
    for (auto& x : w) s += (x = std::uniform_real_distribution<double>(0, 1)(rng));
    for (auto& x : w) x /= s;
    ws.push_back(w);
  }
  const auto curve = attention_rank_concentration(ws);
  EXPECT_NEAR(std::accumulate(curve.begin(), curve.end(), 0.0), 1.0, 1e-6);
  for (std::size_t r = 1; r < curve.size(); ++r) EXPECT_LE(curve[r], curve[r - 1]);
  EXPECT_TRUE(attention_rank_concentration({}).empty());
}

// ---------------------------------------------------------------------------
// Report and traces

TEST(Rate, AbsentSerializesAsAbsent) {
  const nlohmann::json j = Rate{};
  EXPECT_EQ(j.at("percent"), "absent");
  const nlohmann::json k = Rate{1, 4};
  EXPECT_EQ(k.at("percent"), 25.0);
  EXPECT_EQ(k.get<Rate>(), (Rate{1, 4}));
}

namespace {

struct Decodes {
  corpus::Corpus dataset;
  std::vector<Decoded> decoded;

  // Hypotheses copy the reference except every third word is dropped.
  explicit Decodes(bool multimodal) {
    const auto s = corpus::synthesize_corpus(mmasr::testing::tiny_synth(1, 1, 12), 3);
    dataset = masking::mask_with_probability(s.test, 0.5, 1);
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    for (const auto& utt : dataset.utterances) {
      Decoded d{utt.id, utt.words, {}};
      for (std::size_t i = 0; i < utt.words.size(); ++i) {
        if (i % 3 == 2) continue;
        d.hypothesis.words.push_back(utt.words[i]);
        model::TraceStep st{{1.0}, {}, std::nullopt, std::nullopt};
        if (multimodal) {
          st.alpha_v = u(rng);
          st.alpha_a = 1.0 - *st.alpha_v;
          st.proposal_weights.assign(6, 0.0);
          const auto* v = dataset.visual_for(utt.id);
          // Attend to the box annotated for this word when there is one.
          std::size_t target = 0;
          for (const auto& e : dataset.annotations.at(utt.id).entries) {
            if (e.word_indices.front() == i) target = std::find(v->boxes.begin(), v->boxes.end(), e.box) - v->boxes.begin();
          }
          for (auto& w : st.proposal_weights) w = 0.05;
          st.proposal_weights[target] = 0.75;
        }
        d.hypothesis.trace.steps.push_back(st);
      }
      decoded.push_back(std::move(d));
    }
  }
};

}  // namespace

TEST(Report, MetricAndVariantPreconditions) {
  const Decodes uni(false);
  EvalOptions o;
  o.metrics = {"bleu"};
  EXPECT_THROW(build_report(uni.decoded, uni.dataset, "unimodal", o), ConfigError);
  o.metrics = {"gr"};
  EXPECT_THROW(build_report(uni.decoded, uni.dataset, "unimodal", o), UnsupportedVariantError);
  const Decodes mm(true);
  o.metrics = {"iou"};
  EXPECT_THROW(build_report(mm.decoded, mm.dataset, "mag", o), UnsupportedVariantError);
  o.metrics = {"gr"};
  EXPECT_THROW(build_report(mm.decoded, mm.dataset, "maop", o), ConfigError);  // no threshold source
  auto clean = mm.dataset;
  clean.masks.clear();
  o.metrics = {"rr"};
  EXPECT_THROW(build_report(mm.decoded, clean, "maop", o), ConfigError);
}

TEST(Report, FiguresAgreeWithTheMetricFunctions) {
  const Decodes mm(true);
  const auto s = corpus::synthesize_corpus(mmasr::testing::tiny_synth(1, 1, 1), 3);
  EvalOptions o;
  o.gr_threshold = 0.5;
  o.gr_threshold_source = "fixed";
  o.categories = s.categories;
  const auto rep = build_report(mm.decoded, mm.dataset, "maop", o);
  const auto pairs = align_decoded(mm.decoded);
  const auto rec = recovery(pairs, mask_lookup(mm.dataset));
  EXPECT_EQ(*rep.wer, corpus_wer(pairs));
  EXPECT_EQ(*rep.rr, rec.rate);
  EXPECT_EQ(*rep.gr, grounding_rate(recovered_alpha_v(pairs, rec.recovered), 0.5));
  EXPECT_EQ(rep.e_alpha_v_source, "fixed");
  ASSERT_EQ(rep.iou_top_k.size(), 3u);
  EXPECT_EQ(rep.iou_top_k.at(1).numerator, rep.iou_top_k.at(1).denominator);  // attention sits on the planted box
  EXPECT_EQ(rep.iou_random_k.at(1).denominator, 10 * rep.iou_top_k.at(1).denominator);
  Rate cat_rr;
  for (const auto& [name, c] : rep.categories) cat_rr += c.rr;
  EXPECT_EQ(cat_rr, *rep.rr);  // categories partition the vocabulary

  const auto j = rep.to_json();
  for (const auto* k : {"wer", "recovery_rate", "grounding_rate", "e_alpha_v", "categories", "iou_precision", "attention_rank_curve"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_NE(rep.table().find("Recovery rate"), std::string::npos);
}

TEST(Report, RecomputedThresholdIsTheDatasetMean) {
  const Decodes mm(true);
  EvalOptions o;
  o.metrics = {"gr"};
  o.gr_recompute = true;
  const auto rep = build_report(mm.decoded, mm.dataset, "mag", o);
  EXPECT_DOUBLE_EQ(*rep.e_alpha_v, expected_visual_attention(trace_pointers(mm.decoded)));
}

TEST(Report, RatesStayWithinBounds) {
  const Decodes mm(true);
  EvalOptions o;
  o.gr_recompute = true;
  const auto rep = build_report(mm.decoded, mm.dataset, "maop", o);
  for (const auto& r : {*rep.rr, *rep.gr}) {
    ASSERT_FALSE(r.absent());
    EXPECT_GE(*r.percent(), 0.0);
    EXPECT_LE(*r.percent(), 100.0);
  }
}

TEST(Traces, RoundTripThroughJsonLines) {
  const Decodes mm(true);
  mmasr::testing::TempDir tmp;
  write_traces(tmp / "traces.jsonl", mm.decoded);
  const auto back = read_traces(tmp / "traces.jsonl");
  ASSERT_EQ(back.size(), mm.decoded.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].utterance_id, mm.decoded[i].utterance_id);
    EXPECT_EQ(back[i].reference, mm.decoded[i].reference);
    EXPECT_EQ(back[i].hypothesis, mm.decoded[i].hypothesis);
  }
  mmasr::testing::write_file(tmp / "bad.jsonl", "{\"utterance_id\": 3}\n");
  EXPECT_THROW(read_traces(tmp / "bad.jsonl"), MalformedRecordError);
  EXPECT_THROW(read_traces(tmp / "none.jsonl"), IoError);
}

// ---------------------------------------------------------------------------
// Image swap probe

TEST(ImageSwapProbe, SharedImageSubstitutionMatchesBaseline) {
  auto cfg = mmasr::testing::tiny_synth(1, 1, 10);
  const auto s = corpus::synthesize_corpus(cfg, 4);
  auto shared = masking::mask_with_probability(s.test, 0.5, 2);
  const auto& image = *shared.images.begin()->second;
  for (auto& [u, img] : shared.links) img = image.image_id;
  const auto vocab = corpus::build_vocab(s.test);
  model::ModelConfig mc;
  mc.variant = model::Variant::Maop;
  mc.feature_dim = s.test.utterances[0].features.cols();
  mc.enc_layers = 1;
  mc.subsample_layers = {1};
  mc.enc_hidden = mc.dec_hidden = mc.emb_dim = mc.att_dim = mc.visual_proj_dim = 8;
  mc.vocab_size = vocab.size();
  mc.n_proposals = cfg.n_proposals;
  mc.visual_in_dim = cfg.visual_dim;
  const model::AsrModel<float> m(mc, 1);
  const auto baseline = recovery_rate(align_decoded(decode_corpus(m, shared, vocab)), mask_lookup(shared));
  EXPECT_EQ(image_swap_probe(m, shared, image, vocab), baseline);

  mc.variant = model::Variant::Unimodal;
  const model::AsrModel<float> u(mc, 1);
  EXPECT_THROW(image_swap_probe(u, shared, image, vocab), UnsupportedVariantError);
  EXPECT_THROW(image_swap_probe(m, s.test, image, vocab), ArgumentError);
}
