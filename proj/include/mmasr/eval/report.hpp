#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/seed.hpp"
#include "mmasr/eval/decode.hpp"
#include "mmasr/eval/grounding.hpp"
#include "mmasr/eval/metrics.hpp"

namespace mmasr::eval {

// ---------------------------------------------------------------------------
// traces.jsonl: one decoded utterance per line.

inline void write_traces(const std::filesystem::path& path, const std::vector<Decoded>& decoded) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& d : decoded) {
    nlohmann::json j{{"utterance_id", d.utterance_id},
                     {"reference", d.reference},
                     {"hypothesis", d.hypothesis.words},
                     {"ids", d.hypothesis.ids},
                     {"terminated", d.hypothesis.terminated},
                     {"steps", d.hypothesis.trace.steps}};
    os << j.dump() << '\n';
  }
}

inline std::vector<Decoded> read_traces(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing traces file " + path.string());
  std::vector<Decoded> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      Decoded d;
      j.at("utterance_id").get_to(d.utterance_id);
      j.at("reference").get_to(d.reference);
      j.at("hypothesis").get_to(d.hypothesis.words);
      if (j.contains("ids")) j.at("ids").get_to(d.hypothesis.ids);
      d.hypothesis.terminated = j.value("terminated", false);
      j.at("steps").get_to(d.hypothesis.trace.steps);
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw MalformedRecordError(path.string() + ":" + std::to_string(n), e.what());
    }
  }
  return out;
}

inline std::vector<const model::AttentionTrace*> trace_pointers(const std::vector<Decoded>& decoded) {
  std::vector<const model::AttentionTrace*> out;
  for (const auto& d : decoded) out.push_back(&d.hypothesis.trace);
  return out;
}

// ---------------------------------------------------------------------------
// Report

struct EvalOptions {
  std::set<std::string> metrics = {"wer", "rr", "gr", "iou", "wa"};
  std::vector<std::size_t> ks = {1, 3, 5};
  // Threshold for grounding; when unset and `gr_recompute` is true, it is
  // computed from the evaluated dataset's own traces.
  std::optional<double> gr_threshold;
  std::string gr_threshold_source;
  bool gr_recompute = false;
  std::vector<corpus::WordCategoryList> categories;
  std::uint64_t seed = 0;
  std::size_t random_k_repeats = 10;
};

struct CategoryFigures {
  Rate rr, gr, word_accuracy;
};

struct EvalReport {
  std::string dataset;
  std::string variant;
  std::size_t samples = 0;
  std::optional<Rate> wer, rr, gr;
  std::optional<double> e_alpha_v;
  std::string e_alpha_v_source;
  std::map<std::string, CategoryFigures> categories;
  std::map<std::size_t, Rate> iou_top_k, iou_random_k;
  std::vector<double> rank_curve;
  nlohmann::json options;

  nlohmann::json to_json() const {
    nlohmann::json j{{"dataset", dataset}, {"variant", variant}, {"samples", samples}, {"options", options}};
    // Metrics that were not requested are left out rather than written as null.
    if (wer) j["wer"] = *wer;
    if (rr) j["recovery_rate"] = *rr;
    if (gr) j["grounding_rate"] = *gr;
    if (e_alpha_v) {
      j["e_alpha_v"] = *e_alpha_v;
      j["e_alpha_v_source"] = e_alpha_v_source;
    }
    if (!categories.empty()) {
      nlohmann::json cats = nlohmann::json::object();
      for (const auto& [name, c] : categories) {
        cats[name] = {{"recovery_rate", c.rr}, {"grounding_rate", c.gr}, {"word_accuracy", c.word_accuracy}};
      }
      j["categories"] = cats;
    }
    if (!iou_top_k.empty()) {
      nlohmann::json iou = nlohmann::json::object();
      for (const auto& [k, r] : iou_top_k) iou[std::to_string(k)] = {{"top", r}, {"random", iou_random_k.at(k)}};
      j["iou_precision"] = iou;
      j["attention_rank_curve"] = rank_curve;
    }
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    auto fmt = [](const std::optional<Rate>& r) {
      std::ostringstream s;
      if (!r || r->absent()) {
        s << "absent";
      } else {
        s << std::fixed << std::setprecision(2) << *r->percent() << "% (" << r->numerator << "/" << r->denominator << ")";
      }
      return s.str();
    };
    os << "dataset: " << dataset << "  variant: " << variant << "  samples: " << samples << '\n';
    if (wer) os << std::left << std::setw(26) << "WER" << fmt(wer) << '\n';
    if (rr) os << std::left << std::setw(26) << "Recovery rate" << fmt(rr) << '\n';
    if (gr) os << std::left << std::setw(26) << "Grounding rate" << fmt(gr) << '\n';
    if (e_alpha_v) os << std::left << std::setw(26) << "E[alpha_v]" << std::setprecision(4) << *e_alpha_v << '\n';
    if (!categories.empty()) {
      os << '\n' << std::left << std::setw(14) << "category" << std::setw(26) << "RR" << std::setw(26) << "GR" << "WA" << '\n';
      for (const auto& [name, c] : categories) {
        os << std::left << std::setw(14) << name << std::setw(26) << fmt(c.rr) << std::setw(26) << fmt(c.gr)
           << fmt(c.word_accuracy) << '\n';
      }
    }
    if (!iou_top_k.empty()) {
      os << '\n' << std::left << std::setw(6) << "K" << std::setw(26) << "top-K IoU>0.5" << "random-K" << '\n';
      for (const auto& [k, r] : iou_top_k) {
        os << std::left << std::setw(6) << k << std::setw(26) << fmt(r) << fmt(iou_random_k.at(k)) << '\n';
      }
    }
    return os.str();
  }
};

inline bool needs_masks(const std::set<std::string>& metrics) {
  return metrics.count("rr") || metrics.count("gr") || metrics.count("iou");
}

/// Computes the requested metrics over decoded samples of `dataset`.
inline EvalReport build_report(const std::vector<Decoded>& decoded, const corpus::Corpus& dataset, const std::string& variant,
                               const EvalOptions& opts) {
  static const std::set<std::string> known = {"wer", "rr", "gr", "iou", "wa"};
  for (const auto& m : opts.metrics) {
    if (!known.count(m)) throw ConfigError("unknown metric '" + m + "'");
  }
  if (needs_masks(opts.metrics) && !dataset.is_masked()) {
    throw ConfigError("metrics rr, gr and iou need a masked dataset (masks.jsonl); this dataset is unmasked");
  }
  const bool multimodal = variant != "unimodal";
  if (!multimodal && (opts.metrics.count("gr") || opts.metrics.count("iou"))) {
    throw UnsupportedVariantError("grounding metrics need a multimodal model");
  }
  if (opts.metrics.count("iou") && variant != "maop") {
    throw UnsupportedVariantError("IoU precision needs proposal attention (maop)");
  }

  EvalReport rep;
  rep.variant = variant;
  rep.samples = decoded.size();
  const auto pairs = align_decoded(decoded);
  if (opts.metrics.count("wer")) rep.wer = corpus_wer(pairs);

  MaskLookup masks;
  if (needs_masks(opts.metrics)) masks = mask_lookup(dataset);
  RecoveryResult rec;
  if (needs_masks(opts.metrics)) rec = recovery(pairs, masks);
  if (opts.metrics.count("rr")) rep.rr = rec.rate;

  std::optional<double> threshold = opts.gr_threshold;
  std::string source = opts.gr_threshold_source;
  if (opts.metrics.count("gr")) {
    if (!threshold) {
      if (!opts.gr_recompute) throw ConfigError("grounding rate needs a threshold source (dev traces or an explicit recompute)");
      threshold = expected_visual_attention(trace_pointers(decoded));
      source = "recomputed on evaluated dataset";
    }
    rep.e_alpha_v = threshold;
    rep.e_alpha_v_source = source;
    rep.gr = grounding_rate(recovered_alpha_v(pairs, rec.recovered), *threshold);
  }

  for (const auto& cat : opts.categories) {
    CategoryFigures f;
    auto in_cat = [&](const std::string& w) { return cat.words.count(corpus::lowercase(w)) > 0; };
    if (needs_masks(opts.metrics)) {
      auto cr = recovery(pairs, masks, in_cat);
      f.rr = cr.rate;
      if (opts.metrics.count("gr")) f.gr = grounding_rate(recovered_alpha_v(pairs, cr.recovered), *threshold);
    }
    if (opts.metrics.count("wa")) f.word_accuracy = word_accuracy(cat, pairs);
    rep.categories[cat.name] = f;
  }

  if (opts.metrics.count("iou")) {
    const auto queries = grounding_queries(pairs, rec.recovered, dataset);
    std::mt19937_64 rng(derive_seed(opts.seed, "eval/random-k"));
    for (auto k : opts.ks) {
      rep.iou_top_k[k] = iou_precision_at_k(queries, k);
      Rate rnd;
      for (std::size_t r = 0; r < opts.random_k_repeats; ++r) rnd += random_k_baseline(queries, k, rng);
      rep.iou_random_k[k] = rnd;
    }
    std::vector<std::vector<double>> weights;
    for (const auto& q : queries) weights.push_back(q.weights);
    rep.rank_curve = attention_rank_concentration(weights);
  }

  nlohmann::json o{{"metrics", opts.metrics}, {"ks", opts.ks}, {"seed", opts.seed}, {"random_k_repeats", opts.random_k_repeats}};
  std::vector<std::string> names;
  for (const auto& c : opts.categories) names.push_back(c.name);
  o["categories"] = names;
  rep.options = o;
  return rep;
}

}  // namespace mmasr::eval
