#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/corpus/manifest.hpp"
#include "mmasr/corpus/synth.hpp"
#include "mmasr/corpus/vocab.hpp"
#include "mmasr/eval/decode.hpp"
#include "mmasr/eval/report.hpp"
#include "mmasr/masking/masking.hpp"
#include "mmasr/model/checkpoint.hpp"
#include "mmasr/training/trainer.hpp"

// Subcommand implementations. Each takes a fully resolved run description,
// persists it as run_metadata.json in its out dir before doing any work,
// and writes every artifact under that dir. `rerun` replays a persisted
// description.

namespace mmasr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "0.1.0";

// Exit statuses.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;   // bad flags, configs, or requests the model cannot serve
inline constexpr int kExitRuntime = 3;  // I/O, data, or numerical failures

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ArgumentError*>(&e) ||
      dynamic_cast<const UnsupportedVariantError*>(&e) || dynamic_cast<const IncompatibleCheckpointError*>(&e)) {
    return kExitConfig;
  }
  return kExitRuntime;
}

// MMASR_VERBOSITY: 0 silences progress, 1 (default) reports steps, 2 adds
// per-epoch records. Never affects artifacts.
inline int verbosity() {
  const char* v = std::getenv("MMASR_VERBOSITY");
  if (!v || !*v) return 1;
  return std::atoi(v);
}

inline void say(int level, const std::string& msg) {
  if (verbosity() >= level) std::cerr << msg << '\n';
}

// ---------------------------------------------------------------------------
// Run descriptions

struct SynthRun {
  corpus::SynthConfig synth;
  std::uint64_t seed = 0;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthRun, synth, seed, out)

struct MaskRun {
  std::string corpus;
  std::string mode;  // augment | probability | category
  double probability = 0.0;
  std::string category_file;
  bool expand = true;
  std::uint64_t seed = 0;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MaskRun, corpus, mode, probability, category_file, expand, seed, out)

struct TrainRun {
  std::string train_dir;
  std::string dev_dir;
  model::ModelConfig model;
  training::TrainConfig train;
  std::uint64_t seed = 0;
  std::string init_from;  // checkpoint dir for pretrained initialization
  std::size_t vocab_min_count = 1;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainRun, train_dir, dev_dir, model, train, seed, init_from, vocab_min_count,
                                                out)

struct EvaluateRun {
  std::string checkpoint;
  std::string dataset;
  std::vector<std::string> metrics = {"wer"};
  std::vector<std::size_t> ks = {1, 3, 5};
  std::string gr_threshold_from;  // evaluate output dir holding dev traces
  bool gr_recompute = false;
  std::vector<std::string> category_files;
  std::string traces;  // consume these traces instead of decoding
  std::uint64_t seed = 0;
  std::size_t batch_size = 36;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvaluateRun, checkpoint, dataset, metrics, ks, gr_threshold_from,
                                                gr_recompute, category_files, traces, seed, batch_size, out)

struct ProbeRun {
  std::string checkpoint;
  std::string dataset;
  std::string image_id;
  std::string samples_file;  // utterance ids, one per line; all masked samples when empty
  std::string target;        // word whose recovery is measured; every masked word when empty
  std::uint64_t seed = 0;
  std::size_t batch_size = 36;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProbeRun, checkpoint, dataset, image_id, samples_file, target, seed,
                                                batch_size, out)

// ---------------------------------------------------------------------------
// Run metadata

inline fs::path prepare_out_dir(const std::string& out) {
  if (out.empty()) throw ConfigError("an output directory is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
  return out;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

inline json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

template <typename Run>
fs::path begin_run(const std::string& subcommand, const Run& run) {
  const auto out = prepare_out_dir(run.out);
  write_json(out / "run_metadata.json",
             {{"tool", "mmasr"}, {"version", kVersion}, {"subcommand", subcommand}, {"seed", run.seed}, {"config", json(run)}});
  return out;
}

// ---------------------------------------------------------------------------
// synth-data

inline void synth_data(const SynthRun& run) {
  const auto out = begin_run("synth-data", run);
  say(1, "synthesizing corpus into " + out.string());
  corpus::write_synthetic(corpus::synthesize_corpus(run.synth, run.seed), out);
}

// ---------------------------------------------------------------------------
// mask

inline void mask(const MaskRun& run) {
  if (run.mode != "augment" && run.mode != "probability" && run.mode != "category") {
    throw ConfigError("mask mode must be augment, probability or category, not '" + run.mode + "'");
  }
  if (run.mode == "category" && run.category_file.empty()) throw ConfigError("category mode needs a category file");
  if (run.mode != "category" && !run.category_file.empty()) throw ConfigError("a category file only applies to category mode");
  if (run.mode == "probability" && !(run.probability >= 0.0 && run.probability <= 1.0)) {
    throw ConfigError("mask probability must lie in [0, 1]");
  }
  if (run.mode != "probability" && run.probability != 0.0) throw ConfigError("a probability only applies to probability mode");
  const auto out = begin_run("mask", run);
  const auto base = corpus::load_manifest(run.corpus);
  masking::MaskOptions opts;
  opts.expand = run.expand;
  corpus::Corpus masked;
  if (run.mode == "augment") {
    masked = masking::augment_corpus(base, run.seed, opts);
  } else if (run.mode == "probability") {
    masked = masking::mask_with_probability(base, run.probability, run.seed, opts);
  } else {
    masked = masking::mask_by_category(base, corpus::read_category_list(run.category_file), opts);
  }
  say(1, "writing " + std::to_string(masked.utterances.size()) + " masked samples to " + out.string());
  corpus::save_manifest(masked, out);
}

// ---------------------------------------------------------------------------
// train

// Fills the data-dependent dimensions of `cfg` from the corpus.
inline void infer_dimensions(model::ModelConfig& cfg, const corpus::Corpus& c, std::size_t vocab_size) {
  cfg.vocab_size = vocab_size;
  if (!c.utterances.empty()) cfg.feature_dim = static_cast<std::size_t>(c.utterances.front().features.cols());
  if (model::is_multimodal(cfg.variant)) {
    if (!c.has_visual()) {
      throw ConfigError("variant " + model::to_string(cfg.variant) + " needs visual features for every training utterance");
    }
    const auto* v = c.visual_for(c.utterances.front().id);
    cfg.n_proposals = v->n_proposals();
    cfg.visual_in_dim = static_cast<std::size_t>(v->proposals.cols());
  }
}

inline training::TrainResult train(TrainRun run) {
  run.train.seed = run.seed;
  run.train.validate();
  if (run.train_dir.empty() || run.dev_dir.empty()) throw ConfigError("train needs a training and a dev corpus");
  const auto out = begin_run("train", run);
  const auto train_set = corpus::load_manifest(run.train_dir);
  const auto dev_set = corpus::load_manifest(run.dev_dir);
  const auto vocab = corpus::build_vocab(train_set, run.vocab_min_count);
  infer_dimensions(run.model, train_set, vocab.size());
  if (model::is_multimodal(run.model.variant) && !dev_set.has_visual()) {
    throw ConfigError("variant " + model::to_string(run.model.variant) + " needs visual features for every dev utterance");
  }
  run.model.validate();

  model::AsrModel<float> m(run.model, run.seed);
  if (!run.init_from.empty()) {
    const auto rep = training::load_pretrained(run.init_from, m, vocab);
    say(1, "initialized from " + run.init_from + " (" + std::to_string(rep.fresh_rows) + " new vocabulary rows)");
  }
  say(1, "training " + model::to_string(run.model.variant) + " on " + std::to_string(train_set.utterances.size()) +
             " samples, " + std::to_string(m.parameters().scalar_count()) + " parameters");
  auto result = training::train(m, train_set, dev_set, vocab, run.train, out, [](const training::EpochRecord& r) {
    say(2, training::to_json(r).dump());
  });
  say(1, "best dev WER " + std::to_string(result.best_dev_wer) + " at epoch " + std::to_string(result.best_epoch));
  return result;
}

// ---------------------------------------------------------------------------
// evaluate

inline corpus::Vocabulary checkpoint_vocab(const fs::path& dir) {
  if (!fs::exists(dir / "vocab.txt")) throw IoError("checkpoint " + dir.string() + " has no vocab.txt");
  return corpus::Vocabulary::load(dir / "vocab.txt");
}

inline eval::EvalReport evaluate(const EvaluateRun& run) {
  eval::EvalOptions opts;
  opts.metrics = {run.metrics.begin(), run.metrics.end()};
  opts.ks = run.ks;
  opts.gr_recompute = run.gr_recompute;
  opts.seed = run.seed;
  if (run.checkpoint.empty() || run.dataset.empty()) throw ConfigError("evaluate needs a checkpoint and a dataset");
  if (opts.metrics.count("gr") && run.gr_threshold_from.empty() && !run.gr_recompute) {
    throw ConfigError("metric gr needs a threshold source: pass --gr-threshold-from <dev evaluation dir> or --gr-recompute");
  }
  for (auto k : run.ks) {
    if (k == 0) throw ConfigError("K must be positive");
  }
  const auto out = begin_run("evaluate", run);

  const auto cfg = model::read_checkpoint_config(run.checkpoint);
  const auto dataset = corpus::load_manifest(run.dataset);
  for (const auto& f : run.category_files) opts.categories.push_back(corpus::read_category_list(f));
  if (!run.gr_threshold_from.empty()) {
    const auto dev = eval::read_traces(fs::path(run.gr_threshold_from) / "traces.jsonl");
    opts.gr_threshold = eval::expected_visual_attention(eval::trace_pointers(dev));
    opts.gr_threshold_source = "traces in " + run.gr_threshold_from;
  }

  std::vector<eval::Decoded> decoded;
  if (!run.traces.empty()) {
    decoded = eval::read_traces(run.traces);
  } else {
    const auto m = model::load_checkpoint<float>(run.checkpoint);
    const auto vocab = checkpoint_vocab(run.checkpoint);
    if (vocab.size() != cfg.vocab_size) throw IncompatibleCheckpointError("checkpoint vocab.txt disagrees with its config");
    say(1, "decoding " + std::to_string(dataset.utterances.size()) + " samples");
    decoded = eval::decode_corpus(m, dataset, vocab, run.batch_size);
  }
  auto report = eval::build_report(decoded, dataset, model::to_string(cfg.variant), opts);
  report.dataset = fs::path(run.dataset).filename().string();
  write_json(out / "report.json", report.to_json());
  {
    std::ofstream os(out / "report.txt");
    if (!os) throw IoError("cannot write report.txt");
    os << report.table();
  }
  eval::write_traces(out / "traces.jsonl", decoded);
  say(1, report.table());
  return report;
}

// ---------------------------------------------------------------------------
// probe-swap

struct ProbeReport {
  eval::Rate baseline;
  eval::Rate swapped;
  std::size_t samples = 0;
};

inline std::vector<std::string> read_id_list(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("missing sample list " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(is, line)) {
    auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    ids.push_back(line.substr(b, line.find_last_not_of(" \t\r") - b + 1));
  }
  return ids;
}

// The samples named in `ids`, with their links, annotations and masks.
inline corpus::Corpus select_samples(const corpus::Corpus& c, const std::vector<std::string>& ids) {
  corpus::Corpus out;
  out.images = c.images;
  for (const auto& id : ids) {
    const auto* u = c.find(id);
    if (!u) throw LookupError("sample " + id + " is not in the dataset");
    out.utterances.push_back(*u);
    if (auto it = c.links.find(id); it != c.links.end()) out.links[id] = it->second;
    if (auto it = c.annotations.find(id); it != c.annotations.end()) out.annotations[id] = it->second;
    if (auto it = c.masks.find(id); it != c.masks.end()) out.masks[id] = it->second;
  }
  return out;
}

inline ProbeReport probe_swap(const ProbeRun& run) {
  if (run.checkpoint.empty() || run.dataset.empty()) throw ConfigError("probe-swap needs a checkpoint and a dataset");
  if (run.image_id.empty()) throw ConfigError("probe-swap needs an image id");
  const auto cfg = model::read_checkpoint_config(run.checkpoint);
  if (!model::is_multimodal(cfg.variant)) throw UnsupportedVariantError("probe-swap needs a mag or maop checkpoint");
  const auto out = begin_run("probe-swap", run);

  const auto dataset = corpus::load_manifest(run.dataset);
  auto img = dataset.images.find(run.image_id);
  if (img == dataset.images.end()) throw LookupError("image " + run.image_id + " is not in the dataset");
  std::vector<std::string> ids;
  if (run.samples_file.empty()) {
    for (const auto& u : dataset.utterances) ids.push_back(u.id);
  } else {
    ids = read_id_list(run.samples_file);
  }
  const auto samples = select_samples(dataset, ids);
  const auto m = model::load_checkpoint<float>(run.checkpoint);
  const auto vocab = checkpoint_vocab(run.checkpoint);

  auto keep = [&](const std::string& w) { return run.target.empty() || w == run.target; };
  ProbeReport rep;
  rep.samples = samples.utterances.size();
  const auto own = eval::decode_corpus(m, samples, vocab, run.batch_size);
  rep.baseline = eval::recovery(eval::align_decoded(own), eval::mask_lookup(samples), keep).rate;
  rep.swapped = eval::image_swap_probe(m, samples, *img->second, vocab, run.target);

  json j{{"image_id", run.image_id}, {"target", run.target},     {"samples", rep.samples},
         {"baseline_recovery_rate", rep.baseline}, {"swapped_recovery_rate", rep.swapped}};
  write_json(out / "probe.json", j);
  say(1, j.dump(2));
  return rep;
}

// ---------------------------------------------------------------------------
// rerun

/// Replays a persisted run into `out` (the original out dir when empty).
inline void rerun(const fs::path& metadata, const std::string& out) {
  const auto meta = read_json(metadata);
  const auto sub = meta.value("subcommand", std::string());
  auto cfg = meta.at("config");
  if (!out.empty()) cfg["out"] = out;
  try {
    if (sub == "synth-data") return synth_data(cfg.get<SynthRun>());
    if (sub == "mask") return mask(cfg.get<MaskRun>());
    if (sub == "train") return static_cast<void>(train(cfg.get<TrainRun>()));
    if (sub == "evaluate") return static_cast<void>(evaluate(cfg.get<EvaluateRun>()));
    if (sub == "probe-swap") return static_cast<void>(probe_swap(cfg.get<ProbeRun>()));
  } catch (const json::exception& e) {
    throw ConfigError(metadata.string() + ": " + e.what());
  }
  throw ConfigError(metadata.string() + ": unknown subcommand '" + sub + "'");
}

}  // namespace mmasr::cli
