#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mmasr/core/optim.hpp"
#include "mmasr/core/seed.hpp"
#include "mmasr/corpus/vocab.hpp"
#include "mmasr/eval/decode.hpp"
#include "mmasr/eval/metrics.hpp"
#include "mmasr/model/checkpoint.hpp"

namespace mmasr::training {

struct TrainConfig {
  double learning_rate = 4e-4;
  double lr_decay_factor = 0.5;
  std::size_t batch_size = 36;
  double grad_clip = 1.0;
  std::size_t max_epochs = 60;
  std::size_t patience = 5;
  std::size_t bucket_batches = 8;  // batches per length-sorted bucket
  std::size_t eval_batch_size = 36;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train config: learning_rate must be positive");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) throw ConfigError("train config: lr_decay_factor must lie in (0, 1]");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("train config: batch sizes must be positive");
    if (!(grad_clip > 0.0)) throw ConfigError("train config: grad_clip must be positive");
    if (max_epochs == 0) throw ConfigError("train config: max_epochs must be positive");
    if (patience == 0) throw ConfigError("train config: patience must be >= 1");
    if (bucket_batches == 0) throw ConfigError("train config: bucket_batches must be positive");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, learning_rate, lr_decay_factor, batch_size, grad_clip,
                                                max_epochs, patience, bucket_batches, eval_batch_size, seed)

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_wer = 0.0;        // percent
  double learning_rate = 0.0;  // in effect during the epoch
  double max_grad_norm = 0.0;  // after clipping
  bool improved = false;
  double wall_clock_sec = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},           {"train_loss", r.train_loss},       {"dev_wer", r.dev_wer},
          {"learning_rate", r.learning_rate}, {"max_grad_norm", r.max_grad_norm}, {"improved", r.improved},
          {"wall_clock_sec", r.wall_clock_sec}};
}

/// Multiply-on-plateau learning rate with early stopping. A strictly lower
/// metric counts as an improvement.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, double decay, std::size_t patience) : lr_(lr), decay_(decay), patience_(patience) {}

  // Returns true when the metric improved on the best so far.
  bool observe(double metric) {
    if (metric < best_) {
      best_ = metric;
      since_ = 0;
      return true;
    }
    ++since_;
    lr_ *= decay_;
    return false;
  }

  double learning_rate() const { return lr_; }
  double best() const { return best_; }
  std::size_t evaluations_since_improvement() const { return since_; }
  bool exhausted() const { return since_ >= patience_; }

 private:
  double lr_, decay_;
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t since_ = 0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_dev_wer = 0.0;
  bool stopped_early = false;
};

/// Corpus-level WER (percent) of greedy decoding over the dev set.
template <typename T>
eval::Rate evaluate_dev(const model::AsrModel<T>& m, const corpus::Corpus& dev, const corpus::Vocabulary& vocab,
                        std::size_t batch_size = 36) {
  const auto decoded = eval::decode_corpus(m, dev, vocab, batch_size);
  return eval::corpus_wer(eval::align_decoded(decoded));
}

template <typename T>
void save_training_checkpoint(const model::AsrModel<T>& m, const corpus::Vocabulary& vocab, const std::filesystem::path& dir) {
  model::save_checkpoint(m, dir);
  vocab.save(dir / "vocab.txt");
}

namespace detail {

inline void require_visuals(const corpus::Corpus& c, const char* which) {
  for (const auto& u : c.utterances) {
    const auto* v = c.visual_for(u.id);
    if (!v || v->n_proposals() == 0) {
      throw ConfigError(std::string(which) + " utterance " + u.id + " has no visual features; multimodal variants need them");
    }
  }
}

}  // namespace detail

/// Batches for one epoch, a pure function of (seed, epoch): shuffle, cut
/// into buckets of `bucket_batches` batches, sort each bucket by length,
/// split into batches, then shuffle the batch order.
inline std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& lengths, const TrainConfig& cfg,
                                                           std::size_t epoch) {
  std::mt19937_64 rng(derive_seed(cfg.seed, "train/epoch/" + std::to_string(epoch)));
  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t bucket = cfg.batch_size * cfg.bucket_batches;
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < order.size(); s += bucket) {
    const auto e = std::min(order.size(), s + bucket);
    std::stable_sort(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(e),
                     [&](auto a, auto b) { return lengths[a] < lengths[b]; });
    for (std::size_t b = s; b < e; b += cfg.batch_size) {
      batches.emplace_back(order.begin() + static_cast<long>(b), order.begin() + static_cast<long>(std::min(e, b + cfg.batch_size)));
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains with teacher forcing and Adam, selecting the epoch with the best
/// dev WER. On return the model holds the best parameters. When `out_dir`
/// is non-empty the best checkpoint (with vocab.txt) is kept in
/// out_dir/best and one JSON line per epoch goes to out_dir/train_log.jsonl.
template <typename T>
TrainResult train(model::AsrModel<T>& m, const corpus::Corpus& train_set, const corpus::Corpus& dev_set,
                  const corpus::Vocabulary& vocab, const TrainConfig& cfg, const std::filesystem::path& out_dir = {},
                  const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.utterances.empty()) throw ConfigError("training corpus is empty");
  if (dev_set.utterances.empty()) throw ConfigError("dev corpus is empty");
  if (vocab.size() != m.config().vocab_size) throw ConfigError("vocabulary size differs from the model configuration");
  const bool multimodal = model::is_multimodal(m.variant());
  if (multimodal) {
    detail::require_visuals(train_set, "training");
    detail::require_visuals(dev_set, "dev");
  }

  std::vector<model::Example> examples;
  std::vector<std::size_t> lengths;
  for (const auto& u : train_set.utterances) {
    examples.push_back({&u.features, multimodal ? train_set.visual_for(u.id) : nullptr, vocab.encode(u.words)});
    lengths.push_back(u.frames());
  }

  std::ofstream log;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    log.open(out_dir / "train_log.jsonl");
    if (!log) throw IoError("cannot write training log in " + out_dir.string());
  }

  nn::Adam<T> adam(nn::AdamConfig{cfg.learning_rate});
  PlateauSchedule schedule(cfg.learning_rate, cfg.lr_decay_factor, cfg.patience);
  std::map<std::string, nn::Matrix<T>> best_params;
  TrainResult result;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = schedule.learning_rate();
    adam.set_learning_rate(schedule.learning_rate());

    double loss_sum = 0.0;
    std::size_t token_sum = 0;
    const auto batches = epoch_batches(lengths, cfg, epoch);
    for (std::size_t k = 0; k < batches.size(); ++k) {
      std::vector<model::Example> batch;
      for (auto i : batches[k]) batch.push_back(examples[i]);
      nn::Tape<T> tape;
      auto out = m.forward_loss(tape, batch);
      const double loss = static_cast<double>(out.loss.value()(0, 0));
      if (!std::isfinite(loss)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(k) +
                              " (first utterance " + train_set.utterances[batches[k].front()].id + ")");
      }
      m.parameters().zero_grad();
      tape.backward(out.loss);
      const double norm = nn::grad_norm(m.parameters());
      if (!std::isfinite(norm)) {
        throw DivergenceError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " + std::to_string(k) +
                              " (first utterance " + train_set.utterances[batches[k].front()].id + ")");
      }
      nn::clip_grad_norm(m.parameters(), cfg.grad_clip);
      rec.max_grad_norm = std::max(rec.max_grad_norm, nn::grad_norm(m.parameters()));
      adam.step(m.parameters());
      loss_sum += loss * static_cast<double>(out.tokens);
      token_sum += out.tokens;
    }
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(token_sum, 1));

    const auto dev = evaluate_dev(m, dev_set, vocab, cfg.eval_batch_size);
    rec.dev_wer = dev.percent().value_or(0.0);
    rec.improved = schedule.observe(rec.dev_wer);
    if (rec.improved) {
      result.best_epoch = epoch;
      result.best_dev_wer = rec.dev_wer;
      best_params.clear();
      for (const auto& p : m.parameters()) best_params[p->name] = p->value();
      if (!out_dir.empty()) save_training_checkpoint(m, vocab, out_dir / "best");
    }
    rec.wall_clock_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (log) {
      log << to_json(rec).dump() << '\n';
      log.flush();
    }
    if (on_epoch) on_epoch(rec);
    if (schedule.exhausted()) {
      result.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  for (auto& p : m.parameters()) p->value() = best_params.at(p->name);
  return result;
}

// ---------------------------------------------------------------------------
// Pretrained initialization

struct PretrainReport {
  std::vector<std::string> copied;    // parameters copied verbatim
  std::vector<std::string> remapped;  // vocabulary-indexed parameters copied row by row
  std::size_t fresh_rows = 0;         // vocabulary entries absent from the checkpoint
};

/// Copies a checkpoint into a model whose variant and dimensions match.
/// The vocabulary may differ: rows of vocabulary-indexed parameters are
/// matched by word, and words unknown to the checkpoint keep the model's
/// fresh initialization.
template <typename T>
PretrainReport load_pretrained(const std::filesystem::path& dir, model::AsrModel<T>& m, const corpus::Vocabulary& vocab) {
  const auto have = model::read_checkpoint_config(dir);
  model::require_compatible(have, m.config(), true);
  if (vocab.size() != m.config().vocab_size) throw ConfigError("load_pretrained: vocabulary size differs from the model");
  corpus::Vocabulary old_vocab;
  if (std::filesystem::exists(dir / "vocab.txt")) {
    old_vocab = corpus::Vocabulary::load(dir / "vocab.txt");
  } else if (have.vocab_size == vocab.size()) {
    old_vocab = vocab;
  } else {
    throw IncompatibleCheckpointError("checkpoint vocabulary differs in size and no vocab.txt is present");
  }
  if (old_vocab.size() != have.vocab_size) throw IncompatibleCheckpointError("checkpoint vocab.txt disagrees with its config");

  PretrainReport report;
  std::vector<long> source_row(vocab.size(), -1);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    const auto& w = vocab.word(static_cast<int>(i));
    if (old_vocab.contains(w)) {
      source_row[i] = old_vocab.index(w);
    } else {
      ++report.fresh_rows;
    }
  }
  const bool same_vocab = old_vocab == vocab;
  for (const auto& t : model::read_params(dir / "params.bin")) {
    auto* p = m.parameters().find(t.name);
    if (!p) throw IncompatibleCheckpointError("checkpoint tensor " + t.name + " has no counterpart in the model");
    auto& value = p->value();
    const bool by_vocab = t.name == "embedding.weight" || t.name == "output.weight" || t.name == "output.bias";
    if (!by_vocab || same_vocab) {
      if (t.values.size() != p->tensor.size()) throw IncompatibleCheckpointError("checkpoint tensor " + t.name + " has the wrong size");
      for (std::size_t i = 0; i < t.values.size(); ++i) value.data()[i] = static_cast<T>(t.values[i]);
      report.copied.push_back(t.name);
      continue;
    }
    // Row-major [vocab x width] for embeddings; [1 x vocab] for the bias.
    const bool bias = t.name == "output.bias";
    const std::size_t width = bias ? 1 : static_cast<std::size_t>(value.cols());
    if (t.values.size() != old_vocab.size() * width) throw IncompatibleCheckpointError("checkpoint tensor " + t.name + " has the wrong size");
    for (std::size_t i = 0; i < vocab.size(); ++i) {
      if (source_row[i] < 0) continue;
      const auto src = static_cast<std::size_t>(source_row[i]);
      for (std::size_t c = 0; c < width; ++c) {
        const T v = static_cast<T>(t.values[src * width + c]);
        if (bias) {
          value(0, static_cast<Eigen::Index>(i)) = v;
        } else {
          value(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v;
        }
      }
    }
    report.remapped.push_back(t.name);
  }
  return report;
}

}  // namespace mmasr::training
