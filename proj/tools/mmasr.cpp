// Command-line entry point. Precedence for every setting: built-in default,
// then the --config JSON file, then explicit flags.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmasr/cli/commands.hpp"

using namespace mmasr;
using nlohmann::json;

namespace {

// Applies `value` to `target` only when the flag was given.
template <typename T, typename U>
void override_with(T& target, const std::optional<U>& value) {
  if (value) target = static_cast<T>(*value);
}

struct TrainFlags {
  std::string config;
  std::optional<std::string> variant;
  std::optional<double> lr, decay, clip;
  std::optional<std::size_t> batch_size, max_epochs, patience;
  std::optional<std::size_t> enc_layers, enc_hidden, dec_hidden, emb_dim, att_dim;
  std::vector<std::size_t> subsample_layers;
};

cli::TrainRun resolve_train(cli::TrainRun run, const TrainFlags& f) {
  if (!f.config.empty()) {
    const auto j = cli::read_json(f.config);
    try {
      if (j.contains("model")) run.model = j.at("model").get<model::ModelConfig>();
      if (j.contains("train")) run.train = j.at("train").get<training::TrainConfig>();
    } catch (const json::exception& e) {
      throw ConfigError(f.config + ": " + e.what());
    }
  }
  if (f.variant) run.model.variant = model::parse_variant(*f.variant);
  override_with(run.train.learning_rate, f.lr);
  override_with(run.train.lr_decay_factor, f.decay);
  override_with(run.train.grad_clip, f.clip);
  override_with(run.train.batch_size, f.batch_size);
  override_with(run.train.max_epochs, f.max_epochs);
  override_with(run.train.patience, f.patience);
  override_with(run.model.enc_layers, f.enc_layers);
  override_with(run.model.enc_hidden, f.enc_hidden);
  override_with(run.model.dec_hidden, f.dec_hidden);
  override_with(run.model.emb_dim, f.emb_dim);
  override_with(run.model.att_dim, f.att_dim);
  if (!f.subsample_layers.empty()) run.model.subsample_layers = f.subsample_layers;
  // The visual projection shares the encoder's output space.
  run.model.visual_proj_dim = run.model.enc_hidden;
  return run;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal speech recognition with masked-word recovery"};
  app.require_subcommand(1);
  app.set_version_flag("--version", cli::kVersion);

  cli::SynthRun synth;
  std::string synth_config;
  auto* synth_cmd = app.add_subcommand("synth-data", "Generate a synthetic corpus with planted visual evidence");
  synth_cmd->add_option("--config", synth_config, "synthesis config JSON");
  synth_cmd->add_option("--seed", synth.seed, "root seed")->required();
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  std::optional<std::size_t> n_train, n_dev, n_test;
  synth_cmd->add_option("--train", n_train, "training utterances");
  synth_cmd->add_option("--dev", n_dev, "dev utterances");
  synth_cmd->add_option("--test", n_test, "test utterances");

  cli::MaskRun mask;
  bool no_expand = false;
  std::optional<double> probability;
  auto* mask_cmd = app.add_subcommand("mask", "Mask words in a corpus");
  mask_cmd->add_option("--corpus", mask.corpus, "corpus directory")->required();
  mask_cmd->add_option("--mode", mask.mode, "augment | probability | category")->required();
  mask_cmd->add_option("--p", probability, "per-word probability (probability mode)");
  mask_cmd->add_option("--category-file", mask.category_file, "word list (category mode)");
  mask_cmd->add_flag("--no-expand", no_expand, "mask the aligned span without widening it");
  mask_cmd->add_option("--seed", mask.seed, "root seed");
  mask_cmd->add_option("--out", mask.out, "output directory")->required();

  cli::TrainRun train;
  TrainFlags tf;
  auto* train_cmd = app.add_subcommand("train", "Train a model, keeping the best dev checkpoint");
  train_cmd->add_option("--variant", tf.variant, "unimodal | mag | maop");
  train_cmd->add_option("--train", train.train_dir, "training corpus directory")->required();
  train_cmd->add_option("--dev", train.dev_dir, "dev corpus directory")->required();
  train_cmd->add_option("--config", tf.config, "JSON with optional \"model\" and \"train\" objects");
  train_cmd->add_option("--seed", train.seed, "root seed");
  train_cmd->add_option("--init-from", train.init_from, "checkpoint to initialize from");
  train_cmd->add_option("--lr", tf.lr, "initial learning rate");
  train_cmd->add_option("--lr-decay", tf.decay, "learning rate factor on dev plateau");
  train_cmd->add_option("--clip", tf.clip, "gradient norm threshold");
  train_cmd->add_option("--batch-size", tf.batch_size, "samples per batch");
  train_cmd->add_option("--epochs", tf.max_epochs, "maximum epochs");
  train_cmd->add_option("--patience", tf.patience, "evaluations without improvement before stopping");
  train_cmd->add_option("--enc-layers", tf.enc_layers, "encoder layers");
  train_cmd->add_option("--enc-hidden", tf.enc_hidden, "encoder output width");
  train_cmd->add_option("--dec-hidden", tf.dec_hidden, "decoder width");
  train_cmd->add_option("--emb-dim", tf.emb_dim, "embedding width");
  train_cmd->add_option("--att-dim", tf.att_dim, "attention width");
  train_cmd->add_option("--subsample-layers", tf.subsample_layers, "encoder layers that halve the frame rate")->delimiter(',');
  train_cmd->add_option("--out", train.out, "output directory")->required();

  cli::EvaluateRun ev;
  std::string metrics_csv = "wer";
  auto* eval_cmd = app.add_subcommand("evaluate", "Decode a dataset and compute metrics");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint directory")->required();
  eval_cmd->add_option("--dataset", ev.dataset, "dataset directory")->required();
  eval_cmd->add_option("--metrics", metrics_csv, "comma-separated subset of wer,rr,gr,iou,wa");
  eval_cmd->add_option("--k", ev.ks, "K values for IoU precision")->delimiter(',');
  eval_cmd->add_option("--gr-threshold-from", ev.gr_threshold_from, "evaluate output dir whose traces define E[alpha_v]");
  eval_cmd->add_flag("--gr-recompute", ev.gr_recompute, "derive E[alpha_v] from the evaluated dataset instead");
  eval_cmd->add_option("--categories", ev.category_files, "category word lists")->delimiter(',');
  eval_cmd->add_option("--traces", ev.traces, "score these traces instead of decoding");
  eval_cmd->add_option("--seed", ev.seed, "seed for the random-K baseline");
  eval_cmd->add_option("--batch-size", ev.batch_size, "decode batch size");
  eval_cmd->add_option("--out", ev.out, "output directory")->required();

  cli::ProbeRun probe;
  auto* probe_cmd = app.add_subcommand("probe-swap", "Recovery rate with every sample's image replaced");
  probe_cmd->add_option("--checkpoint", probe.checkpoint, "checkpoint directory")->required();
  probe_cmd->add_option("--dataset", probe.dataset, "masked dataset directory")->required();
  probe_cmd->add_option("--image", probe.image_id, "image id to substitute")->required();
  probe_cmd->add_option("--samples", probe.samples_file, "utterance ids, one per line");
  probe_cmd->add_option("--target", probe.target, "restrict recovery to this word");
  probe_cmd->add_option("--batch-size", probe.batch_size, "decode batch size");
  probe_cmd->add_option("--out", probe.out, "output directory")->required();

  std::string metadata, rerun_out;
  auto* rerun_cmd = app.add_subcommand("rerun", "Replay a run from its run_metadata.json");
  rerun_cmd->add_option("--metadata", metadata, "run_metadata.json of the run")->required();
  rerun_cmd->add_option("--out", rerun_out, "output directory (defaults to the original)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kExitOk : cli::kExitConfig;
  }

  try {
    if (*synth_cmd) {
      if (!synth_config.empty()) {
        try {
          synth.synth = cli::read_json(synth_config).get<corpus::SynthConfig>();
        } catch (const json::exception& e) {
          throw ConfigError(synth_config + ": " + e.what());
        }
      }
      override_with(synth.synth.train_utterances, n_train);
      override_with(synth.synth.dev_utterances, n_dev);
      override_with(synth.synth.test_utterances, n_test);
      cli::synth_data(synth);
    } else if (*mask_cmd) {
      mask.expand = !no_expand;
      override_with(mask.probability, probability);
      if (mask.mode == "probability" && !probability) throw ConfigError("probability mode needs --p");
      cli::mask(mask);
    } else if (*train_cmd) {
      cli::train(resolve_train(train, tf));
    } else if (*eval_cmd) {
      ev.metrics.clear();
      std::stringstream ss(metrics_csv);
      for (std::string m; std::getline(ss, m, ',');) {
        if (!m.empty()) ev.metrics.push_back(m);
      }
      cli::evaluate(ev);
    } else if (*probe_cmd) {
      cli::probe_swap(probe);
    } else if (*rerun_cmd) {
      cli::rerun(metadata, rerun_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::exit_code_for(e);
  }
  return cli::kExitOk;
}
