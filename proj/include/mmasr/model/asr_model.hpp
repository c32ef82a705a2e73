#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmasr/core/cells.hpp"
#include "mmasr/core/parameters.hpp"
#include "mmasr/core/seed.hpp"
#include "mmasr/corpus/types.hpp"
#include "mmasr/corpus/vocab.hpp"
#include "mmasr/model/config.hpp"
#include "mmasr/model/trace.hpp"

// Sequence-to-sequence recognizer with three decoder variants.
//
// Batched tensors are time-major: row t*B + b holds timestep t of sample b.
// Padded positions are excluded from attention through a B x n mask and
// leave recurrent state untouched, so each sample's result does not depend
// on what it is batched with.

namespace mmasr::model {

using corpus::FeatureMatrix;
using corpus::VisualContext;
using nn::Matrix;
using nn::Tape;
using nn::Var;

template <typename T>
struct EncodedBatch {
  Var<T> states;          // [steps*B x enc_hidden]
  Var<T> keys_projected;  // states through the encoder attention key map
  std::vector<std::size_t> lengths;
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::shared_ptr<const Matrix<T>> mask;  // B x steps, 1 on valid positions
};

template <typename T>
struct VisualBatch {
  Var<T> keys;            // [regions*B x visual_proj_dim]
  Var<T> keys_projected;  // keys through the visual attention key map
  std::size_t regions = 0;
};

template <typename T>
struct DecoderState {
  Var<T> h1, h2;
};

template <typename T>
struct StepOutput {
  Var<T> logits;  // B x V
  DecoderState<T> state;
  Var<T> encoder_weights;   // B x steps
  Var<T> visual_weights;    // B x regions (multimodal only)
  Var<T> modality_weights;  // B x 2 = [alpha_a, alpha_v] (multimodal only)
};

struct Example {
  const FeatureMatrix* features = nullptr;
  const VisualContext* visual = nullptr;
  std::vector<int> tokens;  // bos, words..., eos
};

struct DecodeRequest {
  const FeatureMatrix* features = nullptr;
  const VisualContext* visual = nullptr;
  std::size_t max_len = 0;
};

template <typename T>
struct LossOutput {
  Var<T> loss;
  std::size_t tokens = 0;
  std::vector<AttentionTrace> traces;  // filled on request, one per example
};

/// Default cap on emitted tokens for a reference of `n_words` words.
inline std::size_t default_max_len(std::size_t n_words, const ModelConfig& c) {
  return std::min(2 * n_words, c.max_decode_len);
}

template <typename T>
class AsrModel {
 public:
  AsrModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    build();
    initialize(seed);
  }

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  nn::ParameterSet<T>& parameters() { return params_; }
  const nn::ParameterSet<T>& parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.scalar_count(); }

  /// Re-draws every parameter: matrices uniform in +-1/sqrt(fan_in), biases zero.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(derive_seed(seed, "model/init"));
    for (auto& p : params_) {
      if (is_bias(p->name)) {
        p->value().setZero();
      } else {
        const bool embedding = p->name == "embedding.weight" || p->name == "output.weight";
        nn::init_uniform(*p, embedding ? p->value().cols() : p->value().rows(), rng);
      }
    }
  }

  static bool is_bias(const std::string& name) {
    auto pos = name.rfind('.');
    const auto leaf = pos == std::string::npos ? name : name.substr(pos + 1);
    return leaf.rfind("bias", 0) == 0;
  }

  // ---------------------------------------------------------------------
  // Encoder

  EncodedBatch<T> encode(Tape<T>& tape, const std::vector<const FeatureMatrix*>& features) const {
    if (features.empty()) throw ArgumentError("encode: empty batch");
    const std::size_t batch = features.size();
    std::vector<std::size_t> lengths(batch);
    std::size_t steps = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& f = *features[b];
      if (static_cast<std::size_t>(f.cols()) != config_.feature_dim) {
        throw ShapeError("encode: features have " + std::to_string(f.cols()) + " columns, model expects " +
                         std::to_string(config_.feature_dim));
      }
      lengths[b] = static_cast<std::size_t>(f.rows());
      if (lengths[b] < config_.min_source_length()) {
        throw InputTooShortError("encode: " + std::to_string(lengths[b]) + " frames, need at least " +
                                 std::to_string(config_.min_source_length()));
      }
      steps = std::max(steps, lengths[b]);
    }

    Matrix<T> x = Matrix<T>::Zero(static_cast<Eigen::Index>(steps * batch), static_cast<Eigen::Index>(config_.feature_dim));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < lengths[b]; ++t) {
        x.row(static_cast<Eigen::Index>(t * batch + b)) = features[b]->row(static_cast<Eigen::Index>(t)).template cast<T>();
      }
    }
    Var<T> layer_in = tape.constant(std::move(x));

    for (std::size_t l = 0; l < encoder_.size(); ++l) {
      auto fwd = run_direction(tape, layer_in, encoder_[l].fwd, lengths, steps, batch, false);
      auto bwd = run_direction(tape, layer_in, encoder_[l].bwd, lengths, steps, batch, true);
      layer_in = nn::concat_cols<T>({fwd, bwd});
      const bool subsample =
          std::find(config_.subsample_layers.begin(), config_.subsample_layers.end(), l + 1) != config_.subsample_layers.end();
      if (subsample) {
        const std::size_t kept = (steps + 1) / 2;
        std::vector<Eigen::Index> index;
        index.reserve(kept * batch);
        for (std::size_t t = 0; t < kept; ++t) {
          for (std::size_t b = 0; b < batch; ++b) index.push_back(static_cast<Eigen::Index>(2 * t * batch + b));
        }
        layer_in = nn::gather_rows(layer_in, std::move(index));
        steps = kept;
        for (auto& len : lengths) len = (len + 1) / 2;
      }
    }

    EncodedBatch<T> out;
    out.states = layer_in;
    out.keys_projected = nn::matmul(layer_in, bind(tape, enc_att_).w_key);
    out.lengths = lengths;
    out.batch = batch;
    out.steps = steps;
    auto mask = std::make_shared<Matrix<T>>(Matrix<T>::Zero(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(steps)));
    for (std::size_t b = 0; b < batch; ++b) mask->row(static_cast<Eigen::Index>(b)).head(static_cast<Eigen::Index>(lengths[b])).setOnes();
    out.mask = std::move(mask);
    return out;
  }

  // ---------------------------------------------------------------------
  // Visual side

  /// Shared affine map from raw visual features [n x visual_in] to [n x visual_proj].
  Var<T> project_visual(Tape<T>& tape, Var<T> raw) const {
    require_multimodal("project_visual");
    if (static_cast<std::size_t>(raw.cols()) != config_.visual_in_dim) {
      throw ShapeError("project_visual: input width " + std::to_string(raw.cols()) + ", expected " +
                       std::to_string(config_.visual_in_dim));
    }
    return nn::affine(raw, tape.parameter(*visual_w_), tape.parameter(*visual_b_));
  }

  /// MAG attends over the single projected global vector, MAOP over the
  /// projected proposals.
  VisualBatch<T> visual_batch(Tape<T>& tape, const std::vector<const VisualContext*>& visuals) const {
    require_multimodal("visual_batch");
    const std::size_t batch = visuals.size();
    const std::size_t regions = config_.variant == Variant::Maop ? config_.n_proposals : 1;
    Matrix<T> raw(static_cast<Eigen::Index>(regions * batch), static_cast<Eigen::Index>(config_.visual_in_dim));
    for (std::size_t b = 0; b < batch; ++b) {
      const auto* v = visuals[b];
      if (!v) throw ConfigError(to_string(config_.variant) + " model needs a visual context for every sample");
      if (config_.variant == Variant::Maop) {
        if (static_cast<std::size_t>(v->proposals.rows()) != regions) {
          throw ConfigError("image " + v->image_id + " has " + std::to_string(v->proposals.rows()) +
                            " proposals, model expects " + std::to_string(regions));
        }
        if (static_cast<std::size_t>(v->proposals.cols()) != config_.visual_in_dim) {
          throw ShapeError("image " + v->image_id + ": proposal width " + std::to_string(v->proposals.cols()));
        }
        for (std::size_t j = 0; j < regions; ++j) {
          raw.row(static_cast<Eigen::Index>(j * batch + b)) = v->proposals.row(static_cast<Eigen::Index>(j)).template cast<T>();
        }
      } else {
        if (v->global_feature.rows() != 1 || static_cast<std::size_t>(v->global_feature.cols()) != config_.visual_in_dim) {
          throw ShapeError("image " + v->image_id + ": global feature shape " + nn::shape_string(v->global_feature));
        }
        raw.row(static_cast<Eigen::Index>(b)) = v->global_feature.row(0).template cast<T>();
      }
    }
    VisualBatch<T> out;
    out.keys = project_visual(tape, tape.constant(std::move(raw)));
    out.keys_projected = nn::matmul(out.keys, bind(tape, vis_att_).w_key);
    out.regions = regions;
    return out;
  }

  // ---------------------------------------------------------------------
  // Decoder

  DecoderState<T> initial_state(Tape<T>& tape, std::size_t batch) const {
    const auto b = static_cast<Eigen::Index>(batch), h = static_cast<Eigen::Index>(config_.dec_hidden);
    return {tape.constant(Matrix<T>::Zero(b, h)), tape.constant(Matrix<T>::Zero(b, h))};
  }

  /// One conditional-GRU step from the previous tokens (one per sample).
  StepOutput<T> decode_step(Tape<T>& tape, const std::vector<int>& y_prev, const DecoderState<T>& state,
                            const EncodedBatch<T>& enc, const VisualBatch<T>* visual) const {
    if (y_prev.size() != enc.batch) throw ShapeError("decode_step: token count differs from batch");
    std::vector<Eigen::Index> ids;
    for (int y : y_prev) {
      if (y < 0 || static_cast<std::size_t>(y) >= config_.vocab_size) throw ArgumentError("decode_step: token out of range");
      ids.push_back(y);
    }
    auto emb = nn::gather_rows(tape.parameter(*embedding_), std::move(ids));
    auto g1 = bind(tape, gru1_);
    auto xp = nn::affine(emb, g1.w_ih, g1.b_ih);
    auto out = step_from_projection(tape, xp, state, enc, visual);
    out.logits = output_logits(tape, out.state.h2);
    return out;
  }

  /// Teacher-forced loss: the input at step t is gold token t, the target
  /// gold token t+1. Loss is the mean over all non-pad target positions.
  LossOutput<T> forward_loss(Tape<T>& tape, const std::vector<Example>& batch, bool with_traces = false) const {
    if (batch.empty()) throw ArgumentError("forward_loss: empty batch");
    const std::size_t bsz = batch.size();
    std::vector<const FeatureMatrix*> feats;
    std::vector<const VisualContext*> visuals;
    std::size_t steps = 0;
    for (const auto& ex : batch) {
      if (ex.tokens.size() < 2) throw ArgumentError("forward_loss: target needs at least bos and eos");
      feats.push_back(ex.features);
      visuals.push_back(ex.visual);
      steps = std::max(steps, ex.tokens.size() - 1);
    }
    auto enc = encode(tape, feats);
    std::optional<VisualBatch<T>> vis;
    if (is_multimodal(config_.variant)) vis = visual_batch(tape, visuals);

    std::vector<Eigen::Index> inputs(steps * bsz, corpus::Vocabulary::kPad);
    std::vector<int> targets(steps * bsz, -1);
    std::size_t n_tokens = 0;
    for (std::size_t b = 0; b < bsz; ++b) {
      const auto& tok = batch[b].tokens;
      for (std::size_t t = 0; t + 1 < tok.size(); ++t) {
        if (tok[t] < 0 || static_cast<std::size_t>(tok[t]) >= config_.vocab_size) {
          throw ArgumentError("forward_loss: token " + std::to_string(tok[t]) + " outside vocabulary");
        }
        inputs[t * bsz + b] = tok[t];
        targets[t * bsz + b] = tok[t + 1];
        ++n_tokens;
      }
    }
    auto g1 = bind(tape, gru1_);
    auto emb = nn::gather_rows(tape.parameter(*embedding_), std::move(inputs));
    auto xp_all = nn::affine(emb, g1.w_ih, g1.b_ih);

    LossOutput<T> out;
    if (with_traces) out.traces.resize(bsz);
    auto state = initial_state(tape, bsz);
    std::vector<Var<T>> tops;
    tops.reserve(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      auto xp = nn::slice_rows(xp_all, static_cast<Eigen::Index>(t * bsz), static_cast<Eigen::Index>(bsz));
      auto step = step_from_projection(tape, xp, state, enc, vis ? &*vis : nullptr);
      state = step.state;
      tops.push_back(state.h2);
      if (with_traces) {
        for (std::size_t b = 0; b < bsz; ++b) {
          if (t + 1 < batch[b].tokens.size()) out.traces[b].steps.push_back(trace_row(step, enc, b));
        }
      }
    }
    auto logits = output_logits(tape, nn::stack_rows(tops));
    out.loss = nn::cross_entropy(logits, std::move(targets));
    out.tokens = n_tokens;
    return out;
  }

  /// Batched greedy search. Each request stops at eos or after max_len
  /// emitted tokens; pad and bos are never emitted.
  std::vector<Hypothesis> greedy_decode(const std::vector<DecodeRequest>& requests, const corpus::Vocabulary& vocab) const {
    if (vocab.size() != config_.vocab_size) throw ConfigError("greedy_decode: vocabulary size differs from model");
    std::vector<Hypothesis> hyps(requests.size());
    if (requests.empty()) return hyps;
    std::size_t longest = 0;
    std::vector<const FeatureMatrix*> feats;
    std::vector<const VisualContext*> visuals;
    for (const auto& r : requests) {
      longest = std::max(longest, r.max_len);
      feats.push_back(r.features);
      visuals.push_back(r.visual);
    }
    if (longest == 0) return hyps;

    Tape<T> tape(false);
    auto enc = encode(tape, feats);
    std::optional<VisualBatch<T>> vis;
    if (is_multimodal(config_.variant)) vis = visual_batch(tape, visuals);
    auto state = initial_state(tape, requests.size());
    std::vector<int> prev(requests.size(), corpus::Vocabulary::kBos);
    std::vector<bool> active(requests.size());
    for (std::size_t b = 0; b < requests.size(); ++b) active[b] = requests[b].max_len > 0;

    for (std::size_t t = 0; t < longest; ++t) {
      auto step = decode_step(tape, prev, state, enc, vis ? &*vis : nullptr);
      state = step.state;
      const auto& logits = step.logits.value();
      bool any = false;
      for (std::size_t b = 0; b < requests.size(); ++b) {
        if (!active[b]) continue;
        int best = -1;
        for (Eigen::Index v = 0; v < logits.cols(); ++v) {
          if (v == corpus::Vocabulary::kPad || v == corpus::Vocabulary::kBos) continue;
          if (best < 0 || logits(static_cast<Eigen::Index>(b), v) > logits(static_cast<Eigen::Index>(b), best)) best = static_cast<int>(v);
        }
        auto& h = hyps[b];
        h.ids.push_back(best);
        h.trace.steps.push_back(trace_row(step, enc, b));
        prev[b] = best;
        if (best == corpus::Vocabulary::kEos) {
          h.terminated = true;
          active[b] = false;
        } else {
          h.words.push_back(vocab.word(best));
          if (h.ids.size() >= requests[b].max_len) active[b] = false;
        }
        any = any || active[b];
      }
      if (!any) break;
    }
    return hyps;
  }

  Hypothesis greedy_decode(const FeatureMatrix& features, const VisualContext* visual, std::size_t max_len,
                           const corpus::Vocabulary& vocab) const {
    return greedy_decode(std::vector<DecodeRequest>{{&features, visual, max_len}}, vocab).front();
  }

 private:
  struct LstmParams {
    nn::Parameter<T>*w_ih, *w_hh, *bias;
  };
  struct EncoderLayer {
    LstmParams fwd, bwd;
  };
  struct GruParams {
    nn::Parameter<T>*w_ih, *b_ih, *w_hh, *b_hh;
  };
  struct AttParams {
    nn::Parameter<T>*w_key, *w_query, *bias, *v;
  };

  void build() {
    const std::size_t hd = config_.direction_hidden();
    std::size_t in = config_.feature_dim;
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      EncoderLayer layer;
      const std::string base = "encoder.layer" + std::to_string(l + 1);
      for (auto [dir, slot] : {std::pair{"fwd", &layer.fwd}, std::pair{"bwd", &layer.bwd}}) {
        const std::string p = base + "." + dir;
        slot->w_ih = &params_.add(p + ".weight_ih", in, 4 * hd);
        slot->w_hh = &params_.add(p + ".weight_hh", hd, 4 * hd);
        slot->bias = &params_.add(p + ".bias", 1, 4 * hd);
      }
      encoder_.push_back(layer);
      in = 2 * hd;
    }
    const std::size_t h = config_.dec_hidden, e = config_.emb_dim, enc = config_.enc_hidden;
    embedding_ = &params_.add("embedding.weight", config_.vocab_size, e);
    gru1_ = add_gru("decoder.gru1", e);
    enc_att_ = add_attention("decoder.attention", enc);
    if (is_multimodal(config_.variant)) {
      visual_w_ = &params_.add("visual.projection.weight", config_.visual_in_dim, config_.visual_proj_dim);
      visual_b_ = &params_.add("visual.projection.bias", 1, config_.visual_proj_dim);
      vis_att_ = add_attention("decoder.visual_attention", config_.visual_proj_dim);
      hier_att_ = add_attention("decoder.hier_attention", enc);
    }
    gru2_ = add_gru("decoder.gru2", enc);
    output_w_ = config_.tie_embeddings ? embedding_ : &params_.add("output.weight", config_.vocab_size, h);
    output_b_ = &params_.add("output.bias", 1, config_.vocab_size);
  }

  GruParams add_gru(const std::string& p, std::size_t in) {
    const std::size_t h = config_.dec_hidden;
    return {&params_.add(p + ".weight_ih", in, 3 * h), &params_.add(p + ".bias_ih", 1, 3 * h),
            &params_.add(p + ".weight_hh", h, 3 * h), &params_.add(p + ".bias_hh", 1, 3 * h)};
  }

  AttParams add_attention(const std::string& p, std::size_t key_dim) {
    const std::size_t a = config_.att_dim;
    return {&params_.add(p + ".weight_key", key_dim, a), &params_.add(p + ".weight_query", config_.dec_hidden, a),
            &params_.add(p + ".bias", 1, a), &params_.add(p + ".score", a, 1)};
  }

  nn::LstmWeights<T> bind(Tape<T>& t, const LstmParams& p) const {
    return {t.parameter(*p.w_ih), t.parameter(*p.w_hh), t.parameter(*p.bias)};
  }
  nn::GruWeights<T> bind(Tape<T>& t, const GruParams& p) const {
    return {t.parameter(*p.w_ih), t.parameter(*p.b_ih), t.parameter(*p.w_hh), t.parameter(*p.b_hh)};
  }
  nn::AttentionWeights<T> bind(Tape<T>& t, const AttParams& p) const {
    return {t.parameter(*p.w_key), t.parameter(*p.w_query), t.parameter(*p.bias), t.parameter(*p.v)};
  }

  void require_multimodal(const char* what) const {
    if (!is_multimodal(config_.variant)) throw UnsupportedVariantError(std::string(what) + " on a unimodal model");
  }

  Var<T> run_direction(Tape<T>& tape, Var<T> input, const LstmParams& p, const std::vector<std::size_t>& lengths,
                       std::size_t steps, std::size_t batch, bool reverse) const {
    auto w = bind(tape, p);
    auto xp = nn::affine(input, w.w_ih, w.bias);
    const auto hd = static_cast<Eigen::Index>(config_.direction_hidden());
    const auto b = static_cast<Eigen::Index>(batch);
    Var<T> h = tape.constant(Matrix<T>::Zero(b, hd));
    Var<T> c = tape.constant(Matrix<T>::Zero(b, hd));
    std::vector<Var<T>> outputs(steps);
    std::vector<unsigned char> keep(batch);
    for (std::size_t i = 0; i < steps; ++i) {
      const std::size_t t = reverse ? steps - 1 - i : i;
      auto gates = nn::add(nn::slice_rows(xp, static_cast<Eigen::Index>(t * batch), b), nn::matmul(h, w.w_hh));
      auto c_new = nn::lstm_cell_state(gates, c);
      auto h_new = nn::lstm_cell_output(gates, c_new);
      bool all = true;
      for (std::size_t s = 0; s < batch; ++s) {
        keep[s] = t < lengths[s];
        all = all && keep[s];
      }
      if (all) {
        h = h_new;
        c = c_new;
      } else {
        h = nn::blend_rows(keep, h_new, h);
        c = nn::blend_rows(keep, c_new, c);
      }
      outputs[t] = h;
    }
    return nn::stack_rows(outputs);
  }

  StepOutput<T> step_from_projection(Tape<T>& tape, Var<T> xp1, const DecoderState<T>& state,
                                     const EncodedBatch<T>& enc, const VisualBatch<T>* visual) const {
    auto g1 = bind(tape, gru1_);
    StepOutput<T> out;
    auto h1 = nn::gru_combine(xp1, nn::affine(state.h1, g1.w_hh, g1.b_hh), state.h1);
    auto z = nn::attend(enc.states, enc.keys_projected, h1, bind(tape, enc_att_), enc.mask);
    out.encoder_weights = z.weights;
    Var<T> context = z.context;
    if (is_multimodal(config_.variant)) {
      if (!visual) throw ConfigError(to_string(config_.variant) + " decode step needs visual input");
      auto va = nn::attend(visual->keys, visual->keys_projected, h1, bind(tape, vis_att_));
      out.visual_weights = va.weights;
      auto hw = bind(tape, hier_att_);
      auto pair = nn::stack_rows<T>({z.context, va.context});
      auto hier = nn::attend(pair, nn::matmul(pair, hw.w_key), h1, hw);
      out.modality_weights = hier.weights;
      context = hier.context;
    }
    auto h2 = nn::gru_cell(context, state.h2, bind(tape, gru2_));
    out.state = {h1, h2};
    return out;
  }

  Var<T> output_logits(Tape<T>& tape, Var<T> h2) const {
    return nn::add_row(nn::matmul_nt(h2, tape.parameter(*output_w_)), tape.parameter(*output_b_));
  }

  TraceStep trace_row(const StepOutput<T>& step, const EncodedBatch<T>& enc, std::size_t b) const {
    TraceStep s;
    const auto r = static_cast<Eigen::Index>(b);
    const auto& ew = step.encoder_weights.value();
    s.encoder_weights.resize(enc.lengths[b]);
    for (std::size_t i = 0; i < enc.lengths[b]; ++i) s.encoder_weights[i] = static_cast<double>(ew(r, static_cast<Eigen::Index>(i)));
    if (is_multimodal(config_.variant)) {
      if (config_.variant == Variant::Maop) {
        const auto& vw = step.visual_weights.value();
        s.proposal_weights.resize(static_cast<std::size_t>(vw.cols()));
        for (Eigen::Index j = 0; j < vw.cols(); ++j) s.proposal_weights[static_cast<std::size_t>(j)] = static_cast<double>(vw(r, j));
      }
      const auto& mw = step.modality_weights.value();
      s.alpha_a = static_cast<double>(mw(r, 0));
      s.alpha_v = static_cast<double>(mw(r, 1));
    }
    return s;
  }

  ModelConfig config_;
  mutable nn::ParameterSet<T> params_;
  std::vector<EncoderLayer> encoder_;
  nn::Parameter<T>* embedding_ = nullptr;
  nn::Parameter<T>* output_w_ = nullptr;
  nn::Parameter<T>* output_b_ = nullptr;
  nn::Parameter<T>* visual_w_ = nullptr;
  nn::Parameter<T>* visual_b_ = nullptr;
  GruParams gru1_{}, gru2_{};
  AttParams enc_att_{}, vis_att_{}, hier_att_{};
};

}  // namespace mmasr::model
