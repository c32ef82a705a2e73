#pragma once

#include <utility>

#include "mmasr/core/ops.hpp"

namespace mmasr::nn {

// Weights for one LSTM direction. w_ih [in x 4H], w_hh [H x 4H], bias [1 x 4H].
template <typename T>
struct LstmWeights {
  Var<T> w_ih, w_hh, bias;
};

// Weights for one GRU. w_ih [in x 3H], w_hh [H x 3H], biases [1 x 3H].
template <typename T>
struct GruWeights {
  Var<T> w_ih, b_ih, w_hh, b_hh;
};

/// Standard LSTM step. Returns (h, c).
template <typename T>
std::pair<Var<T>, Var<T>> lstm_cell(Var<T> x, Var<T> h_prev, Var<T> c_prev, const LstmWeights<T>& w) {
  if (h_prev.cols() != c_prev.cols() || w.w_hh.rows() != h_prev.cols()) {
    throw ShapeError("lstm_cell: state " + shape_string(h_prev.value()) + " vs recurrent weights " +
                     shape_string(w.w_hh.value()));
  }
  auto gates = add(affine(x, w.w_ih, w.bias), matmul(h_prev, w.w_hh));
  auto c = lstm_cell_state(gates, c_prev);
  auto h = lstm_cell_output(gates, c);
  return {h, c};
}

/// GRU step with h = (1 - z) * h_prev + z * candidate.
template <typename T>
Var<T> gru_cell(Var<T> x, Var<T> h_prev, const GruWeights<T>& w) {
  if (w.w_hh.rows() != h_prev.cols()) {
    throw ShapeError("gru_cell: state " + shape_string(h_prev.value()) + " vs recurrent weights " +
                     shape_string(w.w_hh.value()));
  }
  return gru_combine(affine(x, w.w_ih, w.b_ih), affine(h_prev, w.w_hh, w.b_hh), h_prev);
}

// Weights for one additive attention site: score = w . tanh(key W_k + query W_q + b).
template <typename T>
struct AttentionWeights {
  Var<T> w_key, w_query, bias, v;
};

template <typename T>
struct AttentionResult {
  Var<T> context;
  Var<T> weights;
};

/// Batched additive attention. `keys` holds n positions for B queries in
/// time-major rows (t*B + b); `mask` (B x n, optional) marks valid positions.
template <typename T>
AttentionResult<T> attend(Var<T> keys, Var<T> keys_projected, Var<T> query, const AttentionWeights<T>& w,
                          std::shared_ptr<const Matrix<T>> mask = nullptr) {
  auto qp = affine(query, w.w_query, w.bias);
  auto scores = additive_scores(keys_projected, qp, w.v);
  auto weights = softmax_rows(scores, std::move(mask));
  return {weighted_sum(weights, keys), weights};
}

/// Single-query additive attention over keys [n x d_k] with query [1 x d_q].
template <typename T>
AttentionResult<T> additive_attention(Var<T> keys, Var<T> query, const AttentionWeights<T>& w) {
  if (keys.rows() == 0) throw ArgumentError("additive_attention: empty key set");
  if (query.rows() != 1) throw ShapeError("additive_attention: query must be a single row");
  return attend(keys, matmul(keys, w.w_key), query, w);
}

}  // namespace mmasr::nn
