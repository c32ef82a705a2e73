#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "mmasr/core/tape.hpp"

// Differentiable primitives. Every op computes its value eagerly and records
// a closure that maps the output gradient onto its inputs. Inputs that do not
// require gradients are skipped in the backward pass.

namespace mmasr::nn {

namespace detail {

template <typename T>
void require_same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw ArgumentError("operands recorded on different tapes");
}

template <typename T>
void require_same_shape(const char* op, const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.value()) + " vs " +
                     shape_string(b.value()));
  }
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.value()) + " x " +
                     shape_string(b.value()));
  }
  Matrix<T> y(a.rows(), b.cols());
  y.noalias() = a.value() * b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += dy * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * dy;
  });
}

// a * b^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_string(a.value()) + " x " +
                     shape_string(b.value()) + "^T");
  }
  Matrix<T> y(a.rows(), b.rows());
  y.noalias() = a.value() * b.value().transpose();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia).noalias() += dy * t.value(ib);
    if (t.needs_grad(ib)) t.grad(ib).noalias() += dy.transpose() * t.value(ia);
  });
}

/// x[m x k] * W[k x n] + b[1 x n], bias broadcast over rows.
template <typename T>
Var<T> affine(Var<T> x, Var<T> w, Var<T> b) {
  detail::require_same_tape(x, w);
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("affine: incompatible shapes x" + shape_string(x.value()) + " W" +
                     shape_string(w.value()) + " b" + shape_string(b.value()));
  }
  Matrix<T> y(x.rows(), w.cols());
  y.noalias() = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  const auto ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record(std::move(y), {x, w, b}, [ix, iw, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ix)) t.grad(ix).noalias() += dy * t.value(iw).transpose();
    if (t.needs_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * dy;
    if (t.needs_grad(ib)) t.grad(ib) += dy.colwise().sum();
  });
}

/// x[m x n] + b[1 x n] broadcast over rows.
template <typename T>
Var<T> add_row(Var<T> x, Var<T> b) {
  detail::require_same_tape(x, b);
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row: x" + shape_string(x.value()) + " b" + shape_string(b.value()));
  }
  Matrix<T> y = x.value();
  y.rowwise() += b.value().row(0);
  const auto ix = x.id(), ib = b.id();
  return x.tape().record(std::move(y), {x, b}, [ix, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ix)) t.grad(ix) += dy;
    if (t.needs_grad(ib)) t.grad(ib) += dy.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a, b);
  Matrix<T> y = a.value() + b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += dy;
    if (t.needs_grad(ib)) t.grad(ib) += dy;
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("sub", a, b);
  Matrix<T> y = a.value() - b.value();
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += dy;
    if (t.needs_grad(ib)) t.grad(ib) -= dy;
  });
}

// Hadamard product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("mul", a, b);
  Matrix<T> y = a.value().cwiseProduct(b.value());
  const auto ia = a.id(), ib = b.id();
  return a.tape().record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    if (t.needs_grad(ia)) t.grad(ia) += dy.cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad(ib) += dy.cwiseProduct(t.value(ia));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Matrix<T> y = a.value() * s;
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia, s](Tape<T>& t, std::size_t self) {
    t.grad(ia) += t.grad(self) * s;
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Matrix<T> y = a.value().array().tanh().matrix();
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * (T(1) - y.array().square());
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Matrix<T> y = a.value().unaryExpr([](T v) { return detail::sigmoid(v); });
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self);
    t.grad(ia).array() += t.grad(self).array() * y.array() * (T(1) - y.array());
  });
}

// Sum of all entries, as a 1x1 value.
template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> y(1, 1);
  y(0, 0) = a.value().sum();
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia](Tape<T>& t, std::size_t self) {
    t.grad(ia).array() += t.grad(self)(0, 0);
  });
}

/// Rows where keep[r] != 0 come from `fresh`, others from `old`.
template <typename T>
Var<T> blend_rows(const std::vector<unsigned char>& keep, Var<T> fresh, Var<T> old) {
  detail::require_same_shape("blend_rows", fresh, old);
  if (static_cast<Eigen::Index>(keep.size()) != fresh.rows()) throw ShapeError("blend_rows: mask length");
  Matrix<T> y = old.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    if (keep[r]) y.row(r) = fresh.value().row(r);
  }
  const auto inew = fresh.id(), iold = old.id();
  return fresh.tape().record(std::move(y), {fresh, old}, [inew, iold, keep](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    const bool gn = t.needs_grad(inew), go = t.needs_grad(iold);
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      if (keep[r]) {
        if (gn) t.grad(inew).row(r) += dy.row(r);
      } else if (go) {
        t.grad(iold).row(r) += dy.row(r);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("concat_cols: no inputs");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<T> y(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    spans.emplace_back(p.id(), p.cols());
    c += p.cols();
  }
  return parts[0].tape().record(std::move(y), parts, [spans](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    Eigen::Index c = 0;
    for (auto [id, n] : spans) {
      if (t.needs_grad(id)) t.grad(id) += dy.middleCols(c, n);
      c += n;
    }
  });
}

template <typename T>
Var<T> slice_cols(Var<T> a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count <= 0 || begin + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix<T> y = a.value().middleCols(begin, count);
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia, begin, count](Tape<T>& t, std::size_t self) {
    t.grad(ia).middleCols(begin, count) += t.grad(self);
  });
}

// Vertical concatenation.
template <typename T>
Var<T> stack_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ArgumentError("stack_rows: no inputs");
  const auto cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("stack_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<T> y(rows, cols);
  std::vector<std::pair<std::size_t, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return parts[0].tape().record(std::move(y), parts, [spans](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    Eigen::Index r = 0;
    for (auto [id, n] : spans) {
      if (t.needs_grad(id)) t.grad(id) += dy.middleRows(r, n);
      r += n;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count <= 0 || begin + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix<T> y = a.value().middleRows(begin, count);
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia, begin, count](Tape<T>& t, std::size_t self) {
    t.grad(ia).middleRows(begin, count) += t.grad(self);
  });
}

// y.row(i) = a.row(index[i]); used for embedding lookup and subsampling.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<Eigen::Index> index) {
  Matrix<T> y(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ArgumentError("gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  const auto ia = a.id();
  return a.tape().record(std::move(y), {a}, [ia, index = std::move(index)](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    auto& da = t.grad(ia);
    for (std::size_t i = 0; i < index.size(); ++i) da.row(index[i]) += dy.row(static_cast<Eigen::Index>(i));
  });
}

// ---------------------------------------------------------------------------
// Softmax family

/// Row-wise softmax with max subtraction. Entries whose mask is zero get
/// weight zero; a row must keep at least one entry.
template <typename T>
Matrix<T> softmax_rows_value(const Matrix<T>& scores, const Matrix<T>* mask = nullptr) {
  if (scores.cols() == 0) throw ArgumentError("softmax: empty input");
  Matrix<T> y(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      if (!mask || (*mask)(r, c) != T(0)) mx = std::max(mx, scores(r, c));
    }
    if (!std::isfinite(mx)) throw ArgumentError("softmax: row has no finite unmasked score");
    T z = 0;
    for (Eigen::Index c = 0; c < scores.cols(); ++c) {
      const bool on = !mask || (*mask)(r, c) != T(0);
      y(r, c) = on ? std::exp(scores(r, c) - mx) : T(0);
      z += y(r, c);
    }
    y.row(r) /= z;
  }
  return y;
}

template <typename T>
Var<T> softmax_rows(Var<T> scores, std::shared_ptr<const Matrix<T>> mask = nullptr) {
  if (mask && (mask->rows() != scores.rows() || mask->cols() != scores.cols())) {
    throw ShapeError("softmax: mask shape " + shape_string(*mask) + " vs scores " + shape_string(scores.value()));
  }
  Matrix<T> y = softmax_rows_value(scores.value(), mask.get());
  const auto is = scores.id();
  return scores.tape().record(std::move(y), {scores}, [is](Tape<T>& t, std::size_t self) {
    const auto& y = t.value(self);
    const auto& dy = t.grad(self);
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = dy.cwiseProduct(y).rowwise().sum();
    Matrix<T> ds = y.cwiseProduct(dy - dot.replicate(1, y.cols()));
    t.grad(is) += ds;
  });
}

/// Softmax of a single score vector (1 x n).
template <typename T>
Var<T> softmax(Var<T> scores) {
  if (scores.rows() != 1) throw ShapeError("softmax: expected a 1 x n vector, got " + shape_string(scores.value()));
  return softmax_rows(scores);
}

/// Mean negative log-likelihood over positions whose target is >= 0.
/// Negative targets mark padding. Returns a 1x1 value.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::vector<int> targets) {
  const auto m = logits.rows(), v = logits.cols();
  if (static_cast<Eigen::Index>(targets.size()) != m) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(m) +
                     " rows");
  }
  Matrix<T> probs = softmax_rows_value(logits.value());
  double total = 0.0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < m; ++r) {
    const int tgt = targets[r];
    if (tgt < 0) continue;
    if (tgt >= v) throw ArgumentError("cross_entropy: target " + std::to_string(tgt) + " >= vocabulary " + std::to_string(v));
    // log-softmax directly from logits keeps extreme margins finite.
    const auto row = logits.value().row(r);
    const T mx = row.maxCoeff();
    const T lse = mx + std::log((row.array() - mx).exp().sum());
    total += static_cast<double>(lse - row(tgt));
    ++count;
  }
  Matrix<T> y(1, 1);
  y(0, 0) = count ? static_cast<T>(total / static_cast<double>(count)) : T(0);
  const auto il = logits.id();
  return logits.tape().record(
      std::move(y), {logits}, [il, probs = std::move(probs), targets = std::move(targets), count](Tape<T>& t, std::size_t self) {
        if (!count) return;
        const T g = t.grad(self)(0, 0) / static_cast<T>(count);
        auto& dl = t.grad(il);
        for (Eigen::Index r = 0; r < dl.rows(); ++r) {
          if (targets[r] < 0) continue;
          dl.row(r) += g * probs.row(r);
          dl(r, targets[r]) -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Recurrent cells. Gate layouts: LSTM [i | f | g | o], GRU [r | z | n].

/// c = sigmoid(f) * c_prev + sigmoid(i) * tanh(g), from pre-activation gates.
template <typename T>
Var<T> lstm_cell_state(Var<T> gates, Var<T> c_prev) {
  const auto h = c_prev.cols();
  if (gates.cols() != 4 * h || gates.rows() != c_prev.rows()) {
    throw ShapeError("lstm_cell: gates " + shape_string(gates.value()) + " vs state " + shape_string(c_prev.value()));
  }
  const auto& g = gates.value();
  auto sig = [](T v) { return detail::sigmoid(v); };
  Matrix<T> i = g.middleCols(0, h).unaryExpr(sig);
  Matrix<T> f = g.middleCols(h, h).unaryExpr(sig);
  Matrix<T> cand = g.middleCols(2 * h, h).array().tanh().matrix();
  Matrix<T> c = f.cwiseProduct(c_prev.value()) + i.cwiseProduct(cand);
  const auto ig = gates.id(), ic = c_prev.id();
  return gates.tape().record(std::move(c), {gates, c_prev},
                             [ig, ic, h, i = std::move(i), f = std::move(f), cand = std::move(cand)](Tape<T>& t, std::size_t self) {
                               const auto& dc = t.grad(self);
                               if (t.needs_grad(ig)) {
                                 auto& dg = t.grad(ig);
                                 const auto& cp = t.value(ic);
                                 dg.middleCols(0, h).array() += dc.array() * cand.array() * i.array() * (T(1) - i.array());
                                 dg.middleCols(h, h).array() += dc.array() * cp.array() * f.array() * (T(1) - f.array());
                                 dg.middleCols(2 * h, h).array() += dc.array() * i.array() * (T(1) - cand.array().square());
                               }
                               if (t.needs_grad(ic)) t.grad(ic) += dc.cwiseProduct(f);
                             });
}

/// h = sigmoid(o) * tanh(c).
template <typename T>
Var<T> lstm_cell_output(Var<T> gates, Var<T> c) {
  const auto h = c.cols();
  if (gates.cols() != 4 * h || gates.rows() != c.rows()) throw ShapeError("lstm_cell: gates/state mismatch");
  Matrix<T> o = gates.value().middleCols(3 * h, h).unaryExpr([](T v) { return detail::sigmoid(v); });
  Matrix<T> tc = c.value().array().tanh().matrix();
  Matrix<T> out = o.cwiseProduct(tc);
  const auto ig = gates.id(), ic = c.id();
  return gates.tape().record(std::move(out), {gates, c},
                             [ig, ic, h, o = std::move(o), tc = std::move(tc)](Tape<T>& t, std::size_t self) {
                               const auto& dh = t.grad(self);
                               if (t.needs_grad(ig)) {
                                 t.grad(ig).middleCols(3 * h, h).array() += dh.array() * tc.array() * o.array() * (T(1) - o.array());
                               }
                               if (t.needs_grad(ic)) {
                                 t.grad(ic).array() += dh.array() * o.array() * (T(1) - tc.array().square());
                               }
                             });
}

/// GRU update from input projection xp = x W_i + b_i and recurrent
/// projection hp = h W_h + b_h:
///   r = sig(xr + hr), z = sig(xz + hz), n = tanh(xn + r * hn),
///   h' = (1 - z) * h_prev + z * n.
template <typename T>
Var<T> gru_combine(Var<T> xp, Var<T> hp, Var<T> h_prev) {
  const auto h = h_prev.cols();
  if (xp.cols() != 3 * h || hp.cols() != 3 * h || xp.rows() != h_prev.rows() || hp.rows() != h_prev.rows()) {
    throw ShapeError("gru_cell: projections " + shape_string(xp.value()) + "/" + shape_string(hp.value()) +
                     " vs state " + shape_string(h_prev.value()));
  }
  auto sig = [](T v) { return detail::sigmoid(v); };
  const auto& x = xp.value();
  const auto& hh = hp.value();
  Matrix<T> r = (x.middleCols(0, h) + hh.middleCols(0, h)).unaryExpr(sig);
  Matrix<T> z = (x.middleCols(h, h) + hh.middleCols(h, h)).unaryExpr(sig);
  Matrix<T> n = (x.middleCols(2 * h, h).array() + r.array() * hh.middleCols(2 * h, h).array()).tanh().matrix();
  Matrix<T> out = (T(1) - z.array()).matrix().cwiseProduct(h_prev.value()) + z.cwiseProduct(n);
  const auto ix = xp.id(), ih = hp.id(), ip = h_prev.id();
  return xp.tape().record(
      std::move(out), {xp, hp, h_prev},
      [ix, ih, ip, h, r = std::move(r), z = std::move(z), n = std::move(n)](Tape<T>& t, std::size_t self) {
        const auto& dy = t.grad(self);
        const auto& hprev = t.value(ip);
        const auto& hn = t.value(ih).middleCols(2 * h, h);
        Matrix<T> dn = (dy.array() * z.array() * (T(1) - n.array().square())).matrix();
        Matrix<T> dz = (dy.array() * (n.array() - hprev.array()) * z.array() * (T(1) - z.array())).matrix();
        Matrix<T> dr = (dn.array() * hn.array() * r.array() * (T(1) - r.array())).matrix();
        if (t.needs_grad(ix)) {
          auto& g = t.grad(ix);
          g.middleCols(0, h) += dr;
          g.middleCols(h, h) += dz;
          g.middleCols(2 * h, h) += dn;
        }
        if (t.needs_grad(ih)) {
          auto& g = t.grad(ih);
          g.middleCols(0, h) += dr;
          g.middleCols(h, h) += dz;
          g.middleCols(2 * h, h) += dn.cwiseProduct(r);
        }
        if (t.needs_grad(ip)) t.grad(ip) += dy.cwiseProduct((T(1) - z.array()).matrix());
      });
}

// ---------------------------------------------------------------------------
// Additive attention over time-major key blocks. Keys for n positions and a
// batch of B are stored as rows t*B + b.

/// scores[b, t] = w . tanh(kp[t*B + b] + qp[b]); kp[nB x A], qp[B x A], w[A x 1].
template <typename T>
Var<T> additive_scores(Var<T> kp, Var<T> qp, Var<T> w) {
  const auto batch = qp.rows(), a = qp.cols();
  if (batch == 0 || kp.cols() != a || kp.rows() % batch != 0 || w.rows() != a || w.cols() != 1) {
    throw ShapeError("attention: keys " + shape_string(kp.value()) + " query " + shape_string(qp.value()) +
                     " w " + shape_string(w.value()));
  }
  const auto n = kp.rows() / batch;
  if (n == 0) throw ArgumentError("attention: empty key set");
  auto th = std::make_shared<Matrix<T>>(kp.value());
  for (Eigen::Index tt = 0; tt < n; ++tt) th->middleRows(tt * batch, batch) += qp.value();
  *th = th->array().tanh().matrix();
  Matrix<T> flat(n * batch, 1);
  flat.noalias() = *th * w.value();
  Matrix<T> scores(batch, n);
  for (Eigen::Index tt = 0; tt < n; ++tt) scores.col(tt) = flat.middleRows(tt * batch, batch);
  const auto ik = kp.id(), iq = qp.id(), iw = w.id();
  return kp.tape().record(std::move(scores), {kp, qp, w}, [ik, iq, iw, th, n, batch](Tape<T>& t, std::size_t self) {
    const auto& ds = t.grad(self);
    Matrix<T> dflat(n * batch, 1);
    for (Eigen::Index tt = 0; tt < n; ++tt) dflat.middleRows(tt * batch, batch) = ds.col(tt);
    if (t.needs_grad(iw)) t.grad(iw).noalias() += th->transpose() * dflat;
    if (t.needs_grad(ik) || t.needs_grad(iq)) {
      Matrix<T> pre = (dflat * t.value(iw).transpose()).cwiseProduct((T(1) - th->array().square()).matrix());
      if (t.needs_grad(ik)) t.grad(ik) += pre;
      if (t.needs_grad(iq)) {
        auto& dq = t.grad(iq);
        for (Eigen::Index tt = 0; tt < n; ++tt) dq += pre.middleRows(tt * batch, batch);
      }
    }
  });
}

/// context[b] = sum_t weights[b, t] * keys[t*B + b].
template <typename T>
Var<T> weighted_sum(Var<T> weights, Var<T> keys) {
  const auto batch = weights.rows(), n = weights.cols();
  if (keys.rows() != n * batch) {
    throw ShapeError("weighted_sum: weights " + shape_string(weights.value()) + " keys " + shape_string(keys.value()));
  }
  Matrix<T> y = Matrix<T>::Zero(batch, keys.cols());
  for (Eigen::Index tt = 0; tt < n; ++tt) {
    y += weights.value().col(tt).asDiagonal() * keys.value().middleRows(tt * batch, batch);
  }
  const auto iw = weights.id(), ik = keys.id();
  return weights.tape().record(std::move(y), {weights, keys}, [iw, ik, n, batch](Tape<T>& t, std::size_t self) {
    const auto& dy = t.grad(self);
    const auto& wv = t.value(iw);
    const auto& kv = t.value(ik);
    for (Eigen::Index tt = 0; tt < n; ++tt) {
      if (t.needs_grad(iw)) {
        t.grad(iw).col(tt) += kv.middleRows(tt * batch, batch).cwiseProduct(dy).rowwise().sum();
      }
      if (t.needs_grad(ik)) t.grad(ik).middleRows(tt * batch, batch) += wv.col(tt).asDiagonal() * dy;
    }
  });
}

// Arithmetic sugar.
template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }

}  // namespace mmasr::nn
