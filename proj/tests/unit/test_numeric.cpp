#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "mmasr/core/cells.hpp"
#include "mmasr/core/gradcheck.hpp"
#include "mmasr/core/ops.hpp"
#include "mmasr/core/optim.hpp"
#include "mmasr/core/seed.hpp"

using namespace mmasr;
using namespace mmasr::nn;
using M = Matrix<double>;

namespace {

M mat(std::initializer_list<std::initializer_list<double>> rows) {
  M m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index r = 0;
  for (const auto& row : rows) {
    Eigen::Index c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

M random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

Parameter<double>& add_random(ParameterSet<double>& ps, const std::string& name, Eigen::Index r, Eigen::Index c,
                              std::mt19937_64& rng, double scale = 0.5) {
  auto& p = ps.add(name, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  p.value() = random_matrix(r, c, rng, scale);
  return p;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

TEST(Tensor, ValueCountMustMatchShape) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), ShapeError);
  Tensor<double> t({2, 3, 2}, std::vector<double>(12, 1.0));
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.size(), 12u);
  EXPECT_EQ(t.matrix().rows(), 2);
  EXPECT_EQ(t.matrix().cols(), 6);
}

TEST(Tensor, GradientHasValueShape) {
  Tensor<double> t({3, 4});
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().rows(), 3);
  EXPECT_EQ(t.grad().cols(), 4);
}

TEST(ParameterSet, NamesAreUnique) {
  ParameterSet<double> ps;
  ps.add("a", 1, 1);
  EXPECT_THROW(ps.add("a", 2, 2), ArgumentError);
  EXPECT_THROW(ps.at("missing"), LookupError);
}

// ---------------------------------------------------------------------------
// affine

TEST(Affine, IdentityWeights) {
  Tape<double> t;
  auto y = affine(t.constant(mat({{1, 2}})), t.constant(mat({{1, 0}, {0, 1}})), t.constant(mat({{0, 0}})));
  EXPECT_EQ(y.value(), mat({{1, 2}}));
}

TEST(Affine, ZeroWeightsPassBias) {
  Tape<double> t;
  auto y = affine(t.constant(mat({{1, 2}})), t.constant(M::Zero(2, 2)), t.constant(mat({{3, 4}})));
  EXPECT_EQ(y.value(), mat({{3, 4}}));
}

TEST(Affine, MatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const M x = random_matrix(3, 4, rng), w = random_matrix(4, 2, rng), b = random_matrix(1, 2, rng);
  Tape<double> t;
  const M y = affine(t.constant(x), t.constant(w), t.constant(b)).value();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double s = b(0, j);
      for (int l = 0; l < 4; ++l) s += x(i, l) * w(l, j);
      EXPECT_NEAR(y(i, j), s, 1e-12);
    }
  }
}

TEST(Affine, ShapeErrorNamesBothShapes) {
  Tape<double> t;
  try {
    affine(t.constant(M::Zero(1, 3)), t.constant(M::Zero(2, 2)), t.constant(M::Zero(1, 2)));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x2]"), std::string::npos) << msg;
  }
}

TEST(Affine, MatmulIsAssociative) {
  std::mt19937_64 rng(2);
  const M x = random_matrix(2, 3, rng), a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
  Tape<double> t;
  auto xa_b = matmul(matmul(t.constant(x), t.constant(a)), t.constant(b));
  auto x_ab = matmul(t.constant(x), matmul(t.constant(a), t.constant(b)));
  EXPECT_LT((xa_b.value() - x_ab.value()).cwiseAbs().maxCoeff(), 1e-9);
}

// ---------------------------------------------------------------------------
// softmax

TEST(Softmax, UniformScores) {
  Tape<double> t;
  auto y = softmax(t.constant(mat({{0, 0, 0}})));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(y.value()(0, i), 1.0 / 3.0, 1e-15);
}

TEST(Softmax, Analytic) {
  Tape<double> t;
  auto y = softmax(t.constant(mat({{std::log(2.0), 0, 0}})));
  EXPECT_NEAR(y.value()(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(y.value()(0, 1), 0.25, 1e-15);
  EXPECT_NEAR(y.value()(0, 2), 0.25, 1e-15);
}

TEST(Softmax, LargeScoresDoNotOverflow) {
  Tape<double> t;
  auto y = softmax(t.constant(mat({{1000, 0}})));
  EXPECT_TRUE(y.value().allFinite());
  EXPECT_NEAR(y.value()(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(y.value()(0, 1), 0.0, 1e-15);
}

TEST(Softmax, EmptyInputIsRejected) {
  Tape<double> t;
  EXPECT_THROW(softmax(t.constant(M(1, 0))), ArgumentError);
}

TEST(Softmax, SumsToOneAndIsShiftInvariant) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> shift(-50, 50);
  for (int trial = 0; trial < 200; ++trial) {
    const M s = random_matrix(1, 1 + trial % 17, rng, 5.0);
    const double c = shift(rng);
    Tape<double> t;
    const M a = softmax(t.constant(s)).value();
    const M b = softmax(t.constant((s.array() + c).matrix())).value();
    EXPECT_NEAR(a.sum(), 1.0, 1e-6);
    EXPECT_GT(a.minCoeff(), 0.0);
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Softmax, MaskedRowsIgnoreInvalidPositions) {
  Tape<double> t;
  auto mask = std::make_shared<const M>(mat({{1, 1, 0}, {1, 0, 0}}));
  const M y = softmax_rows(t.constant(mat({{0, 0, 9}, {3, 1, 2}})), mask).value();
  EXPECT_NEAR(y(0, 0), 0.5, 1e-15);
  EXPECT_EQ(y(0, 2), 0.0);
  EXPECT_NEAR(y(1, 0), 1.0, 1e-15);
}

// ---------------------------------------------------------------------------
// LSTM

namespace {

// Scalar-loop LSTM with gate order [i | f | g | o].
std::pair<M, M> lstm_reference(const M& x, const M& h, const M& c, const M& wih, const M& whh, const M& b) {
  const auto n = h.cols();
  M hn(1, n), cn(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double pre[4];
    for (int g = 0; g < 4; ++g) {
      double s = b(0, g * n + j);
      for (Eigen::Index l = 0; l < x.cols(); ++l) s += x(0, l) * wih(l, g * n + j);
      for (Eigen::Index l = 0; l < n; ++l) s += h(0, l) * whh(l, g * n + j);
      pre[g] = s;
    }
    const double i = sigmoid(pre[0]), f = sigmoid(pre[1]), cand = std::tanh(pre[2]), o = sigmoid(pre[3]);
    cn(0, j) = f * c(0, j) + i * cand;
    hn(0, j) = o * std::tanh(cn(0, j));
  }
  return {hn, cn};
}

}  // namespace

TEST(LstmCell, ZeroWeightsZeroState) {
  Tape<double> t;
  LstmWeights<double> w{t.constant(M::Zero(2, 12)), t.constant(M::Zero(3, 12)), t.constant(M::Zero(1, 12))};
  auto [h, c] = lstm_cell(t.constant(mat({{1, -1}})), t.constant(M::Zero(1, 3)), t.constant(M::Zero(1, 3)), w);
  EXPECT_EQ(h.value(), M::Zero(1, 3));
  EXPECT_EQ(c.value(), M::Zero(1, 3));
}

TEST(LstmCell, ZeroWeightsHalveCell) {
  Tape<double> t;
  LstmWeights<double> w{t.constant(M::Zero(2, 8)), t.constant(M::Zero(2, 8)), t.constant(M::Zero(1, 8))};
  const M c0 = mat({{1.5, -0.4}});
  auto [h, c] = lstm_cell(t.constant(mat({{0.3, 2}})), t.constant(mat({{0.7, 0.1}})), t.constant(c0), w);
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(c.value()(0, j), 0.5 * c0(0, j), 1e-15);
    EXPECT_NEAR(h.value()(0, j), 0.5 * std::tanh(0.5 * c0(0, j)), 1e-15);
  }
}

TEST(LstmCell, MatchesScalarReference) {
  std::mt19937_64 rng(4);
  const M x = random_matrix(1, 3, rng), h = random_matrix(1, 4, rng), c = random_matrix(1, 4, rng);
  const M wih = random_matrix(3, 16, rng), whh = random_matrix(4, 16, rng), b = random_matrix(1, 16, rng);
  Tape<double> t;
  auto [hn, cn] = lstm_cell(t.constant(x), t.constant(h), t.constant(c),
                            LstmWeights<double>{t.constant(wih), t.constant(whh), t.constant(b)});
  auto [hr, cr] = lstm_reference(x, h, c, wih, whh, b);
  EXPECT_LT((hn.value() - hr).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((cn.value() - cr).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LstmCell, ShapeMismatch) {
  Tape<double> t;
  LstmWeights<double> w{t.constant(M::Zero(2, 8)), t.constant(M::Zero(2, 8)), t.constant(M::Zero(1, 8))};
  EXPECT_THROW(lstm_cell(t.constant(M::Zero(1, 2)), t.constant(M::Zero(1, 3)), t.constant(M::Zero(1, 3)), w), ShapeError);
}

// ---------------------------------------------------------------------------
// GRU

namespace {

// Scalar-loop GRU with gate order [r | z | n] and h = (1 - z) h_prev + z n.
M gru_reference(const M& x, const M& h, const M& wih, const M& bih, const M& whh, const M& bhh) {
  const auto n = h.cols();
  M out(1, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double xg[3], hg[3];
    for (int g = 0; g < 3; ++g) {
      double sx = bih(0, g * n + j), sh = bhh(0, g * n + j);
      for (Eigen::Index l = 0; l < x.cols(); ++l) sx += x(0, l) * wih(l, g * n + j);
      for (Eigen::Index l = 0; l < n; ++l) sh += h(0, l) * whh(l, g * n + j);
      xg[g] = sx;
      hg[g] = sh;
    }
    const double r = sigmoid(xg[0] + hg[0]), z = sigmoid(xg[1] + hg[1]);
    const double cand = std::tanh(xg[2] + r * hg[2]);
    out(0, j) = (1.0 - z) * h(0, j) + z * cand;
  }
  return out;
}

GruWeights<double> zero_gru(Tape<double>& t, Eigen::Index in, Eigen::Index n) {
  return {t.constant(M::Zero(in, 3 * n)), t.constant(M::Zero(1, 3 * n)), t.constant(M::Zero(n, 3 * n)),
          t.constant(M::Zero(1, 3 * n))};
}

}  // namespace

TEST(GruCell, ZeroWeightsHalveState) {
  Tape<double> t;
  const M h0 = mat({{0.8, -2.0, 0.1}});
  auto h = gru_cell(t.constant(mat({{1, 1}})), t.constant(h0), zero_gru(t, 2, 3));
  EXPECT_LT((h.value() - 0.5 * h0).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(GruCell, ZeroStateZeroWeights) {
  Tape<double> t;
  auto h = gru_cell(t.constant(mat({{4, -3}})), t.constant(M::Zero(1, 3)), zero_gru(t, 2, 3));
  EXPECT_EQ(h.value(), M::Zero(1, 3));
}

TEST(GruCell, MatchesScalarReference) {
  std::mt19937_64 rng(5);
  const M x = random_matrix(1, 3, rng), h = random_matrix(1, 4, rng);
  const M wih = random_matrix(3, 12, rng), bih = random_matrix(1, 12, rng);
  const M whh = random_matrix(4, 12, rng), bhh = random_matrix(1, 12, rng);
  Tape<double> t;
  auto out = gru_cell(t.constant(x), t.constant(h),
                      GruWeights<double>{t.constant(wih), t.constant(bih), t.constant(whh), t.constant(bhh)});
  EXPECT_LT((out.value() - gru_reference(x, h, wih, bih, whh, bhh)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GruCell, ShapeMismatch) {
  Tape<double> t;
  EXPECT_THROW(gru_cell(t.constant(M::Zero(1, 2)), t.constant(M::Zero(1, 4)), zero_gru(t, 2, 3)), ShapeError);
}

// ---------------------------------------------------------------------------
// cross-entropy

TEST(CrossEntropy, UniformLogits) {
  Tape<double> t;
  auto l = cross_entropy(t.constant(M::Zero(3, 4)), {0, 3, 1});
  EXPECT_NEAR(l.value()(0, 0), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, DominantTargetGivesZeroLoss) {
  Tape<double> t;
  auto l = cross_entropy(t.constant(mat({{800, 0, 0}})), {0});
  EXPECT_TRUE(std::isfinite(l.value()(0, 0)));
  EXPECT_NEAR(l.value()(0, 0), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesDirectFormulaAndSkipsPadding) {
  std::mt19937_64 rng(6);
  const M logits = random_matrix(5, 7, rng, 2.0);
  const std::vector<int> targets = {3, -1, 0, 6, -1};
  double total = 0.0;
  int count = 0;
  for (int r = 0; r < 5; ++r) {
    if (targets[r] < 0) continue;
    double z = 0.0;
    for (int c = 0; c < 7; ++c) z += std::exp(logits(r, c));
    total += -std::log(std::exp(logits(r, targets[r])) / z);
    ++count;
  }
  Tape<double> t;
  EXPECT_NEAR(cross_entropy(t.constant(logits), targets).value()(0, 0), total / count, 1e-10);
}

TEST(CrossEntropy, OutOfRangeTarget) {
  Tape<double> t;
  EXPECT_THROW(cross_entropy(t.constant(M::Zero(2, 4)), {1, 4}), ArgumentError);
}

// ---------------------------------------------------------------------------
// backward

TEST(Backward, SquareSum) {
  ParameterSet<double> ps;
  auto& x = ps.add("x", 1, 1);
  x.value()(0, 0) = 3.0;
  ps.zero_grad();
  Tape<double> t;
  auto v = t.parameter(x);
  t.backward(sum(mul(v, v)));
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 6.0);
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  ParameterSet<double> ps;
  auto& x = ps.add("x", 1, 2);
  auto& unused = ps.add("unused", 2, 2);
  x.value() << 1.0, 2.0;
  unused.value().setOnes();
  ps.zero_grad();
  Tape<double> t;
  t.backward(sum(tanh(t.parameter(x))));
  EXPECT_EQ(unused.grad(), M::Zero(2, 2));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape<double> t;
  EXPECT_THROW(t.backward(t.constant(M::Zero(1, 2))), ArgumentError);
}

TEST(Backward, GradientsAccumulateAcrossUses) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", 1, 1);
  w.value()(0, 0) = 2.0;
  ps.zero_grad();
  Tape<double> t;
  auto a = t.parameter(w);
  auto b = t.parameter(w);  // same leaf
  t.backward(sum(add(mul(a, b), scale(a, 3.0))));
  EXPECT_DOUBLE_EQ(w.grad()(0, 0), 2.0 * 2.0 + 3.0);
}

TEST(Backward, NoGradTapeRecordsNoClosures) {
  ParameterSet<double> ps;
  auto& w = ps.add("w", 1, 1);
  Tape<double> t(false);
  auto v = t.parameter(w);
  EXPECT_FALSE(t.needs_grad(v.id()));
}

// Finite-difference checks of every primitive.
class PrimitiveGradient : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  ParameterSet<double> ps;

  template <typename Loss>
  void expect_matches(Loss&& loss) {
    const auto r = check_gradients(ps, loss);
    EXPECT_LT(r.max_relative_error, 1e-5) << r.worst_parameter << "[" << r.worst_index << "] analytic " << r.analytic
                                          << " numerical " << r.numerical;
    EXPECT_GT(r.checked, 0u);
  }
};

TEST_F(PrimitiveGradient, AffineAndMatmulNt) {
  auto& x = add_random(ps, "x", 3, 4, rng);
  auto& w = add_random(ps, "w", 4, 2, rng);
  auto& b = add_random(ps, "b", 1, 2, rng);
  auto& e = add_random(ps, "e", 5, 2, rng);
  expect_matches([&](Tape<double>& t) {
    auto y = affine(t.parameter(x), t.parameter(w), t.parameter(b));
    return sum(tanh(matmul_nt(y, t.parameter(e))));
  });
}

TEST_F(PrimitiveGradient, ElementwiseOps) {
  auto& a = add_random(ps, "a", 2, 3, rng);
  auto& b = add_random(ps, "b", 2, 3, rng);
  auto& r = add_random(ps, "r", 1, 3, rng);
  expect_matches([&](Tape<double>& t) {
    auto pa = t.parameter(a), pb = t.parameter(b);
    auto y = add_row(mul(sigmoid(pa), sub(pb, scale(pa, 0.3))), t.parameter(r));
    return sum(mul(y, tanh(y)));
  });
}

TEST_F(PrimitiveGradient, StructuralOps) {
  auto& a = add_random(ps, "a", 4, 3, rng);
  auto& b = add_random(ps, "b", 4, 2, rng);
  auto& c = add_random(ps, "c", 2, 5, rng);
  expect_matches([&](Tape<double>& t) {
    auto cat = concat_cols(std::vector<Var<double>>{t.parameter(a), t.parameter(b)});  // 4 x 5
    auto stacked = stack_rows(std::vector<Var<double>>{cat, t.parameter(c)});        // 6 x 5
    auto picked = gather_rows(stacked, {5, 0, 2, 2});
    auto sl = slice_cols(slice_rows(stacked, 1, 3), 1, 3);
    auto blended = blend_rows({1, 0, 1}, sl, slice_cols(slice_rows(picked, 0, 3), 0, 3));
    return sum(mul(tanh(picked), tanh(picked))) + sum(mul(blended, blended));
  });
}

TEST_F(PrimitiveGradient, SoftmaxAndCrossEntropy) {
  auto& s = add_random(ps, "s", 3, 5, rng, 1.0);
  auto& w = add_random(ps, "w", 3, 5, rng);
  expect_matches([&](Tape<double>& t) {
    auto p = softmax_rows(t.parameter(s), std::make_shared<const M>(mat({{1, 1, 1, 0, 0}, {1, 1, 1, 1, 1}, {1, 0, 0, 0, 0}})));
    return sum(mul(p, t.parameter(w))) + cross_entropy(t.parameter(s), {2, -1, 4});
  });
}

TEST_F(PrimitiveGradient, LstmCell) {
  auto& x = add_random(ps, "x", 2, 3, rng);
  auto& h = add_random(ps, "h", 2, 4, rng);
  auto& c = add_random(ps, "c", 2, 4, rng);
  auto& wih = add_random(ps, "wih", 3, 16, rng);
  auto& whh = add_random(ps, "whh", 4, 16, rng);
  auto& b = add_random(ps, "b", 1, 16, rng);
  expect_matches([&](Tape<double>& t) {
    LstmWeights<double> w{t.parameter(wih), t.parameter(whh), t.parameter(b)};
    auto [h1, c1] = lstm_cell(t.parameter(x), t.parameter(h), t.parameter(c), w);
    auto [h2, c2] = lstm_cell(t.parameter(x), h1, c1, w);
    return sum(mul(h2, h2)) + sum(c2);
  });
}

TEST_F(PrimitiveGradient, GruCell) {
  auto& x = add_random(ps, "x", 2, 3, rng);
  auto& h = add_random(ps, "h", 2, 4, rng);
  auto& wih = add_random(ps, "wih", 3, 12, rng);
  auto& bih = add_random(ps, "bih", 1, 12, rng);
  auto& whh = add_random(ps, "whh", 4, 12, rng);
  auto& bhh = add_random(ps, "bhh", 1, 12, rng);
  expect_matches([&](Tape<double>& t) {
    GruWeights<double> w{t.parameter(wih), t.parameter(bih), t.parameter(whh), t.parameter(bhh)};
    auto h1 = gru_cell(t.parameter(x), t.parameter(h), w);
    auto h2 = gru_cell(t.parameter(x), h1, w);
    return sum(mul(h2, h2));
  });
}

TEST_F(PrimitiveGradient, BatchedAttention) {
  // 3 positions for a batch of 2, stored time-major.
  auto& keys = add_random(ps, "keys", 6, 4, rng);
  auto& query = add_random(ps, "query", 2, 3, rng);
  auto& wk = add_random(ps, "wk", 4, 5, rng);
  auto& wq = add_random(ps, "wq", 3, 5, rng);
  auto& b = add_random(ps, "b", 1, 5, rng);
  auto& v = add_random(ps, "v", 5, 1, rng);
  auto mask = std::make_shared<const M>(mat({{1, 1, 1}, {1, 1, 0}}));
  expect_matches([&](Tape<double>& t) {
    AttentionWeights<double> w{t.parameter(wk), t.parameter(wq), t.parameter(b), t.parameter(v)};
    auto k = t.parameter(keys);
    auto r = attend(k, matmul(k, w.w_key), t.parameter(query), w, mask);
    return sum(mul(r.context, r.context)) + sum(mul(r.weights, r.weights));
  });
}

// ---------------------------------------------------------------------------
// clip_grad_norm

namespace {

void set_grads(ParameterSet<double>& ps, const std::vector<double>& g) {
  std::size_t k = 0;
  for (auto& p : ps) {
    for (Eigen::Index i = 0; i < p->grad().size(); ++i) p->grad().data()[i] = g[k++];
  }
}

}  // namespace

TEST(ClipGradNorm, ScalesDownLargeNorm) {
  ParameterSet<double> ps;
  ps.add("a", 1, 2);
  ps.add("b", 1, 2);
  set_grads(ps, {1.0, 1.0, 1.0, 1.0});  // norm 2
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 0.5);
  EXPECT_NEAR(grad_norm(ps), 1.0, 1e-15);
}

TEST(ClipGradNorm, LeavesSmallNorm) {
  ParameterSet<double> ps;
  ps.add("a", 1, 1);
  set_grads(ps, {0.5});
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(ps.at("a").grad()(0, 0), 0.5);
}

TEST(ClipGradNorm, ZeroGradients) {
  ParameterSet<double> ps;
  ps.add("a", 2, 2);
  ps.zero_grad();
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 1.0);
}

TEST(ClipGradNorm, BoundedAndIdempotentOnRandomGradients) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    ParameterSet<double> ps;
    ps.add("a", 3, 4);
    ps.add("b", 1, 5);
    std::vector<double> g(17);
    for (auto& x : g) x = d(rng);
    set_grads(ps, g);
    clip_grad_norm(ps, 1.0);
    EXPECT_LE(grad_norm(ps), 1.0 + 1e-9);
    const M a = ps.at("a").grad(), b = ps.at("b").grad();
    clip_grad_norm(ps, 1.0);
    EXPECT_LT((ps.at("a").grad() - a).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((ps.at("b").grad() - b).cwiseAbs().maxCoeff(), 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientIsIdentity) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", 2, 2);
  p.value() << 1, 2, 3, 4;
  const M before = p.value();
  ps.zero_grad();
  Adam<double> adam;
  for (int i = 0; i < 10; ++i) adam.step(ps);
  EXPECT_EQ(p.value(), before);
  EXPECT_EQ(adam.steps(), 10u);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  ParameterSet<double> ps;
  auto& p = ps.add("p", 1, 1);
  Adam<double> adam(AdamConfig{0.01});
  double prev = 0.0;
  for (int i = 0; i < 2000; ++i) {
    p.grad()(0, 0) = 0.7;
    prev = p.value()(0, 0);
    adam.step(ps);
  }
  EXPECT_NEAR(prev - p.value()(0, 0), 0.01, 1e-8);
}

TEST(Adam, MatchesHandUnrolledRecurrence) {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double g[3] = {0.5, -1.5, 2.0};
  double x = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    m = b1 * m + (1 - b1) * g[t - 1];
    v = b2 * v + (1 - b2) * g[t - 1] * g[t - 1];
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  ParameterSet<double> ps;
  auto& p = ps.add("p", 1, 1);
  p.value()(0, 0) = 1.0;
  Adam<double> adam(AdamConfig{lr, b1, b2, eps});
  for (double gi : g) {
    p.grad()(0, 0) = gi;
    adam.step(ps);
  }
  EXPECT_NEAR(p.value()(0, 0), x, 1e-12);
}

TEST(Adam, StateShapeMismatch) {
  ParameterSet<double> ps;
  ps.add("p", 2, 2);
  ps.zero_grad();
  Adam<double> adam;
  adam.step(ps);
  adam.moments().at("p").first = M::Zero(3, 3);
  EXPECT_THROW(adam.step(ps), StateError);
}

// ---------------------------------------------------------------------------
// Seeds

TEST(Seed, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(1, "a"), derive_seed(1, "a"));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, "a"), derive_seed(2, "a"));
}
