#include <gtest/gtest.h>

#include <cmath>

#include "htr/layers.hpp"

using namespace htr;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <typename T>
void expect_tensors_near(const Tensor<T>& a, const Tensor<T>& b, double tol) {
  ASSERT_EQ(a.shape, b.shape);
  for (idx i = 0; i < a.numel(); i++)
    EXPECT_NEAR(static_cast<double>(a[i]), static_cast<double>(b[i]), tol) << "at " << i;
}

// Weight builder with a fixed seed so closures rebuild identical constants.
template <typename T>
Tensor<T> seeded(const Shape& s, uint64_t seed, double dev = 0.5) {
  Rng rng(seed);
  return randn<T>(s, rng, dev);
}

struct LstmTensors {
  Tensor<double> w_i, b_i, w_f, b_f, w_o, b_o, w_c, b_c;
  LstmTensors(idx in, idx h, uint64_t seed) {
    Rng rng(seed);
    auto mk = [&](idx r, idx c) { return randn<double>({r, c}, rng, 0.4); };
    w_i = mk(h + in, h); b_i = randn<double>({h}, rng, 0.2);
    w_f = mk(h + in, h); b_f = randn<double>({h}, rng, 0.2);
    w_o = mk(h + in, h); b_o = randn<double>({h}, rng, 0.2);
    w_c = mk(h + in, h); b_c = randn<double>({h}, rng, 0.2);
  }
  LstmParams bind(Tape<double>& t, bool as_leaf = false) const {
    auto put = [&](const Tensor<double>& v) { return as_leaf ? t.leaf(v) : t.constant(v); };
    return {put(w_i), put(b_i), put(w_f), put(b_f), put(w_o), put(b_o), put(w_c), put(b_c)};
  }
};

struct AttnTensors {
  idx heads, D;
  Tensor<double> wq, bq, wk, bk, wv, bv, wo, bo, pq_w, pq_b, pk_w, pk_b, pv_w, pv_b,
      fuse_w, fuse_b, ln_gain, ln_bias;
  AttnTensors(idx heads_, idx D_, uint64_t seed) : heads(heads_), D(D_) {
    Rng rng(seed);
    auto mk = [&](idx r, idx c) { return randn<double>({r, c}, rng, 0.4); };
    auto vec = [&](idx n) { return randn<double>({n}, rng, 0.2); };
    wq = mk(D, D); bq = vec(D); wk = mk(D, D); bk = vec(D); wv = mk(D, D); bv = vec(D);
    wo = mk(D, D); bo = vec(D);
    pq_w = mk(D, D); pq_b = vec(D); pk_w = mk(D, D); pk_b = vec(D); pv_w = mk(D, D); pv_b = vec(D);
    fuse_w = mk(2 * D, D); fuse_b = vec(D);
    ln_gain = Tensor<double>({D}, 1.0);
    ln_bias = Tensor<double>({D}, 0.0);
  }
  AttentionParams bind(Tape<double>& t) const {
    AttentionParams p;
    p.heads = heads;
    p.wq = t.constant(wq); p.bq = t.constant(bq); p.wk = t.constant(wk); p.bk = t.constant(bk);
    p.wv = t.constant(wv); p.bv = t.constant(bv); p.wo = t.constant(wo); p.bo = t.constant(bo);
    p.pq_w = t.constant(pq_w); p.pq_b = t.constant(pq_b);
    p.pk_w = t.constant(pk_w); p.pk_b = t.constant(pk_b);
    p.pv_w = t.constant(pv_w); p.pv_b = t.constant(pv_b);
    p.fuse_w = t.constant(fuse_w); p.fuse_b = t.constant(fuse_b);
    p.ln_gain = t.constant(ln_gain); p.ln_bias = t.constant(ln_bias);
    return p;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// FullGatedConv2d
// ---------------------------------------------------------------------------

TEST(FullGatedConv, SaturatedNegativeGateKillsOutput) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({1, 1, 4, 6}, 1));
  Var cw = t.constant(seeded<double>({2, 1, 3, 3}, 2));
  Var cb = t.constant(Tensor<double>({2}, 0.0));
  Var gw = t.constant(Tensor<double>({2, 1, 3, 3}, 0.0));
  Var gb = t.constant(Tensor<double>({2}, -25.0));
  auto y = t.value(full_gated_conv(t, x, cw, cb, gw, gb));
  for (idx i = 0; i < y.numel(); i++) EXPECT_LT(std::abs(y[i]), 1e-6);
}

TEST(FullGatedConv, ZeroGateLogitsHalveValueBranch) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({1, 2, 3, 5}, 3));
  Var cw = t.constant(seeded<double>({2, 2, 3, 3}, 4));
  Var cb = t.constant(seeded<double>({2}, 5, 0.2));
  Var gw = t.constant(Tensor<double>({2, 2, 3, 3}, 0.0));
  Var gb = t.constant(Tensor<double>({2}, 0.0));
  auto gated = t.value(full_gated_conv(t, x, cw, cb, gw, gb));
  auto plain = t.value(t.conv2d(x, cw, cb, 1, 1));
  ASSERT_EQ(gated.shape, plain.shape);
  for (idx i = 0; i < gated.numel(); i++) EXPECT_NEAR(gated[i], 0.5 * plain[i], 1e-12);
}

TEST(FullGatedConv, IdentityValueZeroGateGivesHalfInput) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({1, 1, 3, 4}, 6));
  Var cw = t.constant(Tensor<double>({1, 1, 1, 1}, {1.0}));
  Var cb = t.constant(Tensor<double>({1}, 0.0));
  Var gw = t.constant(Tensor<double>({1, 1, 1, 1}, 0.0));
  Var gb = t.constant(Tensor<double>({1}, 0.0));
  auto y = t.value(full_gated_conv(t, x, cw, cb, gw, gb));
  const auto& vx = t.value(x);
  for (idx i = 0; i < y.numel(); i++) EXPECT_NEAR(y[i], 0.5 * vx[i], 1e-12);
}

TEST(FullGatedConv, BranchShapeMismatchThrows) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 1, 3, 3}));
  Var cw = t.constant(Tensor<double>({1, 1, 3, 3}));
  Var gw = t.constant(Tensor<double>({2, 1, 3, 3}));
  Var b1 = t.constant(Tensor<double>({1}));
  Var b2 = t.constant(Tensor<double>({2}));
  EXPECT_THROW(full_gated_conv(t, x, cw, b1, gw, b2), std::runtime_error);
}

TEST(FullGatedConv, MagnitudeBoundedByValueBranch) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({1, 2, 4, 4}, 7));
  Var cw = t.constant(seeded<double>({3, 2, 3, 3}, 8));
  Var cb = t.constant(seeded<double>({3}, 9, 0.3));
  Var gw = t.constant(seeded<double>({3, 2, 3, 3}, 10));
  Var gb = t.constant(seeded<double>({3}, 11, 0.3));
  auto gated = t.value(full_gated_conv(t, x, cw, cb, gw, gb));
  auto plain = t.value(t.conv2d(x, cw, cb, 1, 1));
  for (idx i = 0; i < gated.numel(); i++) EXPECT_LE(std::abs(gated[i]), std::abs(plain[i]) + 1e-15);
}

// ---------------------------------------------------------------------------
// Squeeze and excitation
// ---------------------------------------------------------------------------

TEST(SeBlock, ZeroExcitationWeightsScaleByHalf) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({2, 3, 2, 2}, 12));
  Var w1 = t.constant(Tensor<double>({3, 1}, 0.0));
  Var b1 = t.constant(Tensor<double>({1}, 0.0));
  Var w2 = t.constant(Tensor<double>({1, 3}, 0.0));
  Var b2 = t.constant(Tensor<double>({3}, 0.0));
  auto y = t.value(se_block(t, x, w1, b1, w2, b2));
  const auto& vx = t.value(x);
  for (idx i = 0; i < y.numel(); i++) EXPECT_NEAR(y[i], 0.5 * vx[i], 1e-12);
}

TEST(SeBlock, ZeroInputStaysZero) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 4, 3, 3}, 0.0));
  Var w1 = t.constant(seeded<double>({4, 2}, 13));
  Var b1 = t.constant(seeded<double>({2}, 14, 0.3));
  Var w2 = t.constant(seeded<double>({2, 4}, 15));
  Var b2 = t.constant(seeded<double>({4}, 16, 0.3));
  auto y = t.value(se_block(t, x, w1, b1, w2, b2));
  for (idx i = 0; i < y.numel(); i++) EXPECT_EQ(y[i], 0.0);
}

TEST(SeBlock, HandEvaluatedTwoChannelToy) {
  // x: channel means 2 and -4; bottleneck of width one.
  Tape<double> t;
  Tensor<double> x({1, 2, 1, 1}, {2.0, -4.0});
  Var vx = t.constant(x);
  Var w1 = t.constant(Tensor<double>({2, 1}, {0.5, 0.25}));
  Var b1 = t.constant(Tensor<double>({1}, {0.5}));
  Var w2 = t.constant(Tensor<double>({1, 2}, {1.0, -2.0}));
  Var b2 = t.constant(Tensor<double>({2}, {0.1, 0.2}));
  auto y = t.value(se_block(t, vx, w1, b1, w2, b2));
  double z = std::max(0.0, 2.0 * 0.5 + (-4.0) * 0.25 + 0.5);  // 0.5
  double s0 = sigmoid_ref(z * 1.0 + 0.1), s1 = sigmoid_ref(z * -2.0 + 0.2);
  EXPECT_NEAR(y[0], 2.0 * s0, 1e-6);
  EXPECT_NEAR(y[1], -4.0 * s1, 1e-6);
}

TEST(SeBlock, ScalesInUnitIntervalAndSignPreserved) {
  Tape<double> t;
  Var x = t.constant(seeded<double>({2, 3, 3, 4}, 17));
  Var w1 = t.constant(seeded<double>({3, 1}, 18));
  Var b1 = t.constant(seeded<double>({1}, 19, 0.3));
  Var w2 = t.constant(seeded<double>({1, 3}, 20));
  Var b2 = t.constant(seeded<double>({3}, 21, 0.3));
  auto y = t.value(se_block(t, x, w1, b1, w2, b2));
  const auto& vx = t.value(x);
  for (idx i = 0; i < y.numel(); i++) {
    EXPECT_LT(std::abs(y[i]), std::abs(vx[i]) + 1e-15);           // scale < 1
    if (vx[i] != 0.0) EXPECT_GT(y[i] * vx[i], 0.0);               // scale > 0
  }
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

TEST(MaxPool, SpecExamples) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
  auto y21 = t.value(t.max_pool2d(x, 2, 1));
  ASSERT_EQ(y21.shape, (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y21[0], 3);
  EXPECT_EQ(y21[1], 4);
  auto y22 = t.value(t.max_pool2d(x, 2, 2));
  ASSERT_EQ(y22.shape, (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y22[0], 4);
}

TEST(MaxPool, ConstantImageKeepsConstant) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 2, 4, 6}, 0.37));
  auto y = t.value(t.max_pool2d(x, 2, 2));
  ASSERT_EQ(y.shape, (Shape{1, 2, 2, 3}));
  for (idx i = 0; i < y.numel(); i++) EXPECT_EQ(y[i], 0.37);
}

TEST(MaxPool, OddHeightPadsWithNegInfRows) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({1, 1, 3, 2}, {1, 2, 3, 4, -5, -6}));
  auto y = t.value(t.max_pool2d(x, 2, 1));
  ASSERT_EQ(y.shape, (Shape{1, 1, 2, 2}));
  EXPECT_EQ(y.at4(0, 0, 0, 0), 3);
  EXPECT_EQ(y.at4(0, 0, 0, 1), 4);
  EXPECT_EQ(y.at4(0, 0, 1, 0), -5);  // lone row survives the pad
  EXPECT_EQ(y.at4(0, 0, 1, 1), -6);
}

// ---------------------------------------------------------------------------
// CNN block
// ---------------------------------------------------------------------------

namespace {

template <typename T>
struct CnnFixture {
  Tensor<T> conv_w, conv_b, gate_w, gate_b, bn_scale, bn_shift, rm, rv, se_w1, se_b1, se_w2, se_b2;
  CnnFixture(idx in_c, idx out_c, uint64_t seed) {
    Rng rng(seed);
    conv_w = randn<T>({out_c, in_c, 3, 3}, rng, 0.4);
    conv_b = randn<T>({out_c}, rng, 0.1);
    gate_w = randn<T>({out_c, in_c, 3, 3}, rng, 0.4);
    gate_b = randn<T>({out_c}, rng, 0.1);
    bn_scale = Tensor<T>({out_c}, T(1));
    bn_shift = Tensor<T>({out_c}, T(0));
    rm = Tensor<T>({out_c}, T(0));
    rv = Tensor<T>({out_c}, T(1));
    idx mid = std::max<idx>(1, out_c / 4);
    se_w1 = randn<T>({out_c, mid}, rng, 0.4);
    se_b1 = randn<T>({mid}, rng, 0.1);
    se_w2 = randn<T>({mid, out_c}, rng, 0.4);
    se_b2 = randn<T>({out_c}, rng, 0.1);
  }
  CnnBlockParams<T> bind(Tape<T>& t, idx ph, idx pw) {
    CnnBlockParams<T> p;
    p.conv_w = t.constant(conv_w); p.conv_b = t.constant(conv_b);
    p.gate_w = t.constant(gate_w); p.gate_b = t.constant(gate_b);
    p.bn_scale = t.constant(bn_scale); p.bn_shift = t.constant(bn_shift);
    p.bn_running_mean = &rm; p.bn_running_var = &rv;
    p.se_w1 = t.constant(se_w1); p.se_b1 = t.constant(se_b1);
    p.se_w2 = t.constant(se_w2); p.se_b2 = t.constant(se_b2);
    p.pool_h = ph; p.pool_w = pw;
    return p;
  }
};

}  // namespace

TEST(CnnBlock, EvalModeUnitStatsReducesToPoolThenSe) {
  // Identity 1x1 value conv, saturated gate, identity batch norm: the block
  // must equal max-pool followed by SE on the raw input.
  Tape<double> t;
  Tensor<double> xin = seeded<double>({1, 1, 4, 6}, 30);
  for (idx i = 0; i < xin.numel(); i++) xin[i] = std::abs(xin[i]);  // nonneg
  Var x = t.constant(xin);
  CnnFixture<double> fx(1, 1, 31);
  fx.conv_w = Tensor<double>({1, 1, 1, 1}, {1.0});
  fx.conv_b = Tensor<double>({1}, 0.0);
  fx.gate_w = Tensor<double>({1, 1, 1, 1}, 0.0);
  fx.gate_b = Tensor<double>({1}, 25.0);
  fx.bn_scale = Tensor<double>({1}, std::sqrt(1.0 + 1e-5));  // cancels the eps
  CnnBlockParams<double> p = fx.bind(t, 2, 1);
  auto got = t.value(cnn_block(t, x, p, false));

  Var pooled = t.max_pool2d(x, 2, 1);
  auto want = t.value(se_block(t, pooled, t.constant(fx.se_w1), t.constant(fx.se_b1),
                               t.constant(fx.se_w2), t.constant(fx.se_b2)));
  expect_tensors_near(got, want, 1e-8);
}

TEST(CnnBlock, AllZeroInputAllZeroOutput) {
  Tape<double> t;
  Var x = t.constant(Tensor<double>({2, 2, 4, 4}, 0.0));
  CnnFixture<double> fx(2, 3, 32);
  fx.conv_b = Tensor<double>({3}, 0.0);
  fx.gate_b = Tensor<double>({3}, 0.0);
  CnnBlockParams<double> p = fx.bind(t, 2, 2);
  auto y = t.value(cnn_block(t, x, p, true));
  for (idx i = 0; i < y.numel(); i++) EXPECT_NEAR(y[i], 0.0, 1e-12);
}

TEST(CnnBlock, TwoByOnePoolingPreservesWidth) {
  for (idx w : {5, 8, 13, 32}) {
    Tape<double> t;
    Var x = t.constant(seeded<double>({1, 2, 6, w}, 33));
    CnnFixture<double> fx(2, 3, 34);
    CnnBlockParams<double> p = fx.bind(t, 2, 1);
    auto y = t.value(cnn_block(t, x, p, true));
    EXPECT_EQ(y.shape[3], w);
    EXPECT_EQ(y.shape[2], 3);
  }
}

TEST(CnnBlock, BnRunningStatsUpdateOnlyInTraining) {
  Tensor<double> xin = seeded<double>({2, 2, 4, 4}, 35);
  CnnFixture<double> fx(2, 2, 36);
  Tensor<double> rm0 = fx.rm, rv0 = fx.rv;
  {
    Tape<double> t;
    CnnBlockParams<double> p = fx.bind(t, 2, 1);
    cnn_block(t, t.constant(xin), p, false);
    EXPECT_EQ(fx.rm.data, rm0.data);
    EXPECT_EQ(fx.rv.data, rv0.data);
  }
  {
    Tape<double> t;
    CnnBlockParams<double> p = fx.bind(t, 2, 1);
    cnn_block(t, t.constant(xin), p, true);
    EXPECT_NE(fx.rm.data, rm0.data);
    EXPECT_NE(fx.rv.data, rv0.data);
  }
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

TEST(LstmCell, ZeroWeightsZeroState) {
  Tape<double> t;
  LstmTensors lt(3, 2, 40);
  lt.w_i.fill(0); lt.b_i.fill(0); lt.w_f.fill(0); lt.b_f.fill(0);
  lt.w_o.fill(0); lt.b_o.fill(0); lt.w_c.fill(0); lt.b_c.fill(0);
  LstmParams p = lt.bind(t);
  Var x = t.constant(seeded<double>({1, 3}, 41));
  Var h0 = t.constant(Tensor<double>({1, 2}, 0.0));
  Var c0 = t.constant(Tensor<double>({1, 2}, 0.0));
  auto [h, c] = lstm_cell(t, x, h0, c0, p);
  for (idx i = 0; i < 2; i++) {
    EXPECT_EQ(t.value(h)[i], 0.0);
    EXPECT_EQ(t.value(c)[i], 0.0);
  }
}

TEST(LstmCell, ZeroWeightsNonzeroCellState) {
  Tape<double> t;
  LstmTensors lt(3, 2, 42);
  lt.w_i.fill(0); lt.b_i.fill(0); lt.w_f.fill(0); lt.b_f.fill(0);
  lt.w_o.fill(0); lt.b_o.fill(0); lt.w_c.fill(0); lt.b_c.fill(0);
  LstmParams p = lt.bind(t);
  Var x = t.constant(seeded<double>({1, 3}, 43));
  Var h0 = t.constant(Tensor<double>({1, 2}, 0.0));
  Tensor<double> cprev({1, 2}, {0.8, -1.4});
  Var c0 = t.constant(cprev);
  auto [h, c] = lstm_cell(t, x, h0, c0, p);
  for (idx i = 0; i < 2; i++) {
    EXPECT_NEAR(t.value(c)[i], 0.5 * cprev[i], 1e-12);
    EXPECT_NEAR(t.value(h)[i], 0.5 * std::tanh(0.5 * cprev[i]), 1e-12);
  }
}

TEST(LstmCell, MatchesHandEvaluation) {
  idx in = 3, H = 2;
  LstmTensors lt(in, H, 44);
  Tensor<double> x = seeded<double>({1, in}, 45);
  Tensor<double> h0 = seeded<double>({1, H}, 46, 0.3);
  Tensor<double> c0 = seeded<double>({1, H}, 47, 0.3);

  // independent re-evaluation of the six gate equations
  auto gate = [&](const Tensor<double>& w, const Tensor<double>& b, bool use_tanh) {
    std::vector<double> out(static_cast<size_t>(H));
    for (idx j = 0; j < H; j++) {
      double acc = b[j];
      for (idx k = 0; k < H; k++) acc += h0[k] * w.at2(k, j);
      for (idx k = 0; k < in; k++) acc += x[k] * w.at2(H + k, j);
      out[static_cast<size_t>(j)] = use_tanh ? std::tanh(acc) : sigmoid_ref(acc);
    }
    return out;
  };
  auto gi = gate(lt.w_i, lt.b_i, false), gf = gate(lt.w_f, lt.b_f, false),
       go = gate(lt.w_o, lt.b_o, false), gc = gate(lt.w_c, lt.b_c, true);

  Tape<double> t;
  LstmParams p = lt.bind(t);
  auto [h, c] = lstm_cell(t, t.constant(x), t.constant(h0), t.constant(c0), p);
  for (idx j = 0; j < H; j++) {
    double cj = gf[static_cast<size_t>(j)] * c0[j] + gi[static_cast<size_t>(j)] * gc[static_cast<size_t>(j)];
    EXPECT_NEAR(t.value(c)[j], cj, 1e-6);
    EXPECT_NEAR(t.value(h)[j], go[static_cast<size_t>(j)] * std::tanh(cj), 1e-6);
  }
}

TEST(Bilstm, SingleFrameSeesSameInputBothDirections) {
  Tape<double> t;
  LstmTensors lt(3, 2, 48);
  LstmParams fwd = lt.bind(t), bwd = lt.bind(t);
  Var x = t.constant(seeded<double>({1, 2, 3}, 49));
  auto y = t.value(bilstm(t, x, fwd, bwd));
  ASSERT_EQ(y.shape, (Shape{1, 2, 4}));
  for (idx b = 0; b < 2; b++)
    for (idx j = 0; j < 2; j++) EXPECT_NEAR(y.at3(0, b, j), y.at3(0, b, 2 + j), 1e-12);
}

TEST(Bilstm, ZeroWeightsZeroOutputOfDoubleWidth) {
  Tape<double> t;
  LstmTensors lt(3, 2, 50);
  lt.w_i.fill(0); lt.b_i.fill(0); lt.w_f.fill(0); lt.b_f.fill(0);
  lt.w_o.fill(0); lt.b_o.fill(0); lt.w_c.fill(0); lt.b_c.fill(0);
  LstmParams fwd = lt.bind(t), bwd = lt.bind(t);
  Var x = t.constant(seeded<double>({4, 2, 3}, 51));
  auto y = t.value(bilstm(t, x, fwd, bwd));
  ASSERT_EQ(y.shape, (Shape{4, 2, 4}));
  for (idx i = 0; i < y.numel(); i++) EXPECT_EQ(y[i], 0.0);
}

TEST(Bilstm, TimeReversalSwapsHalves) {
  LstmTensors la(3, 2, 52), lb(3, 2, 53);
  Tensor<double> x = seeded<double>({5, 2, 3}, 54);

  Tape<double> t1;
  auto y1 = t1.value(bilstm(t1, t1.constant(x), la.bind(t1), lb.bind(t1)));
  Tape<double> t2;
  Var xr = t2.reverse_dim0(t2.constant(x));
  auto y2 = t2.value(bilstm(t2, xr, lb.bind(t2), la.bind(t2)));

  // y2 reversed in time, with halves swapped, equals y1.
  for (idx s = 0; s < 5; s++)
    for (idx b = 0; b < 2; b++)
      for (idx j = 0; j < 2; j++) {
        EXPECT_NEAR(y1.at3(s, b, j), y2.at3(4 - s, b, 2 + j), 1e-12);
        EXPECT_NEAR(y1.at3(s, b, 2 + j), y2.at3(4 - s, b, j), 1e-12);
      }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

TEST(MultiHeadAttention, SinglePositionWeightsAreOne) {
  Tape<double> t;
  AttnTensors at(2, 4, 60);
  AttentionParams p = at.bind(t);
  Var x = t.constant(seeded<double>({1, 3, 4}, 61));
  auto r = multi_head_attention(t, x, p);
  const auto& w = t.value(r.weights);
  ASSERT_EQ(w.shape, (Shape{3, 2, 1, 1}));
  for (idx i = 0; i < w.numel(); i++) EXPECT_NEAR(w[i], 1.0, 1e-12);
}

TEST(MultiHeadAttention, IdenticalRowsGiveUniformWeights) {
  Tape<double> t;
  AttnTensors at(2, 4, 62);
  AttentionParams p = at.bind(t);
  Tensor<double> x({5, 1, 4});
  Rng rng(63);
  for (idx j = 0; j < 4; j++) {
    double v = rng.normal();
    for (idx s = 0; s < 5; s++) x.at3(s, 0, j) = v;
  }
  auto r = multi_head_attention(t, t.constant(x), p);
  const auto& w = t.value(r.weights);
  for (idx i = 0; i < w.numel(); i++) EXPECT_NEAR(w[i], 0.2, 1e-9);
}

TEST(MultiHeadAttention, TwoPositionIdentityProjectionsByHand) {
  idx D = 2;
  Tape<double> t;
  AttentionParams p;
  p.heads = 1;
  Tensor<double> eye({D, D}, {1.0, 0.0, 0.0, 1.0});
  Tensor<double> zero({D}, 0.0);
  p.wq = t.constant(eye); p.bq = t.constant(zero);
  p.wk = t.constant(eye); p.bk = t.constant(zero);
  p.wv = t.constant(eye); p.bv = t.constant(zero);
  p.wo = t.constant(eye); p.bo = t.constant(zero);
  Tensor<double> x({2, 1, 2}, {1.0, 0.5, -0.5, 2.0});
  auto r = multi_head_attention(t, t.constant(x), p);
  const auto& w = t.value(r.weights);
  double scale = 1.0 / std::sqrt(2.0);
  auto dot = [&](idx a, idx b) {
    return (x.at3(a, 0, 0) * x.at3(b, 0, 0) + x.at3(a, 0, 1) * x.at3(b, 0, 1)) * scale;
  };
  for (idx i = 0; i < 2; i++) {
    double e0 = std::exp(dot(i, 0)), e1 = std::exp(dot(i, 1));
    EXPECT_NEAR(w.at4(0, 0, i, 0), e0 / (e0 + e1), 1e-9);
    EXPECT_NEAR(w.at4(0, 0, i, 1), e1 / (e0 + e1), 1e-9);
  }
  const auto& out = t.value(r.out);
  for (idx i = 0; i < 2; i++)
    for (idx j = 0; j < 2; j++) {
      double want = w.at4(0, 0, i, 0) * x.at3(0, 0, j) + w.at4(0, 0, i, 1) * x.at3(1, 0, j);
      EXPECT_NEAR(out.at3(i, 0, j), want, 1e-9);
    }
}

TEST(MultiHeadAttention, IndivisibleHeadsIsConfigError) {
  Tape<double> t;
  AttnTensors at(3, 4, 64);
  AttentionParams p = at.bind(t);
  p.heads = 3;
  Var x = t.constant(seeded<double>({2, 1, 4}, 65));
  EXPECT_THROW(multi_head_attention(t, x, p), std::runtime_error);
}

TEST(ProximaAttention, ZeroQueryProjectionGivesUniformWeightsAndMeanOfV) {
  Tape<double> t;
  AttnTensors at(1, 4, 66);
  at.pq_w.fill(0);
  at.pq_b.fill(0);
  AttentionParams p = at.bind(t);
  Var x = t.constant(seeded<double>({4, 2, 4}, 67));
  Var o_mha = t.constant(seeded<double>({4, 2, 4}, 68));
  auto r = proxima_attention(t, x, o_mha, p);
  const auto& w = t.value(r.weights);
  for (idx i = 0; i < w.numel(); i++) EXPECT_NEAR(w[i], 0.25, 1e-12);
  auto v = t.value(t.linear(x, t.constant(at.pv_w), t.constant(at.pv_b)));
  const auto& out = t.value(r.out);
  for (idx b = 0; b < 2; b++)
    for (idx j = 0; j < 4; j++) {
      double mean = 0;
      for (idx s = 0; s < 4; s++) mean += v.at3(s, b, j);
      mean /= 4;
      for (idx s = 0; s < 4; s++) EXPECT_NEAR(out.at3(s, b, j), mean, 1e-9);
    }
}

TEST(ProximaAttention, SinglePositionReturnsV) {
  Tape<double> t;
  AttnTensors at(1, 3, 69);
  AttentionParams p = at.bind(t);
  Var x = t.constant(seeded<double>({1, 2, 3}, 70));
  Var o_mha = t.constant(seeded<double>({1, 2, 3}, 71));
  auto r = proxima_attention(t, x, o_mha, p);
  auto v = t.value(t.linear(x, t.constant(at.pv_w), t.constant(at.pv_b)));
  expect_tensors_near(t.value(r.out), v, 1e-12);
}

TEST(ProximaAttention, SeededCaseMatchesIndependentEvaluation) {
  idx Tn = 3, D = 2;
  AttnTensors at(1, D, 72);
  Tensor<double> x = seeded<double>({Tn, 1, D}, 73);
  Tensor<double> o = seeded<double>({Tn, 1, D}, 74);
  Tape<double> t;
  AttentionParams p = at.bind(t);
  auto r = proxima_attention(t, t.constant(x), t.constant(o), p);

  // independent dense re-computation of softmax(QK^T/sqrt(D)) V
  auto proj = [&](const Tensor<double>& src, const Tensor<double>& w, const Tensor<double>& b,
                  idx row) {
    std::vector<double> out(static_cast<size_t>(D));
    for (idx j = 0; j < D; j++) {
      double acc = b[j];
      for (idx k = 0; k < D; k++) acc += src.at3(row, 0, k) * w.at2(k, j);
      out[static_cast<size_t>(j)] = acc;
    }
    return out;
  };
  for (idx i = 0; i < Tn; i++) {
    auto qi = proj(o, at.pq_w, at.pq_b, i);
    std::vector<double> scores(static_cast<size_t>(Tn));
    for (idx s = 0; s < Tn; s++) {
      auto ks = proj(x, at.pk_w, at.pk_b, s);
      double acc = 0;
      for (idx j = 0; j < D; j++) acc += qi[static_cast<size_t>(j)] * ks[static_cast<size_t>(j)];
      scores[static_cast<size_t>(s)] = acc / std::sqrt(static_cast<double>(D));
    }
    double m = *std::max_element(scores.begin(), scores.end()), z = 0;
    for (double& sc : scores) {
      sc = std::exp(sc - m);
      z += sc;
    }
    for (idx j = 0; j < D; j++) {
      double want = 0;
      for (idx s = 0; s < Tn; s++) {
        auto vs = proj(x, at.pv_w, at.pv_b, s);
        want += scores[static_cast<size_t>(s)] / z * vs[static_cast<size_t>(j)];
      }
      EXPECT_NEAR(t.value(r.out).at3(i, 0, j), want, 1e-9);
    }
  }
}

TEST(CombinedAttention, ZeroFusionReducesToLayerNormOfInput) {
  Tape<double> t;
  AttnTensors at(2, 4, 75);
  at.fuse_w.fill(0);
  at.fuse_b.fill(0);
  AttentionParams p = at.bind(t);
  Tensor<double> x = seeded<double>({3, 2, 4}, 76);
  auto r = combined_attention(t, t.constant(x), p);
  auto want = t.value(t.layer_norm_lastdim(t.constant(x), t.constant(at.ln_gain),
                                           t.constant(at.ln_bias), p.ln_eps));
  expect_tensors_near(t.value(r.out), want, 1e-12);
}

TEST(CombinedAttention, AllZeroPathOutputsLayerNormBias) {
  Tape<double> t;
  AttnTensors at(1, 4, 77);
  // zero every projection bias so attention outputs vanish with x = 0
  at.bq.fill(0); at.bk.fill(0); at.bv.fill(0); at.bo.fill(0);
  at.pq_b.fill(0); at.pk_b.fill(0); at.pv_b.fill(0);
  at.fuse_b.fill(0);
  Rng rng(78);
  for (idx i = 0; i < 4; i++) at.ln_bias[i] = rng.normal();
  AttentionParams p = at.bind(t);
  Var x = t.constant(Tensor<double>({3, 1, 4}, 0.0));
  auto r = combined_attention(t, x, p);
  const auto& out = t.value(r.out);
  for (idx s = 0; s < 3; s++)
    for (idx j = 0; j < 4; j++) EXPECT_NEAR(out.at3(s, 0, j), at.ln_bias[j], 1e-9);
}

TEST(CombinedAttention, MatchesHandComposedPipeline) {
  AttnTensors at(2, 4, 79);
  Tensor<double> x = seeded<double>({4, 2, 4}, 80);
  Tape<double> t;
  AttentionParams p = at.bind(t);
  auto r = combined_attention(t, t.constant(x), p);

  Tape<double> t2;
  AttentionParams p2 = at.bind(t2);
  Var x2 = t2.constant(x);
  auto mha = multi_head_attention(t2, x2, p2);
  auto prox = proxima_attention(t2, x2, mha.out, p2);
  Var fused = t2.linear(t2.concat_lastdim(mha.out, prox.out), p2.fuse_w, p2.fuse_b);
  Var want = t2.layer_norm_lastdim(t2.add(fused, x2), p2.ln_gain, p2.ln_bias, p2.ln_eps);
  expect_tensors_near(t.value(r.out), t2.value(want), 1e-12);
}

TEST(AttentionWeights, RowStochasticInvariant) {
  for (uint64_t seed = 90; seed < 95; seed++) {
    Tape<double> t;
    AttnTensors at(2, 6, seed);
    AttentionParams p = at.bind(t);
    Var x = t.constant(seeded<double>({5, 2, 6}, seed + 100));
    auto r = combined_attention(t, x, p);
    for (Var wv : {r.mha_weights, r.proxima_weights}) {
      const auto& w = t.value(wv);
      idx S = w.shape[3], rows = w.numel() / S;
      for (idx row = 0; row < rows; row++) {
        double s = 0;
        for (idx j = 0; j < S; j++) s += w[row * S + j];
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checks through every layer
// ---------------------------------------------------------------------------

TEST(LayerGradients, AllLayersPassFiniteDifferenceChecks) {
  Tensor<double> coef_cache;

  auto weighted_sum = [](Tape<double>& t, Var y, uint64_t seed) {
    Rng rng(seed);
    Tensor<double> coef = randn<double>(t.value(y).shape, rng);
    return t.reduce_sum_all(t.mul(y, t.constant(coef)));
  };

  {  // gated conv w.r.t. input
    Tensor<double> x = seeded<double>({1, 2, 4, 4}, 200);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          Var cw = t.constant(seeded<double>({2, 2, 3, 3}, 201));
          Var cb = t.constant(seeded<double>({2}, 202, 0.2));
          Var gw = t.constant(seeded<double>({2, 2, 3, 3}, 203));
          Var gb = t.constant(seeded<double>({2}, 204, 0.2));
          return weighted_sum(t, full_gated_conv(t, v, cw, cb, gw, gb), 205);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // gated conv w.r.t. gate weights
    Tensor<double> gw = seeded<double>({2, 2, 3, 3}, 206);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          Var x = t.constant(seeded<double>({1, 2, 4, 4}, 207));
          Var cw = t.constant(seeded<double>({2, 2, 3, 3}, 208));
          Var cb = t.constant(seeded<double>({2}, 209, 0.2));
          Var gb = t.constant(seeded<double>({2}, 210, 0.2));
          return weighted_sum(t, full_gated_conv(t, x, cw, cb, v, gb), 211);
        },
        gw);
    EXPECT_LT(err, 1e-4);
  }
  {  // SE block
    Tensor<double> x = seeded<double>({2, 4, 3, 3}, 212);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          Var w1 = t.constant(seeded<double>({4, 2}, 213));
          Var b1 = t.constant(seeded<double>({2}, 214, 0.2));
          Var w2 = t.constant(seeded<double>({2, 4}, 215));
          Var b2 = t.constant(seeded<double>({4}, 216, 0.2));
          return weighted_sum(t, se_block(t, v, w1, b1, w2, b2), 217);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // batch norm (training statistics path)
    Tensor<double> x = seeded<double>({2, 3, 3, 3}, 218);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          Tensor<double> rm({3}, 0.0), rv({3}, 1.0);
          Var scale = t.constant(seeded<double>({3}, 219, 0.3));
          Var shift = t.constant(seeded<double>({3}, 220, 0.3));
          return weighted_sum(t, batch_norm(t, v, scale, shift, rm, rv, true), 221);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // full CNN block
    Tensor<double> x = seeded<double>({1, 2, 4, 6}, 222);
    CnnFixture<double> fx(2, 2, 223);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          CnnFixture<double> local = fx;  // fresh running stats per call
          CnnBlockParams<double> p = local.bind(t, 2, 1);
          return weighted_sum(t, cnn_block(t, v, p, true), 224);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // LSTM cell w.r.t. input
    LstmTensors lt(3, 2, 225);
    Tensor<double> x = seeded<double>({2, 3}, 226);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          LstmParams p = lt.bind(t);
          Var h0 = t.constant(seeded<double>({2, 2}, 227, 0.3));
          Var c0 = t.constant(seeded<double>({2, 2}, 228, 0.3));
          auto [h, c] = lstm_cell(t, v, h0, c0, p);
          return weighted_sum(t, t.concat_lastdim(h, c), 229);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // BiLSTM w.r.t. input through time
    LstmTensors la(2, 2, 230), lb(2, 2, 231);
    Tensor<double> x = seeded<double>({3, 1, 2}, 232);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          return weighted_sum(t, bilstm(t, v, la.bind(t), lb.bind(t)), 233);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // BiLSTM w.r.t. a recurrent weight
    LstmTensors la(2, 2, 234), lb(2, 2, 235);
    Tensor<double> x = seeded<double>({3, 1, 2}, 236);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          LstmParams pf = la.bind(t);
          pf.w_c = v;
          return weighted_sum(t, bilstm(t, t.constant(x), pf, lb.bind(t)), 237);
        },
        la.w_c);
    EXPECT_LT(err, 1e-4);
  }
  {  // multi-head attention
    AttnTensors at(2, 4, 238);
    Tensor<double> x = seeded<double>({3, 2, 4}, 239);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          return weighted_sum(t, multi_head_attention(t, v, at.bind(t)).out, 240);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // proxima attention
    AttnTensors at(1, 4, 241);
    Tensor<double> x = seeded<double>({3, 1, 4}, 242);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          AttentionParams p = at.bind(t);
          auto mha = multi_head_attention(t, v, p);
          return weighted_sum(t, proxima_attention(t, v, mha.out, p).out, 243);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
  {  // combined attention
    AttnTensors at(2, 4, 244);
    Tensor<double> x = seeded<double>({3, 1, 4}, 245);
    double err = grad_check(
        [&](Tape<double>& t, Var v) {
          return weighted_sum(t, combined_attention(t, v, at.bind(t)).out, 246);
        },
        x);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(Bilstm, FusedPathMatchesCellComposition) {
  LstmTensors la(3, 2, 400), lb(3, 2, 401);
  Tensor<double> x = seeded<double>({4, 2, 3}, 402);

  Tape<double> t1;
  auto fused = t1.value(bilstm(t1, t1.constant(x), la.bind(t1), lb.bind(t1)));

  // step-by-step composition through lstm_cell
  Tape<double> t2;
  auto run_dir = [&](const LstmTensors& lt, bool reverse) {
    LstmParams p = lt.bind(t2);
    Var h = t2.constant(Tensor<double>({2, 2}, 0.0));
    Var c = t2.constant(Tensor<double>({2, 2}, 0.0));
    std::vector<Tensor<double>> hs(4);
    for (idx step = 0; step < 4; step++) {
      idx tt = reverse ? 3 - step : step;
      Tensor<double> xt({2, 3});
      for (idx b = 0; b < 2; b++)
        for (idx j = 0; j < 3; j++) xt.at2(b, j) = x.at3(tt, b, j);
      auto [h2, c2] = lstm_cell(t2, t2.constant(xt), h, c, p);
      h = h2;
      c = c2;
      hs[static_cast<size_t>(tt)] = t2.value(h);
    }
    return hs;
  };
  auto fw = run_dir(la, false), bw = run_dir(lb, true);
  for (idx s = 0; s < 4; s++)
    for (idx b = 0; b < 2; b++)
      for (idx j = 0; j < 2; j++) {
        EXPECT_NEAR(fused.at3(s, b, j), fw[static_cast<size_t>(s)].at2(b, j), 1e-12);
        EXPECT_NEAR(fused.at3(s, b, 2 + j), bw[static_cast<size_t>(s)].at2(b, j), 1e-12);
      }
}

TEST(LstmGates, FusedOpPassesGradCheck) {
  Rng rng(403);
  Tensor<double> gates = randn<double>({2, 8}, rng);
  Tensor<double> cprev = randn<double>({2, 2}, rng);
  double err_g = grad_check(
      [&](Tape<double>& t, Var v) {
        Var hc = t.lstm_gates(v, t.constant(cprev));
        Rng r2(404);
        Tensor<double> coef = randn<double>({2, 2, 2}, r2);
        return t.reduce_sum_all(t.mul(hc, t.constant(coef)));
      },
      gates);
  EXPECT_LT(err_g, 1e-4);
  double err_c = grad_check(
      [&](Tape<double>& t, Var v) {
        Var hc = t.lstm_gates(t.constant(gates), v);
        Rng r2(405);
        Tensor<double> coef = randn<double>({2, 2, 2}, r2);
        return t.reduce_sum_all(t.mul(hc, t.constant(coef)));
      },
      cprev);
  EXPECT_LT(err_c, 1e-4);
}
