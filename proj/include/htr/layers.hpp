#pragma once

#include <vector>

#include "htr/autodiff.hpp"

namespace htr {

// ---------------------------------------------------------------------------
// Parameter handles. These are tape bindings: the persistent storage lives in
// a ParameterStore; a binder turns each named tensor into a Var per forward
// pass. Batch-norm running stats are the only mutable state and are owned
// outside the tape.
// ---------------------------------------------------------------------------

template <typename T>
struct CnnBlockParams {
  Var conv_w, conv_b;  // value branch
  Var gate_w, gate_b;  // gate branch
  Var bn_scale, bn_shift;
  Tensor<T>* bn_running_mean = nullptr;
  Tensor<T>* bn_running_var = nullptr;
  Var se_w1, se_b1, se_w2, se_b2;
  idx pool_h = 2, pool_w = 1;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
};

struct LstmParams {
  Var w_i, b_i, w_f, b_f, w_o, b_o, w_c, b_c;  // each weight [H+D, H]
};

struct AttentionParams {
  idx heads = 1;
  Var wq, bq, wk, bk, wv, bv, wo, bo;      // multi-head projections, D x D
  Var pq_w, pq_b, pk_w, pk_b, pv_w, pv_b;  // proxima projections, D x D
  Var fuse_w, fuse_b;                      // [2D, D]
  Var ln_gain, ln_bias;
  double ln_eps = 1e-5;
};

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

// (W1 * x) .* sigmoid(W2 * x) with same padding; both branches must agree.
template <typename T>
Var full_gated_conv(Tape<T>& tape, Var x, Var conv_w, Var conv_b, Var gate_w, Var gate_b) {
  const Tensor<T>&wv = tape.value(conv_w), &gv = tape.value(gate_w);
  require(wv.shape == gv.shape, "full_gated_conv: branch shape mismatch " + shape_str(wv.shape) +
                                    " vs " + shape_str(gv.shape));
  idx ph = (wv.shape[2] - 1) / 2, pw = (wv.shape[3] - 1) / 2;
  Var value = tape.conv2d(x, conv_w, conv_b, ph, pw);
  Var gate = tape.sigmoid(tape.conv2d(x, gate_w, gate_b, ph, pw));
  return tape.mul(value, gate);
}

// Channel recalibration: GAP -> bottleneck ReLU -> sigmoid scales in (0,1).
template <typename T>
Var se_block(Tape<T>& tape, Var x, Var w1, Var b1, Var w2, Var b2) {
  Var squeezed = tape.global_avg_pool(x);                       // [B,C]
  Var z = tape.relu(tape.linear(squeezed, w1, b1));             // [B,mid]
  Var s = tape.sigmoid(tape.linear(z, w2, b2));                 // [B,C]
  return tape.channel_scale(x, s);
}

template <typename T>
Var batch_norm(Tape<T>& tape, Var x, Var scale, Var shift, Tensor<T>& running_mean,
               Tensor<T>& running_var, bool training, double momentum = 0.9, double eps = 1e-5) {
  Var out = tape.batch_norm_fused(x, scale, shift, &running_mean, &running_var, training, eps);
  if (training) {
    // fold the batch statistics into the running estimates
    const Tensor<T>& vx = tape.value(x);
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    for (idx c = 0; c < C; c++) {
      double acc = 0;
      for (idx b = 0; b < B; b++) {
        const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
        for (idx s = 0; s < S; s++) acc += p[s];
      }
      double m = acc / static_cast<double>(B * S);
      double vacc = 0;
      for (idx b = 0; b < B; b++) {
        const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
        for (idx s = 0; s < S; s++) vacc += (p[s] - m) * (p[s] - m);
      }
      double v = vacc / static_cast<double>(B * S);
      running_mean[c] = static_cast<T>(momentum * running_mean[c] + (1.0 - momentum) * m);
      running_var[c] = static_cast<T>(momentum * running_var[c] + (1.0 - momentum) * v);
    }
  }
  return out;
}

// Gated conv -> BN -> ReLU -> MaxPool -> SE, in exactly that order.
template <typename T>
Var cnn_block(Tape<T>& tape, Var x, CnnBlockParams<T>& p, bool training) {
  Var g = full_gated_conv(tape, x, p.conv_w, p.conv_b, p.gate_w, p.gate_b);
  Var n = batch_norm(tape, g, p.bn_scale, p.bn_shift, *p.bn_running_mean, *p.bn_running_var,
                     training, p.bn_momentum, p.bn_eps);
  Var r = tape.relu(n);
  Var pooled = tape.max_pool2d(r, p.pool_h, p.pool_w);
  return se_block(tape, pooled, p.se_w1, p.se_b1, p.se_w2, p.se_b2);
}

// ---------------------------------------------------------------------------
// Recurrence
// ---------------------------------------------------------------------------

template <typename T>
std::pair<Var, Var> lstm_cell(Tape<T>& tape, Var x_t, Var h_prev, Var c_prev,
                              const LstmParams& p) {
  Var cat = tape.concat_lastdim(h_prev, x_t);
  Var i = tape.sigmoid(tape.linear(cat, p.w_i, p.b_i));
  Var f = tape.sigmoid(tape.linear(cat, p.w_f, p.b_f));
  Var o = tape.sigmoid(tape.linear(cat, p.w_o, p.b_o));
  Var c_tilde = tape.tanh(tape.linear(cat, p.w_c, p.b_c));
  Var c = tape.add(tape.mul(f, c_prev), tape.mul(i, c_tilde));
  Var h = tape.mul(o, tape.tanh(c));
  return {h, c};
}

// x [T,B,D] -> [T,B,H], zero initial state. The four gate projections are
// fused into one matrix ahead of the time loop and each step runs through
// the fused cell-update node; the arithmetic matches lstm_cell exactly.
template <typename T>
Var lstm_forward(Tape<T>& tape, Var x, const LstmParams& p) {
  const Tensor<T>& vx = tape.value(x);
  require(vx.rank() == 3 && vx.shape[0] >= 1, "lstm_forward: input must be [T,B,D] with T >= 1");
  idx Tn = vx.shape[0], B = vx.shape[1];
  idx H = tape.value(p.w_i).shape[1];
  Var w_all = tape.concat_lastdim(tape.concat_lastdim(p.w_i, p.w_f),
                                  tape.concat_lastdim(p.w_o, p.w_c));
  Var b_all = tape.concat_lastdim(tape.concat_lastdim(p.b_i, p.b_f),
                                  tape.concat_lastdim(p.b_o, p.b_c));
  Var h = tape.constant(Tensor<T>(Shape{B, H}));
  Var c = tape.constant(Tensor<T>(Shape{B, H}));
  std::vector<Var> steps;
  steps.reserve(static_cast<size_t>(Tn));
  for (idx t = 0; t < Tn; t++) {
    Var cat = tape.concat_lastdim(h, tape.pick_dim0(x, t));
    Var hc = tape.lstm_gates(tape.linear(cat, w_all, b_all), c);
    h = tape.pick_dim0(hc, 0);
    c = tape.pick_dim0(hc, 1);
    steps.push_back(h);
  }
  return tape.stack_dim0(steps);
}

// [forward; backward] concatenation along the feature axis.
template <typename T>
Var bilstm(Tape<T>& tape, Var x, const LstmParams& fwd, const LstmParams& bwd) {
  Var f = lstm_forward(tape, x, fwd);
  Var b = tape.reverse_dim0(lstm_forward(tape, tape.reverse_dim0(x), bwd));
  return tape.concat_lastdim(f, b);
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionOut {
  Var out;       // [T,B,D]
  Var weights;   // [B,heads,T,T], row-stochastic over the last axis
};

template <typename T>
AttentionOut<T> multi_head_attention(Tape<T>& tape, Var x, const AttentionParams& p) {
  const Tensor<T>& vx = tape.value(x);
  idx D = vx.shape[2];
  require(D % p.heads == 0, "multi_head_attention: width " + std::to_string(D) +
                                " not divisible by " + std::to_string(p.heads) + " heads");
  idx dk = D / p.heads;
  Var q = tape.linear(x, p.wq, p.bq);
  Var k = tape.linear(x, p.wk, p.bk);
  Var v = tape.linear(x, p.wv, p.bv);
  Var scores = tape.attn_scores(q, k, p.heads, 1.0 / std::sqrt(static_cast<double>(dk)));
  Var w = tape.softmax_lastdim(scores);
  Var ctx = tape.attn_combine(w, v);
  return {tape.linear(ctx, p.wo, p.bo), w};
}

// Keys and values from the input; queries update dynamically from the
// multi-head stage output.
template <typename T>
AttentionOut<T> proxima_attention(Tape<T>& tape, Var x, Var o_mha, const AttentionParams& p) {
  const Tensor<T>& vx = tape.value(x);
  require(tape.value(o_mha).shape == vx.shape, "proxima_attention: shape mismatch");
  idx D = vx.shape[2];
  Var k = tape.linear(x, p.pk_w, p.pk_b);
  Var v = tape.linear(x, p.pv_w, p.pv_b);
  Var q = tape.linear(o_mha, p.pq_w, p.pq_b);
  Var scores = tape.attn_scores(q, k, 1, 1.0 / std::sqrt(static_cast<double>(D)));
  Var w = tape.softmax_lastdim(scores);
  return {tape.attn_combine(w, v), w};
}

template <typename T>
struct CombinedAttentionOut {
  Var out;
  Var mha_weights;
  Var proxima_weights;
};

// LayerNorm(W_f [O_mha; O_proxima] + x)
template <typename T>
CombinedAttentionOut<T> combined_attention(Tape<T>& tape, Var x, const AttentionParams& p) {
  AttentionOut<T> mha = multi_head_attention(tape, x, p);
  AttentionOut<T> prox = proxima_attention(tape, x, mha.out, p);
  Var fused = tape.linear(tape.concat_lastdim(mha.out, prox.out), p.fuse_w, p.fuse_b);
  Var res = tape.add(fused, x);
  Var out = tape.layer_norm_lastdim(res, p.ln_gain, p.ln_bias, p.ln_eps);
  return {out, mha.weights, prox.weights};
}

}  // namespace htr
