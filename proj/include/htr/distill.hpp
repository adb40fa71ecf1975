#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "htr/autodiff.hpp"

namespace htr {

// ---------------------------------------------------------------------------
// Loss weights (alpha, beta, gamma, delta)
// ---------------------------------------------------------------------------

struct LossWeights {
  double alpha = 0.0, beta = 0.0, gamma = 0.0, delta = 0.0;
  double sum() const { return ((alpha + beta) + gamma) + delta; }
};

// alpha ramps 0.7 -> 0.4 and gamma 0.2 -> 0.5 linearly over the run; delta is
// pinned at 0.1 and beta takes whatever is left (identically zero on this
// schedule). gamma is nudged by at most one ulp so the canonical float sum
// is exactly 1 at every epoch.
inline LossWeights weight_schedule(idx epoch, idx total_epochs) {
  require(total_epochs >= 1, "weight_schedule: total_epochs must be >= 1");
  require(epoch >= 0 && epoch <= total_epochs, "weight_schedule: epoch out of range");
  double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  double alpha_line = 0.7 - 0.3 * t;
  double gamma_line = 0.2 + 0.3 * t;
  LossWeights w;
  w.delta = 0.1;
  w.beta = 0.0;
  auto add_ulps = [](double v, int k) {
    while (k > 0) { v = std::nextafter(v, 2.0); k--; }
    while (k < 0) { v = std::nextafter(v, -2.0); k++; }
    return v;
  };
  for (int xk = -4; xk <= 4; xk++) {
    double x = add_ulps(1.0 - w.delta, xk);
    if (x + w.delta != 1.0) continue;
    for (int ak = -4; ak <= 4; ak++) {
      double a = add_ulps(alpha_line, ak);
      if (std::abs(a - alpha_line) > 1e-12) continue;
      for (int gk = -8; gk <= 8; gk++) {
        double g = add_ulps(x - a, gk);
        if ((a + w.beta) + g == x && std::abs(g - gamma_line) < 1e-12) {
          w.alpha = a;
          w.gamma = g;
          return w;
        }
      }
    }
  }
  fail("weight_schedule: exact-sum construction failed");
}

struct DistillConfig {
  double tau = 2.0;                  // softmax temperature
  bool teacher_as_reference = true;  // forward KL, teacher distribution first
};

// ---------------------------------------------------------------------------
// Plain-tensor losses (evaluation paths and oracles)
// ---------------------------------------------------------------------------

// Mean over unmasked rows of -log p at the one-hot target class. Zero
// probabilities clamp at 1e-12 with a counted warning.
template <typename T>
double ce_loss(const Tensor<T>& probs, const Tensor<T>& onehot, const std::vector<std::uint8_t>& mask = {}) {
  require(probs.shape == onehot.shape, "ce_loss: probs/targets shape mismatch");
  idx V = probs.shape.back(), rows = probs.numel() / V;
  require(mask.empty() || static_cast<idx>(mask.size()) == rows, "ce_loss: mask length mismatch");
  double total = 0.0;
  idx n = 0;
  for (idx r = 0; r < rows; r++) {
    if (!mask.empty() && !mask[static_cast<size_t>(r)]) continue;
    n++;
    for (idx v = 0; v < V; v++) {
      double y = static_cast<double>(onehot[r * V + v]);
      if (y == 0.0) continue;
      double p = static_cast<double>(probs[r * V + v]);
      if (p < 1e-12) {
        Warnings::global().bump("ce_clamped_prob");
        p = 1e-12;
      }
      total -= y * std::log(p);
    }
  }
  require(n > 0, "ce_loss: empty mask");
  return total / static_cast<double>(n);
}

// The auxiliary head shares the cross-entropy contract.
template <typename T>
double aux_loss(const Tensor<T>& probs, const Tensor<T>& onehot, const std::vector<std::uint8_t>& mask = {}) {
  return ce_loss(probs, onehot, mask);
}

// KL(P || Q) over matching-shape distributions; p_i = 0 terms contribute 0,
// q is clamped at 1e-12 where it underflows a positive p.
template <typename T>
double kl_div(const Tensor<T>& p, const Tensor<T>& q) {
  require(p.shape == q.shape, "kl_div: shape mismatch");
  double total = 0.0;
  for (idx i = 0; i < p.numel(); i++) {
    double pi = static_cast<double>(p[i]);
    if (pi <= 0.0) continue;
    double qi = static_cast<double>(q[i]);
    if (qi < 1e-12) {
      Warnings::global().bump("kl_clamped_q");
      qi = 1e-12;
    }
    total += pi * std::log(pi / qi);
  }
  return total;
}

// Piecewise-linear time-axis resampling of logit rows; endpoints map to
// endpoints.
template <typename T>
Tensor<T> interpolate_logits(const Tensor<T>& z, idx target_len) {
  require(z.rank() == 2 && z.shape[0] >= 1, "interpolate_logits: input must be [T,V], T >= 1");
  require(target_len >= 1, "interpolate_logits: target length must be >= 1");
  idx Ts = z.shape[0], V = z.shape[1];
  Tensor<T> out(Shape{target_len, V});
  for (idx j = 0; j < target_len; j++) {
    double pos = (target_len == 1 || Ts == 1)
                     ? 0.0
                     : static_cast<double>(j) * static_cast<double>(Ts - 1) /
                           static_cast<double>(target_len - 1);
    idx lo = std::min<idx>(static_cast<idx>(pos), Ts - 1);
    idx hi = std::min<idx>(lo + 1, Ts - 1);
    T f = static_cast<T>(pos - static_cast<double>(lo));
    for (idx v = 0; v < V; v++)
      out.at2(j, v) = (T(1) - f) * z.at2(lo, v) + f * z.at2(hi, v);
  }
  return out;
}

namespace detail {

template <typename T>
Tensor<double> softmax_rows_scaled(const Tensor<T>& z, double inv_tau) {
  idx Tn = z.shape[0], V = z.shape[1];
  Tensor<double> out(Shape{Tn, V});
  for (idx t = 0; t < Tn; t++) {
    double m = -std::numeric_limits<double>::infinity();
    for (idx v = 0; v < V; v++) m = std::max(m, static_cast<double>(z.at2(t, v)) * inv_tau);
    double s = 0;
    for (idx v = 0; v < V; v++) {
      out.at2(t, v) = std::exp(static_cast<double>(z.at2(t, v)) * inv_tau - m);
      s += out.at2(t, v);
    }
    for (idx v = 0; v < V; v++) out.at2(t, v) /= s;
  }
  return out;
}

}  // namespace detail

// tau^2-scaled mean-over-frames KL between temperature-softened teacher and
// student distributions, teacher as the reference. The student's time axis
// is interpolated to the teacher's first.
template <typename T>
double kd_loss(const Tensor<T>& z_teacher, const Tensor<T>& z_student, double tau) {
  require(tau > 0.0, "kd_loss: tau must be positive");
  require(z_teacher.rank() == 2 && z_student.rank() == 2 &&
              z_teacher.shape[1] == z_student.shape[1],
          "kd_loss: vocabulary mismatch");
  idx Tt = z_teacher.shape[0];
  Tensor<T> zs = interpolate_logits(z_student, Tt);
  Tensor<double> p = detail::softmax_rows_scaled(z_teacher, 1.0 / tau);
  Tensor<double> q = detail::softmax_rows_scaled(zs, 1.0 / tau);
  double total = 0;
  idx V = p.shape[1];
  for (idx t = 0; t < Tt; t++) {
    Tensor<double> pr(Shape{V}), qr(Shape{V});
    for (idx v = 0; v < V; v++) {
      pr[v] = p.at2(t, v);
      qr[v] = q.at2(t, v);
    }
    total += kl_div(pr, qr);
  }
  return tau * tau * total / static_cast<double>(Tt);
}

struct LossParts {
  double ctc = 0.0, ce = 0.0, kd = 0.0, aux = 0.0;
};

inline double total_loss(const LossParts& parts, const LossWeights& w) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v))
      fail(std::string("total_loss: non-finite ") + name + " component: " + std::to_string(v));
  };
  check(parts.ctc, "ctc");
  check(parts.ce, "ce");
  check(parts.kd, "kd");
  check(parts.aux, "aux");
  return w.alpha * parts.ctc + w.beta * parts.ce + w.gamma * parts.kd + w.delta * parts.aux;
}

// ---------------------------------------------------------------------------
// Tape losses (training path)
// ---------------------------------------------------------------------------

// probs is a tape node [..., V]; the one-hot targets (with masked rows all
// zero) enter as a constant.
template <typename T>
Var ce_loss_op(Tape<T>& tape, Var probs, const Tensor<T>& onehot,
               const std::vector<std::uint8_t>& mask = {}) {
  const Tensor<T>& vp = tape.value(probs);
  require(vp.shape == onehot.shape, "ce_loss_op: probs/targets shape mismatch");
  idx V = vp.shape.back(), rows = vp.numel() / V;
  Tensor<T> select = onehot;
  idx n = 0;
  for (idx r = 0; r < rows; r++) {
    bool keep = mask.empty() || mask[static_cast<size_t>(r)];
    if (keep)
      n++;
    else
      for (idx v = 0; v < V; v++) select[r * V + v] = T(0);
  }
  require(n > 0, "ce_loss_op: empty mask");
  Var picked = tape.mul(tape.log_clamped(probs, 1e-12), tape.constant(std::move(select)));
  return tape.scale(tape.reduce_sum_all(picked), -1.0 / static_cast<double>(n));
}

// Teacher logits are a constant; gradients flow into the student only.
template <typename T>
Var kd_loss_op(Tape<T>& tape, const Tensor<T>& z_teacher, Var z_student, double tau) {
  require(tau > 0.0, "kd_loss_op: tau must be positive");
  const Tensor<T>& zs = tape.value(z_student);
  require(z_teacher.rank() == 2 && zs.rank() == 2 && z_teacher.shape[1] == zs.shape[1],
          "kd_loss_op: vocabulary mismatch");
  idx Tt = z_teacher.shape[0], V = z_teacher.shape[1];
  Tensor<double> p64 = detail::softmax_rows_scaled(z_teacher, 1.0 / tau);
  Tensor<T> p(p64.shape);
  double const_term = 0;  // sum p log p
  for (idx i = 0; i < p64.numel(); i++) {
    p[i] = static_cast<T>(p64[i]);
    if (p64[i] > 0) const_term += p64[i] * std::log(p64[i]);
  }
  Var zi = tape.interpolate_dim0(z_student, Tt);
  Var logq = tape.log_softmax_lastdim(tape.scale(zi, 1.0 / tau));
  Var cross = tape.reduce_sum_all(tape.mul(logq, tape.constant(std::move(p))));
  Var kl_total = tape.sub(tape.constant(Tensor<T>({1}, static_cast<T>(const_term))), cross);
  (void)V;
  return tape.scale(kl_total, tau * tau / static_cast<double>(Tt));
}

// alpha*ctc + beta*ce + gamma*kd + delta*aux over scalar tape nodes. Parts
// with zero weight may be omitted (invalid Var).
template <typename T>
Var total_loss_op(Tape<T>& tape, Var ctc, Var ce, Var kd, Var aux, const LossWeights& w) {
  struct Term {
    Var v;
    double weight;
    const char* name;
  };
  Term terms[] = {{ctc, w.alpha, "ctc"}, {ce, w.beta, "ce"}, {kd, w.gamma, "kd"}, {aux, w.delta, "aux"}};
  Var acc;
  for (const Term& t : terms) {
    if (t.weight == 0.0 && !t.v.valid()) continue;
    require(t.v.valid(), std::string("total_loss_op: missing ") + t.name +
                             " component with nonzero weight");
    double v = static_cast<double>(tape.value(t.v)[0]);
    if (!std::isfinite(v))
      fail(std::string("total_loss_op: non-finite ") + t.name + " component: " + std::to_string(v));
    Var scaled = tape.scale(t.v, t.weight);
    acc = acc.valid() ? tape.add(acc, scaled) : scaled;
  }
  require(acc.valid(), "total_loss_op: no components");
  return acc;
}

}  // namespace htr
