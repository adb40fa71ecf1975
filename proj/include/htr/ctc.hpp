#pragma once

#include <limits>
#include <map>
#include <vector>

#include "htr/autodiff.hpp"
#include "htr/tensor.hpp"

namespace htr {

constexpr int kBlank = 0;
constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// The CTC collapse mapping: drop repeats, then blanks.
inline std::vector<int> collapse(const std::vector<int>& path) {
  std::vector<int> out;
  int prev = -1;
  for (int k : path) {
    if (k != prev && k != kBlank) out.push_back(k);
    prev = k;
  }
  return out;
}

// Minimum number of frames needed to emit `target`.
inline idx ctc_min_frames(const std::vector<int>& target) {
  idx repeats = 0;
  for (size_t i = 1; i < target.size(); i++)
    if (target[i] == target[i - 1]) repeats++;
  return static_cast<idx>(target.size()) + repeats;
}

struct InfeasibleTarget : std::runtime_error {
  explicit InfeasibleTarget(const std::string& m) : std::runtime_error(m) {}
};

namespace detail {

inline std::vector<int> augment_with_blanks(const std::vector<int>& target) {
  std::vector<int> lp(2 * target.size() + 1, kBlank);
  for (size_t i = 0; i < target.size(); i++) lp[2 * i + 1] = target[i];
  return lp;
}

// Row-wise log-softmax into double, whatever the logits precision; the
// forward-backward recursion always runs at fp64.
template <typename T>
Tensor<double> log_softmax_rows(const Tensor<T>& logits) {
  idx Tn = logits.shape[0], V = logits.shape[1];
  Tensor<double> out(Shape{Tn, V});
  for (idx t = 0; t < Tn; t++) {
    double m = static_cast<double>(logits.at2(t, 0));
    for (idx v = 1; v < V; v++) m = std::max(m, static_cast<double>(logits.at2(t, v)));
    double s = 0;
    for (idx v = 0; v < V; v++) s += std::exp(static_cast<double>(logits.at2(t, v)) - m);
    double lse = m + std::log(s);
    for (idx v = 0; v < V; v++) out.at2(t, v) = static_cast<double>(logits.at2(t, v)) - lse;
  }
  return out;
}

struct FbResult {
  double log_prob = kLogZero;
  Tensor<double> log_alpha;  // [T,U]
  Tensor<double> log_beta;   // [T,U]
};

// Log-space forward-backward over the blank-augmented state chain.
inline FbResult forward_backward(const Tensor<double>& logp, const std::vector<int>& target) {
  idx Tn = logp.shape[0], V = logp.shape[1];
  for (int k : target)
    require(k >= 1 && k < V, "ctc: target id out of range");
  std::vector<int> lp = augment_with_blanks(target);
  idx U = static_cast<idx>(lp.size());
  FbResult r;
  r.log_alpha = Tensor<double>(Shape{Tn, U}, kLogZero);
  r.log_beta = Tensor<double>(Shape{Tn, U}, kLogZero);
  if (ctc_min_frames(target) > Tn) return r;  // infeasible: log p stays -inf

  auto& a = r.log_alpha;
  a.at2(0, 0) = logp.at2(0, kBlank);
  if (U > 1) a.at2(0, 1) = logp.at2(0, lp[1]);
  for (idx t = 1; t < Tn; t++)
    for (idx u = 0; u < U; u++) {
      double s = a.at2(t - 1, u);
      if (u > 0) s = log_add(s, a.at2(t - 1, u - 1));
      if (u > 1 && lp[static_cast<size_t>(u)] != kBlank &&
          lp[static_cast<size_t>(u)] != lp[static_cast<size_t>(u - 2)])
        s = log_add(s, a.at2(t - 1, u - 2));
      if (s != kLogZero) a.at2(t, u) = s + logp.at2(t, lp[static_cast<size_t>(u)]);
    }
  r.log_prob = a.at2(Tn - 1, U - 1);
  if (U > 1) r.log_prob = log_add(r.log_prob, a.at2(Tn - 1, U - 2));

  auto& b = r.log_beta;
  b.at2(Tn - 1, U - 1) = 0.0;
  if (U > 1) b.at2(Tn - 1, U - 2) = 0.0;
  for (idx t = Tn - 2; t >= 0; t--)
    for (idx u = 0; u < U; u++) {
      double s = b.at2(t + 1, u) == kLogZero
                     ? kLogZero
                     : b.at2(t + 1, u) + logp.at2(t + 1, lp[static_cast<size_t>(u)]);
      if (u + 1 < U && b.at2(t + 1, u + 1) != kLogZero)
        s = log_add(s, b.at2(t + 1, u + 1) + logp.at2(t + 1, lp[static_cast<size_t>(u + 1)]));
      if (u + 2 < U && lp[static_cast<size_t>(u + 2)] != kBlank &&
          lp[static_cast<size_t>(u + 2)] != lp[static_cast<size_t>(u)] &&
          b.at2(t + 1, u + 2) != kLogZero)
        s = log_add(s, b.at2(t + 1, u + 2) + logp.at2(t + 1, lp[static_cast<size_t>(u + 2)]));
      b.at2(t, u) = s;
    }
  return r;
}

}  // namespace detail

// Log-probability of `target` under a normalized log-prob lattice [T,V].
// Returns -inf when the target cannot be emitted in T frames.
template <typename T>
double ctc_log_prob(const Tensor<T>& log_lattice, const std::vector<int>& target) {
  require(log_lattice.rank() == 2, "ctc_log_prob: lattice must be [T,V]");
  Tensor<double> lp = log_lattice.template cast<double>();
  return detail::forward_backward(lp, target).log_prob;
}

template <typename T>
struct CtcGrad {
  double loss = 0.0;            // -log p
  Tensor<T> dlogits;            // [T,V]
  std::vector<int> alignment;   // most probable state label per frame (incl. blanks)
};

// Loss and analytic gradient w.r.t. raw logits (softmax applied internally).
// Throws InfeasibleTarget when the target does not fit in T frames.
template <typename T>
CtcGrad<T> ctc_loss_and_grad(const Tensor<T>& logits, const std::vector<int>& target) {
  require(logits.rank() == 2, "ctc_loss_and_grad: logits must be [T,V]");
  idx Tn = logits.shape[0], V = logits.shape[1];
  if (ctc_min_frames(target) > Tn)
    throw InfeasibleTarget("ctc: target of length " + std::to_string(target.size()) +
                           " (+" + std::to_string(ctc_min_frames(target) - static_cast<idx>(target.size())) +
                           " repeat blanks) does not fit in " + std::to_string(Tn) + " frames");
  Tensor<double> logp = detail::log_softmax_rows(logits);
  detail::FbResult fb = detail::forward_backward(logp, target);
  require(fb.log_prob != kLogZero, "ctc: zero-probability target");
  std::vector<int> lp = detail::augment_with_blanks(target);
  idx U = static_cast<idx>(lp.size());

  CtcGrad<T> out;
  out.loss = -fb.log_prob;
  out.dlogits = Tensor<T>(Shape{Tn, V});
  out.alignment.resize(static_cast<size_t>(Tn));
  for (idx t = 0; t < Tn; t++) {
    std::vector<double> occ(static_cast<size_t>(V), 0.0);
    double best = kLogZero;
    int best_label = kBlank;
    for (idx u = 0; u < U; u++) {
      double g = fb.log_alpha.at2(t, u) + fb.log_beta.at2(t, u);
      if (g == kLogZero) continue;
      occ[static_cast<size_t>(lp[static_cast<size_t>(u)])] += std::exp(g - fb.log_prob);
      if (g > best) {
        best = g;
        best_label = lp[static_cast<size_t>(u)];
      }
    }
    out.alignment[static_cast<size_t>(t)] = best_label;
    for (idx v = 0; v < V; v++)
      out.dlogits.at2(t, v) =
          static_cast<T>(std::exp(logp.at2(t, v)) - occ[static_cast<size_t>(v)]);
  }
  return out;
}

// Tape node wrapping the hand-derived CTC gradient.
template <typename T>
Var ctc_loss_op(Tape<T>& tape, Var logits, const std::vector<int>& target,
                std::vector<int>* alignment_out = nullptr) {
  CtcGrad<T> g = ctc_loss_and_grad(tape.value(logits), target);
  if (alignment_out) *alignment_out = g.alignment;
  Tensor<T> loss(Shape{1});
  loss[0] = static_cast<T>(g.loss);
  auto dl = std::make_shared<Tensor<T>>(std::move(g.dlogits));
  return tape.custom({logits}, std::move(loss),
                     [dl](const Tensor<T>& gout, std::vector<Tensor<T>*>& gin) {
                       if (!gin[0]) return;
                       for (idx i = 0; i < dl->numel(); i++) (*gin[0])[i] += gout[0] * (*dl)[i];
                     });
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// Per-frame argmax then collapse; ties break toward the lowest token id.
template <typename T>
std::vector<int> greedy_decode(const Tensor<T>& log_lattice) {
  require(log_lattice.rank() == 2, "greedy_decode: lattice must be [T,V]");
  idx Tn = log_lattice.shape[0], V = log_lattice.shape[1];
  std::vector<int> path(static_cast<size_t>(Tn));
  for (idx t = 0; t < Tn; t++) {
    int best = 0;
    for (idx v = 1; v < V; v++)
      if (log_lattice.at2(t, v) > log_lattice.at2(t, best)) best = static_cast<int>(v);
    path[static_cast<size_t>(t)] = best;
  }
  return collapse(path);
}

struct BeamHypothesis {
  std::vector<int> ids;
  std::vector<idx> frames;  // emission frame of each id
  double log_prob = kLogZero;
};

// Prefix beam search. Hypotheses are ranked for pruning by their best single
// alignment (so width 1 follows the greedy path exactly) while the final
// answer is chosen by total probability, which is exact once the width
// covers every reachable prefix.
template <typename T>
BeamHypothesis beam_decode(const Tensor<T>& log_lattice, int width) {
  require(width >= 1, "beam_decode: width must be >= 1");
  require(log_lattice.rank() == 2, "beam_decode: lattice must be [T,V]");
  idx Tn = log_lattice.shape[0], V = log_lattice.shape[1];

  struct Hyp {
    double p_b = kLogZero, p_nb = kLogZero;   // summed path mass
    double v_b = kLogZero, v_nb = kLogZero;   // best single path
    std::vector<idx> frames;
    bool frames_set = false;
    double total() const { return log_add(p_b, p_nb); }
    double rank() const { return std::max(v_b, v_nb); }
  };
  using Beam = std::map<std::vector<int>, Hyp>;

  // p_add joins the summed mass of one state; v_cand competes for the best
  // alignment. Frames follow whichever source currently owns the best
  // alignment of the target prefix.
  auto consider = [](Hyp& n, bool blank_state, double p_add, double v_cand,
                     std::vector<idx> fr) {
    double old_rank = n.rank();
    if (blank_state) {
      n.p_b = log_add(n.p_b, p_add);
      n.v_b = std::max(n.v_b, v_cand);
    } else {
      n.p_nb = log_add(n.p_nb, p_add);
      n.v_nb = std::max(n.v_nb, v_cand);
    }
    if (!n.frames_set || n.rank() > old_rank) {
      n.frames = std::move(fr);
      n.frames_set = true;
    }
  };

  Beam beam;
  beam[{}] = Hyp{0.0, kLogZero, 0.0, kLogZero, {}, true};

  for (idx t = 0; t < Tn; t++) {
    Beam next;
    for (const auto& [prefix, h] : beam) {
      double p_any = log_add(h.p_b, h.p_nb);
      double v_any = std::max(h.v_b, h.v_nb);
      for (int k = 0; k < V; k++) {
        double lk = static_cast<double>(log_lattice.at2(t, k));
        if (k == kBlank) {
          consider(next[prefix], true, p_any + lk, v_any + lk, h.frames);
        } else if (!prefix.empty() && prefix.back() == k) {
          // same symbol extends the current emission
          if (h.p_nb != kLogZero)
            consider(next[prefix], false, h.p_nb + lk, h.v_nb + lk, h.frames);
          // a blank-separated repeat starts a new character
          if (h.p_b != kLogZero) {
            std::vector<int> ext = prefix;
            ext.push_back(k);
            std::vector<idx> fr = h.frames;
            fr.push_back(t);
            consider(next[ext], false, h.p_b + lk, h.v_b + lk, std::move(fr));
          }
        } else {
          std::vector<int> ext = prefix;
          ext.push_back(k);
          std::vector<idx> fr = h.frames;
          fr.push_back(t);
          consider(next[ext], false, p_any + lk, v_any + lk, std::move(fr));
        }
      }
    }
    if (static_cast<int>(next.size()) > width) {
      std::vector<std::pair<double, const std::vector<int>*>> ranked;
      ranked.reserve(next.size());
      for (const auto& [prefix, h] : next) ranked.push_back({h.rank(), &prefix});
      std::nth_element(ranked.begin(), ranked.begin() + width, ranked.end(),
                       [](const auto& a, const auto& b) {
                         if (a.first != b.first) return a.first > b.first;
                         return *a.second < *b.second;
                       });
      Beam pruned;
      for (int i = 0; i < width; i++) {
        const std::vector<int>& key = *ranked[static_cast<size_t>(i)].second;
        pruned[key] = next[key];
      }
      beam = std::move(pruned);
    } else {
      beam = std::move(next);
    }
  }

  BeamHypothesis best;
  for (const auto& [prefix, h] : beam) {
    double tot = h.total();
    if (tot > best.log_prob) {
      best.ids = prefix;
      best.frames = h.frames;
      best.log_prob = tot;
    }
  }
  return best;
}

}  // namespace htr
