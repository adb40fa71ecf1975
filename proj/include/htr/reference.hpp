#pragma once

#include <map>
#include <vector>

#include "htr/ctc.hpp"
#include "htr/tensor.hpp"

// Exhaustive-enumeration references. These deliberately share nothing with
// the dynamic-programming implementations they check: every path in the
// lattice is walked explicitly. Only usable for tiny T and V.
namespace htr::reference {

// Sum of path probabilities over all V^T paths whose collapse equals target.
inline double ctc_log_prob_enum(const Tensor<double>& log_lattice, const std::vector<int>& target) {
  idx Tn = log_lattice.shape[0], V = log_lattice.shape[1];
  require(Tn <= 12 && V <= 6, "enumeration oracle: lattice too large");
  std::vector<int> path(static_cast<size_t>(Tn), 0);
  double total = 0.0;
  for (;;) {
    double p = 0.0;
    for (idx t = 0; t < Tn; t++) p += log_lattice.at2(t, path[static_cast<size_t>(t)]);
    if (collapse(path) == target) total += std::exp(p);
    idx d = 0;
    while (d < Tn) {
      if (++path[static_cast<size_t>(d)] < V) break;
      path[static_cast<size_t>(d)] = 0;
      d++;
    }
    if (d == Tn) break;
  }
  return total > 0.0 ? std::log(total) : kLogZero;
}

// Posterior mass of every collapsed string reachable in the lattice.
inline std::map<std::vector<int>, double> string_posteriors(const Tensor<double>& log_lattice) {
  idx Tn = log_lattice.shape[0], V = log_lattice.shape[1];
  require(Tn <= 12 && V <= 6, "enumeration oracle: lattice too large");
  std::map<std::vector<int>, double> post;
  std::vector<int> path(static_cast<size_t>(Tn), 0);
  for (;;) {
    double p = 0.0;
    for (idx t = 0; t < Tn; t++) p += log_lattice.at2(t, path[static_cast<size_t>(t)]);
    post[collapse(path)] += std::exp(p);
    idx d = 0;
    while (d < Tn) {
      if (++path[static_cast<size_t>(d)] < V) break;
      path[static_cast<size_t>(d)] = 0;
      d++;
    }
    if (d == Tn) break;
  }
  return post;
}

inline std::vector<int> best_string_by_posterior(const Tensor<double>& log_lattice) {
  auto post = string_posteriors(log_lattice);
  std::vector<int> best;
  double best_p = -1.0;
  for (const auto& [s, p] : post)
    if (p > best_p) {
      best = s;
      best_p = p;
    }
  return best;
}

// A normalized random lattice in log space.
inline Tensor<double> random_log_lattice(idx Tn, idx V, Rng& rng, double spread = 2.0) {
  Tensor<double> logits(Shape{Tn, V});
  for (idx i = 0; i < logits.numel(); i++) logits[i] = rng.normal() * spread;
  for (idx t = 0; t < Tn; t++) {
    double m = logits.at2(t, 0);
    for (idx v = 1; v < V; v++) m = std::max(m, logits.at2(t, v));
    double s = 0;
    for (idx v = 0; v < V; v++) s += std::exp(logits.at2(t, v) - m);
    double lse = m + std::log(s);
    for (idx v = 0; v < V; v++) logits.at2(t, v) -= lse;
  }
  return logits;
}

}  // namespace htr::reference
