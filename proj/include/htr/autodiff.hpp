#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "htr/tensor.hpp"

namespace htr {

struct Var {
  idx id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors. Each op records its backward rule as
// a closure; replaying the closures in reverse order accumulates gradients
// into every node that requires them. A tape is single-owner: one forward
// pass, one backward pass, then discard.
template <typename T>
class Tape {
 public:
  using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapM = Eigen::Map<EMat>;
  using CMapM = Eigen::Map<const EMat>;

  Var leaf(Tensor<T> v, bool requires_grad = true) {
    return push(std::move(v), requires_grad, {});
  }
  Var constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  const Tensor<T>& value(Var v) const { return nodes_[check(v)].value; }
  const Tensor<T>& grad(Var v) const {
    const Node& n = nodes_[check(v)];
    require(n.grad.numel() > 0, "gradient not computed for this node");
    return n.grad;
  }
  size_t size() const { return nodes_.size(); }

  void backward(Var loss) {
    Node& out = nodes_[check(loss)];
    require(out.value.numel() == 1, "backward requires a scalar loss node");
    ensure_grad(loss.id);
    out.grad[0] = T(1);
    for (idx i = loss.id; i >= 0; i--) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && n.grad.numel() > 0) n.backward();
    }
  }

  // ----- elementwise -----

  Var add(Var a, Var b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    require(va.shape == vb.shape, "add: shape mismatch " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
    Tensor<T> out = va;
    for (idx i = 0; i < out.numel(); i++) out[i] += vb[i];
    return binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    require(va.shape == vb.shape, "sub: shape mismatch");
    Tensor<T> out = va;
    for (idx i = 0; i < out.numel(); i++) out[i] -= vb[i];
    return binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
      accumulate(a, g);
      if (needs(b)) {
        Tensor<T> gb = g;
        for (idx i = 0; i < gb.numel(); i++) gb[i] = -gb[i];
        accumulate(b, std::move(gb));
      }
    });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    require(va.shape == vb.shape, "mul: shape mismatch");
    Tensor<T> out = va;
    for (idx i = 0; i < out.numel(); i++) out[i] *= vb[i];
    return binary(std::move(out), a, b, [this, a, b](const Tensor<T>& g) {
      if (needs(a)) {
        Tensor<T> ga = g;
        const Tensor<T>& vb2 = value(b);
        for (idx i = 0; i < ga.numel(); i++) ga[i] *= vb2[i];
        accumulate(a, std::move(ga));
      }
      if (needs(b)) {
        Tensor<T> gb = g;
        const Tensor<T>& va2 = value(a);
        for (idx i = 0; i < gb.numel(); i++) gb[i] *= va2[i];
        accumulate(b, std::move(gb));
      }
    });
  }

  Var scale(Var a, double c) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++) out[i] = static_cast<T>(out[i] * c);
    return unary(std::move(out), a, [this, a, c](const Tensor<T>& g) {
      Tensor<T> ga = g;
      for (idx i = 0; i < ga.numel(); i++) ga[i] = static_cast<T>(ga[i] * c);
      accumulate(a, std::move(ga));
    });
  }

  Var relu(Var a) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++) out[i] = out[i] > T(0) ? out[i] : T(0);
    return unary(std::move(out), a, [this, a](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& va = value(a);
      for (idx i = 0; i < ga.numel(); i++) ga[i] = va[i] > T(0) ? ga[i] : T(0);
      accumulate(a, std::move(ga));
    });
  }

  Var sigmoid(Var a) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++) out[i] = stable_sigmoid(out[i]);
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, [this, a, r](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& y = value(r);
      for (idx i = 0; i < ga.numel(); i++) ga[i] *= y[i] * (T(1) - y[i]);
      accumulate(a, std::move(ga));
    });
    return r;
  }

  Var tanh(Var a) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++) out[i] = std::tanh(out[i]);
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, [this, a, r](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& y = value(r);
      for (idx i = 0; i < ga.numel(); i++) ga[i] *= (T(1) - y[i] * y[i]);
      accumulate(a, std::move(ga));
    });
    return r;
  }

  // log with a floor; inputs at or below the floor get zero gradient.
  Var log_clamped(Var a, double floor = 1e-12) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++)
      out[i] = std::log(std::max(out[i], static_cast<T>(floor)));
    return unary(std::move(out), a, [this, a, floor](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& va = value(a);
      for (idx i = 0; i < ga.numel(); i++)
        ga[i] = va[i] > static_cast<T>(floor) ? ga[i] / va[i] : T(0);
      accumulate(a, std::move(ga));
    });
  }

  Var rsqrt_eps(Var a, double eps) {
    Tensor<T> out = value(a);
    for (idx i = 0; i < out.numel(); i++)
      out[i] = T(1) / std::sqrt(out[i] + static_cast<T>(eps));
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, [this, a, r](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& y = value(r);
      for (idx i = 0; i < ga.numel(); i++) ga[i] *= static_cast<T>(-0.5) * y[i] * y[i] * y[i];
      accumulate(a, std::move(ga));
    });
    return r;
  }

  // ----- reductions -----

  Var reduce_sum_all(Var a) {
    T s = 0;
    const Tensor<T>& va = value(a);
    for (idx i = 0; i < va.numel(); i++) s += va[i];
    Tensor<T> out(Shape{1});
    out[0] = s;
    return unary(std::move(out), a, [this, a](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape, g[0]);
      accumulate(a, std::move(ga));
    });
  }

  Var reduce_mean_all(Var a) { return scale(reduce_sum_all(a), 1.0 / static_cast<double>(value(a).numel())); }

  // ----- softmax family (last axis) -----

  Var softmax_lastdim(Var a) {
    const Tensor<T>& va = value(a);
    require(va.rank() >= 1 && va.shape.back() >= 1, "softmax: empty axis");
    Tensor<T> out = va;
    idx n = va.shape.back(), rows = va.numel() / n;
    for (idx r = 0; r < rows; r++) {
      T* p = &out.data[static_cast<size_t>(r * n)];
      T m = p[0];
      for (idx j = 1; j < n; j++) m = std::max(m, p[j]);
      T s = 0;
      for (idx j = 0; j < n; j++) {
        p[j] = std::exp(p[j] - m);
        s += p[j];
      }
      for (idx j = 0; j < n; j++) p[j] /= s;
    }
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, [this, a, r, n, rows](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& y = value(r);
      for (idx row = 0; row < rows; row++) {
        const T* yp = &y.data[static_cast<size_t>(row * n)];
        T* gp = &ga.data[static_cast<size_t>(row * n)];
        T dot = 0;
        for (idx j = 0; j < n; j++) dot += gp[j] * yp[j];
        for (idx j = 0; j < n; j++) gp[j] = yp[j] * (gp[j] - dot);
      }
      accumulate(a, std::move(ga));
    });
    return r;
  }

  Var log_softmax_lastdim(Var a) {
    const Tensor<T>& va = value(a);
    require(va.rank() >= 1 && va.shape.back() >= 1, "log_softmax: empty axis");
    Tensor<T> out = va;
    idx n = va.shape.back(), rows = va.numel() / n;
    for (idx r = 0; r < rows; r++) {
      T* p = &out.data[static_cast<size_t>(r * n)];
      T m = p[0];
      for (idx j = 1; j < n; j++) m = std::max(m, p[j]);
      T s = 0;
      for (idx j = 0; j < n; j++) s += std::exp(p[j] - m);
      T lse = m + std::log(s);
      for (idx j = 0; j < n; j++) p[j] -= lse;
    }
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, [this, a, r, n, rows](const Tensor<T>& g) {
      Tensor<T> ga = g;
      const Tensor<T>& y = value(r);
      for (idx row = 0; row < rows; row++) {
        const T* yp = &y.data[static_cast<size_t>(row * n)];
        T* gp = &ga.data[static_cast<size_t>(row * n)];
        T gs = 0;
        for (idx j = 0; j < n; j++) gs += gp[j];
        for (idx j = 0; j < n; j++) gp[j] -= std::exp(yp[j]) * gs;
      }
      accumulate(a, std::move(ga));
    });
    return r;
  }

  Var layer_norm_lastdim(Var a, Var gain, Var bias, double eps = 1e-5) {
    const Tensor<T>& va = value(a);
    idx n = va.shape.back(), rows = va.numel() / n;
    require(n >= 1, "layer_norm: empty last axis");
    require(value(gain).numel() == n && value(bias).numel() == n, "layer_norm: affine size mismatch");
    Tensor<T> out(va.shape);
    auto xhat = std::make_shared<Tensor<T>>(va.shape);
    auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
    const Tensor<T>&vg = value(gain), &vb = value(bias);
    for (idx r = 0; r < rows; r++) {
      const T* p = &va.data[static_cast<size_t>(r * n)];
      T mu = 0;
      for (idx j = 0; j < n; j++) mu += p[j];
      mu /= static_cast<T>(n);
      T v = 0;
      for (idx j = 0; j < n; j++) v += (p[j] - mu) * (p[j] - mu);
      v /= static_cast<T>(n);
      T iv = T(1) / std::sqrt(v + static_cast<T>(eps));
      (*inv)[static_cast<size_t>(r)] = iv;
      for (idx j = 0; j < n; j++) {
        T xh = (p[j] - mu) * iv;
        (*xhat)[r * n + j] = xh;
        out[r * n + j] = xh * vg[j] + vb[j];
      }
    }
    Var r = push(std::move(out), needs(a) || needs(gain) || needs(bias), {a, gain, bias});
    set_backward(r, [this, a, gain, bias, xhat, inv, n, rows](const Tensor<T>& g) {
      const Tensor<T>& vg = value(gain);
      if (needs(gain) || needs(bias)) {
        Tensor<T> dg(Shape{n}), db(Shape{n});
        for (idx row = 0; row < rows; row++)
          for (idx j = 0; j < n; j++) {
            dg[j] += g[row * n + j] * (*xhat)[row * n + j];
            db[j] += g[row * n + j];
          }
        if (needs(gain)) accumulate(gain, std::move(dg));
        if (needs(bias)) accumulate(bias, std::move(db));
      }
      if (needs(a)) {
        Tensor<T> ga(value(a).shape);
        for (idx row = 0; row < rows; row++) {
          T m1 = 0, m2 = 0;
          for (idx j = 0; j < n; j++) {
            T dxh = g[row * n + j] * vg[j];
            m1 += dxh;
            m2 += dxh * (*xhat)[row * n + j];
          }
          m1 /= static_cast<T>(n);
          m2 /= static_cast<T>(n);
          T iv = (*inv)[static_cast<size_t>(row)];
          for (idx j = 0; j < n; j++) {
            T dxh = g[row * n + j] * vg[j];
            ga[row * n + j] = iv * (dxh - m1 - (*xhat)[row * n + j] * m2);
          }
        }
        accumulate(a, std::move(ga));
      }
    });
    return r;
  }

  // ----- linear algebra -----

  Var matmul(Var a, Var b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    require(va.rank() == 2 && vb.rank() == 2 && va.shape[1] == vb.shape[0],
            "matmul: incompatible shapes " + shape_str(va.shape) + " x " + shape_str(vb.shape));
    idx m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor<T> out(Shape{m, n});
    MapM(out.data.data(), m, n).noalias() =
        CMapM(va.data.data(), m, k) * CMapM(vb.data.data(), k, n);
    return binary(std::move(out), a, b, [this, a, b, m, k, n](const Tensor<T>& g) {
      CMapM gm(g.data.data(), m, n);
      if (needs(a)) {
        Tensor<T> ga(Shape{m, k});
        MapM(ga.data.data(), m, k).noalias() = gm * CMapM(value(b).data.data(), k, n).transpose();
        accumulate(a, std::move(ga));
      }
      if (needs(b)) {
        Tensor<T> gb(Shape{k, n});
        MapM(gb.data.data(), k, n).noalias() = CMapM(value(a).data.data(), m, k).transpose() * gm;
        accumulate(b, std::move(gb));
      }
    });
  }

  // x has any leading shape with last dim K; applies y = x.W + b row-wise.
  Var linear(Var x, Var w, Var b) {
    const Tensor<T>&vx = value(x), &vw = value(w);
    require(vw.rank() == 2, "linear: weight must be 2-d");
    idx k = vw.shape[0], n = vw.shape[1];
    require(vx.shape.back() == k, "linear: input width " + std::to_string(vx.shape.back()) +
                                      " != weight rows " + std::to_string(k));
    require(value(b).numel() == n, "linear: bias size mismatch");
    idx rows = vx.numel() / k;
    Shape out_shape = vx.shape;
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    MapM(out.data.data(), rows, n).noalias() =
        CMapM(vx.data.data(), rows, k) * CMapM(vw.data.data(), k, n);
    const Tensor<T>& vb = value(b);
    for (idx r = 0; r < rows; r++)
      for (idx j = 0; j < n; j++) out[r * n + j] += vb[j];
    Var r = push(std::move(out), needs(x) || needs(w) || needs(b), {x, w, b});
    set_backward(r, [this, x, w, b, rows, k, n](const Tensor<T>& g) {
      CMapM gm(g.data.data(), rows, n);
      if (needs(x)) {
        Tensor<T> gx(value(x).shape);
        MapM(gx.data.data(), rows, k).noalias() = gm * CMapM(value(w).data.data(), k, n).transpose();
        accumulate(x, std::move(gx));
      }
      if (needs(w)) {
        Tensor<T> gw(Shape{k, n});
        MapM(gw.data.data(), k, n).noalias() = CMapM(value(x).data.data(), rows, k).transpose() * gm;
        accumulate(w, std::move(gw));
      }
      if (needs(b)) {
        Tensor<T> gb(Shape{n});
        for (idx r2 = 0; r2 < rows; r2++)
          for (idx j = 0; j < n; j++) gb[j] += g[r2 * n + j];
        accumulate(b, std::move(gb));
      }
    });
    return r;
  }

  // ----- convolution and pooling -----

  // x [B,C,H,W], w [O,C,kh,kw], b [O]; zero padding. Cross-correlation via a
  // [K,M] patch matrix whose rows copy contiguous image spans, so gathering
  // and scattering run at memcpy speed.
  Var conv2d(Var x, Var w, Var b, idx pad_h, idx pad_w) {
    const Tensor<T>&vx = value(x), &vw = value(w);
    require(vx.rank() == 4 && vw.rank() == 4, "conv2d: rank-4 input and kernel required");
    require(vx.shape[1] == vw.shape[1], "conv2d: channel mismatch: input " +
                                            std::to_string(vx.shape[1]) + " kernel " +
                                            std::to_string(vw.shape[1]));
    idx B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    idx O = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    require(value(b).numel() == O, "conv2d: bias size mismatch");
    idx Ho = H + 2 * pad_h - kh + 1, Wo = W + 2 * pad_w - kw + 1;
    require(Ho >= 1 && Wo >= 1, "conv2d: kernel does not fit padded input");

    idx K = C * kh * kw, M = B * Ho * Wo;
    auto cols = std::make_shared<Tensor<T>>(Shape{K, M});
    idx k = 0;
    for (idx c = 0; c < C; c++)
      for (idx i = 0; i < kh; i++)
        for (idx j = 0; j < kw; j++, k++) {
          T* dst = &cols->data[static_cast<size_t>(k * M)];
          for (idx bi = 0; bi < B; bi++)
            for (idx ho = 0; ho < Ho; ho++, dst += Wo) {
              idx hi = ho + i - pad_h;
              if (hi < 0 || hi >= H) continue;  // row stays zero
              idx w_lo = std::max<idx>(0, pad_w - j), w_hi = std::min(Wo, W + pad_w - j);
              if (w_lo >= w_hi) continue;
              const T* src = &vx.data[static_cast<size_t>(((bi * C + c) * H + hi) * W + (w_lo + j - pad_w))];
              std::copy_n(src, w_hi - w_lo, dst + w_lo);
            }
        }
    Tensor<T> out(Shape{B, O, Ho, Wo});
    // y[m, o]: batch positions live in result rows, which the GEMM kernel
    // treats position-independently, so duplicated samples stay bit-equal
    Tensor<T> ymat(Shape{M, O});
    MapM(ymat.data.data(), M, O).noalias() =
        CMapM(cols->data.data(), K, M).transpose() * CMapM(vw.data.data(), O, K).transpose();
    const Tensor<T>& vb = value(b);
    for (idx bi = 0; bi < B; bi++)
      for (idx o = 0; o < O; o++) {
        const T* src = &ymat.data[static_cast<size_t>(bi * Ho * Wo * O + o)];
        T* dst = &out.data[static_cast<size_t>(((bi * O + o) * Ho) * Wo)];
        T bias = vb[o];
        for (idx s = 0; s < Ho * Wo; s++) dst[s] = src[s * O] + bias;
      }

    Var r = push(std::move(out), needs(x) || needs(w) || needs(b), {x, w, b});
    set_backward(r, [this, x, w, b, cols, B, C, H, W, O, Ho, Wo, kh, kw, pad_h, pad_w,
                     K, M](const Tensor<T>& g) {
      Tensor<T> gmat(Shape{M, O});
      for (idx bi = 0; bi < B; bi++)
        for (idx o = 0; o < O; o++) {
          const T* src = &g.data[static_cast<size_t>(((bi * O + o) * Ho) * Wo)];
          T* dst = &gmat.data[static_cast<size_t>(bi * Ho * Wo * O + o)];
          for (idx s = 0; s < Ho * Wo; s++) dst[s * O] = src[s];
        }
      if (needs(b)) {
        Tensor<T> gb(Shape{O});
        for (idx m = 0; m < M; m++)
          for (idx o = 0; o < O; o++) gb[o] += gmat.data[static_cast<size_t>(m * O + o)];
        accumulate(b, std::move(gb));
      }
      if (needs(w)) {
        Tensor<T> gw(Shape{O, C, kh, kw});
        MapM(gw.data.data(), O, K).noalias() =
            CMapM(gmat.data.data(), M, O).transpose() * CMapM(cols->data.data(), K, M).transpose();
        accumulate(w, std::move(gw));
      }
      if (needs(x)) {
        Tensor<T> dcols(Shape{K, M});
        MapM(dcols.data.data(), K, M).noalias() =
            CMapM(value(w).data.data(), O, K).transpose() * CMapM(gmat.data.data(), M, O).transpose();
        Tensor<T> gx(value(x).shape);
        idx k2 = 0;
        for (idx c = 0; c < C; c++)
          for (idx i = 0; i < kh; i++)
            for (idx j = 0; j < kw; j++, k2++) {
              const T* src = &dcols.data[static_cast<size_t>(k2 * M)];
              for (idx bi = 0; bi < B; bi++)
                for (idx ho = 0; ho < Ho; ho++, src += Wo) {
                  idx hi = ho + i - pad_h;
                  if (hi < 0 || hi >= H) continue;
                  idx w_lo = std::max<idx>(0, pad_w - j), w_hi = std::min(Wo, W + pad_w - j);
                  if (w_lo >= w_hi) continue;
                  T* dst = &gx.data[static_cast<size_t>(((bi * C + c) * H + hi) * W + (w_lo + j - pad_w))];
                  const T* sp = src + w_lo;
                  for (idx s = 0; s < w_hi - w_lo; s++) dst[s] += sp[s];
                }
            }
        accumulate(x, std::move(gx));
      }
    });
    return r;
  }

  // Fused batch normalization over [B,C,H,W] with per-channel statistics.
  // Training mode uses batch statistics; eval mode is a per-channel affine
  // with the provided running statistics folded in as constants.
  Var batch_norm_fused(Var x, Var scale, Var shift, const Tensor<T>* running_mean,
                       const Tensor<T>* running_var, bool training, double eps) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "batch_norm: rank-4 input required");
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    require(value(scale).numel() == C && value(shift).numel() == C, "batch_norm: affine size mismatch");
    const Tensor<T>&vs = value(scale), &vsh = value(shift);

    auto xhat = std::make_shared<Tensor<T>>(vx.shape);
    auto inv = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    Tensor<T> out(vx.shape);
    std::vector<T> mean(static_cast<size_t>(C)), var(static_cast<size_t>(C));
    if (training) {
      for (idx c = 0; c < C; c++) {
        double acc = 0;
        for (idx b = 0; b < B; b++) {
          const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
          for (idx s = 0; s < S; s++) acc += p[s];
        }
        mean[static_cast<size_t>(c)] = static_cast<T>(acc / static_cast<double>(B * S));
        double vacc = 0;
        for (idx b = 0; b < B; b++) {
          const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
          for (idx s = 0; s < S; s++) {
            double d = static_cast<double>(p[s]) - static_cast<double>(mean[static_cast<size_t>(c)]);
            vacc += d * d;
          }
        }
        var[static_cast<size_t>(c)] = static_cast<T>(vacc / static_cast<double>(B * S));
      }
    } else {
      require(running_mean && running_var, "batch_norm: eval mode needs running stats");
      for (idx c = 0; c < C; c++) {
        mean[static_cast<size_t>(c)] = (*running_mean)[c];
        var[static_cast<size_t>(c)] = (*running_var)[c];
      }
    }
    for (idx c = 0; c < C; c++)
      (*inv)[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[static_cast<size_t>(c)]) + eps));
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++) {
        const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
        T* xh = &xhat->data[static_cast<size_t>((b * C + c) * S)];
        T* op = &out.data[static_cast<size_t>((b * C + c) * S)];
        T m = mean[static_cast<size_t>(c)], iv = (*inv)[static_cast<size_t>(c)];
        T sc = vs[c], sh = vsh[c];
        for (idx s = 0; s < S; s++) {
          xh[s] = (p[s] - m) * iv;
          op[s] = xh[s] * sc + sh;
        }
      }
    Var r = push(std::move(out), needs(x) || needs(scale) || needs(shift), {x, scale, shift});
    set_backward(r, [this, x, scale, shift, xhat, inv, training, B, C, S](const Tensor<T>& g) {
      const Tensor<T>& vs = value(scale);
      if (needs(scale) || needs(shift)) {
        Tensor<T> dsc(Shape{C}), dsh(Shape{C});
        for (idx b = 0; b < B; b++)
          for (idx c = 0; c < C; c++) {
            const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
            const T* xh = &xhat->data[static_cast<size_t>((b * C + c) * S)];
            T a0 = 0, a1 = 0;
            for (idx s = 0; s < S; s++) {
              a0 += gp[s] * xh[s];
              a1 += gp[s];
            }
            dsc[c] += a0;
            dsh[c] += a1;
          }
        if (needs(scale)) accumulate(scale, std::move(dsc));
        if (needs(shift)) accumulate(shift, std::move(dsh));
      }
      if (needs(x)) {
        Tensor<T> gx(value(x).shape);
        if (!training) {
          for (idx b = 0; b < B; b++)
            for (idx c = 0; c < C; c++) {
              T f = vs[c] * (*inv)[static_cast<size_t>(c)];
              const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
              T* xp = &gx.data[static_cast<size_t>((b * C + c) * S)];
              for (idx s = 0; s < S; s++) xp[s] = gp[s] * f;
            }
        } else {
          idx N = B * S;
          for (idx c = 0; c < C; c++) {
            double m1 = 0, m2 = 0;  // means of dxhat and dxhat*xhat
            for (idx b = 0; b < B; b++) {
              const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
              const T* xh = &xhat->data[static_cast<size_t>((b * C + c) * S)];
              for (idx s = 0; s < S; s++) {
                double dxh = static_cast<double>(gp[s]) * vs[c];
                m1 += dxh;
                m2 += dxh * xh[s];
              }
            }
            m1 /= static_cast<double>(N);
            m2 /= static_cast<double>(N);
            T iv = (*inv)[static_cast<size_t>(c)];
            for (idx b = 0; b < B; b++) {
              const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
              const T* xh = &xhat->data[static_cast<size_t>((b * C + c) * S)];
              T* xp = &gx.data[static_cast<size_t>((b * C + c) * S)];
              for (idx s = 0; s < S; s++) {
                double dxh = static_cast<double>(gp[s]) * vs[c];
                xp[s] = static_cast<T>(iv * (dxh - m1 - xh[s] * m2));
              }
            }
          }
        }
        accumulate(x, std::move(gx));
      }
    });
    return r;
  }

  // Windows that run past the input are padded with -inf rows/columns, so
  // odd extents pool cleanly.
  Var max_pool2d(Var x, idx ph, idx pw) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "max_pool2d: rank-4 input required");
    idx B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    idx Ho = (H + ph - 1) / ph, Wo = (W + pw - 1) / pw;
    Tensor<T> out(Shape{B, C, Ho, Wo});
    auto arg = std::make_shared<std::vector<idx>>(static_cast<size_t>(out.numel()));
    idx oi = 0;
    for (idx bi = 0; bi < B; bi++)
      for (idx c = 0; c < C; c++)
        for (idx ho = 0; ho < Ho; ho++)
          for (idx wo = 0; wo < Wo; wo++, oi++) {
            T best = -std::numeric_limits<T>::infinity();
            idx best_i = -1;
            for (idx i = ho * ph; i < std::min(H, (ho + 1) * ph); i++)
              for (idx j = wo * pw; j < std::min(W, (wo + 1) * pw); j++) {
                idx lin = ((bi * C + c) * H + i) * W + j;
                if (vx[lin] > best) {
                  best = vx[lin];
                  best_i = lin;
                }
              }
            out[oi] = best;
            (*arg)[static_cast<size_t>(oi)] = best_i;
          }
    return unary(std::move(out), x, [this, x, arg](const Tensor<T>& g) {
      Tensor<T> gx(value(x).shape);
      for (idx i = 0; i < g.numel(); i++) gx[(*arg)[static_cast<size_t>(i)]] += g[i];
      accumulate(x, std::move(gx));
    });
  }

  // ----- channel-broadcast helpers for rank-4 feature maps -----

  Var global_avg_pool(Var x) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "global_avg_pool: rank-4 input required");
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    Tensor<T> out(Shape{B, C});
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++) {
        T s = 0;
        const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
        for (idx i = 0; i < S; i++) s += p[i];
        out.at2(b, c) = s / static_cast<T>(S);
      }
    return unary(std::move(out), x, [this, x, B, C, S](const Tensor<T>& g) {
      Tensor<T> gx(value(x).shape);
      for (idx b = 0; b < B; b++)
        for (idx c = 0; c < C; c++) {
          T v = g.at2(b, c) / static_cast<T>(S);
          T* p = &gx.data[static_cast<size_t>((b * C + c) * S)];
          for (idx i = 0; i < S; i++) p[i] += v;
        }
      accumulate(x, std::move(gx));
    });
  }

  // x [B,C,H,W] scaled per (batch, channel) by s [B,C].
  Var channel_scale(Var x, Var s) {
    const Tensor<T>&vx = value(x), &vs = value(s);
    require(vx.rank() == 4 && vs.rank() == 2 && vs.shape[0] == vx.shape[0] &&
                vs.shape[1] == vx.shape[1],
            "channel_scale: shape mismatch");
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    Tensor<T> out = vx;
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++) {
        T v = vs.at2(b, c);
        T* p = &out.data[static_cast<size_t>((b * C + c) * S)];
        for (idx i = 0; i < S; i++) p[i] *= v;
      }
    return binary(std::move(out), x, s, [this, x, s, B, C, S](const Tensor<T>& g) {
      if (needs(x)) {
        Tensor<T> gx = g;
        const Tensor<T>& vs2 = value(s);
        for (idx b = 0; b < B; b++)
          for (idx c = 0; c < C; c++) {
            T v = vs2.at2(b, c);
            T* p = &gx.data[static_cast<size_t>((b * C + c) * S)];
            for (idx i = 0; i < S; i++) p[i] *= v;
          }
        accumulate(x, std::move(gx));
      }
      if (needs(s)) {
        Tensor<T> gs(Shape{B, C});
        const Tensor<T>& vx2 = value(x);
        for (idx b = 0; b < B; b++)
          for (idx c = 0; c < C; c++) {
            T acc = 0;
            const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
            const T* xp = &vx2.data[static_cast<size_t>((b * C + c) * S)];
            for (idx i = 0; i < S; i++) acc += gp[i] * xp[i];
            gs.at2(b, c) = acc;
          }
        accumulate(s, std::move(gs));
      }
    });
  }

  Var channel_mean(Var x) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "channel_mean: rank-4 input required");
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    Tensor<T> out(Shape{C});
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++) {
        const T* p = &vx.data[static_cast<size_t>((b * C + c) * S)];
        T s = 0;
        for (idx i = 0; i < S; i++) s += p[i];
        out[c] += s;
      }
    for (idx c = 0; c < C; c++) out[c] /= static_cast<T>(B * S);
    return unary(std::move(out), x, [this, x, B, C, S](const Tensor<T>& g) {
      Tensor<T> gx(value(x).shape);
      for (idx b = 0; b < B; b++)
        for (idx c = 0; c < C; c++) {
          T v = g[c] / static_cast<T>(B * S);
          T* p = &gx.data[static_cast<size_t>((b * C + c) * S)];
          for (idx i = 0; i < S; i++) p[i] += v;
        }
      accumulate(x, std::move(gx));
    });
  }

  enum class ChanOp { Add, Sub, Mul };

  // x [B,C,H,W] combined with per-channel vector v [C].
  Var channel_affine(Var x, Var v, ChanOp op) {
    const Tensor<T>&vx = value(x), &vv = value(v);
    require(vx.rank() == 4 && vv.numel() == vx.shape[1], "channel_affine: shape mismatch");
    idx B = vx.shape[0], C = vx.shape[1], S = vx.shape[2] * vx.shape[3];
    Tensor<T> out = vx;
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++) {
        T* p = &out.data[static_cast<size_t>((b * C + c) * S)];
        T val = vv[c];
        for (idx i = 0; i < S; i++)
          p[i] = op == ChanOp::Add ? p[i] + val : (op == ChanOp::Sub ? p[i] - val : p[i] * val);
      }
    return binary(std::move(out), x, v, [this, x, v, op, B, C, S](const Tensor<T>& g) {
      if (needs(x)) {
        if (op == ChanOp::Mul) {
          Tensor<T> gx = g;
          const Tensor<T>& vv2 = value(v);
          for (idx b = 0; b < B; b++)
            for (idx c = 0; c < C; c++) {
              T* p = &gx.data[static_cast<size_t>((b * C + c) * S)];
              for (idx i = 0; i < S; i++) p[i] *= vv2[c];
            }
          accumulate(x, std::move(gx));
        } else {
          accumulate(x, g);
        }
      }
      if (needs(v)) {
        Tensor<T> gv(Shape{value(v).numel()});
        const Tensor<T>& vx2 = value(x);
        for (idx b = 0; b < B; b++)
          for (idx c = 0; c < C; c++) {
            const T* gp = &g.data[static_cast<size_t>((b * C + c) * S)];
            const T* xp = &vx2.data[static_cast<size_t>((b * C + c) * S)];
            T acc = 0;
            if (op == ChanOp::Mul)
              for (idx i = 0; i < S; i++) acc += gp[i] * xp[i];
            else
              for (idx i = 0; i < S; i++) acc += gp[i];
            gv[c] += op == ChanOp::Sub ? -acc : acc;
          }
        accumulate(v, std::move(gv));
      }
    });
  }

  // ----- structural ops -----

  Var concat_lastdim(Var a, Var b) {
    const Tensor<T>&va = value(a), &vb = value(b);
    require(va.rank() == vb.rank(), "concat: rank mismatch");
    for (int i = 0; i + 1 < va.rank(); i++)
      require(va.shape[static_cast<size_t>(i)] == vb.shape[static_cast<size_t>(i)], "concat: shape mismatch");
    idx na = va.shape.back(), nb = vb.shape.back(), rows = va.numel() / na;
    Shape out_shape = va.shape;
    out_shape.back() = na + nb;
    Tensor<T> out(out_shape);
    for (idx r = 0; r < rows; r++) {
      std::copy_n(&va.data[static_cast<size_t>(r * na)], na, &out.data[static_cast<size_t>(r * (na + nb))]);
      std::copy_n(&vb.data[static_cast<size_t>(r * nb)], nb,
                  &out.data[static_cast<size_t>(r * (na + nb) + na)]);
    }
    return binary(std::move(out), a, b, [this, a, b, na, nb, rows](const Tensor<T>& g) {
      if (needs(a)) {
        Tensor<T> ga(value(a).shape);
        for (idx r = 0; r < rows; r++)
          std::copy_n(&g.data[static_cast<size_t>(r * (na + nb))], na, &ga.data[static_cast<size_t>(r * na)]);
        accumulate(a, std::move(ga));
      }
      if (needs(b)) {
        Tensor<T> gb(value(b).shape);
        for (idx r = 0; r < rows; r++)
          std::copy_n(&g.data[static_cast<size_t>(r * (na + nb) + na)], nb,
                      &gb.data[static_cast<size_t>(r * nb)]);
        accumulate(b, std::move(gb));
      }
    });
  }

  Var slice_lastdim(Var a, idx from, idx to) {
    const Tensor<T>& va = value(a);
    idx n = va.shape.back();
    require(0 <= from && from < to && to <= n, "slice: bad range");
    idx m = to - from, rows = va.numel() / n;
    Shape out_shape = va.shape;
    out_shape.back() = m;
    Tensor<T> out(out_shape);
    for (idx r = 0; r < rows; r++)
      std::copy_n(&va.data[static_cast<size_t>(r * n + from)], m, &out.data[static_cast<size_t>(r * m)]);
    return unary(std::move(out), a, [this, a, from, m, n, rows](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape);
      for (idx r = 0; r < rows; r++)
        for (idx j = 0; j < m; j++) ga[r * n + from + j] += g[r * m + j];
      accumulate(a, std::move(ga));
    });
  }

  Var stack_dim0(const std::vector<Var>& parts) {
    require(!parts.empty(), "stack: empty list");
    const Shape& s0 = value(parts[0]).shape;
    idx step = value(parts[0]).numel();
    Shape out_shape;
    out_shape.push_back(static_cast<idx>(parts.size()));
    out_shape.insert(out_shape.end(), s0.begin(), s0.end());
    Tensor<T> out(out_shape);
    bool any = false;
    for (size_t i = 0; i < parts.size(); i++) {
      require(value(parts[i]).shape == s0, "stack: shape mismatch");
      std::copy_n(value(parts[i]).data.data(), step, &out.data[i * static_cast<size_t>(step)]);
      any = any || needs(parts[i]);
    }
    Var r = push(std::move(out), any, parts);
    auto parts_copy = std::make_shared<std::vector<Var>>(parts);
    set_backward(r, [this, parts_copy, step](const Tensor<T>& g) {
      for (size_t i = 0; i < parts_copy->size(); i++) {
        Var p = (*parts_copy)[i];
        if (!needs(p)) continue;
        Tensor<T> gp(value(p).shape);
        std::copy_n(&g.data[i * static_cast<size_t>(step)], step, gp.data.data());
        accumulate(p, std::move(gp));
      }
    });
    return r;
  }

  Var reverse_dim0(Var a) {
    const Tensor<T>& va = value(a);
    idx n0 = va.shape[0], step = va.numel() / n0;
    Tensor<T> out(va.shape);
    for (idx i = 0; i < n0; i++)
      std::copy_n(&va.data[static_cast<size_t>(i * step)], step,
                  &out.data[static_cast<size_t>((n0 - 1 - i) * step)]);
    return unary(std::move(out), a, [this, a, n0, step](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape);
      for (idx i = 0; i < n0; i++)
        std::copy_n(&g.data[static_cast<size_t>(i * step)], step,
                    &ga.data[static_cast<size_t>((n0 - 1 - i) * step)]);
      accumulate(a, std::move(ga));
    });
  }

  // x [N,...] -> [...] for index i along dim 0.
  Var pick_dim0(Var a, idx i) {
    const Tensor<T>& va = value(a);
    require(va.rank() >= 2 && i >= 0 && i < va.shape[0], "pick_dim0: index out of range");
    idx step = va.numel() / va.shape[0];
    Shape out_shape(va.shape.begin() + 1, va.shape.end());
    Tensor<T> out(out_shape);
    std::copy_n(&va.data[static_cast<size_t>(i * step)], step, out.data.data());
    return unary(std::move(out), a, [this, a, i, step](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape);
      std::copy_n(g.data.data(), step, &ga.data[static_cast<size_t>(i * step)]);
      accumulate(a, std::move(ga));
    });
  }

  // x [T,B,...] -> [T,...] for batch item b.
  Var pick_batch(Var a, idx b) {
    const Tensor<T>& va = value(a);
    require(va.rank() >= 2 && b >= 0 && b < va.shape[1], "pick_batch: index out of range");
    idx Tn = va.shape[0], Bn = va.shape[1], step = va.numel() / (Tn * Bn);
    Shape out_shape;
    out_shape.push_back(Tn);
    for (size_t i = 2; i < va.shape.size(); i++) out_shape.push_back(va.shape[i]);
    Tensor<T> out(out_shape);
    for (idx t = 0; t < Tn; t++)
      std::copy_n(&va.data[static_cast<size_t>((t * Bn + b) * step)], step,
                  &out.data[static_cast<size_t>(t * step)]);
    return unary(std::move(out), a, [this, a, b, Tn, Bn, step](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape);
      for (idx t = 0; t < Tn; t++)
        std::copy_n(&g.data[static_cast<size_t>(t * step)], step,
                    &ga.data[static_cast<size_t>((t * Bn + b) * step)]);
      accumulate(a, std::move(ga));
    });
  }

  // CNN -> sequence bridge: [B,C,H,W] -> [W,B,C*H], one feature column per
  // horizontal position.
  Var collapse_to_sequence(Var x) {
    const Tensor<T>& vx = value(x);
    require(vx.rank() == 4, "collapse_to_sequence: rank-4 input required");
    idx B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    Tensor<T> out(Shape{W, B, C * H});
    for (idx b = 0; b < B; b++)
      for (idx c = 0; c < C; c++)
        for (idx h = 0; h < H; h++)
          for (idx w = 0; w < W; w++) out.at3(w, b, c * H + h) = vx.at4(b, c, h, w);
    return unary(std::move(out), x, [this, x, B, C, H, W](const Tensor<T>& g) {
      Tensor<T> gx(value(x).shape);
      for (idx b = 0; b < B; b++)
        for (idx c = 0; c < C; c++)
          for (idx h = 0; h < H; h++)
            for (idx w = 0; w < W; w++) gx.at4(b, c, h, w) += g.at3(w, b, c * H + h);
      accumulate(x, std::move(gx));
    });
  }

  // ----- attention primitives -----

  // q [T,B,D], k [S,B,D] -> scaled per-head dot products [B,heads,T,S].
  // Heads are gathered into contiguous panels and multiplied with GEMMs.
  Var attn_scores(Var q, Var k, idx heads, double scl) {
    const Tensor<T>&vq = value(q), &vk = value(k);
    require(vq.rank() == 3 && vk.rank() == 3 && vq.shape[1] == vk.shape[1] &&
                vq.shape[2] == vk.shape[2],
            "attn_scores: shape mismatch");
    idx Tn = vq.shape[0], S = vk.shape[0], B = vq.shape[1], D = vq.shape[2];
    require(D % heads == 0, "attn_scores: width not divisible by head count");
    idx dk = D / heads;
    Tensor<T> out(Shape{B, heads, Tn, S});
    Tensor<T> qp(Shape{Tn, dk}), kp(Shape{S, dk});
    for (idx b = 0; b < B; b++)
      for (idx h = 0; h < heads; h++) {
        for (idx t = 0; t < Tn; t++)
          std::copy_n(&vq.data[static_cast<size_t>((t * B + b) * D + h * dk)], dk,
                      &qp.data[static_cast<size_t>(t * dk)]);
        for (idx s2 = 0; s2 < S; s2++)
          std::copy_n(&vk.data[static_cast<size_t>((s2 * B + b) * D + h * dk)], dk,
                      &kp.data[static_cast<size_t>(s2 * dk)]);
        MapM(&out.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S).noalias() =
            (CMapM(qp.data.data(), Tn, dk) * CMapM(kp.data.data(), S, dk).transpose()) *
            static_cast<T>(scl);
      }
    return binary(std::move(out), q, k, [this, q, k, heads, scl, Tn, S, B, D](const Tensor<T>& g) {
      idx dk = D / heads;
      Tensor<T> panel(Shape{std::max(Tn, S), dk});
      if (needs(q)) {
        Tensor<T> gq(value(q).shape);
        const Tensor<T>& vk2 = value(k);
        Tensor<T> kp(Shape{S, dk});
        for (idx b = 0; b < B; b++)
          for (idx h = 0; h < heads; h++) {
            for (idx s2 = 0; s2 < S; s2++)
              std::copy_n(&vk2.data[static_cast<size_t>((s2 * B + b) * D + h * dk)], dk,
                          &kp.data[static_cast<size_t>(s2 * dk)]);
            MapM(panel.data.data(), Tn, dk).noalias() =
                (CMapM(&g.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S) *
                 CMapM(kp.data.data(), S, dk)) *
                static_cast<T>(scl);
            for (idx t = 0; t < Tn; t++) {
              T* dst = &gq.data[static_cast<size_t>((t * B + b) * D + h * dk)];
              const T* src = &panel.data[static_cast<size_t>(t * dk)];
              for (idx j = 0; j < dk; j++) dst[j] += src[j];
            }
          }
        accumulate(q, std::move(gq));
      }
      if (needs(k)) {
        Tensor<T> gk(value(k).shape);
        const Tensor<T>& vq2 = value(q);
        Tensor<T> qp(Shape{Tn, dk});
        for (idx b = 0; b < B; b++)
          for (idx h = 0; h < heads; h++) {
            for (idx t = 0; t < Tn; t++)
              std::copy_n(&vq2.data[static_cast<size_t>((t * B + b) * D + h * dk)], dk,
                          &qp.data[static_cast<size_t>(t * dk)]);
            MapM(panel.data.data(), S, dk).noalias() =
                (CMapM(&g.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S).transpose() *
                 CMapM(qp.data.data(), Tn, dk)) *
                static_cast<T>(scl);
            for (idx s2 = 0; s2 < S; s2++) {
              T* dst = &gk.data[static_cast<size_t>((s2 * B + b) * D + h * dk)];
              const T* src = &panel.data[static_cast<size_t>(s2 * dk)];
              for (idx j = 0; j < dk; j++) dst[j] += src[j];
            }
          }
        accumulate(k, std::move(gk));
      }
    });
  }

  // w [B,heads,T,S] applied to v [S,B,D] -> [T,B,D].
  Var attn_combine(Var w, Var v) {
    const Tensor<T>&vw = value(w), &vv = value(v);
    require(vw.rank() == 4 && vv.rank() == 3, "attn_combine: rank mismatch");
    idx B = vw.shape[0], heads = vw.shape[1], Tn = vw.shape[2], S = vw.shape[3];
    idx D = vv.shape[2];
    require(vv.shape[0] == S && vv.shape[1] == B && D % heads == 0, "attn_combine: shape mismatch");
    idx dk = D / heads;
    Tensor<T> out(Shape{Tn, B, D});
    Tensor<T> vp(Shape{S, dk}), op(Shape{Tn, dk});
    for (idx b = 0; b < B; b++)
      for (idx h = 0; h < heads; h++) {
        for (idx s2 = 0; s2 < S; s2++)
          std::copy_n(&vv.data[static_cast<size_t>((s2 * B + b) * D + h * dk)], dk,
                      &vp.data[static_cast<size_t>(s2 * dk)]);
        MapM(op.data.data(), Tn, dk).noalias() =
            CMapM(&vw.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S) *
            CMapM(vp.data.data(), S, dk);
        for (idx t = 0; t < Tn; t++)
          std::copy_n(&op.data[static_cast<size_t>(t * dk)], dk,
                      &out.data[static_cast<size_t>((t * B + b) * D + h * dk)]);
      }
    return binary(std::move(out), w, v, [this, w, v, B, heads, Tn, S, D](const Tensor<T>& g) {
      idx dk = D / heads;
      if (needs(w)) {
        Tensor<T> gw(value(w).shape);
        const Tensor<T>& vv2 = value(v);
        Tensor<T> gp(Shape{Tn, dk}), vp(Shape{S, dk});
        for (idx b = 0; b < B; b++)
          for (idx h = 0; h < heads; h++) {
            for (idx t = 0; t < Tn; t++)
              std::copy_n(&g.data[static_cast<size_t>((t * B + b) * D + h * dk)], dk,
                          &gp.data[static_cast<size_t>(t * dk)]);
            for (idx s2 = 0; s2 < S; s2++)
              std::copy_n(&vv2.data[static_cast<size_t>((s2 * B + b) * D + h * dk)], dk,
                          &vp.data[static_cast<size_t>(s2 * dk)]);
            MapM(&gw.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S).noalias() =
                CMapM(gp.data.data(), Tn, dk) * CMapM(vp.data.data(), S, dk).transpose();
          }
        accumulate(w, std::move(gw));
      }
      if (needs(v)) {
        Tensor<T> gv(value(v).shape);
        const Tensor<T>& vw2 = value(w);
        Tensor<T> gp(Shape{Tn, dk}), acc(Shape{S, dk});
        for (idx b = 0; b < B; b++)
          for (idx h = 0; h < heads; h++) {
            for (idx t = 0; t < Tn; t++)
              std::copy_n(&g.data[static_cast<size_t>((t * B + b) * D + h * dk)], dk,
                          &gp.data[static_cast<size_t>(t * dk)]);
            MapM(acc.data.data(), S, dk).noalias() =
                CMapM(&vw2.data[static_cast<size_t>(((b * heads + h) * Tn) * S)], Tn, S).transpose() *
                CMapM(gp.data.data(), Tn, dk);
            for (idx s2 = 0; s2 < S; s2++) {
              T* dst = &gv.data[static_cast<size_t>((s2 * B + b) * D + h * dk)];
              const T* src = &acc.data[static_cast<size_t>(s2 * dk)];
              for (idx j = 0; j < dk; j++) dst[j] += src[j];
            }
          }
        accumulate(v, std::move(gv));
      }
    });
  }

  // Piecewise-linear resampling along dim 0; endpoints map to endpoints.
  Var interpolate_dim0(Var a, idx target_len) {
    const Tensor<T>& va = value(a);
    require(va.rank() >= 1 && va.shape[0] >= 1, "interpolate: empty input");
    require(target_len >= 1, "interpolate: target length must be >= 1");
    idx Ts = va.shape[0], step = va.numel() / Ts;
    Shape out_shape = va.shape;
    out_shape[0] = target_len;
    Tensor<T> out(out_shape);
    auto lo_idx = std::make_shared<std::vector<idx>>(static_cast<size_t>(target_len));
    auto frac = std::make_shared<std::vector<T>>(static_cast<size_t>(target_len));
    for (idx j = 0; j < target_len; j++) {
      double pos = (target_len == 1 || Ts == 1)
                       ? 0.0
                       : static_cast<double>(j) * static_cast<double>(Ts - 1) /
                             static_cast<double>(target_len - 1);
      idx lo = std::min<idx>(static_cast<idx>(pos), Ts - 1);
      T f = static_cast<T>(pos - static_cast<double>(lo));
      (*lo_idx)[static_cast<size_t>(j)] = lo;
      (*frac)[static_cast<size_t>(j)] = f;
      idx hi = std::min<idx>(lo + 1, Ts - 1);
      for (idx s = 0; s < step; s++)
        out[j * step + s] = (T(1) - f) * va[lo * step + s] + f * va[hi * step + s];
    }
    return unary(std::move(out), a, [this, a, lo_idx, frac, target_len, Ts, step](const Tensor<T>& g) {
      Tensor<T> ga(value(a).shape);
      for (idx j = 0; j < target_len; j++) {
        idx lo = (*lo_idx)[static_cast<size_t>(j)];
        idx hi = std::min<idx>(lo + 1, Ts - 1);
        T f = (*frac)[static_cast<size_t>(j)];
        for (idx s = 0; s < step; s++) {
          ga[lo * step + s] += (T(1) - f) * g[j * step + s];
          ga[hi * step + s] += f * g[j * step + s];
        }
      }
      accumulate(a, std::move(ga));
    });
  }

  // Fused LSTM cell update: gate pre-activations [B,4H] (order i,f,o,c) and
  // the previous cell state [B,H] produce [2,B,H] holding the new h and c.
  // One node instead of a dozen keeps the time loop off the allocator.
  Var lstm_gates(Var gates_pre, Var c_prev) {
    const Tensor<T>&vg = value(gates_pre), &vc = value(c_prev);
    require(vg.rank() == 2 && vc.rank() == 2 && vg.shape[0] == vc.shape[0] &&
                vg.shape[1] == 4 * vc.shape[1],
            "lstm_gates: expected [B,4H] gates and [B,H] cell state");
    idx B = vc.shape[0], H = vc.shape[1];
    auto acts = std::make_shared<Tensor<T>>(Shape{B, 4 * H});  // post-nonlinearity gates
    auto tanh_c = std::make_shared<Tensor<T>>(Shape{B, H});
    Tensor<T> out(Shape{2, B, H});
    for (idx b = 0; b < B; b++)
      for (idx j = 0; j < H; j++) {
        T gi = stable_sigmoid(vg.at2(b, j));
        T gf = stable_sigmoid(vg.at2(b, H + j));
        T go = stable_sigmoid(vg.at2(b, 2 * H + j));
        T gc = std::tanh(vg.at2(b, 3 * H + j));
        acts->at2(b, j) = gi;
        acts->at2(b, H + j) = gf;
        acts->at2(b, 2 * H + j) = go;
        acts->at2(b, 3 * H + j) = gc;
        T c = gf * vc.at2(b, j) + gi * gc;
        T tc = std::tanh(c);
        tanh_c->at2(b, j) = tc;
        out.at3(1, b, j) = c;
        out.at3(0, b, j) = go * tc;
      }
    return binary(std::move(out), gates_pre, c_prev,
                  [this, gates_pre, c_prev, acts, tanh_c, B, H](const Tensor<T>& g) {
      const Tensor<T>& vc = value(c_prev);
      Tensor<T> gg(Shape{B, 4 * H});
      Tensor<T> gc_prev(Shape{B, H});
      for (idx b = 0; b < B; b++)
        for (idx j = 0; j < H; j++) {
          T gi = acts->at2(b, j), gf = acts->at2(b, H + j);
          T go = acts->at2(b, 2 * H + j), gcand = acts->at2(b, 3 * H + j);
          T tc = tanh_c->at2(b, j);
          T gh = g.at3(0, b, j), gcell = g.at3(1, b, j);
          T dc = gcell + gh * go * (T(1) - tc * tc);
          gg.at2(b, j) = dc * gcand * gi * (T(1) - gi);              // d pre_i
          gg.at2(b, H + j) = dc * vc.at2(b, j) * gf * (T(1) - gf);   // d pre_f
          gg.at2(b, 2 * H + j) = gh * tc * go * (T(1) - go);         // d pre_o
          gg.at2(b, 3 * H + j) = dc * gi * (T(1) - gcand * gcand);   // d pre_c
          gc_prev.at2(b, j) = dc * gf;
        }
      accumulate(gates_pre, std::move(gg));
      accumulate(c_prev, std::move(gc_prev));
    });
  }

  // Escape hatch for ops with hand-derived backward rules (CTC).
  using CustomBackward = std::function<void(const Tensor<T>& grad_out, std::vector<Tensor<T>*>& input_grads)>;

  Var custom(const std::vector<Var>& inputs, Tensor<T> value_out, CustomBackward bw) {
    bool any = false;
    for (Var v : inputs) any = any || needs(v);
    Var r = push(std::move(value_out), any, inputs);
    auto ins = std::make_shared<std::vector<Var>>(inputs);
    auto fn = std::make_shared<CustomBackward>(std::move(bw));
    set_backward(r, [this, ins, fn, r](const Tensor<T>& g) {
      std::vector<Tensor<T>> buffers(ins->size());
      std::vector<Tensor<T>*> ptrs(ins->size(), nullptr);
      for (size_t i = 0; i < ins->size(); i++)
        if (needs((*ins)[i])) {
          buffers[i] = Tensor<T>(value((*ins)[i]).shape);
          ptrs[i] = &buffers[i];
        }
      (*fn)(g, ptrs);
      for (size_t i = 0; i < ins->size(); i++)
        if (ptrs[i]) accumulate((*ins)[i], buffers[i]);
    });
    return r;
  }

  bool needs(Var v) const { return nodes_[check(v)].needs_grad; }
  bool has_grad(Var v) const { return nodes_[check(v)].grad.numel() > 0; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::function<void()> backward;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;

  size_t check(Var v) const {
    require(v.valid() && static_cast<size_t>(v.id) < nodes_.size(), "invalid tape handle");
    return static_cast<size_t>(v.id);
  }

  Var push(Tensor<T> v, bool needs_grad, const std::vector<Var>& /*inputs*/) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<idx>(nodes_.size() - 1)};
  }

  void ensure_grad(idx id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.shape);
  }

  void accumulate(Var v, const Tensor<T>& g) {
    if (!needs(v)) return;
    Node& n = nodes_[static_cast<size_t>(v.id)];
    require(g.shape == n.value.shape, "gradient shape mismatch");
    if (n.grad.numel() == 0) {
      n.grad = g;
      return;
    }
    for (idx i = 0; i < g.numel(); i++) n.grad[i] += g[i];
  }

  // first consumer donates its buffer outright
  void accumulate(Var v, Tensor<T>&& g) {
    if (!needs(v)) return;
    Node& n = nodes_[static_cast<size_t>(v.id)];
    require(g.shape == n.value.shape, "gradient shape mismatch");
    if (n.grad.numel() == 0) {
      n.grad = std::move(g);
      return;
    }
    for (idx i = 0; i < g.numel(); i++) n.grad[i] += g[i];
  }

  template <typename Fn>
  Var unary(Tensor<T> out, Var a, Fn&& bw) {
    Var r = push(std::move(out), needs(a), {a});
    set_backward(r, std::forward<Fn>(bw));
    return r;
  }

  template <typename Fn>
  Var binary(Tensor<T> out, Var a, Var b, Fn&& bw) {
    Var r = push(std::move(out), needs(a) || needs(b), {a, b});
    set_backward(r, std::forward<Fn>(bw));
    return r;
  }

  template <typename Fn>
  void set_backward(Var r, Fn&& bw) {
    Node& n = nodes_[check(r)];
    if (!n.needs_grad) return;
    idx id = r.id;
    n.backward = [this, id, fn = std::forward<Fn>(bw)]() {
      Node& self = nodes_[static_cast<size_t>(id)];
      if (self.grad.numel() == 0) return;
      fn(self.grad);
    };
  }

  static T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
  }
};

// ---------------------------------------------------------------------------
// Finite-difference verification harness. `f` builds a scalar node from the
// given leaf on a fresh tape; the return value is the worst relative error
// between the tape gradient and central differences.
// ---------------------------------------------------------------------------

template <typename F>
double grad_check(F&& f, const Tensor<double>& x, double h = 1e-5) {
  Tensor<double> analytic;
  {
    Tape<double> tape;
    Var vx = tape.leaf(x);
    Var out = f(tape, vx);
    require(tape.value(out).numel() == 1, "grad_check requires a scalar-valued function");
    tape.backward(out);
    analytic = tape.grad(vx);
  }
  double worst = 0.0;
  for (idx i = 0; i < x.numel(); i++) {
    auto eval = [&](double delta) {
      Tensor<double> xp = x;
      xp[i] += delta;
      Tape<double> tape;
      Var vx = tape.leaf(xp, false);
      Var out = f(tape, vx);
      return tape.value(out)[0];
    };
    double fd = (eval(h) - eval(-h)) / (2.0 * h);
    double a = analytic[i];
    double rel = std::abs(a - fd) / std::max(1.0, std::abs(a));
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace htr
