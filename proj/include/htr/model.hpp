#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "htr/distill.hpp"
#include "htr/layers.hpp"

namespace htr {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  std::vector<idx> channels;  // output channels per CNN block
  idx lstm_hidden = 128;      // per-direction cell size
  idx lstm_layers = 4;
  idx heads = 2;
  idx charset_size = 104;  // V, including blank
  idx img_h = 68, img_w = 864;
  idx aux_tap_layer = 2;  // aux head reads this BiLSTM layer's merged output (1-based)
  idx se_reduction = 4;

  idx blocks() const { return static_cast<idx>(channels.size()); }

  // Blocks 1-2 pool 2x2; the rest pool 2x1 to keep time resolution.
  std::pair<idx, idx> pool_for_block(idx l) const { return l < 2 ? std::pair<idx, idx>{2, 2} : std::pair<idx, idx>{2, 1}; }

  idx frames_for_width(idx w) const {
    for (idx l = 0; l < blocks(); l++) w = (w + pool_for_block(l).second - 1) / pool_for_block(l).second;
    return w;
  }

  idx feature_height() const {
    idx h = img_h;
    for (idx l = 0; l < blocks(); l++) h = (h + pool_for_block(l).first - 1) / pool_for_block(l).first;
    return h;
  }

  idx bridge_dim() const { return channels.back() * feature_height(); }

  idx se_mid(idx l) const { return std::max<idx>(1, channels[static_cast<size_t>(l)] / se_reduction); }

  // Paper-shape presets. The teacher leans on depth at constant width; the
  // student trades its two missing blocks for faster channel growth so both
  // models hand comparable top-level features to the recurrent stack.
  static ModelConfig teacher(idx V, idx h = 68, idx w = 864) {
    ModelConfig c;
    c.channels = {32, 32, 32, 32, 32};
    c.lstm_hidden = 128;
    c.lstm_layers = 4;
    c.heads = 2;
    c.charset_size = V;
    c.img_h = h;
    c.img_w = w;
    return c;
  }
  static ModelConfig student(idx V, idx h = 68, idx w = 864) {
    ModelConfig c;
    c.channels = {16, 32, 64};
    c.lstm_hidden = 64;
    c.lstm_layers = 4;
    c.heads = 1;
    c.charset_size = V;
    c.img_h = h;
    c.img_w = w;
    return c;
  }
  // Desk-scale presets for the toy experiments.
  static ModelConfig teacher_toy(idx V, idx h = 32, idx w = 256) {
    ModelConfig c;
    c.channels = {16, 24, 32};
    c.lstm_hidden = 64;
    c.lstm_layers = 2;
    c.heads = 2;
    c.charset_size = V;
    c.img_h = h;
    c.img_w = w;
    c.aux_tap_layer = 1;
    return c;
  }
  static ModelConfig student_toy(idx V, idx h = 32, idx w = 256) {
    ModelConfig c;
    c.channels = {8, 16};
    c.lstm_hidden = 32;
    c.lstm_layers = 2;
    c.heads = 1;
    c.charset_size = V;
    c.img_h = h;
    c.img_w = w;
    c.aux_tap_layer = 1;
    return c;
  }

  std::string canonical_text() const {
    std::string s = "channels=";
    for (size_t i = 0; i < channels.size(); i++) s += (i ? "," : "") + std::to_string(channels[i]);
    s += "\nlstm_hidden=" + std::to_string(lstm_hidden);
    s += "\nlstm_layers=" + std::to_string(lstm_layers);
    s += "\nheads=" + std::to_string(heads);
    s += "\ncharset_size=" + std::to_string(charset_size);
    s += "\nimg_h=" + std::to_string(img_h);
    s += "\nimg_w=" + std::to_string(img_w);
    s += "\naux_tap_layer=" + std::to_string(aux_tap_layer);
    s += "\nse_reduction=" + std::to_string(se_reduction);
    s += "\n";
    return s;
  }
};

inline std::array<std::uint8_t, 32> sha256_bytes(const std::string& data) {
  std::array<std::uint8_t, 32> out{};
  unsigned int len = static_cast<unsigned int>(out.size());
  EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr);
  return out;
}

inline std::array<std::uint8_t, 32> config_fingerprint(const ModelConfig& c) {
  return sha256_bytes(c.canonical_text());
}

// ---------------------------------------------------------------------------
// Parameter enumeration: the single source of truth for names and shapes.
// `trainable == false` marks persisted state outside the optimizer
// (batch-norm running statistics).
// ---------------------------------------------------------------------------

template <typename Fn>
void for_each_param(const ModelConfig& c, Fn&& fn) {
  idx in = 1;
  for (idx l = 0; l < c.blocks(); l++) {
    std::string p = "cnn" + std::to_string(l) + ".";
    idx ch = c.channels[static_cast<size_t>(l)], mid = c.se_mid(l);
    fn(p + "conv.w", Shape{ch, in, 3, 3}, true);
    fn(p + "conv.b", Shape{ch}, true);
    fn(p + "gate.w", Shape{ch, in, 3, 3}, true);
    fn(p + "gate.b", Shape{ch}, true);
    fn(p + "bn.scale", Shape{ch}, true);
    fn(p + "bn.shift", Shape{ch}, true);
    fn(p + "bn.running_mean", Shape{ch}, false);
    fn(p + "bn.running_var", Shape{ch}, false);
    fn(p + "se.w1", Shape{ch, mid}, true);
    fn(p + "se.b1", Shape{mid}, true);
    fn(p + "se.w2", Shape{mid, ch}, true);
    fn(p + "se.b2", Shape{ch}, true);
    in = ch;
  }
  idx H = c.lstm_hidden;
  for (idx l = 0; l < c.lstm_layers; l++) {
    idx in_d = l == 0 ? c.bridge_dim() : H;
    for (const char* dir : {"fwd", "bwd"}) {
      std::string p = "lstm" + std::to_string(l) + "." + dir + ".";
      for (const char* g : {"i", "f", "o", "c"}) {
        fn(p + "w_" + g, Shape{H + in_d, H}, true);
        fn(p + "b_" + g, Shape{H}, true);
      }
    }
    std::string p = "lstm" + std::to_string(l) + ".merge.";
    fn(p + "w", Shape{2 * H, H}, true);
    fn(p + "b", Shape{H}, true);
  }
  for (const char* nm : {"q", "k", "v", "o", "pq", "pk", "pv"}) {
    fn(std::string("attn.") + nm + ".w", Shape{H, H}, true);
    fn(std::string("attn.") + nm + ".b", Shape{H}, true);
  }
  fn("attn.fuse.w", Shape{2 * H, H}, true);
  fn("attn.fuse.b", Shape{H}, true);
  fn("attn.ln.gain", Shape{H}, true);
  fn("attn.ln.bias", Shape{H}, true);
  fn("head.w", Shape{H, c.charset_size}, true);
  fn("head.b", Shape{c.charset_size}, true);
  fn("aux.w", Shape{H, c.charset_size}, true);
  fn("aux.b", Shape{c.charset_size}, true);
}

// Exact count of trainable scalar parameters.
inline idx param_count(const ModelConfig& c) {
  idx total = 0;
  for_each_param(c, [&](const std::string&, const Shape& s, bool trainable) {
    if (trainable) total += numel_of(s);
  });
  return total;
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

template <typename T>
struct ParameterStore {
  std::map<std::string, Tensor<T>> tensors;
  ModelConfig config;

  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("parameter store: missing tensor '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail("parameter store: missing tensor '" + name + "'");
    return it->second;
  }
};

namespace detail {

template <typename T>
Tensor<T> glorot_uniform(const Shape& s, idx fan_in, idx fan_out, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  return rand_uniform<T>(s, rng, -limit, limit);
}

// Orthogonal square matrix from the QR of a Gaussian sample, with the usual
// sign fix for determinism.
template <typename T>
Tensor<T> orthogonal(idx n, Rng& rng) {
  Eigen::MatrixXd m(n, n);
  for (idx i = 0; i < n; i++)
    for (idx j = 0; j < n; j++) m(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(m);
  Eigen::MatrixXd q = qr.householderQ();
  Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (idx j = 0; j < n; j++)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  Tensor<T> out(Shape{n, n});
  for (idx i = 0; i < n; i++)
    for (idx j = 0; j < n; j++) out.at2(i, j) = static_cast<T>(q(i, j));
  return out;
}

}  // namespace detail

// Glorot-uniform projections and convolutions, orthogonal recurrent blocks,
// forget-gate bias 1.
template <typename T>
ParameterStore<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  ParameterStore<T> store;
  store.config = c;
  for_each_param(c, [&](const std::string& name, const Shape& s, bool trainable) {
    Rng rng(hash_mix(seed, std::hash<std::string>{}(name)));
    Tensor<T> t;
    if (!trainable) {
      t = Tensor<T>(s, name.find("running_var") != std::string::npos ? T(1) : T(0));
    } else if (name.find("bn.scale") != std::string::npos ||
               name.find("ln.gain") != std::string::npos) {
      t = Tensor<T>(s, T(1));
    } else if (name.find(".b") != std::string::npos && s.size() == 1) {
      t = Tensor<T>(s, name.find(".b_f") != std::string::npos ? T(1) : T(0));
    } else if (name.find("ln.bias") != std::string::npos || name.find("bn.shift") != std::string::npos) {
      t = Tensor<T>(s, T(0));
    } else if (s.size() == 4) {  // conv kernels
      idx fan_in = s[1] * s[2] * s[3], fan_out = s[0] * s[2] * s[3];
      t = detail::glorot_uniform<T>(s, fan_in, fan_out, rng);
    } else if (name.find("lstm") == 0 && name.find(".w_") != std::string::npos) {
      // recurrent rows orthogonal, input rows Glorot
      idx H = s[1], in_d = s[0] - H;
      t = Tensor<T>(s);
      Tensor<T> rec = detail::orthogonal<T>(H, rng);
      for (idx i = 0; i < H; i++)
        for (idx j = 0; j < H; j++) t.at2(i, j) = rec.at2(i, j);
      Tensor<T> inp = detail::glorot_uniform<T>(Shape{in_d, H}, in_d, H, rng);
      for (idx i = 0; i < in_d; i++)
        for (idx j = 0; j < H; j++) t.at2(H + i, j) = inp.at2(i, j);
    } else {
      t = detail::glorot_uniform<T>(s, s[0], s[s.size() - 1], rng);
    }
    store.tensors.emplace(name, std::move(t));
  });
  return store;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <typename T>
class ParamBinder {
 public:
  ParamBinder(Tape<T>& tape, ParameterStore<T>& store, bool trainable)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto ov = overrides_.find(name);
    Var v = ov != overrides_.end()
                ? ov->second
                : (trainable_ ? tape_->leaf(store_->at(name)) : tape_->constant(store_->at(name)));
    bound_[name] = v;
    return v;
  }

  void set_override(const std::string& name, Var v) { overrides_[name] = v; }
  Tensor<T>& raw(const std::string& name) { return store_->at(name); }
  const std::map<std::string, Var>& bound() const { return bound_; }

  // Gradients for every bound trainable tensor, keyed by name.
  std::map<std::string, Tensor<T>> collect_grads() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, var] : bound_)
      if (tape_->needs(var) && tape_->has_grad(var)) out[name] = tape_->grad(var);
    return out;
  }

 private:
  Tape<T>* tape_;
  ParameterStore<T>* store_;
  bool trainable_;
  std::map<std::string, Var> bound_;
  std::map<std::string, Var> overrides_;
};

template <typename T>
struct ForwardResult {
  Var logits;                  // [T,B,V]
  Var aux_logits;              // [T,B,V]
  Tensor<T> mha_weights;       // [B,heads,T,T]
  Tensor<T> proxima_weights;   // [B,1,T,T]
};

// CNN blocks -> height collapse -> BiLSTM stack with merge projections ->
// combined attention -> CTC head; the aux head taps the configured BiLSTM
// layer's merged output.
template <typename T>
ForwardResult<T> model_forward(Tape<T>& tape, const ModelConfig& cfg, ParamBinder<T>& bind,
                               Var images, bool training) {
  const Tensor<T>& vi = tape.value(images);
  require(vi.rank() == 4 && vi.shape[1] == 1, "model_forward: images must be [B,1,H,W]");
  require(vi.shape[2] == cfg.img_h && vi.shape[3] == cfg.img_w,
          "model_forward: image size " + std::to_string(vi.shape[2]) + "x" +
              std::to_string(vi.shape[3]) + " does not match config " +
              std::to_string(cfg.img_h) + "x" + std::to_string(cfg.img_w));

  Var x = images;
  for (idx l = 0; l < cfg.blocks(); l++) {
    std::string p = "cnn" + std::to_string(l) + ".";
    CnnBlockParams<T> cp;
    cp.conv_w = bind(p + "conv.w");
    cp.conv_b = bind(p + "conv.b");
    cp.gate_w = bind(p + "gate.w");
    cp.gate_b = bind(p + "gate.b");
    cp.bn_scale = bind(p + "bn.scale");
    cp.bn_shift = bind(p + "bn.shift");
    cp.bn_running_mean = &bind.raw(p + "bn.running_mean");
    cp.bn_running_var = &bind.raw(p + "bn.running_var");
    cp.se_w1 = bind(p + "se.w1");
    cp.se_b1 = bind(p + "se.b1");
    cp.se_w2 = bind(p + "se.w2");
    cp.se_b2 = bind(p + "se.b2");
    auto [ph, pw] = cfg.pool_for_block(l);
    cp.pool_h = ph;
    cp.pool_w = pw;
    x = cnn_block(tape, x, cp, training);
  }

  Var seq = tape.collapse_to_sequence(x);  // [T,B,D]
  Var aux_in;
  for (idx l = 0; l < cfg.lstm_layers; l++) {
    std::string p = "lstm" + std::to_string(l) + ".";
    auto gates = [&](const char* dir) {
      LstmParams lp;
      std::string q = p + dir + ".";
      lp.w_i = bind(q + "w_i");
      lp.b_i = bind(q + "b_i");
      lp.w_f = bind(q + "w_f");
      lp.b_f = bind(q + "b_f");
      lp.w_o = bind(q + "w_o");
      lp.b_o = bind(q + "b_o");
      lp.w_c = bind(q + "w_c");
      lp.b_c = bind(q + "b_c");
      return lp;
    };
    Var bi = bilstm(tape, seq, gates("fwd"), gates("bwd"));
    seq = tape.linear(bi, bind(p + "merge.w"), bind(p + "merge.b"));
    if (l + 1 == cfg.aux_tap_layer) aux_in = seq;
  }
  if (!aux_in.valid()) aux_in = seq;

  AttentionParams ap;
  ap.heads = cfg.heads;
  ap.wq = bind("attn.q.w");
  ap.bq = bind("attn.q.b");
  ap.wk = bind("attn.k.w");
  ap.bk = bind("attn.k.b");
  ap.wv = bind("attn.v.w");
  ap.bv = bind("attn.v.b");
  ap.wo = bind("attn.o.w");
  ap.bo = bind("attn.o.b");
  ap.pq_w = bind("attn.pq.w");
  ap.pq_b = bind("attn.pq.b");
  ap.pk_w = bind("attn.pk.w");
  ap.pk_b = bind("attn.pk.b");
  ap.pv_w = bind("attn.pv.w");
  ap.pv_b = bind("attn.pv.b");
  ap.fuse_w = bind("attn.fuse.w");
  ap.fuse_b = bind("attn.fuse.b");
  ap.ln_gain = bind("attn.ln.gain");
  ap.ln_bias = bind("attn.ln.bias");
  CombinedAttentionOut<T> att = combined_attention(tape, seq, ap);

  ForwardResult<T> out;
  out.logits = tape.linear(att.out, bind("head.w"), bind("head.b"));
  out.aux_logits = tape.linear(aux_in, bind("aux.w"), bind("aux.b"));
  out.mha_weights = tape.value(att.mha_weights);
  out.proxima_weights = tape.value(att.proxima_weights);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "HTRJ", u32 version, u64 entry count, entries of
// {u16 name length, name, u8 dtype, u8 rank, u64 dims[rank], little-endian
// values}, then the 32-byte SHA-256 config fingerprint.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
constexpr std::uint8_t dtype_code() {
  return std::is_same_v<T, float> ? 0 : 1;
}

inline void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}
template <typename U>
void put_le(std::string& buf, U v) {
  for (size_t i = 0; i < sizeof(U); i++) buf += static_cast<char>((v >> (8 * i)) & 0xFF);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n, const char* what) {
    if (pos + n > buf.size()) fail(std::string("checkpoint: truncated file while reading ") + what);
  }
  template <typename U>
  U get_le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (size_t i = 0; i < sizeof(U); i++)
      v |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
  }
  std::string get_str(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path) {
  std::string buf;
  buf += "HTRJ";
  detail::put_le<std::uint32_t>(buf, 1);
  detail::put_le<std::uint64_t>(buf, store.tensors.size());
  for (const auto& [name, t] : store.tensors) {
    require(name.size() <= 0xFFFF, "checkpoint: name too long");
    detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    buf += static_cast<char>(detail::dtype_code<T>());
    buf += static_cast<char>(t.rank());
    for (idx d : t.shape) detail::put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(d));
    for (T v : t.data) {
      if constexpr (std::is_same_v<T, float>) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        detail::put_le<std::uint32_t>(buf, u);
      } else {
        std::uint64_t u;
        std::memcpy(&u, &v, 8);
        detail::put_le<std::uint64_t>(buf, u);
      }
    }
  }
  auto fp = config_fingerprint(store.config);
  detail::put_bytes(buf, fp.data(), fp.size());
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "save_checkpoint: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  require(f.good(), "save_checkpoint: write failed for " + path);
}

template <typename T>
ParameterStore<T> load_checkpoint(const std::string& path, const ModelConfig& expected) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(buf);
  require(r.get_str(4, "magic") == "HTRJ", "checkpoint: bad magic in " + path);
  std::uint32_t version = r.template get_le<std::uint32_t>("version");
  require(version == 1, "checkpoint: unsupported version " + std::to_string(version));
  std::uint64_t count = r.template get_le<std::uint64_t>("entry count");
  ParameterStore<T> store;
  store.config = expected;
  for (std::uint64_t i = 0; i < count; i++) {
    std::uint16_t nlen = r.template get_le<std::uint16_t>("name length");
    std::string name = r.get_str(nlen, "name");
    std::uint8_t dtype = static_cast<std::uint8_t>(r.get_str(1, "dtype")[0]);
    require(dtype == detail::dtype_code<T>(),
            "checkpoint: dtype mismatch for '" + name + "' (file has " +
                (dtype == 0 ? "fp32" : "fp64") + ")");
    std::uint8_t rank = static_cast<std::uint8_t>(r.get_str(1, "rank")[0]);
    Shape shape;
    for (int d = 0; d < rank; d++)
      shape.push_back(static_cast<idx>(r.template get_le<std::uint64_t>("dim")));
    Tensor<T> t(shape);
    for (idx k = 0; k < t.numel(); k++) {
      if constexpr (std::is_same_v<T, float>) {
        std::uint32_t u = r.template get_le<std::uint32_t>("values");
        float v;
        std::memcpy(&v, &u, 4);
        t[k] = v;
      } else {
        std::uint64_t u = r.template get_le<std::uint64_t>("values");
        double v;
        std::memcpy(&v, &u, 8);
        t[k] = v;
      }
    }
    store.tensors.emplace(std::move(name), std::move(t));
  }
  std::string fp = r.get_str(32, "fingerprint");
  auto want = config_fingerprint(expected);
  require(std::memcmp(fp.data(), want.data(), 32) == 0,
          "checkpoint: config fingerprint mismatch for " + path);
  require(r.pos == buf.size(), "checkpoint: trailing bytes in " + path);
  return store;
}

// ---------------------------------------------------------------------------
// Ensemble
// ---------------------------------------------------------------------------

// Arithmetic mean of log-softmaxed member lattices, time axes interpolated
// to the first member's length.
template <typename T>
Tensor<T> ensemble_logits(const std::vector<Tensor<T>>& members) {
  require(!members.empty(), "ensemble_logits: need at least one member");
  idx Tn = members[0].shape[0], V = members[0].shape[1];
  Tensor<T> acc(Shape{Tn, V});
  for (const Tensor<T>& m : members) {
    require(m.rank() == 2 && m.shape[1] == V, "ensemble_logits: vocabulary mismatch");
    Tensor<T> zi = interpolate_logits(m, Tn);
    // log-softmax rows
    for (idx t = 0; t < Tn; t++) {
      double mx = -std::numeric_limits<double>::infinity();
      for (idx v = 0; v < V; v++) mx = std::max(mx, static_cast<double>(zi.at2(t, v)));
      double s = 0;
      for (idx v = 0; v < V; v++) s += std::exp(static_cast<double>(zi.at2(t, v)) - mx);
      double lse = mx + std::log(s);
      for (idx v = 0; v < V; v++)
        acc.at2(t, v) += static_cast<T>((static_cast<double>(zi.at2(t, v)) - lse));
    }
  }
  for (idx i = 0; i < acc.numel(); i++) acc[i] /= static_cast<T>(members.size());
  return acc;
}

}  // namespace htr
