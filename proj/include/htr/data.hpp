#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "htr/font5x7.hpp"
#include "htr/image.hpp"
#include "htr/tensor.hpp"

namespace htr {

// ----- UTF-8 -----

inline std::vector<char32_t> utf8_decode(const std::string& s) {
  std::vector<char32_t> out;
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    char32_t cp = 0;
    int extra = 0;
    if (c < 0x80) {
      cp = c;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1F;
      extra = 1;
    } else if ((c >> 4) == 0xE) {
      cp = c & 0x0F;
      extra = 2;
    } else if ((c >> 3) == 0x1E) {
      cp = c & 0x07;
      extra = 3;
    } else {
      fail("utf8_decode: invalid lead byte");
    }
    require(i + static_cast<size_t>(extra) < s.size(), "utf8_decode: truncated sequence");
    for (int k = 0; k < extra; k++) {
      unsigned char cc = static_cast<unsigned char>(s[i + 1 + static_cast<size_t>(k)]);
      require((cc >> 6) == 0x2, "utf8_decode: invalid continuation byte");
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += 1 + static_cast<size_t>(extra);
  }
  return out;
}

inline std::string utf8_encode_char(char32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

inline std::string utf8_encode(const std::vector<char32_t>& cps) {
  std::string out;
  for (char32_t c : cps) out += utf8_encode_char(c);
  return out;
}

// ----- class balancing -----

// w_c = max(1, mean_freq / (eps + f_c)), capped so zero-frequency characters
// cannot dominate the sampler.
inline std::vector<double> class_weights(const std::vector<double>& freqs, double eps = 1e-8,
                                         double cap = 100.0) {
  double mean = 0;
  for (double f : freqs) {
    require(f >= 0, "class_weights: negative frequency");
    mean += f;
  }
  mean /= freqs.empty() ? 1.0 : static_cast<double>(freqs.size());
  std::vector<double> w(freqs.size());
  for (size_t i = 0; i < freqs.size(); i++)
    w[i] = std::min(cap, std::max(1.0, mean / (eps + freqs[i])));
  return w;
}

// ----- charset -----

// Ordered character vocabulary. Blank is id 0 and is not a character; ids
// run contiguously from 1 in code-point order.
struct Charset {
  std::vector<char32_t> chars;
  std::map<char32_t, int> ids;
  std::vector<double> freq;     // per char, corpus counts
  double mean_freq = 0.0;
  std::vector<double> weights;  // sampling weights w_c
  idx min_freq = 1;

  int V() const { return static_cast<int>(chars.size()) + 1; }
  bool contains(char32_t c) const { return ids.count(c) > 0; }

  int id_of(char32_t c) const {
    auto it = ids.find(c);
    if (it == ids.end()) fail("charset: unknown character '" + utf8_encode_char(c) + "'");
    return it->second;
  }

  char32_t char_of(int id) const {
    require(id >= 1 && id <= static_cast<int>(chars.size()), "charset: id out of range");
    return chars[static_cast<size_t>(id - 1)];
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    for (char32_t c : utf8_decode(text)) out.push_back(id_of(c));
    return out;
  }

  std::string detokenize(const std::vector<int>& token_ids) const {
    std::string out;
    for (int id : token_ids) out += utf8_encode_char(char_of(id));
    return out;
  }

  // Largest class weight over the characters of a sample (1 for empty text).
  double sample_weight(const std::string& text) const {
    double w = 1.0;
    for (char32_t c : utf8_decode(text)) w = std::max(w, weights[static_cast<size_t>(id_of(c) - 1)]);
    return w;
  }

  static Charset build(const std::vector<std::string>& texts, idx min_freq = 1, double eps = 1e-8,
                       double weight_cap = 100.0) {
    require(!texts.empty(), "charset: empty corpus");
    std::map<char32_t, double> counts;
    for (const std::string& t : texts)
      for (char32_t c : utf8_decode(t)) counts[c] += 1.0;
    Charset cs;
    cs.min_freq = min_freq;
    for (const auto& [c, n] : counts)
      if (n >= static_cast<double>(min_freq)) {
        cs.chars.push_back(c);  // map iteration is code-point ascending
        cs.freq.push_back(n);
      }
    require(!cs.chars.empty(), "charset: no characters survive the frequency cutoff");
    for (size_t i = 0; i < cs.chars.size(); i++) cs.ids[cs.chars[i]] = static_cast<int>(i) + 1;
    for (double f : cs.freq) cs.mean_freq += f;
    cs.mean_freq /= static_cast<double>(cs.freq.size());
    cs.weights = class_weights(cs.freq, eps, weight_cap);
    return cs;
  }
};

// Indices of texts fully covered by the charset; exclusions are counted.
inline std::vector<idx> filter_texts(const std::vector<std::string>& texts, const Charset& cs) {
  std::vector<idx> keep;
  for (size_t i = 0; i < texts.size(); i++) {
    bool ok = true;
    for (char32_t c : utf8_decode(texts[i]))
      if (!cs.contains(c)) {
        ok = false;
        break;
      }
    if (ok)
      keep.push_back(static_cast<idx>(i));
    else
      Warnings::global().bump("samples_excluded_by_charset");
  }
  return keep;
}

// ----- samples and manifests -----

struct SampleRecord {
  Image image;          // grayscale, values in [-1,1] once normalized
  std::string text;
  std::string source;   // dataset tag
  bool synthetic = false;
};

struct ManifestEntry {
  std::string image;  // path, relative to the manifest location
  std::string text;
  std::string source;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "read_manifest: cannot open " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    out.push_back({j.at("image").get<std::string>(), j.at("text").get<std::string>(),
                   j.value("source", std::string("default"))});
  }
  return out;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  require(f.good(), "write_manifest: cannot open " + path);
  for (const ManifestEntry& e : entries) {
    nlohmann::json j{{"image", e.image}, {"text", e.text}, {"source", e.source}};
    f << j.dump() << "\n";
  }
  require(f.good(), "write_manifest: write failed for " + path);
}

// Load every referenced PGM, resize to the model input and normalize.
inline std::vector<SampleRecord> load_samples(const std::string& manifest_path, idx h, idx w) {
  namespace fs = std::filesystem;
  fs::path base = fs::path(manifest_path).parent_path();
  std::vector<SampleRecord> out;
  for (const ManifestEntry& e : read_manifest(manifest_path)) {
    fs::path img_path = fs::path(e.image).is_absolute() ? fs::path(e.image) : base / e.image;
    SampleRecord r;
    r.image = resize_keep_aspect(read_pgm(img_path.string()), h, w);
    normalize_image(r.image);
    r.text = e.text;
    r.source = e.source;
    out.push_back(std::move(r));
  }
  return out;
}

// ----- synthetic data generation -----

// Alg-style count rule: n = |D| * r / (1 - r).
inline idx synthetic_count(idx real_count, double ratio) {
  require(ratio >= 0.0 && ratio < 1.0, "synthetic_count: ratio must be in [0,1)");
  return static_cast<idx>(std::llround(static_cast<double>(real_count) * ratio / (1.0 - ratio)));
}

// Draw one character with probability proportional to the charset's
// balancing weights, so rare characters are oversampled.
inline char32_t draw_weighted_char(const Charset& cs, Rng& rng) {
  double total = 0;
  for (double w : cs.weights) total += w;
  double u = rng.uniform() * total;
  for (size_t i = 0; i < cs.weights.size(); i++) {
    u -= cs.weights[i];
    if (u <= 0) return cs.chars[i];
  }
  return cs.chars.back();
}

struct SynthesisConfig {
  idx len_lo = 1, len_hi = 8;
  RenderConfig render;
  AugmentSpec augment_spec;
  bool apply_augment = true;
  std::string source = "synthetic";
};

// Renders `count` random lines; per-sample seed = hash(seed, index), so the
// result is independent of scheduling.
inline std::vector<SampleRecord> generate_synthetic(const Charset& cs, idx count,
                                                    const SynthesisConfig& cfg, std::uint64_t seed) {
  require(count >= 0, "generate_synthetic: negative count");
  require(cfg.len_lo >= 1 && cfg.len_hi >= cfg.len_lo, "generate_synthetic: bad length range");
  std::vector<SampleRecord> out;
  out.reserve(static_cast<size_t>(count));
  for (idx i = 0; i < count; i++) {
    std::uint64_t s = hash_mix(seed, static_cast<std::uint64_t>(i));
    Rng rng(s);
    idx len = cfg.len_lo + rng.below(cfg.len_hi - cfg.len_lo + 1);
    std::vector<char32_t> text;
    for (idx k = 0; k < len; k++) text.push_back(draw_weighted_char(cs, rng));
    SampleRecord r;
    r.image = render_text(text, hash_mix(s, 1), cfg.render);
    normalize_image(r.image);
    if (cfg.apply_augment) r.image = augment(r.image, cfg.augment_spec, hash_mix(s, 2));
    r.text = utf8_encode(text);
    r.source = cfg.source;
    r.synthetic = true;
    out.push_back(std::move(r));
  }
  return out;
}

// ----- preprocessing pipeline -----

// Normalize -> Augment -> Synthetic-merge -> Tokenize -> Balance. Returns
// the merged sample list plus per-sample sampling weights (max of the
// constituent character weights).
struct PreprocessedData {
  std::vector<SampleRecord> samples;
  std::vector<std::vector<int>> tokens;
  std::vector<double> weights;
};

inline PreprocessedData preprocess_pipeline(std::vector<SampleRecord> real, const Charset& cs,
                                            const AugmentSpec& aug, double synth_ratio,
                                            const SynthesisConfig& synth_cfg, std::uint64_t seed) {
  for (SampleRecord& r : real) normalize_image(r.image);
  for (size_t i = 0; i < real.size(); i++)
    real[i].image = augment(real[i].image, aug, hash_mix(seed, static_cast<std::uint64_t>(i)));
  idx n_synth = synthetic_count(static_cast<idx>(real.size()), synth_ratio);
  std::vector<SampleRecord> synth = generate_synthetic(cs, n_synth, synth_cfg, hash_mix(seed, 0x5d));
  PreprocessedData out;
  out.samples = std::move(real);
  for (SampleRecord& r : synth) out.samples.push_back(std::move(r));
  for (const SampleRecord& r : out.samples) {
    out.tokens.push_back(cs.tokenize(r.text));
    out.weights.push_back(cs.sample_weight(r.text));
  }
  return out;
}

// Weighted with-replacement index draw over sample weights.
inline idx draw_weighted_index(const std::vector<double>& weights, Rng& rng) {
  require(!weights.empty(), "draw_weighted_index: empty weights");
  double total = 0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (size_t i = 0; i < weights.size(); i++) {
    u -= weights[i];
    if (u <= 0) return static_cast<idx>(i);
  }
  return static_cast<idx>(weights.size()) - 1;
}

// Batch assembly: [B,1,H,W] image tensor from sample indices.
template <typename T>
Tensor<T> batch_images(const std::vector<SampleRecord>& samples, const std::vector<idx>& indices) {
  require(!indices.empty(), "batch_images: empty batch");
  idx h = samples[static_cast<size_t>(indices[0])].image.h;
  idx w = samples[static_cast<size_t>(indices[0])].image.w;
  Tensor<T> out(Shape{static_cast<idx>(indices.size()), 1, h, w});
  for (size_t b = 0; b < indices.size(); b++) {
    const Image& img = samples[static_cast<size_t>(indices[b])].image;
    require(img.h == h && img.w == w, "batch_images: inconsistent image sizes");
    for (idx i = 0; i < h * w; i++)
      out[static_cast<idx>(b) * h * w + i] = static_cast<T>(img.pix[static_cast<size_t>(i)]);
  }
  return out;
}

}  // namespace htr
