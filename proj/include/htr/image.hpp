#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "htr/tensor.hpp"

namespace htr {

// Grayscale image. Raw images live in [0,1]; normalize_image maps them to
// [-1,1] for the model.
struct Image {
  idx h = 0, w = 0;
  std::vector<float> pix;

  Image() = default;
  Image(idx h_, idx w_, float fill = 1.0f) : h(h_), w(w_), pix(static_cast<size_t>(h_ * w_), fill) {}
  float& at(idx y, idx x) { return pix[static_cast<size_t>(y * w + x)]; }
  float at(idx y, idx x) const { return pix[static_cast<size_t>(y * w + x)]; }
  bool empty() const { return pix.empty(); }
};

// ----- binary P5 PGM, 8-bit -----

inline void write_pgm(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  require(f.good(), "write_pgm: cannot open " + path);
  f << "P5\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<size_t>(img.w));
  for (idx y = 0; y < img.h; y++) {
    for (idx x = 0; x < img.w; x++) {
      float v = std::min(1.0f, std::max(0.0f, img.at(y, x)));
      row[static_cast<size_t>(x)] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  require(f.good(), "write_pgm: write failed for " + path);
}

inline Image read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "read_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  require(magic == "P5", "read_pgm: " + path + " is not a binary PGM");
  auto next_token = [&f, &path]() {
    std::string tok;
    for (;;) {
      f >> tok;
      require(f.good(), "read_pgm: truncated header in " + path);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(f, rest);
        continue;
      }
      return tok;
    }
  };
  idx w = std::stoll(next_token()), h = std::stoll(next_token());
  idx maxval = std::stoll(next_token());
  require(w > 0 && h > 0 && maxval == 255, "read_pgm: unsupported PGM header in " + path);
  f.get();  // single whitespace after maxval
  Image img(h, w);
  std::vector<unsigned char> buf(static_cast<size_t>(w * h));
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  require(f.gcount() == static_cast<std::streamsize>(buf.size()), "read_pgm: truncated pixel data in " + path);
  for (idx i = 0; i < w * h; i++) img.pix[static_cast<size_t>(i)] = static_cast<float>(buf[static_cast<size_t>(i)]) / 255.0f;
  return img;
}

// ----- geometry -----

inline float bilinear(const Image& img, double y, double x, float background) {
  idx x0 = static_cast<idx>(std::floor(x)), y0 = static_cast<idx>(std::floor(y));
  double fx = x - static_cast<double>(x0), fy = y - static_cast<double>(y0);
  auto px = [&](idx yy, idx xx) {
    if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) return background;
    return img.at(yy, xx);
  };
  double top = (1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1);
  double bot = (1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1);
  return static_cast<float>((1 - fy) * top + fy * bot);
}

inline Image resize_bilinear(const Image& img, idx h, idx w) {
  require(!img.empty() && h > 0 && w > 0, "resize: empty image or bad target");
  Image out(h, w);
  double sy = static_cast<double>(img.h) / static_cast<double>(h);
  double sx = static_cast<double>(img.w) / static_cast<double>(w);
  for (idx y = 0; y < h; y++)
    for (idx x = 0; x < w; x++) {
      double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
      double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      out.at(y, x) = bilinear(img, src_y, src_x, 1.0f);
    }
  return out;
}

// Aspect-preserving fit into h x w; the right/bottom margin is padded at the
// background intensity (the image maximum, white for dark-ink material).
inline Image resize_keep_aspect(const Image& img, idx h, idx w) {
  require(!img.empty(), "resize_keep_aspect: empty image");
  float background = img.pix[0];
  for (float v : img.pix) background = std::max(background, v);
  double scale = std::min(static_cast<double>(h) / static_cast<double>(img.h),
                          static_cast<double>(w) / static_cast<double>(img.w));
  idx nh = std::max<idx>(1, static_cast<idx>(std::lround(static_cast<double>(img.h) * scale)));
  idx nw = std::max<idx>(1, static_cast<idx>(std::lround(static_cast<double>(img.w) * scale)));
  Image scaled = resize_bilinear(img, nh, nw);
  Image out(h, w, background);
  for (idx y = 0; y < nh; y++)
    for (idx x = 0; x < nw; x++) out.at(y, x) = scaled.at(y, x);
  return out;
}

// Min-max normalization to [-1, 1]; a constant image maps to all zeros
// rather than dividing by zero.
inline void normalize_image(Image& img) {
  require(!img.empty(), "normalize_image: empty image");
  float lo = img.pix[0], hi = img.pix[0];
  for (float v : img.pix) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    for (float& v : img.pix) v = 0.0f;
    return;
  }
  float inv = 2.0f / (hi - lo);
  for (float& v : img.pix) v = (v - lo) * inv - 1.0f;
}

// ----- augmentation -----

struct AugmentSpec {
  double rotate_deg = 2.0;      // rotation range, +/- degrees
  double shear = 0.06;          // horizontal shear range
  double elastic_alpha = 1.5;   // displacement magnitude, px
  double elastic_sigma = 4.0;   // displacement smoothing radius, px
  double contrast_lo = 0.8;     // contrast scale range
  double contrast_hi = 1.2;
  double noise_sigma = 0.03;    // additive Gaussian noise
  double probability = 0.5;     // per-transform gate
};

namespace detail {

inline Image affine_inverse_sample(const Image& src, double m00, double m01, double m10,
                                   double m11, float background) {
  Image out(src.h, src.w, background);
  double cy = static_cast<double>(src.h - 1) / 2.0, cx = static_cast<double>(src.w - 1) / 2.0;
  for (idx y = 0; y < src.h; y++)
    for (idx x = 0; x < src.w; x++) {
      double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
      double sy = m00 * dy + m01 * dx + cy;
      double sx = m10 * dy + m11 * dx + cx;
      out.at(y, x) = bilinear(src, sy, sx, background);
    }
  return out;
}

inline std::vector<float> smooth_field(std::vector<float> f, idx h, idx w, idx radius, int passes) {
  std::vector<float> tmp(f.size());
  for (int p = 0; p < passes; p++) {
    // horizontal then vertical box blur
    for (idx y = 0; y < h; y++)
      for (idx x = 0; x < w; x++) {
        float s = 0;
        idx n = 0;
        for (idx k = -radius; k <= radius; k++) {
          idx xx = x + k;
          if (xx < 0 || xx >= w) continue;
          s += f[static_cast<size_t>(y * w + xx)];
          n++;
        }
        tmp[static_cast<size_t>(y * w + x)] = s / static_cast<float>(n);
      }
    for (idx y = 0; y < h; y++)
      for (idx x = 0; x < w; x++) {
        float s = 0;
        idx n = 0;
        for (idx k = -radius; k <= radius; k++) {
          idx yy = y + k;
          if (yy < 0 || yy >= h) continue;
          s += tmp[static_cast<size_t>(yy * w + x)];
          n++;
        }
        f[static_cast<size_t>(y * w + x)] = s / static_cast<float>(n);
      }
  }
  return f;
}

}  // namespace detail

// Transforms in fixed order (rotate, shear, elastic, contrast, noise), each
// gated by the spec probability from the seeded stream; the result is
// re-clamped to [-1,1]. Inputs are expected post-normalization.
inline Image augment(const Image& img, const AugmentSpec& spec, std::uint64_t seed) {
  require(spec.probability >= 0.0 && spec.probability <= 1.0, "augment: bad probability");
  Rng rng(seed);
  Image out = img;
  const float background = 1.0f;  // white in [-1,1] space

  if (rng.uniform() < spec.probability) {
    double theta = rng.uniform(-spec.rotate_deg, spec.rotate_deg) * 3.14159265358979323846 / 180.0;
    double c = std::cos(theta), s = std::sin(theta);
    out = detail::affine_inverse_sample(out, c, -s, s, c, background);
  }
  if (rng.uniform() < spec.probability) {
    double sh = rng.uniform(-spec.shear, spec.shear);
    out = detail::affine_inverse_sample(out, 1.0, 0.0, sh, 1.0, background);
  }
  if (rng.uniform() < spec.probability && spec.elastic_alpha > 0.0) {
    idx n = out.h * out.w;
    std::vector<float> dx(static_cast<size_t>(n)), dy(static_cast<size_t>(n));
    for (idx i = 0; i < n; i++) {
      dx[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-1.0, 1.0));
      dy[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(-1.0, 1.0));
    }
    idx radius = std::max<idx>(1, static_cast<idx>(spec.elastic_sigma));
    dx = detail::smooth_field(std::move(dx), out.h, out.w, radius, 2);
    dy = detail::smooth_field(std::move(dy), out.h, out.w, radius, 2);
    Image warped(out.h, out.w, background);
    for (idx y = 0; y < out.h; y++)
      for (idx x = 0; x < out.w; x++) {
        double sy = y + spec.elastic_alpha * dy[static_cast<size_t>(y * out.w + x)];
        double sx = x + spec.elastic_alpha * dx[static_cast<size_t>(y * out.w + x)];
        warped.at(y, x) = bilinear(out, sy, sx, background);
      }
    out = std::move(warped);
  }
  if (rng.uniform() < spec.probability) {
    double c = rng.uniform(spec.contrast_lo, spec.contrast_hi);
    double mean = 0;
    for (float v : out.pix) mean += v;
    mean /= static_cast<double>(out.pix.size());
    for (float& v : out.pix) v = static_cast<float>(mean + c * (v - mean));
  }
  if (rng.uniform() < spec.probability && spec.noise_sigma > 0.0) {
    for (float& v : out.pix) v += static_cast<float>(rng.normal() * spec.noise_sigma);
  }
  for (float& v : out.pix) v = std::min(1.0f, std::max(-1.0f, v));
  return out;
}

}  // namespace htr
