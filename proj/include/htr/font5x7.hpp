#pragma once

#include <array>
#include <map>
#include <string>

#include "htr/image.hpp"

namespace htr {

// Built-in 5x7 bitmap glyphs, authored as row strings. Latin letters, digits
// and common punctuation; a missing glyph is a hard error naming the
// character.
namespace font5x7 {

using Glyph = std::array<std::uint8_t, 7>;  // one row per byte, bit 4 = leftmost column

namespace detail {

inline Glyph rows(const char* r0, const char* r1, const char* r2, const char* r3, const char* r4,
                  const char* r5, const char* r6) {
  const char* rs[7] = {r0, r1, r2, r3, r4, r5, r6};
  Glyph g{};
  for (int r = 0; r < 7; r++) {
    std::uint8_t bits = 0;
    for (int c = 0; c < 5; c++) bits = static_cast<std::uint8_t>((bits << 1) | (rs[r][c] == '1'));
    g[static_cast<size_t>(r)] = bits;
  }
  return g;
}

inline const std::map<char32_t, Glyph>& table() {
  static const std::map<char32_t, Glyph> t = [] {
    std::map<char32_t, Glyph> m;
    auto put = [&m](char32_t c, const Glyph& g) { m[c] = g; };
    put(U' ', rows("00000", "00000", "00000", "00000", "00000", "00000", "00000"));
    put(U'A', rows("01110", "10001", "10001", "11111", "10001", "10001", "10001"));
    put(U'B', rows("11110", "10001", "10001", "11110", "10001", "10001", "11110"));
    put(U'C', rows("01110", "10001", "10000", "10000", "10000", "10001", "01110"));
    put(U'D', rows("11100", "10010", "10001", "10001", "10001", "10010", "11100"));
    put(U'E', rows("11111", "10000", "10000", "11110", "10000", "10000", "11111"));
    put(U'F', rows("11111", "10000", "10000", "11110", "10000", "10000", "10000"));
    put(U'G', rows("01110", "10001", "10000", "10111", "10001", "10001", "01111"));
    put(U'H', rows("10001", "10001", "10001", "11111", "10001", "10001", "10001"));
    put(U'I', rows("01110", "00100", "00100", "00100", "00100", "00100", "01110"));
    put(U'J', rows("00111", "00010", "00010", "00010", "00010", "10010", "01100"));
    put(U'K', rows("10001", "10010", "10100", "11000", "10100", "10010", "10001"));
    put(U'L', rows("10000", "10000", "10000", "10000", "10000", "10000", "11111"));
    put(U'M', rows("10001", "11011", "10101", "10101", "10001", "10001", "10001"));
    put(U'N', rows("10001", "11001", "10101", "10011", "10001", "10001", "10001"));
    put(U'O', rows("01110", "10001", "10001", "10001", "10001", "10001", "01110"));
    put(U'P', rows("11110", "10001", "10001", "11110", "10000", "10000", "10000"));
    put(U'Q', rows("01110", "10001", "10001", "10001", "10101", "10010", "01101"));
    put(U'R', rows("11110", "10001", "10001", "11110", "10100", "10010", "10001"));
    put(U'S', rows("01111", "10000", "10000", "01110", "00001", "00001", "11110"));
    put(U'T', rows("11111", "00100", "00100", "00100", "00100", "00100", "00100"));
    put(U'U', rows("10001", "10001", "10001", "10001", "10001", "10001", "01110"));
    put(U'V', rows("10001", "10001", "10001", "10001", "10001", "01010", "00100"));
    put(U'W', rows("10001", "10001", "10001", "10101", "10101", "11011", "10001"));
    put(U'X', rows("10001", "10001", "01010", "00100", "01010", "10001", "10001"));
    put(U'Y', rows("10001", "10001", "01010", "00100", "00100", "00100", "00100"));
    put(U'Z', rows("11111", "00001", "00010", "00100", "01000", "10000", "11111"));
    put(U'a', rows("00000", "00000", "01110", "00001", "01111", "10001", "01111"));
    put(U'b', rows("10000", "10000", "11110", "10001", "10001", "10001", "11110"));
    put(U'c', rows("00000", "00000", "01110", "10000", "10000", "10001", "01110"));
    put(U'd', rows("00001", "00001", "01111", "10001", "10001", "10001", "01111"));
    put(U'e', rows("00000", "00000", "01110", "10001", "11111", "10000", "01110"));
    put(U'f', rows("00110", "01001", "01000", "11100", "01000", "01000", "01000"));
    put(U'g', rows("00000", "01111", "10001", "10001", "01111", "00001", "01110"));
    put(U'h', rows("10000", "10000", "11110", "10001", "10001", "10001", "10001"));
    put(U'i', rows("00100", "00000", "01100", "00100", "00100", "00100", "01110"));
    put(U'j', rows("00010", "00000", "00110", "00010", "00010", "10010", "01100"));
    put(U'k', rows("10000", "10000", "10010", "10100", "11000", "10100", "10010"));
    put(U'l', rows("01100", "00100", "00100", "00100", "00100", "00100", "01110"));
    put(U'm', rows("00000", "00000", "11010", "10101", "10101", "10101", "10101"));
    put(U'n', rows("00000", "00000", "11110", "10001", "10001", "10001", "10001"));
    put(U'o', rows("00000", "00000", "01110", "10001", "10001", "10001", "01110"));
    put(U'p', rows("00000", "00000", "11110", "10001", "11110", "10000", "10000"));
    put(U'q', rows("00000", "00000", "01111", "10001", "01111", "00001", "00001"));
    put(U'r', rows("00000", "00000", "10110", "11001", "10000", "10000", "10000"));
    put(U's', rows("00000", "00000", "01111", "10000", "01110", "00001", "11110"));
    put(U't', rows("01000", "01000", "11100", "01000", "01000", "01001", "00110"));
    put(U'u', rows("00000", "00000", "10001", "10001", "10001", "10011", "01101"));
    put(U'v', rows("00000", "00000", "10001", "10001", "10001", "01010", "00100"));
    put(U'w', rows("00000", "00000", "10001", "10001", "10101", "10101", "01010"));
    put(U'x', rows("00000", "00000", "10001", "01010", "00100", "01010", "10001"));
    put(U'y', rows("00000", "00000", "10001", "10001", "01111", "00001", "01110"));
    put(U'z', rows("00000", "00000", "11111", "00010", "00100", "01000", "11111"));
    put(U'0', rows("01110", "10001", "10011", "10101", "11001", "10001", "01110"));
    put(U'1', rows("00100", "01100", "00100", "00100", "00100", "00100", "01110"));
    put(U'2', rows("01110", "10001", "00001", "00110", "01000", "10000", "11111"));
    put(U'3', rows("11111", "00010", "00100", "00010", "00001", "10001", "01110"));
    put(U'4', rows("00010", "00110", "01010", "10010", "11111", "00010", "00010"));
    put(U'5', rows("11111", "10000", "11110", "00001", "00001", "10001", "01110"));
    put(U'6', rows("00110", "01000", "10000", "11110", "10001", "10001", "01110"));
    put(U'7', rows("11111", "00001", "00010", "00100", "01000", "01000", "01000"));
    put(U'8', rows("01110", "10001", "10001", "01110", "10001", "10001", "01110"));
    put(U'9', rows("01110", "10001", "10001", "01111", "00001", "00010", "01100"));
    put(U'.', rows("00000", "00000", "00000", "00000", "00000", "01100", "01100"));
    put(U',', rows("00000", "00000", "00000", "00000", "01100", "00100", "01000"));
    put(U'-', rows("00000", "00000", "00000", "01110", "00000", "00000", "00000"));
    put(U'\'', rows("01100", "00100", "01000", "00000", "00000", "00000", "00000"));
    put(U':', rows("00000", "01100", "01100", "00000", "01100", "01100", "00000"));
    put(U';', rows("00000", "01100", "01100", "00000", "01100", "00100", "01000"));
    put(U'!', rows("00100", "00100", "00100", "00100", "00100", "00000", "00100"));
    put(U'?', rows("01110", "10001", "00001", "00010", "00100", "00000", "00100"));
    put(U'(', rows("00010", "00100", "01000", "01000", "01000", "00100", "00010"));
    put(U')', rows("01000", "00100", "00010", "00010", "00010", "00100", "01000"));
    put(U'"', rows("01010", "01010", "01010", "00000", "00000", "00000", "00000"));
    return m;
  }();
  return t;
}

}  // namespace detail

inline bool has_glyph(char32_t c) { return detail::table().count(c) > 0; }

inline const Glyph& glyph(char32_t c) {
  auto it = detail::table().find(c);
  if (it == detail::table().end()) {
    std::string msg = "render_text: no glyph for character U+";
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04X", static_cast<unsigned>(c));
    fail(msg + buf);
  }
  return it->second;
}

}  // namespace font5x7

struct RenderConfig {
  idx height = 32;
  idx width = 256;
  double max_slant_deg = 15.0;  // per-call slant
  idx max_baseline_jitter = 2;  // per-character vertical jitter, px
};

// Rasterizes text from the bitmap glyph tables, scaled to the target height,
// with seeded slant, stroke thickness and baseline jitter standing in for a
// font library's style choice. Dark ink (0) on white (1); deterministic in
// (text, seed).
inline Image render_text(const std::vector<char32_t>& text, std::uint64_t style_seed,
                         const RenderConfig& cfg = {}) {
  for (char32_t c : text) font5x7::glyph(c);  // fail fast on missing glyphs
  Image img(cfg.height, cfg.width, 1.0f);
  if (text.empty()) return img;

  Rng rng(style_seed);
  idx margin = 2;
  idx scale = std::max<idx>(1, (cfg.height - 2 * margin - 2 * cfg.max_baseline_jitter) / 7);
  double slant = std::tan(rng.uniform(-cfg.max_slant_deg, cfg.max_slant_deg) * 3.14159265358979323846 / 180.0);
  idx thickness = 1 + static_cast<idx>(rng.below(2));
  idx top = margin + cfg.max_baseline_jitter;
  idx baseline = top + 7 * scale;

  idx pen_x = margin + static_cast<idx>(std::ceil(std::abs(slant) * 7.0 * static_cast<double>(scale)));
  bool clipped = false;
  for (char32_t c : text) {
    const font5x7::Glyph& g = font5x7::glyph(c);
    idx jitter = static_cast<idx>(rng.below(2 * cfg.max_baseline_jitter + 1)) - cfg.max_baseline_jitter;
    for (int r = 0; r < 7; r++)
      for (int col = 0; col < 5; col++) {
        if (!((g[static_cast<size_t>(r)] >> (4 - col)) & 1)) continue;
        idx y0 = top + jitter + r * scale;
        idx shear = static_cast<idx>(std::lround(slant * static_cast<double>(baseline - y0)));
        idx x0 = pen_x + col * scale + shear;
        for (idx dy = 0; dy < scale + thickness - 1; dy++)
          for (idx dx = 0; dx < scale + thickness - 1; dx++) {
            idx y = y0 + dy, x = x0 + dx;
            if (y < 0 || y >= img.h || x < 0 || x >= img.w) {
              clipped = true;
              continue;
            }
            img.at(y, x) = 0.0f;
          }
      }
    pen_x += 6 * scale;  // 5 columns + 1 gap
  }
  if (clipped) Warnings::global().bump("render_clipped");
  return img;
}

}  // namespace htr
