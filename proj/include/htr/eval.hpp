#pragma once

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "htr/ctc.hpp"
#include "htr/data.hpp"
#include "htr/image.hpp"

namespace htr {

// ----- edit distance -----

template <typename Seq>
idx edit_distance_seq(const Seq& a, const Seq& b) {
  idx n = static_cast<idx>(a.size()), m = static_cast<idx>(b.size());
  std::vector<idx> prev(static_cast<size_t>(m + 1)), cur(static_cast<size_t>(m + 1));
  for (idx j = 0; j <= m; j++) prev[static_cast<size_t>(j)] = j;
  for (idx i = 1; i <= n; i++) {
    cur[0] = i;
    for (idx j = 1; j <= m; j++) {
      idx sub = prev[static_cast<size_t>(j - 1)] + (a[static_cast<size_t>(i - 1)] == b[static_cast<size_t>(j - 1)] ? 0 : 1);
      cur[static_cast<size_t>(j)] = std::min({sub, prev[static_cast<size_t>(j)] + 1, cur[static_cast<size_t>(j - 1)] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<size_t>(m)];
}

// Unit-cost Levenshtein distance over Unicode characters.
inline idx edit_distance(const std::string& a, const std::string& b) {
  return edit_distance_seq(utf8_decode(a), utf8_decode(b));
}

// Whitespace split, punctuation kept attached.
inline std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> words;
  std::istringstream ss(line);
  std::string w;
  while (ss >> w) words.push_back(w);
  return words;
}

// ----- metrics -----

struct EvalReport {
  double cer = 0.0, wer = 0.0, ser = 0.0;  // fractions in [0,1]
  idx line_count = 0;
  std::vector<std::vector<idx>> confusion;  // [V][V], row = reference id (0 = blank)
  std::vector<std::pair<std::string, std::string>> corrected;  // (before, after)
};

// CER = edit distance over reference characters, WER over whitespace words,
// SER = share of lines with any character error.
inline EvalReport metrics(const std::vector<std::string>& refs, const std::vector<std::string>& hyps) {
  require(!refs.empty(), "metrics: empty reference corpus");
  require(refs.size() == hyps.size(), "metrics: refs/hyps length mismatch");
  idx char_edits = 0, char_total = 0, word_edits = 0, word_total = 0, bad_lines = 0;
  for (size_t i = 0; i < refs.size(); i++) {
    auto rc = utf8_decode(refs[i]), hc = utf8_decode(hyps[i]);
    idx d = edit_distance_seq(rc, hc);
    char_edits += d;
    char_total += static_cast<idx>(rc.size());
    if (d > 0) bad_lines++;
    auto rw = split_words(refs[i]), hw = split_words(hyps[i]);
    word_edits += edit_distance_seq(rw, hw);
    word_total += static_cast<idx>(rw.size());
  }
  require(char_total > 0, "metrics: reference corpus has no characters");
  EvalReport r;
  r.line_count = static_cast<idx>(refs.size());
  r.cer = static_cast<double>(char_edits) / static_cast<double>(char_total);
  r.wer = word_total > 0 ? static_cast<double>(word_edits) / static_cast<double>(word_total) : 0.0;
  r.ser = static_cast<double>(bad_lines) / static_cast<double>(refs.size());
  return r;
}

// ----- lexicon-based correction -----

struct Lexicon {
  std::set<std::string> words;
  idx max_snap = 1;

  bool contains(const std::string& w) const { return words.count(w) > 0; }

  static Lexicon load(const std::string& path, idx max_snap = 1) {
    std::ifstream f(path);
    require(f.good(), "lexicon: cannot open " + path);
    Lexicon lex;
    lex.max_snap = max_snap;
    std::string line;
    while (std::getline(f, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
      if (!line.empty()) lex.words.insert(line);
    }
    require(!lex.words.empty(), "lexicon: no words in " + path);
    return lex;
  }
};

// The unique nearest lexicon word within max_snap edits, or the input
// unchanged on ties and misses.
inline std::string snap_word(const std::string& word, const Lexicon& lex) {
  if (lex.contains(word)) return word;
  idx best = lex.max_snap + 1;
  std::string best_word;
  int best_count = 0;
  for (const std::string& cand : lex.words) {
    idx d = edit_distance(word, cand);
    if (d < best) {
      best = d;
      best_word = cand;
      best_count = 1;
    } else if (d == best) {
      best_count++;
    }
  }
  if (best <= lex.max_snap && best_count == 1) return best_word;
  return word;
}

// Out-of-lexicon words with confidence below the threshold snap to their
// unique nearest lexicon entry. An empty confidence vector treats every word
// as low-confidence.
inline std::string lexicon_correct(const std::string& hyp, const Lexicon& lex,
                                   const std::vector<double>& word_conf = {},
                                   double conf_threshold = 0.9) {
  // split into alternating gap/word runs so spacing is preserved
  std::string out;
  size_t i = 0, word_index = 0;
  while (i < hyp.size()) {
    if (std::isspace(static_cast<unsigned char>(hyp[i]))) {
      out += hyp[i++];
      continue;
    }
    size_t j = i;
    while (j < hyp.size() && !std::isspace(static_cast<unsigned char>(hyp[j]))) j++;
    std::string word = hyp.substr(i, j - i);
    double conf = word_index < word_conf.size() ? word_conf[word_index] : 0.0;
    out += (conf < conf_threshold) ? snap_word(word, lex) : word;
    word_index++;
    i = j;
  }
  return out;
}

// ----- confusion matrix -----

// Character alignment via the edit-distance backtrace. Substitutions and
// matches land at [ref][hyp]; deletions tally against column 0 and
// insertions against row 0 (the blank id).
inline std::vector<std::vector<idx>> confusion_matrix(const std::vector<std::string>& refs,
                                                      const std::vector<std::string>& hyps,
                                                      const Charset& cs) {
  require(refs.size() == hyps.size(), "confusion_matrix: refs/hyps length mismatch");
  size_t V = static_cast<size_t>(cs.V());
  std::vector<std::vector<idx>> counts(V, std::vector<idx>(V, 0));
  for (size_t line = 0; line < refs.size(); line++) {
    auto a = utf8_decode(refs[line]), b = utf8_decode(hyps[line]);
    idx n = static_cast<idx>(a.size()), m = static_cast<idx>(b.size());
    Tensor<idx> dp(Shape{n + 1, m + 1});
    for (idx i = 0; i <= n; i++) dp.at2(i, 0) = i;
    for (idx j = 0; j <= m; j++) dp.at2(0, j) = j;
    for (idx i = 1; i <= n; i++)
      for (idx j = 1; j <= m; j++)
        dp.at2(i, j) = std::min({dp.at2(i - 1, j - 1) + (a[static_cast<size_t>(i - 1)] == b[static_cast<size_t>(j - 1)] ? 0 : 1),
                                 dp.at2(i - 1, j) + 1, dp.at2(i, j - 1) + 1});
    idx i = n, j = m;
    while (i > 0 || j > 0) {
      size_t r = 0, h = 0;
      if (i > 0 && j > 0 &&
          dp.at2(i, j) == dp.at2(i - 1, j - 1) + (a[static_cast<size_t>(i - 1)] == b[static_cast<size_t>(j - 1)] ? 0 : 1)) {
        r = static_cast<size_t>(cs.id_of(a[static_cast<size_t>(i - 1)]));
        h = static_cast<size_t>(cs.id_of(b[static_cast<size_t>(j - 1)]));
        i--;
        j--;
      } else if (i > 0 && dp.at2(i, j) == dp.at2(i - 1, j) + 1) {
        r = static_cast<size_t>(cs.id_of(a[static_cast<size_t>(i - 1)]));  // deletion
        i--;
      } else {
        h = static_cast<size_t>(cs.id_of(b[static_cast<size_t>(j - 1)]));  // insertion
        j--;
      }
      counts[r][h]++;
    }
  }
  return counts;
}

// ----- attention heatmap export -----

// Full-precision CSV plus an 8-bit PGM scaled per row maximum.
template <typename T>
void export_attention(const Tensor<T>& weights, const std::string& base_path) {
  require(weights.rank() == 2, "export_attention: weights must be [T,S]");
  idx Tn = weights.shape[0], S = weights.shape[1];
  for (idx t = 0; t < Tn; t++) {
    double sum = 0;
    for (idx s = 0; s < S; s++) {
      require(weights.at2(t, s) >= -static_cast<T>(1e-9), "export_attention: negative weight");
      sum += static_cast<double>(weights.at2(t, s));
    }
    require(std::abs(sum - 1.0) < 1e-3, "export_attention: rows must be stochastic");
  }
  {
    std::ofstream f(base_path + ".csv");
    require(f.good(), "export_attention: cannot open " + base_path + ".csv");
    char buf[64];
    for (idx t = 0; t < Tn; t++) {
      for (idx s = 0; s < S; s++) {
        std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(weights.at2(t, s)));
        f << (s ? "," : "") << buf;
      }
      f << "\n";
    }
    require(f.good(), "export_attention: write failed for " + base_path + ".csv");
  }
  Image img(Tn, S, 0.0f);
  for (idx t = 0; t < Tn; t++) {
    double row_max = 0;
    for (idx s = 0; s < S; s++) row_max = std::max(row_max, static_cast<double>(weights.at2(t, s)));
    if (row_max <= 0) continue;
    for (idx s = 0; s < S; s++)
      img.at(t, s) = static_cast<float>(static_cast<double>(weights.at2(t, s)) / row_max);
  }
  write_pgm(img, base_path + ".pgm");
}

template <typename T>
Tensor<T> read_attention_csv(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "read_attention_csv: cannot open " + path);
  std::vector<std::vector<T>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<T> row;
    std::istringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(static_cast<T>(std::stod(cell)));
    rows.push_back(std::move(row));
  }
  require(!rows.empty(), "read_attention_csv: empty file " + path);
  Tensor<T> out(Shape{static_cast<idx>(rows.size()), static_cast<idx>(rows[0].size())});
  for (size_t i = 0; i < rows.size(); i++) {
    require(rows[i].size() == rows[0].size(), "read_attention_csv: ragged rows");
    for (size_t j = 0; j < rows[i].size(); j++) out.at2(static_cast<idx>(i), static_cast<idx>(j)) = rows[i][j];
  }
  return out;
}

// ----- lattice CSV (decode fixtures) -----

template <typename T>
void write_lattice_csv(const Tensor<T>& log_lattice, const std::string& path) {
  require(log_lattice.rank() == 2, "write_lattice_csv: lattice must be [T,V]");
  std::ofstream f(path);
  require(f.good(), "write_lattice_csv: cannot open " + path);
  char buf[64];
  for (idx t = 0; t < log_lattice.shape[0]; t++) {
    for (idx v = 0; v < log_lattice.shape[1]; v++) {
      std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(log_lattice.at2(t, v)));
      f << (v ? "," : "") << buf;
    }
    f << "\n";
  }
}

template <typename T>
Tensor<T> read_lattice_csv(const std::string& path) {
  return read_attention_csv<T>(path);
}

// ----- decoding glue -----

struct DecodeResult {
  std::string text;
  double log_prob = 0.0;
  std::vector<double> word_confidence;
};

template <typename T>
std::string decode_text_greedy(const Tensor<T>& log_lattice, const Charset& cs) {
  return cs.detokenize(greedy_decode(log_lattice));
}

// Beam decode with per-word confidences (mean per-frame max posterior over
// each word's emission span) and optional lexicon snapping.
template <typename T>
DecodeResult decode_text_beam(const Tensor<T>& log_lattice, const Charset& cs, int width,
                              const Lexicon* lexicon = nullptr, double conf_threshold = 0.9) {
  BeamHypothesis hyp = beam_decode(log_lattice, width);
  DecodeResult out;
  out.log_prob = hyp.log_prob;
  out.text = cs.detokenize(hyp.ids);

  // frame-wise max posterior
  idx Tn = log_lattice.shape[0], V = log_lattice.shape[1];
  std::vector<double> frame_conf(static_cast<size_t>(Tn), 0.0);
  for (idx t = 0; t < Tn; t++) {
    double best = -std::numeric_limits<double>::infinity();
    for (idx v = 0; v < V; v++) best = std::max(best, static_cast<double>(log_lattice.at2(t, v)));
    frame_conf[static_cast<size_t>(t)] = std::exp(best);
  }
  // word spans over the decoded character frames
  std::vector<char32_t> chars = utf8_decode(out.text);
  size_t ci = 0;
  std::vector<double> confs;
  while (ci < chars.size()) {
    if (chars[ci] == U' ') {
      ci++;
      continue;
    }
    size_t cj = ci;
    while (cj < chars.size() && chars[cj] != U' ') cj++;
    idx f0 = hyp.frames[ci], f1 = hyp.frames[cj - 1];
    double acc = 0;
    for (idx t = f0; t <= f1; t++) acc += frame_conf[static_cast<size_t>(t)];
    confs.push_back(acc / static_cast<double>(f1 - f0 + 1));
    ci = cj;
  }
  out.word_confidence = confs;
  if (lexicon) {
    std::string corrected = lexicon_correct(out.text, *lexicon, confs, conf_threshold);
    out.text = corrected;
  }
  return out;
}

// ----- report file -----

inline std::string format_report(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "lines %lld\ncer %.6f\nwer %.6f\nser %.6f\n",
                static_cast<long long>(r.line_count), r.cer, r.wer, r.ser);
  std::string out = buf;
  for (const auto& [before, after] : r.corrected)
    out += "corrected\t" + before + "\t" + after + "\n";
  return out;
}

}  // namespace htr
