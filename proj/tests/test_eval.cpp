#include <gtest/gtest.h>

#include <filesystem>

#include "htr/eval.hpp"
#include "htr/reference.hpp"

using namespace htr;

namespace {
std::string temp_path(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / "htr_eval_test";
  std::filesystem::create_directories(p);
  return (p / name).string();
}

Lexicon make_lexicon(std::initializer_list<std::string> words, idx max_snap = 1) {
  Lexicon lex;
  lex.words = std::set<std::string>(words);
  lex.max_snap = max_snap;
  return lex;
}
}  // namespace

TEST(EditDistance, SpecCases) {
  EXPECT_EQ(edit_distance("", "abc"), 3);
  EXPECT_EQ(edit_distance("abc", "abc"), 0);
  EXPECT_EQ(edit_distance("kitten", "sitting"), 3);
}

TEST(EditDistance, SymmetricAndTriangle) {
  Rng rng(3);
  auto rand_str = [&](idx len) {
    std::string s;
    for (idx i = 0; i < len; i++) s += static_cast<char>('a' + rng.below(4));
    return s;
  };
  for (int c = 0; c < 50; c++) {
    std::string a = rand_str(rng.below(8)), b = rand_str(rng.below(8)), d = rand_str(rng.below(8));
    EXPECT_EQ(edit_distance(a, b), edit_distance(b, a));
    EXPECT_LE(edit_distance(a, d), edit_distance(a, b) + edit_distance(b, d));
  }
}

TEST(Metrics, PerfectHypsAreZero) {
  EvalReport r = metrics({"abc", "de f"}, {"abc", "de f"});
  EXPECT_EQ(r.cer, 0.0);
  EXPECT_EQ(r.wer, 0.0);
  EXPECT_EQ(r.ser, 0.0);
  EXPECT_EQ(r.line_count, 2);
}

TEST(Metrics, SingleSubstitution) {
  EvalReport r = metrics({"abc"}, {"abd"});
  EXPECT_NEAR(r.cer, 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.wer, 1.0, 1e-12);
  EXPECT_NEAR(r.ser, 1.0, 1e-12);
}

TEST(Metrics, SerCountsImperfectLines) {
  EvalReport r = metrics({"abc", "xyz"}, {"abc", "xyw"});
  EXPECT_NEAR(r.ser, 0.5, 1e-12);
}

TEST(Metrics, CerScaleInvariantUnderCorpusDuplication) {
  std::vector<std::string> refs{"hello world", "abc"}, hyps{"helxo world", "abd"};
  EvalReport once = metrics(refs, hyps);
  std::vector<std::string> refs2 = refs, hyps2 = hyps;
  refs2.insert(refs2.end(), refs.begin(), refs.end());
  hyps2.insert(hyps2.end(), hyps.begin(), hyps.end());
  EvalReport twice = metrics(refs2, hyps2);
  EXPECT_NEAR(once.cer, twice.cer, 1e-12);
  EXPECT_NEAR(once.wer, twice.wer, 1e-12);
  EXPECT_NEAR(once.ser, twice.ser, 1e-12);
}

TEST(Metrics, EmptyCorpusIsError) {
  EXPECT_THROW(metrics({}, {}), std::runtime_error);
}

TEST(LexiconCorrect, AmbiguousTieLeavesWordAlone) {
  Lexicon lex = make_lexicon({"had", "has"});
  EXPECT_EQ(lexicon_correct("ha", lex), "ha");
}

TEST(LexiconCorrect, SnapsUniqueNearestWord) {
  Lexicon lex = make_lexicon({"fleeing"}, 2);
  EXPECT_EQ(lexicon_correct("rleeing", lex), "fleeing");
}

TEST(LexiconCorrect, InLexiconWordsUnchanged) {
  Lexicon lex = make_lexicon({"station", "on"});
  EXPECT_EQ(lexicon_correct("station on", lex), "station on");
}

TEST(LexiconCorrect, HighConfidenceWordsSkipCorrection) {
  Lexicon lex = make_lexicon({"cat"});
  EXPECT_EQ(lexicon_correct("cut", lex, {0.99}, 0.9), "cut");
  EXPECT_EQ(lexicon_correct("cut", lex, {0.5}, 0.9), "cat");
}

TEST(LexiconCorrect, BeyondSnapDistanceUnchanged) {
  Lexicon lex = make_lexicon({"abcdef"}, 1);
  EXPECT_EQ(lexicon_correct("abzzzf", lex), "abzzzf");
}

TEST(LexiconCorrect, PreservesSpacing) {
  Lexicon lex = make_lexicon({"aa", "bb"});
  EXPECT_EQ(lexicon_correct("ab  bb", lex), "ab  bb");  // tie for "ab", gap kept
}

TEST(LexiconCorrect, NeverIncreasesEditDistanceWithFullLexicon) {
  // references built from lexicon words; hypotheses corrupted by single
  // substitutions that stay within one edit of the source word
  Lexicon lex = make_lexicon({"alpha", "bravo", "carbon", "delta", "echo"});
  std::vector<std::string> refs{"alpha bravo", "carbon echo delta", "echo echo"};
  std::vector<std::string> hyps{"alphq bravo", "carbpn echo delta", "ecxo echo"};
  for (size_t i = 0; i < refs.size(); i++) {
    std::string corrected = lexicon_correct(hyps[i], lex);
    EXPECT_LE(edit_distance(refs[i], corrected), edit_distance(refs[i], hyps[i]));
  }
}

TEST(ConfusionMatrix, PerfectHypsAreDiagonal) {
  Charset cs = Charset::build({"abc"}, 1);
  auto m = confusion_matrix({"abc", "cab"}, {"abc", "cab"}, cs);
  for (size_t r = 0; r < m.size(); r++)
    for (size_t h = 0; h < m.size(); h++)
      EXPECT_EQ(m[r][h], r == h && r > 0 ? 2 : 0) << r << "," << h;
}

TEST(ConfusionMatrix, SubstitutionAndDeletion) {
  Charset cs = Charset::build({"ab"}, 1);
  auto sub = confusion_matrix({"a"}, {"b"}, cs);
  EXPECT_EQ(sub[1][2], 1);  // a misread as b
  auto del = confusion_matrix({"ab"}, {"b"}, cs);
  EXPECT_EQ(del[1][0], 1);  // a deleted
  EXPECT_EQ(del[2][2], 1);  // b kept
  auto ins = confusion_matrix({"b"}, {"ab"}, cs);
  EXPECT_EQ(ins[0][1], 1);  // a inserted
}

TEST(ConfusionMatrix, RowSumsEqualReferenceCounts) {
  Charset cs = Charset::build({"abcd"}, 1);
  std::vector<std::string> refs{"abca", "ddb"}, hyps{"abda", "db"};
  auto m = confusion_matrix(refs, hyps, cs);
  std::map<char, idx> ref_counts;
  for (const auto& r : refs)
    for (char c : r) ref_counts[c]++;
  for (char c : {'a', 'b', 'c', 'd'}) {
    size_t row = static_cast<size_t>(cs.id_of(static_cast<char32_t>(c)));
    idx sum = 0;
    for (size_t h = 0; h < m.size(); h++) sum += m[row][h];
    EXPECT_EQ(sum, ref_counts[c]) << c;
  }
}

TEST(ExportAttention, IdentityGivesDiagonalPgm) {
  idx n = 5;
  Tensor<double> w({n, n}, 0.0);
  for (idx i = 0; i < n; i++) w.at2(i, i) = 1.0;
  std::string base = temp_path("identity");
  export_attention(w, base);
  Image img = read_pgm(base + ".pgm");
  for (idx i = 0; i < n; i++)
    for (idx j = 0; j < n; j++)
      EXPECT_NEAR(img.at(i, j), i == j ? 1.0f : 0.0f, 1e-3f);
}

TEST(ExportAttention, UniformGivesConstantPgm) {
  Tensor<double> w({3, 4}, 0.25);
  std::string base = temp_path("uniform");
  export_attention(w, base);
  Image img = read_pgm(base + ".pgm");
  for (float v : img.pix) EXPECT_NEAR(v, 1.0f, 1e-3f);  // row-max scaling
}

TEST(ExportAttention, CsvRoundTripsAtFullPrecision) {
  Rng rng(9);
  Tensor<double> w({4, 6});
  for (idx t = 0; t < 4; t++) {
    double s = 0;
    for (idx j = 0; j < 6; j++) s += (w.at2(t, j) = rng.uniform(0.01, 1.0));
    for (idx j = 0; j < 6; j++) w.at2(t, j) /= s;
  }
  std::string base = temp_path("roundtrip");
  export_attention(w, base);
  Tensor<double> back = read_attention_csv<double>(base + ".csv");
  ASSERT_EQ(back.shape, w.shape);
  for (idx i = 0; i < w.numel(); i++) EXPECT_EQ(back[i], w[i]);
}

TEST(ExportAttention, NonStochasticRowsRejected) {
  Tensor<double> w({2, 2}, 0.9);
  EXPECT_THROW(export_attention(w, temp_path("bad")), std::runtime_error);
}

TEST(LatticeCsv, RoundTrip) {
  Rng rng(10);
  Tensor<double> lat = reference::random_log_lattice(5, 3, rng);
  std::string path = temp_path("lattice.csv");
  write_lattice_csv(lat, path);
  Tensor<double> back = read_lattice_csv<double>(path);
  ASSERT_EQ(back.shape, lat.shape);
  for (idx i = 0; i < lat.numel(); i++) EXPECT_EQ(back[i], lat[i]);
}

TEST(DecodeText, GreedyAndBeamAgreeOnSharpLattice) {
  Charset cs = Charset::build({"ab"}, 1);
  Tensor<double> lat({5, 3}, -30.0);
  lat.at2(0, 1) = 0.0;  // a
  lat.at2(1, 0) = 0.0;  // blank
  lat.at2(2, 1) = 0.0;  // a
  lat.at2(3, 2) = 0.0;  // b
  lat.at2(4, 2) = 0.0;  // b (merged repeat)
  EXPECT_EQ(decode_text_greedy(lat, cs), "aab");
  DecodeResult r = decode_text_beam(lat, cs, 4);
  EXPECT_EQ(r.text, "aab");
  ASSERT_EQ(r.word_confidence.size(), 1u);
  EXPECT_NEAR(r.word_confidence[0], 1.0, 1e-6);
}

TEST(DecodeText, LexiconSnapImprovesBeamOutput) {
  // charset ab + space; the lattice spells "aa ab" where the reference word
  // was "ab" (second char misread with low confidence)
  Charset cs = Charset::build({"ab ab"}, 1);
  Tensor<double> lat({7, 4}, -30.0);
  int a = cs.id_of(U'a'), b = cs.id_of(U'b'), sp = cs.id_of(U' ');
  lat.at2(0, a) = 0.0;
  lat.at2(1, 0) = 0.0;   // blank separates the repeat
  lat.at2(2, a) = -0.4;  // weakly favors 'a' over 'b'
  lat.at2(2, b) = -1.2;
  lat.at2(3, sp) = 0.0;
  lat.at2(4, a) = 0.0;
  lat.at2(5, 0) = 0.0;
  lat.at2(6, b) = 0.0;
  for (idx t = 0; t < 7; t++) {  // renormalize rows
    double s = 0;
    for (idx v = 0; v < 4; v++) s += std::exp(lat.at2(t, v));
    for (idx v = 0; v < 4; v++) lat.at2(t, v) -= std::log(s);
  }
  Lexicon lex = make_lexicon({"ab"});
  DecodeResult plain = decode_text_beam(lat, cs, 8);
  EXPECT_EQ(plain.text, "aa ab");
  DecodeResult fixed = decode_text_beam(lat, cs, 8, &lex, 0.95);
  EXPECT_EQ(fixed.text, "ab ab");
}

TEST(ReportFormat, ContainsMetricsAndCorrections) {
  EvalReport r;
  r.cer = 0.125;
  r.wer = 0.5;
  r.ser = 1.0;
  r.line_count = 4;
  r.corrected.push_back({"rleeing", "fleeing"});
  std::string s = format_report(r);
  EXPECT_NE(s.find("cer 0.125"), std::string::npos);
  EXPECT_NE(s.find("rleeing\tfleeing"), std::string::npos);
}
