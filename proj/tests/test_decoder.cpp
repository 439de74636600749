#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"
#include "vlgen/decoder.hpp"

using namespace vlgen;
using namespace vlgen::testkit;
using nn::ModelParams;

namespace {

// Target ids 0..6: PAD and SOS are never emitted, leaving five generable
// symbols (EOS, UNK and three characters).
constexpr int kToyVocab = 7;

ModelParams<double> toy_model(std::uint64_t seed) {
  return random_model<double>(tiny_hyper(9, kToyVocab, 6, 2), seed, 1.0);
}

}  // namespace

TEST(Beam, MatchesExhaustiveSearchWhenWideEnough) {
  std::mt19937_64 rng(5);
  for (std::uint64_t m = 0; m < 10; ++m) {
    const auto p = toy_model(300 + m);
    const auto src = random_tokens(rng, 9, 4);
    const auto best = exhaustive_best(src, p, 4);
    const auto beam = beam_search(src, p, 625, {4, false});
    ASSERT_FALSE(beam.empty());
    EXPECT_NEAR(beam.front().score, best.score, 1e-10) << "model " << m;
    if (std::abs(beam.front().score - best.score) > 1e-10) continue;
    // Equal scores may legitimately differ in tokens only on an exact tie.
    if (beam.front().tokens != best.tokens) {
      EXPECT_NEAR(reference_log_prob(src, beam.front().tokens, p) / beam.front().tokens.size(), best.score, 1e-12);
    }
  }
}

TEST(Beam, WidthOneEqualsGreedy) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    const auto hp = tiny_hyper(12, 10, 8, 2);
    const auto p = random_model<double>(hp, 400 + i, 0.8);
    const auto src = random_tokens(rng, 12, 1 + i % 9);
    const DecodeOptions opt{12, true};
    const auto g = greedy_decode(src, p, opt);
    const auto b = beam_search(src, p, 1, opt);
    ASSERT_EQ(b.size(), 1u);
    EXPECT_EQ(b[0].tokens, g.tokens);
    EXPECT_DOUBLE_EQ(b[0].log_prob, g.log_prob);
    EXPECT_EQ(b[0].finished, g.finished);
    EXPECT_EQ(b[0].alignment, g.alignment);
  }
}

TEST(Beam, HypothesisInvariants) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 8; ++i) {
    const auto p = random_model<double>(tiny_hyper(10, 8, 6, 2), 500 + i, 1.0);
    const auto src = random_tokens(rng, 10, 5);
    const std::size_t k = 1 + static_cast<std::size_t>(i) * 2, max_len = 6;
    const auto hyps = beam_search(src, p, k, {max_len, true});
    ASSERT_FALSE(hyps.empty());
    EXPECT_LE(hyps.size(), k);
    for (std::size_t r = 0; r < hyps.size(); ++r) {
      const auto& h = hyps[r];
      ASSERT_FALSE(h.tokens.empty());
      EXPECT_LE(h.tokens.size(), max_len);
      EXPECT_EQ(h.finished, h.tokens.back() == kEos);
      EXPECT_EQ(std::count(h.tokens.begin(), h.tokens.end(), kEos), h.finished ? 1 : 0);
      for (TokenId t : h.tokens) EXPECT_TRUE(t != kPad && t != kSos);
      EXPECT_NEAR(h.log_prob, reference_log_prob(src, h.tokens, p), 1e-10);
      EXPECT_NEAR(h.score, h.log_prob / h.tokens.size(), 1e-15);
      if (r > 0) {
        EXPECT_GE(hyps[r - 1].score, h.score);
      }
      ASSERT_EQ(h.alignment.rows(), static_cast<Eigen::Index>(h.tokens.size()));
      ASSERT_EQ(h.alignment.cols(), static_cast<Eigen::Index>(src.size()));
      for (Eigen::Index t = 0; t < h.alignment.rows(); ++t) EXPECT_NEAR(h.alignment.row(t).sum(), 1.0, 1e-12);
    }
  }
}

TEST(Beam, AlignmentMatchesTeacherForcing) {
  std::mt19937_64 rng(8);
  const auto p = random_model<double>(tiny_hyper(10, 8, 6, 2), 77, 1.0);
  const auto src = random_tokens(rng, 10, 6);
  for (const auto& h : beam_search(src, p, 4, {8, true})) {
    const auto ref = reference_forward(src, h.tokens, p);
    for (std::size_t t = 0; t < h.tokens.size(); ++t)
      for (std::size_t j = 0; j < src.size(); ++j)
        EXPECT_NEAR(h.alignment(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)), ref.alignment[t][j],
                    1e-12);
  }
}

TEST(Beam, EarlyEndingsDoNotStopALeadingHypothesis) {
  // Bias-only model: symbol 4 is likely at every step, so the best
  // normalized hypothesis runs to max_len. Weak branches end in EOS early
  // and fill a k=2 pool long before that.
  auto p = ModelParams<double>::zeros(tiny_hyper(9, kToyVocab, 4, 1));
  p.out_b(4, 0) = 3.0;
  const TokenSequence src{4, 5, kEos};
  const auto best = exhaustive_best(src, p, 6);
  const auto beam = beam_search(src, p, 2, {6, false});
  ASSERT_FALSE(beam.empty());
  EXPECT_EQ(beam.front().tokens, best.tokens);
  EXPECT_NEAR(beam.front().score, best.score, 1e-12);
  EXPECT_FALSE(beam.front().finished);
}

TEST(Beam, RejectsZeroWidth) {
  const auto p = toy_model(1);
  EXPECT_THROW(beam_search(TokenSequence{4, kEos}, p, 0), DataError);
}

TEST(Beam, FloatModelAgreesWithDouble) {
  std::mt19937_64 rng(9);
  const auto p = random_model<double>(tiny_hyper(10, 8, 6, 2), 91, 0.5);
  const auto pf = p.cast<float>();
  const auto src = random_tokens(rng, 10, 5);
  const auto a = greedy_decode(src, p, {10, false});
  const auto b = greedy_decode(src, pf, {10, false});
  EXPECT_NEAR(a.log_prob, b.log_prob, 1e-4 * a.tokens.size());
}

TEST(Greedy, StopsAtMaxLenUnfinished) {
  // A model whose output bias strongly prefers id 4 never emits EOS.
  auto p = ModelParams<double>::zeros(tiny_hyper(6, 6, 4, 2));
  p.out_b(4, 0) = 5.0;
  const auto h = greedy_decode(TokenSequence{4, kEos}, p, {7, true});
  EXPECT_EQ(h.tokens, TokenSequence(7, 4));
  EXPECT_FALSE(h.finished);
  EXPECT_EQ(h.alignment.rows(), 7);
}

TEST(Greedy, TieBreaksToLowestGenerableId) {
  const auto p = ModelParams<double>::zeros(tiny_hyper(6, 6, 4, 2));
  const auto h = greedy_decode(TokenSequence{4, kEos}, p, {5, false});
  // PAD and SOS are excluded, so the lowest tied id is EOS.
  EXPECT_EQ(h.tokens, TokenSequence{kEos});
  EXPECT_TRUE(h.finished);
  EXPECT_NEAR(h.log_prob, -std::log(6.0), 1e-12);
}

TEST(Attention, ExportShapeAndLabels) {
  Hypothesis h;
  h.tokens = {5, 6, kEos};
  h.alignment = Eigen::MatrixXd::Constant(3, 4, 0.25);
  const auto m = export_attention(h, "a\tb", "xy");
  EXPECT_EQ(m.col_labels, (std::vector<std::string>{"a", "\t", "b", "</s>"}));
  EXPECT_EQ(m.row_labels, (std::vector<std::string>{"x", "y", "</s>"}));
  EXPECT_EQ(m.weights.rows(), 3);
  const std::string tsv = to_tsv(m);
  EXPECT_EQ(tsv.substr(0, tsv.find('\n')), "\ta\t\\t\tb\t</s>");
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 4);
  const auto j = to_json(m);
  EXPECT_EQ(j["weights"].size(), 3u);
  EXPECT_EQ(j["weights"][0].size(), 4u);
  EXPECT_EQ(j["source"][3], "</s>");
}

TEST(Attention, UnicodeLabelsAreWholeCharacters) {
  Hypothesis h;
  h.tokens = {5, kEos};
  h.alignment = Eigen::MatrixXd::Constant(2, 3, 1.0 / 3);
  const auto m = export_attention(h, "\xC3\xA9\\", "\xE2\x82\xAC");
  EXPECT_EQ(m.col_labels[0], "\xC3\xA9");
  EXPECT_EQ(m.row_labels[0], "\xE2\x82\xAC");
  const std::string tsv = to_tsv(m);
  EXPECT_NE(tsv.find("\\\\"), std::string::npos);
}

TEST(Attention, MissingAlignmentThrows) {
  Hypothesis h;
  h.tokens = {5, kEos};
  EXPECT_THROW(export_attention(h, "ab", "x"), MissingAlignment);
  const auto p = ModelParams<double>::zeros(tiny_hyper(6, 6, 4, 2));
  const auto g = greedy_decode(TokenSequence{4, kEos}, p, {5, false});
  EXPECT_THROW(export_attention(g, "a", ""), MissingAlignment);
}
