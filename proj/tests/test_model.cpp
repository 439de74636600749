#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "vlgen/nn/lstm.hpp"
#include "vlgen/nn/seq2seq.hpp"

using namespace vlgen;
using namespace vlgen::testkit;
using nn::Mat;
using nn::ModelParams;
using nn::Vec;

namespace {

double total_nll(const TokenSequence& s, const TokenSequence& t, const ModelParams<double>& p,
                 const nn::RunOptions& opt = {}) {
  return nn::model_forward(s, t, p, opt).total_nll;
}

}  // namespace

TEST(Lstm, StepMatchesScalarReference) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1, 1);
  nn::LstmWeights<double> w{Mat<double>(20, 3), Mat<double>(20, 5), Mat<double>(20, 1)};
  for (auto* m : {&w.wx, &w.wh, &w.b})
    for (Eigen::Index k = 0; k < m->size(); ++k) m->data()[k] = u(rng);
  Vec<double> x(3), h(5), c(5);
  for (auto* v : {&x, &h, &c})
    for (Eigen::Index k = 0; k < v->size(); ++k) (*v)[k] = u(rng);
  const auto got = nn::lstm_step<double>(x, {c, h}, w);
  const auto want = ref_lstm(w, column(x, 0), {column(h, 0), column(c, 0)});
  for (int k = 0; k < 5; ++k) {
    EXPECT_NEAR(got.h[k], want.h[k], 1e-14);
    EXPECT_NEAR(got.c[k], want.c[k], 1e-14);
  }
}

TEST(Lstm, StepRejectsMismatchedInput) {
  nn::LstmWeights<double> w{Mat<double>::Zero(8, 3), Mat<double>::Zero(8, 2), Mat<double>::Zero(8, 1)};
  EXPECT_THROW(nn::lstm_step<double>(Vec<double>::Zero(4), {Vec<double>::Zero(2), Vec<double>::Zero(2)}, w),
               DimensionMismatch);
}

TEST(Lstm, DropoutMaskRateAndScale) {
  std::mt19937_64 rng(3);
  Mat<double> mask(100, 1000);
  nn::fill_dropout_mask<double>(mask, 0.5, rng);
  const double zeros = static_cast<double>((mask.array() == 0.0).count()) / static_cast<double>(mask.size());
  EXPECT_NEAR(zeros, 0.5, 0.01);
  EXPECT_TRUE(((mask.array() == 0.0) || (mask.array() == 2.0)).all());
}

TEST(Model, ForwardMatchesScalarReference) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const auto hp = tiny_hyper(9 + trial, 7 + trial, 6, 1 + trial % 2);
    const auto p = random_model<double>(hp, 100 + trial, 0.5);
    const auto src = random_tokens(rng, hp.src_vocab, 3 + trial);
    const auto tgt = random_tokens(rng, hp.tgt_vocab, 2 + trial);
    const auto got = nn::model_forward(src, tgt, p);
    const auto want = reference_forward(src, tgt, p);
    ASSERT_EQ(got.step_nll.size(), want.step_nll.size());
    for (std::size_t t = 0; t < tgt.size(); ++t) {
      EXPECT_NEAR(got.step_nll[t], want.step_nll[t], 1e-12);
      for (std::size_t j = 0; j < src.size(); ++j)
        EXPECT_NEAR(got.alignment(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)), want.alignment[t][j],
                    1e-12);
    }
  }
}

TEST(Model, IncrementalDecodingMatchesTeacherForcing) {
  std::mt19937_64 rng(12);
  const auto hp = tiny_hyper(10, 9);
  const auto p = random_model<double>(hp, 7, 0.5);
  const auto src = random_tokens(rng, 10, 6), tgt = random_tokens(rng, 9, 5);
  const auto enc = nn::encode_source(src, p);
  auto state = nn::initial_state(enc, p);
  const auto ref = reference_forward(src, tgt, p);
  TokenId prev = kSos;
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    auto [logp, next] = nn::decode_step(prev, state, enc, p);
    EXPECT_NEAR(-logp[tgt[t]], ref.step_nll[t], 1e-12);
    EXPECT_NEAR(logp.array().exp().sum(), 1.0, 1e-12);
    state = std::move(next);
    prev = tgt[t];
  }
}

TEST(Model, ZeroParametersGiveUniformLoss) {
  const auto hp = tiny_hyper(12, 45);
  const auto p = ModelParams<double>::zeros(hp);
  std::mt19937_64 rng(2);
  const auto src = random_tokens(rng, 12, 7), tgt = random_tokens(rng, 45, 9);
  const auto r = nn::model_forward(src, tgt, p);
  for (double s : r.step_nll) EXPECT_NEAR(s, std::log(45.0), 1e-12);
}

TEST(Model, AttentionRowsSumToOne) {
  std::mt19937_64 rng(4);
  const auto hp = tiny_hyper(10, 9);
  const auto p = random_model<double>(hp, 8, 1.0);
  const auto r = nn::model_forward(random_tokens(rng, 10, 8), random_tokens(rng, 9, 6), p);
  for (Eigen::Index t = 0; t < r.alignment.rows(); ++t) EXPECT_NEAR(r.alignment.row(t).sum(), 1.0, 1e-12);
}

TEST(Model, RejectsOutOfVocabularyTokens) {
  const auto p = ModelParams<double>::zeros(tiny_hyper(6, 6));
  EXPECT_THROW(nn::model_forward({4, 9, kEos}, {4, kEos}, p), DimensionMismatch);
  EXPECT_THROW(nn::model_forward({4, kEos}, {7, kEos}, p), DimensionMismatch);
  EXPECT_THROW(nn::model_forward({}, {4, kEos}, p), DimensionMismatch);
}

TEST(Model, ParameterNamesAreStableAndUnique) {
  const auto p = ModelParams<float>::zeros(tiny_hyper(6, 6, 4, 2));
  std::vector<std::string> names;
  p.for_each([&](const std::string& n, const Mat<float>&) { names.push_back(n); });
  EXPECT_EQ(names.front(), "src_emb");
  EXPECT_EQ(names.back(), "out.b");
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  EXPECT_EQ(names.size(), 2u + 2 * 2 * 3 + 2 * 4 + 2 * 3 + 5);
}

TEST(Model, InitializationScaleAndForgetBias) {
  const auto p = ModelParams<double>::initialized(tiny_hyper(6, 6, 4), 1);
  EXPECT_LE(p.out_w.cwiseAbs().maxCoeff(), 0.08);
  EXPECT_GT(p.out_w.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(p.dec[0].b(4, 0), 1.0);  // forget gate block
  EXPECT_EQ(p.dec[0].b(0, 0), 0.0);
  EXPECT_EQ(p.bridge[0].bh.cwiseAbs().maxCoeff(), 0.0);
}

// Central differences against the analytic gradient for every tensor.
TEST(Gradients, MatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  const auto hp = tiny_hyper(11, 9);
  auto p = random_model<double>(hp, 5, 0.5);
  const auto src = random_tokens(rng, 11, 7), tgt = random_tokens(rng, 9, 6);
  const auto grad = nn::model_gradients(src, tgt, p);
  std::vector<Mat<double>*> ps;
  std::vector<const Mat<double>*> gs;
  std::vector<std::string> names;
  p.for_each([&](const std::string& n, Mat<double>& m) {
    ps.push_back(&m);
    names.push_back(n);
  });
  grad.for_each([&](const std::string&, const Mat<double>& m) { gs.push_back(&m); });
  const double eps = 1e-5;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    for (int s = 0; s < 4; ++s) {
      const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(ps[i]->size()));
      double& x = ps[i]->data()[k];
      const double x0 = x;
      x = x0 + eps;
      const double up = total_nll(src, tgt, p);
      x = x0 - eps;
      const double down = total_nll(src, tgt, p);
      x = x0;
      const double fd = (up - down) / (2 * eps), an = gs[i]->data()[k];
      EXPECT_NEAR(an, fd, 1e-7 + 1e-6 * std::abs(fd)) << names[i] << "[" << k << "]";
    }
  }
}

TEST(Gradients, DropoutGradientMatchesFiniteDifferencesWithFixedMask) {
  std::mt19937_64 rng(22);
  const auto hp = tiny_hyper(8, 8, 5);
  auto p = random_model<double>(hp, 6, 0.5);
  const auto src = random_tokens(rng, 8, 5), tgt = random_tokens(rng, 8, 4);
  auto loss = [&](ModelParams<double>* grad) {
    std::mt19937_64 mask_rng(99);
    nn::RunOptions opt{true, 0.3, &mask_rng, false};
    const nn::PairRef pr{&src, &tgt};
    nn::Seq2SeqGraph<double> g(p, std::span<const nn::PairRef>(&pr, 1), opt);
    if (grad) g.backward(*grad);
    return g.output().total_nll;
  };
  auto grad = ModelParams<double>::zeros(hp);
  loss(&grad);
  const double eps = 1e-5;
  for (auto* m : {&p.src_emb, &p.enc[1][1].wx, &p.dec[0].wx, &p.att_v, &p.out_w}) {
    Mat<double>* g = m == &p.src_emb ? &grad.src_emb
                   : m == &p.enc[1][1].wx ? &grad.enc[1][1].wx
                   : m == &p.dec[0].wx ? &grad.dec[0].wx
                   : m == &p.att_v ? &grad.att_v
                                   : &grad.out_w;
    for (int s = 0; s < 5; ++s) {
      const Eigen::Index k = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(m->size()));
      const double x0 = m->data()[k];
      m->data()[k] = x0 + eps;
      const double up = loss(nullptr);
      m->data()[k] = x0 - eps;
      const double down = loss(nullptr);
      m->data()[k] = x0;
      EXPECT_NEAR(g->data()[k], (up - down) / (2 * eps), 1e-7 + 1e-6 * std::abs(g->data()[k]));
    }
  }
}

// A padded batch must produce exactly the per-example losses and the sum of
// the per-example gradients.
TEST(Gradients, PaddedBatchEqualsSumOfExamples) {
  std::mt19937_64 rng(23);
  const auto hp = tiny_hyper(10, 9, 6);
  const auto p = random_model<double>(hp, 9, 0.5);
  std::vector<TokenSequence> srcs, tgts;
  for (std::size_t len : {3u, 7u, 5u, 1u}) {
    srcs.push_back(random_tokens(rng, 10, len));
    tgts.push_back(random_tokens(rng, 9, 9 - len));
  }
  std::vector<nn::PairRef> refs;
  for (std::size_t i = 0; i < srcs.size(); ++i) refs.push_back({&srcs[i], &tgts[i]});
  nn::Seq2SeqGraph<double> g(p, refs, {});
  auto batch_grad = ModelParams<double>::zeros(hp);
  g.backward(batch_grad);

  auto sum_grad = ModelParams<double>::zeros(hp);
  double sum_nll = 0.0;
  for (std::size_t i = 0; i < srcs.size(); ++i) {
    const auto single = nn::model_forward(srcs[i], tgts[i], p);
    sum_nll += single.total_nll;
    double batch_i = 0.0;
    for (double s : g.output().step_nll[i]) batch_i += s;
    EXPECT_NEAR(batch_i, single.total_nll, 1e-12);
    const auto gi = nn::model_gradients(srcs[i], tgts[i], p);
    std::vector<const Mat<double>*> parts;
    gi.for_each([&](const std::string&, const Mat<double>& m) { parts.push_back(&m); });
    std::size_t k = 0;
    sum_grad.for_each([&](const std::string&, Mat<double>& m) { m += *parts[k++]; });
  }
  EXPECT_NEAR(g.output().total_nll, sum_nll, 1e-11);
  std::vector<const Mat<double>*> want;
  sum_grad.for_each([&](const std::string&, const Mat<double>& m) { want.push_back(&m); });
  std::size_t k = 0;
  batch_grad.for_each([&](const std::string& name, const Mat<double>& m) {
    EXPECT_LT((m - *want[k]).cwiseAbs().maxCoeff(), 1e-11) << name;
    ++k;
  });
}

TEST(Gradients, GradScaleIsLinear) {
  std::mt19937_64 rng(24);
  const auto hp = tiny_hyper(8, 8, 4);
  const auto p = random_model<double>(hp, 10, 0.5);
  const auto src = random_tokens(rng, 8, 5), tgt = random_tokens(rng, 8, 4);
  const nn::PairRef pr{&src, &tgt};
  nn::Seq2SeqGraph<double> g(p, std::span<const nn::PairRef>(&pr, 1), {});
  auto g1 = ModelParams<double>::zeros(hp), g3 = ModelParams<double>::zeros(hp);
  g.backward(g1);
  g.backward(g3, 0.25);
  EXPECT_LT((g3.out_w - 0.25 * g1.out_w).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_LT((g3.src_emb - 0.25 * g1.src_emb).cwiseAbs().maxCoeff(), 1e-14);
}
