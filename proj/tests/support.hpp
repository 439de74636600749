#pragma once

// Test helpers: a loop-only scalar re-implementation of the model used as a
// forward oracle, random tiny models, and an exhaustive decoder oracle.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vlgen/nn/params.hpp"
#include "vlgen/tokenizer.hpp"

namespace vlgen::testkit {

using Vecd = std::vector<double>;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// y = W x (+ b), with W read element by element.
template <typename M>
Vecd matvec(const M& w, const Vecd& x) {
  Vecd y(static_cast<std::size_t>(w.rows()), 0.0);
  for (Eigen::Index r = 0; r < w.rows(); ++r)
    for (Eigen::Index c = 0; c < w.cols(); ++c) y[r] += static_cast<double>(w(r, c)) * x[c];
  return y;
}

inline Vecd concat(const Vecd& a, const Vecd& b) {
  Vecd out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

template <typename M>
Vecd column(const M& m, Eigen::Index c) {
  Vecd out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) out[r] = static_cast<double>(m(r, c));
  return out;
}

struct RefCell {
  Vecd h, c;
};

/// One LSTM step, gates in input/forget/candidate/output order.
template <typename W>
RefCell ref_lstm(const W& w, const Vecd& x, const RefCell& s) {
  const std::size_t H = s.h.size();
  Vecd a = matvec(w.wx, x);
  const Vecd b = matvec(w.wh, s.h);
  RefCell out{Vecd(H), Vecd(H)};
  for (std::size_t k = 0; k < H; ++k) {
    auto pre = [&](std::size_t gate) {
      const std::size_t r = gate * H + k;
      return a[r] + b[r] + static_cast<double>(w.b(static_cast<Eigen::Index>(r), 0));
    };
    const double i = sigmoid(pre(0)), f = sigmoid(pre(1)), g = std::tanh(pre(2)), o = sigmoid(pre(3));
    out.c[k] = f * s.c[k] + i * g;
    out.h[k] = o * std::tanh(out.c[k]);
  }
  return out;
}

struct RefResult {
  std::vector<double> step_nll;
  std::vector<Vecd> alignment;  // per target step
};

/// Teacher-forced forward pass of the whole model written with plain loops.
template <typename T>
RefResult reference_forward(const TokenSequence& src, const TokenSequence& tgt, const nn::ModelParams<T>& p) {
  const auto& hp = p.hyper;
  const std::size_t H = static_cast<std::size_t>(hp.cell), m = src.size();
  std::vector<Vecd> layer_in(m);
  for (std::size_t t = 0; t < m; ++t) layer_in[t] = column(p.src_emb, src[t]);
  std::vector<Vecd> finals;
  for (int l = 0; l < hp.enc_layers; ++l) {
    std::vector<Vecd> fwd(m), bwd(m);
    RefCell s{Vecd(H, 0.0), Vecd(H, 0.0)};
    for (std::size_t t = 0; t < m; ++t) {
      s = ref_lstm(p.enc[l][0], layer_in[t], s);
      fwd[t] = s.h;
    }
    s = {Vecd(H, 0.0), Vecd(H, 0.0)};
    for (std::size_t t = m; t-- > 0;) {
      s = ref_lstm(p.enc[l][1], layer_in[t], s);
      bwd[t] = s.h;
    }
    finals.push_back(concat(fwd[m - 1], bwd[0]));
    for (std::size_t t = 0; t < m; ++t) layer_in[t] = concat(fwd[t], bwd[t]);
  }
  const std::vector<Vecd>& states = layer_in;

  std::vector<RefCell> dec;
  for (int l = 0; l < hp.dec_layers; ++l) {
    const auto& br = p.bridge[l];
    Vecd h = matvec(br.wh, finals[l]), c = matvec(br.wc, finals[l]);
    for (std::size_t k = 0; k < H; ++k) {
      h[k] = std::tanh(h[k] + static_cast<double>(br.bh(static_cast<Eigen::Index>(k), 0)));
      c[k] += static_cast<double>(br.bc(static_cast<Eigen::Index>(k), 0));
    }
    dec.push_back({h, c});
  }

  RefResult out;
  Vecd ctx(2 * H, 0.0);
  TokenId prev = kSos;
  for (std::size_t t = 0; t < tgt.size(); ++t) {
    Vecd x = concat(column(p.tgt_emb, prev), ctx);
    for (int l = 0; l < hp.dec_layers; ++l) {
      dec[l] = ref_lstm(p.dec[l], x, dec[l]);
      x = dec[l].h;
    }
    const Vecd& q = dec.back().h;
    const Vecd wq = matvec(p.att_wq, q);
    Vecd e(m);
    for (std::size_t j = 0; j < m; ++j) {
      const Vecd wk = matvec(p.att_wk, states[j]);
      double s = 0.0;
      for (std::size_t a = 0; a < wq.size(); ++a)
        s += static_cast<double>(p.att_v(static_cast<Eigen::Index>(a), 0)) * std::tanh(wq[a] + wk[a]);
      e[j] = s;
    }
    double mx = e[0];
    for (double v : e) mx = std::max(mx, v);
    double z = 0.0;
    for (double& v : e) z += (v = std::exp(v - mx));
    for (double& v : e) v /= z;
    ctx.assign(2 * H, 0.0);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < 2 * H; ++k) ctx[k] += e[j] * states[j][k];
    const Vecd logits_in = concat(q, ctx);
    Vecd logits = matvec(p.out_w, logits_in);
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += static_cast<double>(p.out_b(static_cast<Eigen::Index>(v), 0));
    double lmx = logits[0];
    for (double v : logits) lmx = std::max(lmx, v);
    double lz = 0.0;
    for (double v : logits) lz += std::exp(v - lmx);
    out.step_nll.push_back(-(logits[tgt[t]] - lmx - std::log(lz)));
    out.alignment.push_back(e);
    prev = tgt[t];
  }
  return out;
}

/// Every tensor (biases included) drawn from U(-scale, scale).
template <typename T>
nn::ModelParams<T> random_model(const nn::Hyper& hp, std::uint64_t seed, double scale) {
  auto p = nn::ModelParams<T>::zeros(hp);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  p.for_each([&](const std::string&, nn::Mat<T>& m) {
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(u(rng));
  });
  return p;
}

inline nn::Hyper tiny_hyper(int src_vocab, int tgt_vocab, int cell = 8, int layers = 2) {
  nn::Hyper hp;
  hp.src_vocab = src_vocab;
  hp.tgt_vocab = tgt_vocab;
  hp.cell = cell;
  hp.enc_layers = hp.dec_layers = layers;
  return hp;
}

/// Random ids in [kNumSpecials, vocab) of the given length, EOS-terminated
/// when `eos` is set.
inline TokenSequence random_tokens(std::mt19937_64& rng, int vocab, std::size_t length, bool eos = true) {
  std::uniform_int_distribution<TokenId> pick(kNumSpecials, vocab - 1);
  TokenSequence out;
  for (std::size_t i = 0; i + (eos ? 1 : 0) < length; ++i) out.push_back(pick(rng));
  if (eos) out.push_back(kEos);
  return out;
}

/// Sum of per-step log-probabilities of `tokens` given `source`, scored
/// with the scalar reference.
template <typename T>
double reference_log_prob(const TokenSequence& src, const TokenSequence& tokens, const nn::ModelParams<T>& p) {
  const auto r = reference_forward(src, tokens, p);
  double lp = 0.0;
  for (double v : r.step_nll) lp -= v;
  return lp;
}

struct Scored {
  TokenSequence tokens;
  double log_prob;
  double score;
};

/// Enumerates every hypothesis the decoder can emit: EOS-terminated
/// sequences of length 1..max_len and unterminated sequences of length
/// max_len, over all ids except PAD and SOS. Returns the best by
/// log_prob / length.
template <typename T>
Scored exhaustive_best(const TokenSequence& src, const nn::ModelParams<T>& p, std::size_t max_len) {
  std::vector<TokenId> alphabet;
  for (TokenId v = 0; v < p.hyper.tgt_vocab; ++v)
    if (v != kPad && v != kSos) alphabet.push_back(v);
  Scored best{{}, 0.0, -1e300};
  TokenSequence seq;
  auto consider = [&](const TokenSequence& s) {
    const double lp = reference_log_prob(src, s, p);
    const double sc = lp / static_cast<double>(s.size());
    if (sc > best.score) best = {s, lp, sc};
  };
  std::function<void()> rec = [&] {
    for (TokenId v : alphabet) {
      seq.push_back(v);
      if (v == kEos || seq.size() == max_len) consider(seq);
      else rec();
      seq.pop_back();
    }
  };
  rec();
  return best;
}

inline std::filesystem::path data_dir() { return VLGEN_DATA_DIR; }

}  // namespace vlgen::testkit
