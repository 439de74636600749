#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vlgen/errors.hpp"

namespace vlgen::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Architecture hyperparameters. `emb` defaults to `cell` when zero and
/// `attn` likewise.
struct Hyper {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int emb = 0;
  int cell = 512;
  int attn = 0;
  int enc_layers = 2;
  int dec_layers = 2;

  int emb_dim() const { return emb > 0 ? emb : cell; }
  int attn_dim() const { return attn > 0 ? attn : cell; }
  int enc_out() const { return 2 * cell; }
  /// Width of the [decoder hidden ; context] vector fed to the output layer.
  int out_in() const { return cell + enc_out(); }

  friend bool operator==(const Hyper&, const Hyper&) = default;
};

/// Gate row blocks are ordered input, forget, cell candidate, output.
template <typename T>
struct LstmWeights {
  Mat<T> wx;  // 4H x in
  Mat<T> wh;  // 4H x H
  Mat<T> b;   // 4H x 1

  int input_dim() const { return static_cast<int>(wx.cols()); }
  int hidden_dim() const { return static_cast<int>(wh.cols()); }
};

/// Affine map from the final encoder states of one layer to the initial
/// decoder state of the same layer: h0 = tanh(wh s + bh), c0 = wc s + bc.
template <typename T>
struct Bridge {
  Mat<T> wh, bh, wc, bc;
};

/// Every learnable tensor. The same struct holds gradients and Adam moments.
/// Embeddings are stored one column per token.
template <typename T>
struct ModelParams {
  Hyper hyper;
  Mat<T> src_emb;                                 // E x Vs
  Mat<T> tgt_emb;                                 // E x Vt
  std::vector<std::array<LstmWeights<T>, 2>> enc;  // [layer][0 = forward, 1 = backward]
  std::vector<Bridge<T>> bridge;                   // per decoder layer
  std::vector<LstmWeights<T>> dec;
  Mat<T> att_wq;  // A x H      query projection
  Mat<T> att_wk;  // A x 2H     key projection
  Mat<T> att_v;   // A x 1      score vector
  Mat<T> out_w;   // Vt x 3H
  Mat<T> out_b;   // Vt x 1

  static ModelParams zeros(const Hyper& hp) {
    if (hp.src_vocab <= 0 || hp.tgt_vocab <= 0 || hp.cell <= 0)
      throw DimensionMismatch("vocabulary sizes and cell size must be positive");
    if (hp.enc_layers != hp.dec_layers || hp.enc_layers < 1)
      throw DimensionMismatch("the bridge needs enc_layers == dec_layers >= 1");
    const int E = hp.emb_dim(), H = hp.cell, A = hp.attn_dim();
    ModelParams p;
    p.hyper = hp;
    p.src_emb = Mat<T>::Zero(E, hp.src_vocab);
    p.tgt_emb = Mat<T>::Zero(E, hp.tgt_vocab);
    auto lstm = [H](int in) {
      return LstmWeights<T>{Mat<T>::Zero(4 * H, in), Mat<T>::Zero(4 * H, H), Mat<T>::Zero(4 * H, 1)};
    };
    for (int l = 0; l < hp.enc_layers; ++l) {
      const int in = l == 0 ? E : 2 * H;
      p.enc.push_back({lstm(in), lstm(in)});
    }
    for (int l = 0; l < hp.dec_layers; ++l) {
      p.bridge.push_back(
          {Mat<T>::Zero(H, 2 * H), Mat<T>::Zero(H, 1), Mat<T>::Zero(H, 2 * H), Mat<T>::Zero(H, 1)});
      p.dec.push_back(lstm(l == 0 ? E + 2 * H : H));
    }
    p.att_wq = Mat<T>::Zero(A, H);
    p.att_wk = Mat<T>::Zero(A, 2 * H);
    p.att_v = Mat<T>::Zero(A, 1);
    p.out_w = Mat<T>::Zero(hp.tgt_vocab, hp.out_in());
    p.out_b = Mat<T>::Zero(hp.tgt_vocab, 1);
    return p;
  }

  /// Weights ~ U(-scale, scale), biases zero, LSTM forget-gate bias 1.
  static ModelParams initialized(const Hyper& hp, std::uint64_t seed, double scale = 0.08) {
    ModelParams p = zeros(hp);
    std::mt19937_64 rng(seed);
    p.for_each([&](const std::string& name, Mat<T>& m) {
      if (is_bias(name)) return;
      for (Eigen::Index k = 0; k < m.size(); ++k) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        m.data()[k] = static_cast<T>(scale * (2.0 * u - 1.0));
      }
    });
    const int H = hp.cell;
    auto forget = [H](LstmWeights<T>& w) { w.b.block(H, 0, H, 1).setConstant(T(1)); };
    for (auto& layer : p.enc)
      for (auto& dir : layer) forget(dir);
    for (auto& w : p.dec) forget(w);
    return p;
  }

  static bool is_bias(const std::string& name) {
    const auto dot = name.rfind('.');
    const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    return leaf == "b" || leaf == "bh" || leaf == "bc";
  }

  /// Visits every tensor in a fixed order with a stable name.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Mat<T>& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  void set_zero() {
    for_each([](const std::string&, Mat<T>& m) { m.setZero(); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Mat<T>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out = ModelParams<U>::zeros(hyper);
    std::vector<const Mat<T>*> src;
    for_each([&](const std::string&, const Mat<T>& m) { src.push_back(&m); });
    std::size_t k = 0;
    out.for_each([&](const std::string&, Mat<U>& m) { m = src[k++]->template cast<U>(); });
    return out;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& p, Fn& fn) {
    fn("src_emb", p.src_emb);
    fn("tgt_emb", p.tgt_emb);
    auto lstm = [&fn](const std::string& prefix, auto& w) {
      fn(prefix + ".wx", w.wx);
      fn(prefix + ".wh", w.wh);
      fn(prefix + ".b", w.b);
    };
    for (std::size_t l = 0; l < p.enc.size(); ++l) {
      lstm("enc.l" + std::to_string(l) + ".fwd", p.enc[l][0]);
      lstm("enc.l" + std::to_string(l) + ".bwd", p.enc[l][1]);
    }
    for (std::size_t l = 0; l < p.bridge.size(); ++l) {
      const std::string prefix = "bridge.l" + std::to_string(l);
      fn(prefix + ".wh", p.bridge[l].wh);
      fn(prefix + ".bh", p.bridge[l].bh);
      fn(prefix + ".wc", p.bridge[l].wc);
      fn(prefix + ".bc", p.bridge[l].bc);
    }
    for (std::size_t l = 0; l < p.dec.size(); ++l) lstm("dec.l" + std::to_string(l), p.dec[l]);
    fn("att.wq", p.att_wq);
    fn("att.wk", p.att_wk);
    fn("att.v", p.att_v);
    fn("out.w", p.out_w);
    fn("out.b", p.out_b);
  }
};

}  // namespace vlgen::nn
