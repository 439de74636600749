#pragma once

// Bidirectional LSTM encoder, additive attention and an input-feeding LSTM
// decoder, with a batched forward pass that records activations and an exact
// reverse-mode backward pass over it.
//
// Batches are laid out column-wise: step t of a batch of B sequences lives in
// columns [t*B, (t+1)*B). Source positions past a sequence's length are
// masked: their LSTM state is forced to zero and their gradients are dropped,
// so the backward direction starts from a zero state at each sequence's own
// last token.

#include <cmath>
#include <limits>
#include <optional>
#include <algorithm>
#include <array>
#include <random>
#include <span>
#include <vector>

#include "vlgen/nn/lstm.hpp"
#include "vlgen/nn/params.hpp"
#include "vlgen/tokenizer.hpp"

namespace vlgen::nn {

struct RunOptions {
  bool train = false;           // enables dropout
  double dropout = 0.0;         // drop probability at every cell input
  std::mt19937_64* rng = nullptr;
  bool record_alignment = false;

  bool dropout_active() const { return train && dropout > 0.0 && rng != nullptr; }
};

/// Encoder output for one source sequence.
template <typename T>
struct EncoderStates {
  Mat<T> states;               // 2H x m, column j = [forward h_j ; backward h_j]
  Mat<T> keys;                 // A x m, att_wk * states
  std::vector<Vec<T>> finals;  // per layer: [forward h_m ; backward h_1]

  Eigen::Index length() const { return states.cols(); }
};

/// Recurrent decoder state for a set of hypotheses (one column each).
template <typename T>
struct DecoderState {
  std::vector<Mat<T>> h;  // per layer, H x B
  std::vector<Mat<T>> c;  // per layer, H x B
  Mat<T> ctx;             // 2H x B, context from the previous step

  Eigen::Index batch() const { return ctx.cols(); }

  /// Keeps column `parents[k]` as new column k.
  void select(std::span<const int> parents) {
    auto pick = [&](Mat<T>& m) {
      Mat<T> out(m.rows(), static_cast<Eigen::Index>(parents.size()));
      for (std::size_t k = 0; k < parents.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(parents[k]);
      m = std::move(out);
    };
    for (auto& m : h) pick(m);
    for (auto& m : c) pick(m);
    pick(ctx);
  }
};

namespace detail {

template <typename T>
void log_softmax_cols(Eigen::Ref<Mat<T>> m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    auto col = m.col(j);
    const T mx = col.maxCoeff();
    const T lse = mx + std::log((col.array() - mx).exp().sum());
    col.array() -= lse;
  }
}

template <typename T>
Vec<T> softmax(const Vec<T>& e) {
  const T mx = e.maxCoeff();
  Vec<T> a = (e.array() - mx).exp().matrix();
  a /= a.sum();
  return a;
}

// Scores e_j = v . tanh(wq + keys_j); returns the weights and optionally the
// tanh activations.
template <typename T>
Vec<T> attention_weights(const Mat<T>& keys, const Eigen::Ref<const Vec<T>>& wq, const Mat<T>& v,
                         Mat<T>* z_out = nullptr) {
  Mat<T> z = keys;
  z.colwise() += wq;
  z.array() = z.array().tanh();
  Vec<T> e = z.transpose() * v.col(0);
  if (z_out) *z_out = std::move(z);
  return softmax<T>(e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Encoder

/// Batched bidirectional encoder run with activation caches.
template <typename T>
class EncoderGraph {
 public:
  EncoderGraph(const ModelParams<T>& p, std::span<const TokenSequence* const> sources, const RunOptions& opt)
      : p_(p), B_(static_cast<int>(sources.size())) {
    const int H = p.hyper.cell, E = p.hyper.emb_dim();
    M_ = 0;
    for (auto* s : sources) {
      if (s->empty()) throw DimensionMismatch("empty source sequence");
      lens_.push_back(static_cast<int>(s->size()));
      M_ = std::max(M_, lens_.back());
    }
    tokens_.assign(static_cast<std::size_t>(M_) * B_, kPad);
    for (int b = 0; b < B_; ++b)
      for (int t = 0; t < lens_[b]; ++t) {
        const TokenId id = (*sources[b])[t];
        if (id < 0 || id >= p.hyper.src_vocab) throw DimensionMismatch("source token outside vocabulary");
        tokens_[static_cast<std::size_t>(t) * B_ + b] = id;
      }

    const int L = p.hyper.enc_layers;
    caches_.resize(L);
    outputs_.resize(L);
    Mat<T> input(E, static_cast<Eigen::Index>(M_) * B_);
    for (std::size_t k = 0; k < tokens_.size(); ++k) input.col(static_cast<Eigen::Index>(k)) = p.src_emb.col(tokens_[k]);

    for (int l = 0; l < L; ++l) {
      const int in = static_cast<int>(input.rows());
      outputs_[l].resize(2 * H, static_cast<Eigen::Index>(M_) * B_);
      for (int d = 0; d < 2; ++d) {
        auto& cache = caches_[l][d];
        cache.resize(in, H, M_, B_);
        if (opt.dropout_active()) {
          cache.mask.resize(in, cache.x.cols());
          fill_dropout_mask<T>(cache.mask, opt.dropout, *opt.rng);
          cache.x = input.cwiseProduct(cache.mask);
        } else {
          cache.mask.resize(0, 0);
          cache.x = input;
        }
        run_direction(p.enc[l][d], cache, d == 1);
        outputs_[l].block(d * H, 0, H, outputs_[l].cols()) = cache.h;
      }
      input = outputs_[l];
    }
  }

  int batch() const { return B_; }
  int max_len() const { return M_; }
  int length(int b) const { return lens_[b]; }
  const Mat<T>& layer_output(int l) const { return outputs_[l]; }

  /// Top-layer states of sequence b as a 2H x m matrix.
  Mat<T> states(int b) const {
    const auto& top = outputs_.back();
    Mat<T> s(top.rows(), lens_[b]);
    for (int t = 0; t < lens_[b]; ++t) s.col(t) = top.col(static_cast<Eigen::Index>(t) * B_ + b);
    return s;
  }

  /// [forward h at last token ; backward h at first token] of layer l, per column.
  Mat<T> finals(int l) const {
    const int H = p_.hyper.cell;
    const auto& y = outputs_[l];
    Mat<T> s(2 * H, B_);
    for (int b = 0; b < B_; ++b) {
      s.col(b).head(H) = y.col(static_cast<Eigen::Index>(lens_[b] - 1) * B_ + b).head(H);
      s.col(b).tail(H) = y.col(b).tail(H);
    }
    return s;
  }

  /// Backpropagates gradients with respect to every layer's outputs
  /// (2H x M*B each; consumed) into `grad`.
  void backward(std::vector<Mat<T>>& d_outputs, ModelParams<T>& grad) const {
    const int H = p_.hyper.cell;
    const int L = static_cast<int>(caches_.size());
    Mat<T> dgates;
    for (int l = L - 1; l >= 0; --l) {
      Mat<T> d_input;
      for (int d = 0; d < 2; ++d) {
        const auto& cache = caches_[l][d];
        const auto& w = p_.enc[l][d];
        Mat<T> dh = d_outputs[l].block(d * H, 0, H, d_outputs[l].cols());
        backprop_direction(w, cache, dh, dgates, d == 1);
        accumulate_lstm_grads(cache, dgates, grad.enc[l][d]);
        Mat<T> dx = w.wx.transpose() * dgates;
        if (cache.mask.size() > 0) dx.array() *= cache.mask.array();
        if (d == 0)
          d_input = std::move(dx);
        else
          d_input += dx;
      }
      if (l > 0) {
        d_outputs[l - 1] += d_input;
      } else {
        for (std::size_t k = 0; k < tokens_.size(); ++k) {
          const int t = static_cast<int>(k) / B_, b = static_cast<int>(k) % B_;
          if (t < lens_[b]) grad.src_emb.col(tokens_[k]) += d_input.col(static_cast<Eigen::Index>(k));
        }
      }
    }
  }

 private:
  bool valid(int t, int b) const { return t < lens_[b]; }

  void run_direction(const LstmWeights<T>& w, LstmSeqCache<T>& cache, bool reverse) {
    const int H = w.hidden_dim();
    cache.gates.noalias() = w.wx * cache.x;
    cache.gates.colwise() += w.b.col(0);
    Mat<T> h = Mat<T>::Zero(H, B_), c = Mat<T>::Zero(H, B_);
    for (int k = 0; k < M_; ++k) {
      const int t = reverse ? M_ - 1 - k : k;
      const Eigen::Index c0 = static_cast<Eigen::Index>(t) * B_;
      auto g = cache.gates.middleCols(c0, B_);
      g.noalias() += w.wh * h;
      cache.h_prev.middleCols(c0, B_) = h;
      cache.c_prev.middleCols(c0, B_) = c;
      lstm_cell_forward<T>(g, cache.c_prev.middleCols(c0, B_), cache.c.middleCols(c0, B_),
                           cache.tc.middleCols(c0, B_), cache.h.middleCols(c0, B_));
      for (int b = 0; b < B_; ++b) {
        if (valid(t, b)) continue;
        cache.c.col(c0 + b).setZero();
        cache.tc.col(c0 + b).setZero();
        cache.h.col(c0 + b).setZero();
      }
      h = cache.h.middleCols(c0, B_);
      c = cache.c.middleCols(c0, B_);
    }
  }

  void backprop_direction(const LstmWeights<T>& w, const LstmSeqCache<T>& cache, const Mat<T>& dH,
                          Mat<T>& dgates, bool reverse) const {
    const int H = w.hidden_dim();
    dgates.resize(4 * H, cache.gates.cols());
    Mat<T> dh_carry = Mat<T>::Zero(H, B_), dc_carry = Mat<T>::Zero(H, B_);
    Mat<T> dh(H, B_), dc_prev(H, B_);
    for (int k = 0; k < M_; ++k) {
      const int t = reverse ? k : M_ - 1 - k;
      const Eigen::Index c0 = static_cast<Eigen::Index>(t) * B_;
      dh = dH.middleCols(c0, B_) + dh_carry;
      auto dg = dgates.middleCols(c0, B_);
      lstm_cell_backward<T>(cache.gates.middleCols(c0, B_), cache.c_prev.middleCols(c0, B_),
                            cache.tc.middleCols(c0, B_), dh, dc_carry, dg, dc_prev);
      for (int b = 0; b < B_; ++b) {
        if (valid(t, b)) continue;
        dg.col(b).setZero();
        dc_prev.col(b).setZero();
      }
      dh_carry.noalias() = w.wh.transpose() * dg;
      dc_carry = dc_prev;
    }
  }

  const ModelParams<T>& p_;
  int B_ = 0;
  int M_ = 0;
  std::vector<int> lens_;
  std::vector<TokenId> tokens_;
  std::vector<std::array<LstmSeqCache<T>, 2>> caches_;
  std::vector<Mat<T>> outputs_;
};

/// Runs the encoder on one source sequence (inference mode).
template <typename T>
EncoderStates<T> encode_source(const TokenSequence& ids, const ModelParams<T>& p) {
  if (ids.empty()) throw DimensionMismatch("encode_source needs a non-empty sequence");
  const TokenSequence* src[] = {&ids};
  EncoderGraph<T> g(p, src, RunOptions{});
  EncoderStates<T> out;
  out.states = g.states(0);
  out.keys = p.att_wk * out.states;
  for (int l = 0; l < p.hyper.enc_layers; ++l) out.finals.push_back(g.finals(l).col(0));
  return out;
}

// ---------------------------------------------------------------------------
// Attention and single decoder steps (inference)

/// Additive attention: e_j = v . tanh(Wq query + Wk h_j), weights = softmax(e),
/// context = sum_j weights_j h_j.
template <typename T>
std::pair<Vec<T>, Vec<T>> attend(const Vec<T>& query, const EncoderStates<T>& enc, const ModelParams<T>& p) {
  if (query.size() != p.att_wq.cols()) throw DimensionMismatch("attention query size mismatch");
  const Vec<T> wq = p.att_wq * query;
  Vec<T> weights = detail::attention_weights<T>(enc.keys, wq, p.att_v);
  Vec<T> context = enc.states * weights;
  return {std::move(context), std::move(weights)};
}

/// Initial decoder state via the bridge, replicated over `columns` hypotheses.
template <typename T>
DecoderState<T> initial_state(const EncoderStates<T>& enc, const ModelParams<T>& p, int columns = 1) {
  DecoderState<T> s;
  for (int l = 0; l < p.hyper.dec_layers; ++l) {
    const auto& br = p.bridge[l];
    const Vec<T> h0 = (br.wh * enc.finals[l] + br.bh.col(0)).array().tanh().matrix();
    const Vec<T> c0 = br.wc * enc.finals[l] + br.bc.col(0);
    s.h.push_back(h0.replicate(1, columns));
    s.c.push_back(c0.replicate(1, columns));
  }
  s.ctx = Mat<T>::Zero(p.hyper.enc_out(), columns);
  return s;
}

/// Advances every column of `state` by one token and returns the
/// log-probabilities over the target vocabulary (Vt x B). When `alignment`
/// is given it receives the attention weights (m x B).
template <typename T>
Mat<T> decode_step_batch(std::span<const TokenId> prev, DecoderState<T>& state, const EncoderStates<T>& enc,
                         const ModelParams<T>& p, Mat<T>* alignment = nullptr) {
  const int B = static_cast<int>(prev.size());
  const int L = p.hyper.dec_layers, E = p.hyper.emb_dim(), H = p.hyper.cell;
  if (state.batch() != B || static_cast<int>(state.h.size()) != L)
    throw DimensionMismatch("decoder state does not match the token batch or layer count");
  Mat<T> x(E + 2 * H, B);
  for (int b = 0; b < B; ++b) {
    if (prev[b] < 0 || prev[b] >= p.hyper.tgt_vocab) throw DimensionMismatch("target token outside vocabulary");
    x.col(b).head(E) = p.tgt_emb.col(prev[b]);
  }
  x.bottomRows(2 * H) = state.ctx;
  Mat<T> tc(H, B), c_new(H, B), h_new(H, B);
  for (int l = 0; l < L; ++l) {
    const auto& w = p.dec[l];
    Mat<T> g = w.wx * x;
    g.noalias() += w.wh * state.h[l];
    g.colwise() += w.b.col(0);
    lstm_cell_forward<T>(g, state.c[l], c_new, tc, h_new);
    state.c[l] = c_new;
    state.h[l] = h_new;
    x = h_new;
  }
  const Mat<T> wq = p.att_wq * state.h.back();
  if (alignment) alignment->resize(enc.length(), B);
  for (int b = 0; b < B; ++b) {
    const Vec<T> a = detail::attention_weights<T>(enc.keys, wq.col(b), p.att_v);
    state.ctx.col(b) = enc.states * a;
    if (alignment) alignment->col(b) = a;
  }
  Mat<T> out_in(H + 2 * H, B);
  out_in.topRows(H) = state.h.back();
  out_in.bottomRows(2 * H) = state.ctx;
  Mat<T> logp = p.out_w * out_in;
  logp.colwise() += p.out_b.col(0);
  detail::log_softmax_cols<T>(logp);
  return logp;
}

/// Single-token convenience form: returns (log-probabilities, next state).
template <typename T>
std::pair<Vec<T>, DecoderState<T>> decode_step(TokenId prev, const DecoderState<T>& state,
                                               const EncoderStates<T>& enc, const ModelParams<T>& p) {
  DecoderState<T> next = state;
  const TokenId toks[] = {prev};
  Mat<T> logp = decode_step_batch<T>(toks, next, enc, p);
  return {Vec<T>(logp.col(0)), std::move(next)};
}

// ---------------------------------------------------------------------------
// Teacher-forced training graph

struct PairRef {
  const TokenSequence* source;
  const TokenSequence* target;  // ends with EOS
};

template <typename T>
struct BatchOutput {
  double total_nll = 0.0;
  std::size_t tokens = 0;
  std::vector<std::vector<double>> step_nll;  // per example, per target token
  std::vector<Mat<T>> alignments;             // per example: target length x source length
};

/// Forward pass over a batch with teacher forcing; optionally backward.
/// Gradients of `grad_scale * total NLL` are added into `grad`.
template <typename T>
class Seq2SeqGraph {
 public:
  Seq2SeqGraph(const ModelParams<T>& p, std::span<const PairRef> batch, const RunOptions& opt)
      : p_(p), opt_(opt), B_(static_cast<int>(batch.size())) {
    if (batch.empty()) throw DimensionMismatch("empty batch");
    std::vector<const TokenSequence*> sources;
    for (const auto& pr : batch) {
      if (pr.target->empty()) throw DimensionMismatch("empty target sequence");
      sources.push_back(pr.source);
      targets_.push_back(pr.target);
      N_ = std::max(N_, static_cast<int>(pr.target->size()));
    }
    for (const auto* tgt : targets_)
      for (TokenId id : *tgt)
        if (id < 0 || id >= p.hyper.tgt_vocab) throw DimensionMismatch("target token outside vocabulary");
    enc_.emplace(p, sources, opt);
    forward();
  }

  const BatchOutput<T>& output() const { return out_; }

  void backward(ModelParams<T>& grad, T grad_scale = T(1)) const;

 private:
  TokenId gold(int b, int t) const {
    const auto& y = *targets_[b];
    return t < static_cast<int>(y.size()) ? y[t] : kPad;
  }
  TokenId input_token(int b, int t) const { return t == 0 ? kSos : gold(b, t - 1); }
  bool live(int b, int t) const { return t < static_cast<int>(targets_[b]->size()); }

  void forward();

  const ModelParams<T>& p_;
  RunOptions opt_;
  int B_ = 0;
  int N_ = 0;
  std::vector<const TokenSequence*> targets_;
  std::optional<EncoderGraph<T>> enc_;

  std::vector<Mat<T>> states_, keys_;   // per example
  std::vector<Mat<T>> finals_;          // per layer, 2H x B
  std::vector<Mat<T>> h0_, c0_;         // bridge outputs per layer
  std::vector<LstmSeqCache<T>> dec_;    // per decoder layer
  Mat<T> wq_;                           // A x N*B
  std::vector<Mat<T>> alpha_;           // per example, m x N
  Mat<T> out_in_;                       // 3H x N*B
  Mat<T> logp_;                         // Vt x N*B
  BatchOutput<T> out_;
};

template <typename T>
void Seq2SeqGraph<T>::forward() {
  const int L = p_.hyper.dec_layers, E = p_.hyper.emb_dim(), H = p_.hyper.cell;
  const Eigen::Index NB = static_cast<Eigen::Index>(N_) * B_;

  for (int b = 0; b < B_; ++b) {
    states_.push_back(enc_->states(b));
    keys_.push_back(p_.att_wk * states_.back());
    alpha_.emplace_back(states_.back().cols(), N_);
  }
  for (int l = 0; l < L; ++l) {
    finals_.push_back(enc_->finals(l));
    const auto& br = p_.bridge[l];
    Mat<T> a = br.wh * finals_.back();
    a.colwise() += br.bh.col(0);
    h0_.push_back(a.array().tanh().matrix());
    Mat<T> c = br.wc * finals_.back();
    c.colwise() += br.bc.col(0);
    c0_.push_back(std::move(c));
  }

  dec_.resize(L);
  for (int l = 0; l < L; ++l) {
    dec_[l].resize(l == 0 ? E + 2 * H : H, H, N_, B_);
    if (opt_.dropout_active()) {
      dec_[l].mask.resize(dec_[l].x.rows(), NB);
      fill_dropout_mask<T>(dec_[l].mask, opt_.dropout, *opt_.rng);
    }
  }
  wq_.resize(p_.hyper.attn_dim(), NB);
  out_in_.resize(3 * H, NB);

  std::vector<Mat<T>> h = h0_, c = c0_;
  Mat<T> ctx = Mat<T>::Zero(2 * H, B_);
  for (int t = 0; t < N_; ++t) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(t) * B_;
    for (int l = 0; l < L; ++l) {
      auto& cache = dec_[l];
      auto x = cache.x.middleCols(c0, B_);
      if (l == 0) {
        for (int b = 0; b < B_; ++b) x.col(b).head(E) = p_.tgt_emb.col(input_token(b, t));
        x.bottomRows(2 * H) = ctx;
      } else {
        x = h[l - 1];
      }
      if (cache.mask.size() > 0) x.array() *= cache.mask.middleCols(c0, B_).array();
      const auto& w = p_.dec[l];
      auto g = cache.gates.middleCols(c0, B_);
      g.noalias() = w.wx * x;
      g.noalias() += w.wh * h[l];
      g.colwise() += w.b.col(0);
      cache.h_prev.middleCols(c0, B_) = h[l];
      cache.c_prev.middleCols(c0, B_) = c[l];
      lstm_cell_forward<T>(g, c[l], cache.c.middleCols(c0, B_), cache.tc.middleCols(c0, B_),
                           cache.h.middleCols(c0, B_));
      h[l] = cache.h.middleCols(c0, B_);
      c[l] = cache.c.middleCols(c0, B_);
    }
    wq_.middleCols(c0, B_).noalias() = p_.att_wq * h[L - 1];
    for (int b = 0; b < B_; ++b) {
      const Vec<T> a = detail::attention_weights<T>(keys_[b], wq_.col(c0 + b), p_.att_v);
      alpha_[b].col(t) = a;
      ctx.col(b) = states_[b] * a;
    }
    out_in_.block(0, c0, H, B_) = h[L - 1];
    out_in_.block(H, c0, 2 * H, B_) = ctx;
  }

  logp_.noalias() = p_.out_w * out_in_;
  logp_.colwise() += p_.out_b.col(0);
  detail::log_softmax_cols<T>(logp_);

  out_.step_nll.resize(B_);
  for (int b = 0; b < B_; ++b) {
    const int n = static_cast<int>(targets_[b]->size());
    out_.step_nll[b].resize(n);
    for (int t = 0; t < n; ++t) {
      const double nll = -static_cast<double>(logp_(gold(b, t), static_cast<Eigen::Index>(t) * B_ + b));
      out_.step_nll[b][t] = nll;
      out_.total_nll += nll;
    }
    out_.tokens += static_cast<std::size_t>(n);
    if (opt_.record_alignment) out_.alignments.push_back(alpha_[b].leftCols(n).transpose());
  }
}

template <typename T>
void Seq2SeqGraph<T>::backward(ModelParams<T>& grad, T grad_scale) const {
  const int L = p_.hyper.dec_layers, E = p_.hyper.emb_dim(), H = p_.hyper.cell;
  const Eigen::Index NB = static_cast<Eigen::Index>(N_) * B_;

  // Output layer: d(-log softmax) = softmax - onehot, zero on padded steps.
  Mat<T> dlogits = logp_.array().exp().matrix();
  for (int t = 0; t < N_; ++t)
    for (int b = 0; b < B_; ++b) {
      const Eigen::Index col = static_cast<Eigen::Index>(t) * B_ + b;
      if (live(b, t)) {
        dlogits(gold(b, t), col) -= T(1);
        dlogits.col(col) *= grad_scale;
      } else {
        dlogits.col(col).setZero();
      }
    }
  grad.out_w.noalias() += dlogits * out_in_.transpose();
  grad.out_b += dlogits.rowwise().sum();
  const Mat<T> d_out_in = p_.out_w.transpose() * dlogits;

  std::vector<Mat<T>> d_states(B_), d_keys(B_);
  for (int b = 0; b < B_; ++b) {
    d_states[b] = Mat<T>::Zero(states_[b].rows(), states_[b].cols());
    d_keys[b] = Mat<T>::Zero(keys_[b].rows(), keys_[b].cols());
  }
  Mat<T> d_wq(wq_.rows(), NB);
  std::vector<Mat<T>> dgates(L);
  for (int l = 0; l < L; ++l) dgates[l].resize(4 * H, NB);
  std::vector<Mat<T>> dh_carry(L, Mat<T>::Zero(H, B_)), dc_carry(L, Mat<T>::Zero(H, B_));
  Mat<T> dctx_next = Mat<T>::Zero(2 * H, B_);
  Mat<T> dctx(2 * H, B_), dh(H, B_), dc_prev(H, B_), z;
  Vec<T> dv = Vec<T>::Zero(p_.att_v.rows());

  for (int t = N_ - 1; t >= 0; --t) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(t) * B_;
    dctx = d_out_in.block(H, c0, 2 * H, B_) + dctx_next;
    for (int b = 0; b < B_; ++b) {
      const auto a = alpha_[b].col(t);
      detail::attention_weights<T>(keys_[b], wq_.col(c0 + b), p_.att_v, &z);
      const Vec<T> dalpha = states_[b].transpose() * dctx.col(b);
      d_states[b].noalias() += dctx.col(b) * a.transpose();
      const Vec<T> de = (a.array() * (dalpha.array() - a.dot(dalpha))).matrix();
      dv.noalias() += z * de;
      const Mat<T> dpre = ((p_.att_v.col(0) * de.transpose()).array() * (T(1) - z.array().square())).matrix();
      d_keys[b] += dpre;
      d_wq.col(c0 + b) = dpre.rowwise().sum();
    }
    // Top hidden state feeds both the output layer and the attention query.
    Mat<T> d_from_above = d_out_in.block(0, c0, H, B_);
    d_from_above.noalias() += p_.att_wq.transpose() * d_wq.middleCols(c0, B_);
    for (int l = L - 1; l >= 0; --l) {
      const auto& cache = dec_[l];
      const auto& w = p_.dec[l];
      dh = d_from_above + dh_carry[l];
      auto dg = dgates[l].middleCols(c0, B_);
      lstm_cell_backward<T>(cache.gates.middleCols(c0, B_), cache.c_prev.middleCols(c0, B_),
                            cache.tc.middleCols(c0, B_), dh, dc_carry[l], dg, dc_prev);
      dh_carry[l].noalias() = w.wh.transpose() * dg;
      dc_carry[l] = dc_prev;
      Mat<T> dx = w.wx.transpose() * dg;
      if (cache.mask.size() > 0) dx.array() *= cache.mask.middleCols(c0, B_).array();
      if (l > 0) {
        d_from_above = std::move(dx);
      } else {
        for (int b = 0; b < B_; ++b) grad.tgt_emb.col(input_token(b, t)) += dx.col(b).head(E);
        dctx_next = dx.bottomRows(2 * H);
      }
    }
  }

  grad.att_v.col(0) += dv;
  grad.att_wq.noalias() += d_wq * out_in_.topRows(H).transpose();
  for (int l = 0; l < L; ++l) accumulate_lstm_grads(dec_[l], dgates[l], grad.dec[l]);

  // Encoder output gradients: attention keys/values plus the bridge.
  std::vector<Mat<T>> d_enc(p_.hyper.enc_layers);
  for (int l = 0; l < p_.hyper.enc_layers; ++l)
    d_enc[l] = Mat<T>::Zero(2 * H, static_cast<Eigen::Index>(enc_->max_len()) * B_);
  for (int b = 0; b < B_; ++b) {
    grad.att_wk.noalias() += d_keys[b] * states_[b].transpose();
    d_states[b].noalias() += p_.att_wk.transpose() * d_keys[b];
    for (Eigen::Index j = 0; j < d_states[b].cols(); ++j) d_enc.back().col(j * B_ + b) += d_states[b].col(j);
  }
  for (int l = 0; l < L; ++l) {
    auto& br = grad.bridge[l];
    const Mat<T> da = (dh_carry[l].array() * (T(1) - h0_[l].array().square())).matrix();
    br.wh.noalias() += da * finals_[l].transpose();
    br.bh += da.rowwise().sum();
    br.wc.noalias() += dc_carry[l] * finals_[l].transpose();
    br.bc += dc_carry[l].rowwise().sum();
    Mat<T> ds = p_.bridge[l].wh.transpose() * da;
    ds.noalias() += p_.bridge[l].wc.transpose() * dc_carry[l];
    for (int b = 0; b < B_; ++b) {
      d_enc[l].col(static_cast<Eigen::Index>(enc_->length(b) - 1) * B_ + b).head(H) += ds.col(b).head(H);
      d_enc[l].col(b).tail(H) += ds.col(b).tail(H);
    }
  }
  enc_->backward(d_enc, grad);
}

/// Teacher-forced loss for one pair.
template <typename T>
struct ForwardResult {
  double total_nll = 0.0;
  std::vector<double> step_nll;
  Mat<T> alignment;  // target length x source length
};

template <typename T>
ForwardResult<T> model_forward(const TokenSequence& source, const TokenSequence& target, const ModelParams<T>& p,
                               RunOptions opt = {}) {
  opt.record_alignment = true;
  const PairRef pr{&source, &target};
  Seq2SeqGraph<T> g(p, std::span<const PairRef>(&pr, 1), opt);
  const auto& o = g.output();
  return {o.total_nll, o.step_nll.front(), o.alignments.front()};
}

/// Exact gradients of the total NLL of one pair.
template <typename T>
ModelParams<T> model_gradients(const TokenSequence& source, const TokenSequence& target, const ModelParams<T>& p,
                               RunOptions opt = {}) {
  const PairRef pr{&source, &target};
  Seq2SeqGraph<T> g(p, std::span<const PairRef>(&pr, 1), opt);
  ModelParams<T> grad = ModelParams<T>::zeros(p.hyper);
  g.backward(grad);
  return grad;
}

}  // namespace vlgen::nn
