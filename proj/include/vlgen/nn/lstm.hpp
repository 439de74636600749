#pragma once

#include <random>
#include <vector>

#include "vlgen/nn/params.hpp"

namespace vlgen::nn {

template <typename T>
struct CellState {
  Vec<T> c;
  Vec<T> h;
};

/// One LSTM step on a single input vector:
///   i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
template <typename T>
CellState<T> lstm_step(const Vec<T>& x, const CellState<T>& state, const LstmWeights<T>& w) {
  const Eigen::Index H = w.wh.cols();
  if (w.wx.rows() != 4 * H || w.wh.rows() != 4 * H || w.b.rows() != 4 * H)
    throw DimensionMismatch("LSTM weights must have 4*hidden rows");
  if (x.size() != w.wx.cols())
    throw DimensionMismatch("LSTM input has size " + std::to_string(x.size()) + ", weights expect " +
                            std::to_string(w.wx.cols()));
  if (state.c.size() != H || state.h.size() != H) throw DimensionMismatch("LSTM state size mismatch");
  Vec<T> pre = w.wx * x + w.wh * state.h + w.b.col(0);
  const auto i = pre.segment(0, H).array().logistic();
  const auto f = pre.segment(H, H).array().logistic();
  const auto g = pre.segment(2 * H, H).array().tanh();
  const auto o = pre.segment(3 * H, H).array().logistic();
  CellState<T> out;
  out.c = (f * state.c.array() + i * g).matrix();
  out.h = (o * out.c.array().tanh()).matrix();
  return out;
}

/// Activation cache for an LSTM run over S steps of B columns each; the
/// block for step t is columns [t*B, (t+1)*B).
template <typename T>
struct LstmSeqCache {
  Mat<T> x;      // in x S*B, after dropout
  Mat<T> mask;   // in x S*B dropout multipliers; empty when dropout is off
  Mat<T> gates;  // 4H x S*B post-activation
  Mat<T> c, tc, h, c_prev, h_prev;

  void resize(int in, int H, int S, int B) {
    const Eigen::Index n = static_cast<Eigen::Index>(S) * B;
    x.resize(in, n);
    gates.resize(4 * H, n);
    c.resize(H, n);
    tc.resize(H, n);
    h.resize(H, n);
    c_prev.resize(H, n);
    h_prev.resize(H, n);
  }
};

/// Inverted-dropout multipliers: 0 with probability `rate`, else 1/(1-rate).
/// Each 64-bit draw yields two 32-bit uniforms.
template <typename T>
void fill_dropout_mask(Eigen::Ref<Mat<T>> mask, double rate, std::mt19937_64& rng) {
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  const std::uint64_t threshold = static_cast<std::uint64_t>(rate * 0x1.0p32);
  T* out = mask.data();
  const Eigen::Index n = mask.size();
  Eigen::Index k = 0;
  for (; k + 1 < n; k += 2) {
    const std::uint64_t r = rng();
    out[k] = (r & 0xFFFFFFFFu) < threshold ? T(0) : keep_scale;
    out[k + 1] = (r >> 32) < threshold ? T(0) : keep_scale;
  }
  if (k < n) out[k] = (rng() & 0xFFFFFFFFu) < threshold ? T(0) : keep_scale;
}

/// Turns gate pre-activations (in place) into activations and produces the
/// new cell and hidden state for a block of columns.
template <typename T, typename G, typename CP, typename C, typename TC, typename HH>
void lstm_cell_forward(G&& gates, const CP& c_prev, C&& c, TC&& tc, HH&& h) {
  const Eigen::Index H = c_prev.rows();
  auto i = gates.topRows(H).array();
  auto f = gates.middleRows(H, H).array();
  auto g = gates.middleRows(2 * H, H).array();
  auto o = gates.bottomRows(H).array();
  i = i.logistic();
  f = f.logistic();
  g = g.tanh();
  o = o.logistic();
  c.array() = f * c_prev.array() + i * g;
  tc.array() = c.array().tanh();
  h.array() = o * tc.array();
}

/// Backward through one cell block. Given dL/dh and the carried dL/dc,
/// writes dL/d(pre-activations) into `dgates` and dL/dc_prev into `dc_prev`.
template <typename T, typename G, typename CP, typename TC, typename DH, typename DC, typename DG, typename DCP>
void lstm_cell_backward(const G& gates, const CP& c_prev, const TC& tc, const DH& dh, const DC& dc_carry,
                        DG&& dgates, DCP&& dc_prev) {
  const Eigen::Index H = c_prev.rows();
  const auto i = gates.topRows(H).array();
  const auto f = gates.middleRows(H, H).array();
  const auto g = gates.middleRows(2 * H, H).array();
  const auto o = gates.bottomRows(H).array();
  const auto tca = tc.array();
  const Mat<T> dc = (dc_carry.array() + dh.array() * o * (T(1) - tca * tca)).matrix();
  const auto dca = dc.array();
  dgates.topRows(H).array() = dca * g * i * (T(1) - i);
  dgates.middleRows(H, H).array() = dca * c_prev.array() * f * (T(1) - f);
  dgates.middleRows(2 * H, H).array() = dca * i * (T(1) - g * g);
  dgates.bottomRows(H).array() = dh.array() * tca * o * (T(1) - o);
  dc_prev.array() = dca * f;
}

template <typename T>
void accumulate_lstm_grads(const LstmSeqCache<T>& cache, const Mat<T>& dgates, LstmWeights<T>& grad) {
  grad.wx.noalias() += dgates * cache.x.transpose();
  grad.wh.noalias() += dgates * cache.h_prev.transpose();
  grad.b += dgates.rowwise().sum();
}

}  // namespace vlgen::nn
