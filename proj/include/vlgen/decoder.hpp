#pragma once

// Greedy and beam-search inference. Beam search keeps k live (unfinished)
// hypotheses per step; hypotheses that emit EOS retire into a result pool
// without taking a live slot, and the search ends once k have finished or no
// live hypothesis remains. Hypotheses still unfinished at max_len retire too.
// Results are ranked by log-probability per emitted token.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/errors.hpp"
#include "vlgen/nn/seq2seq.hpp"
#include "vlgen/text.hpp"
#include "vlgen/tokenizer.hpp"

namespace vlgen {

struct Hypothesis {
  TokenSequence tokens;       // emitted ids; ends with EOS iff finished
  double log_prob = 0.0;      // sum of per-step log-probabilities
  double score = 0.0;         // log_prob / tokens.size()
  bool finished = false;
  Eigen::MatrixXd alignment;  // one row per emitted token, one column per source position
};

struct DecodeOptions {
  std::size_t max_len = kDefaultMaxLen;
  bool record_attention = true;
};

namespace detail {

inline bool generable(TokenId id) { return id != kPad && id != kSos; }

inline void finish(Hypothesis& h) {
  h.finished = !h.tokens.empty() && h.tokens.back() == kEos;
  h.score = h.tokens.empty() ? 0.0 : h.log_prob / static_cast<double>(h.tokens.size());
}

}  // namespace detail

/// Argmax decoding; ties go to the lowest token id. PAD and SOS are never
/// emitted.
template <typename T>
Hypothesis greedy_decode(const TokenSequence& source, const nn::ModelParams<T>& p,
                         const DecodeOptions& opt = {}) {
  const auto enc = nn::encode_source(source, p);
  auto state = nn::initial_state(enc, p, 1);
  Hypothesis h;
  std::vector<Eigen::VectorXd> rows;
  TokenId prev = kSos;
  nn::Mat<T> align;
  while (h.tokens.size() < opt.max_len) {
    const TokenId toks[] = {prev};
    nn::Mat<T> logp = nn::decode_step_batch<T>(toks, state, enc, p, opt.record_attention ? &align : nullptr);
    logp(kPad, 0) = -std::numeric_limits<T>::infinity();
    logp(kSos, 0) = -std::numeric_limits<T>::infinity();
    Eigen::Index best = 0;
    logp.col(0).maxCoeff(&best);
    prev = static_cast<TokenId>(best);
    h.tokens.push_back(prev);
    h.log_prob += static_cast<double>(logp(best, 0));
    if (opt.record_attention) rows.push_back(align.col(0).template cast<double>());
    if (prev == kEos) break;
  }
  if (opt.record_attention) {
    h.alignment.resize(static_cast<Eigen::Index>(rows.size()), enc.length());
    for (std::size_t r = 0; r < rows.size(); ++r) h.alignment.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  }
  detail::finish(h);
  return h;
}

/// Beam search returning up to k hypotheses sorted by normalized score
/// (descending). EOS expansions retire to a pool without using a live slot.
/// The search ends at max_len, or once the pool holds k hypotheses and no
/// live hypothesis's current normalized score beats the k-th best of them.
template <typename T>
std::vector<Hypothesis> beam_search(const TokenSequence& source, const nn::ModelParams<T>& p, std::size_t k,
                                    const DecodeOptions& opt = {}) {
  if (k < 1) throw DataError("beam width must be >= 1");
  const auto enc = nn::encode_source(source, p);

  // Back-pointer trie of expanded tokens.
  struct Node {
    int parent;
    TokenId token;
    double log_prob;
    Eigen::VectorXd attention;
  };
  std::vector<Node> nodes{{-1, kSos, 0.0, {}}};
  std::vector<int> live{0};
  auto state = nn::initial_state(enc, p, 1);
  std::vector<Hypothesis> pool;
  std::size_t finished = 0;  // pool entries that ended in EOS

  auto materialize = [&](int node) {
    Hypothesis h;
    h.log_prob = nodes[node].log_prob;
    std::vector<int> path;
    for (int n = node; n > 0; n = nodes[n].parent) path.push_back(n);
    std::reverse(path.begin(), path.end());
    for (int n : path) h.tokens.push_back(nodes[n].token);
    if (opt.record_attention) {
      h.alignment.resize(static_cast<Eigen::Index>(path.size()), enc.length());
      for (std::size_t r = 0; r < path.size(); ++r)
        h.alignment.row(static_cast<Eigen::Index>(r)) = nodes[path[r]].attention.transpose();
    }
    detail::finish(h);
    return h;
  };

  struct Candidate {
    double log_prob;
    int parent;  // index into `live`
    TokenId token;
  };
  std::vector<Candidate> cands;
  nn::Mat<T> align;

  for (std::size_t depth = 1; depth <= opt.max_len && !live.empty(); ++depth) {
    std::vector<TokenId> prev;
    prev.reserve(live.size());
    for (int n : live) prev.push_back(nodes[n].token);
    const nn::Mat<T> logp = nn::decode_step_batch<T>(prev, state, enc, p, opt.record_attention ? &align : nullptr);

    cands.clear();
    for (std::size_t j = 0; j < live.size(); ++j)
      for (Eigen::Index v = 0; v < logp.rows(); ++v)
        if (detail::generable(static_cast<TokenId>(v)))
          cands.push_back({nodes[live[j]].log_prob + static_cast<double>(logp(v, static_cast<Eigen::Index>(j))),
                           static_cast<int>(j), static_cast<TokenId>(v)});
    std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });

    std::vector<int> next_live, parents;
    for (const auto& c : cands) {
      if (next_live.size() >= k) break;
      Eigen::VectorXd att;
      if (opt.record_attention) att = align.col(c.parent).template cast<double>();
      nodes.push_back({live[c.parent], c.token, c.log_prob, std::move(att)});
      const int id = static_cast<int>(nodes.size()) - 1;
      if (c.token == kEos) {
        pool.push_back(materialize(id));
        ++finished;
      } else if (depth == opt.max_len) {
        pool.push_back(materialize(id));
        next_live.push_back(id);  // counts toward the live quota, then dropped
      } else {
        next_live.push_back(id);
        parents.push_back(c.parent);
      }
    }
    if (depth == opt.max_len || next_live.empty()) break;
    if (finished >= k) {
      std::vector<double> scores;
      for (const auto& h : pool) scores.push_back(h.score);
      std::nth_element(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(k - 1), scores.end(),
                       std::greater<>());
      double best_live = -std::numeric_limits<double>::infinity();
      for (int n : next_live) best_live = std::max(best_live, nodes[n].log_prob / static_cast<double>(depth));
      if (best_live <= scores[k - 1]) break;
    }
    live = std::move(next_live);
    state.select(parents);
  }

  std::stable_sort(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  });
  if (pool.size() > k) pool.resize(k);
  return pool;
}

/// Attention weights with printable labels: rows are emitted target
/// characters, columns are source characters; EOS is labeled "</s>".
struct AttentionMatrix {
  std::vector<std::string> row_labels;
  std::vector<std::string> col_labels;
  Eigen::MatrixXd weights;
};

namespace detail {

inline std::vector<std::string> char_labels(std::string_view text, std::size_t count) {
  std::vector<std::string> labels;
  for (char32_t c : utf8_decode(text)) {
    std::string s;
    utf8_append(s, c);
    labels.push_back(std::move(s));
  }
  labels.resize(count, "</s>");
  return labels;
}

// Backslash-escapes tab, newline, carriage return and backslash. Quotes and
// braces are written verbatim.
inline std::string tsv_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\t': out += "\\t"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace detail

/// Labels a hypothesis' alignment. `source_text` is the normalized source
/// that was encoded; `target_text` is the decoded text of the hypothesis.
inline AttentionMatrix export_attention(const Hypothesis& h, std::string_view source_text,
                                        std::string_view target_text) {
  if (h.alignment.rows() == 0 && !h.tokens.empty()) throw MissingAlignment();
  AttentionMatrix m;
  m.weights = h.alignment;
  m.row_labels = detail::char_labels(target_text, static_cast<std::size_t>(h.alignment.rows()));
  m.col_labels = detail::char_labels(source_text, static_cast<std::size_t>(h.alignment.cols()));
  return m;
}

/// Tab-separated matrix: a header row of source labels (first cell empty),
/// then one row per target token: its label followed by the weights.
inline std::string to_tsv(const AttentionMatrix& m) {
  std::string out;
  for (const auto& c : m.col_labels) {
    out += '\t';
    out += detail::tsv_escape(c);
  }
  out += '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < m.weights.rows(); ++r) {
    out += detail::tsv_escape(m.row_labels[static_cast<std::size_t>(r)]);
    for (Eigen::Index c = 0; c < m.weights.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "\t%.6g", m.weights(r, c));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline nlohmann::json to_json(const AttentionMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.weights.rows(); ++r) {
    std::vector<double> row;
    for (Eigen::Index c = 0; c < m.weights.cols(); ++c) row.push_back(m.weights(r, c));
    rows.push_back(row);
  }
  return {{"target", m.row_labels}, {"source", m.col_labels}, {"weights", rows}};
}

}  // namespace vlgen
