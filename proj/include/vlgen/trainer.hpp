#pragma once

// Mini-batch training with Adam. Batches are drawn from length buckets:
// each epoch is shuffled, cut into pools of kBucketBatches batches, each
// pool is sorted by target length and sliced, and the resulting batches are
// shuffled again. The loss of a step is the mean NLL per target token.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/checkpoint.hpp"
#include "vlgen/corpus.hpp"
#include "vlgen/errors.hpp"
#include "vlgen/nn/params.hpp"
#include "vlgen/nn/seq2seq.hpp"
#include "vlgen/text.hpp"
#include "vlgen/tokenizer.hpp"

namespace vlgen {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t steps = 20000;
  double dropout = 0.5;
  std::size_t max_len = kDefaultMaxLen;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
  std::size_t eval_every = 100;
  double clip_norm = 5.0;            // global gradient norm; 0 disables
  int cell = 512;
  int layers = 2;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw DataError("learning_rate must be >= 0");
    if (batch_size < 1) throw DataError("batch_size must be >= 1");
    if (steps < 1) throw DataError("steps must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw DataError("dropout must be in [0, 1)");
    if (max_len < 2) throw DataError("max_len must be >= 2");
    if (cell < 1 || layers < 1) throw DataError("cell and layers must be >= 1");
  }
};

struct HistoryPoint {
  std::size_t step = 0;
  double train_nll = 0.0;  // per target token, averaged since the previous point
  double heldout_log_perplexity = std::numeric_limits<double>::quiet_NaN();  // NaN without held-out pairs

  friend bool operator==(const HistoryPoint& a, const HistoryPoint& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.step == b.step && same(a.train_nll, b.train_nll) &&
           same(a.heldout_log_perplexity, b.heldout_log_perplexity);
  }
};

struct TrainHistory {
  std::vector<HistoryPoint> points;
  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

struct EncodedPair {
  TokenSequence source;
  TokenSequence target;
};

/// Vocabularies covering every character of the given pairs.
inline Vocabs build_vocabs(const std::vector<TrainingPair>& pairs) {
  std::vector<std::string_view> src, tgt;
  for (const auto& p : pairs) {
    src.push_back(p.source);
    tgt.push_back(p.target);
  }
  return {build_vocab(src), build_vocab(tgt)};
}

/// Encodes pairs, skipping (with a warning) those that do not fit max_len.
inline std::vector<EncodedPair> encode_pairs(const std::vector<TrainingPair>& pairs, const Vocabs& vocabs,
                                             std::size_t max_len) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  std::size_t skipped = 0;
  for (const auto& p : pairs) {
    try {
      out.push_back({encode(p.source, vocabs.source, max_len), encode(p.target, vocabs.target, max_len)});
    } catch (const TooLong&) {
      ++skipped;
    }
  }
  if (skipped > 0) log_warning("skipped " + std::to_string(skipped) + " pairs longer than max_len");
  return out;
}

namespace detail {

template <typename T>
std::vector<nn::PairRef> pair_refs(const std::vector<EncodedPair>& pairs, std::span<const std::size_t> idx) {
  std::vector<nn::PairRef> refs;
  refs.reserve(idx.size());
  for (std::size_t i : idx) refs.push_back({&pairs[i].source, &pairs[i].target});
  return refs;
}

}  // namespace detail

/// Mean over pairs of (total NLL / target token count), in evaluation mode.
template <typename T>
double log_perplexity(const nn::ModelParams<T>& params, const std::vector<EncodedPair>& pairs,
                      std::size_t batch_size = 32) {
  if (pairs.empty()) throw EmptyBatch();
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return pairs[a].target.size() < pairs[b].target.size(); });
  std::vector<double> per_pair(pairs.size());
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    const std::span<const std::size_t> idx(order.data() + at, std::min(batch_size, order.size() - at));
    const auto refs = detail::pair_refs<T>(pairs, idx);
    nn::Seq2SeqGraph<T> g(params, refs, {});
    const auto& o = g.output();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      double nll = 0.0;
      for (double s : o.step_nll[b]) nll += s;
      per_pair[idx[b]] = nll / static_cast<double>(pairs[idx[b]].target.size());
    }
  }
  double sum = 0.0;
  for (double v : per_pair) sum += v;
  return sum / static_cast<double>(pairs.size());
}

/// Adam with bias correction. A zero learning rate leaves parameters
/// bit-for-bit unchanged.
template <typename T>
class Adam {
 public:
  Adam(const nn::Hyper& hp, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(nn::ModelParams<T>::zeros(hp)), v_(nn::ModelParams<T>::zeros(hp)), lr_(lr), b1_(beta1), b2_(beta2),
        eps_(eps) {}

  void step(nn::ModelParams<T>& params, nn::ModelParams<T>& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
    const T a = static_cast<T>(lr_ / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(eps_);
    std::vector<nn::Mat<T>*> ps, gs, ms, vs;
    params.for_each([&](const std::string&, nn::Mat<T>& x) { ps.push_back(&x); });
    grad.for_each([&](const std::string&, nn::Mat<T>& x) { gs.push_back(&x); });
    m_.for_each([&](const std::string&, nn::Mat<T>& x) { ms.push_back(&x); });
    v_.for_each([&](const std::string&, nn::Mat<T>& x) { vs.push_back(&x); });
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto g = gs[i]->array();
      auto m = ms[i]->array();
      auto v = vs[i]->array();
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g * g;
      if (lr_ == 0.0) continue;
      ps[i]->array() -= a * m / ((v * inv_c2).sqrt() + eps);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  nn::ModelParams<T> m_, v_;
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

/// Scales `grad` so its global L2 norm is at most `max_norm`; returns the
/// norm before scaling.
template <typename T>
double clip_global_norm(nn::ModelParams<T>& grad, double max_norm) {
  double sq = 0.0;
  grad.for_each([&](const std::string&, const nn::Mat<T>& m) { sq += m.template cast<double>().squaredNorm(); });
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T s = static_cast<T>(max_norm / norm);
    grad.for_each([&](const std::string&, nn::Mat<T>& m) { m *= s; });
  }
  return norm;
}

/// Produces length-bucketed batches of indices, deterministically from the seed.
class BatchSampler {
 public:
  static constexpr std::size_t kBucketBatches = 16;

  BatchSampler(const std::vector<EncodedPair>& pairs, std::size_t batch_size, std::uint64_t seed)
      : pairs_(pairs), batch_(batch_size), rng_(seed) {}

  std::vector<std::size_t> next() {
    if (at_ == batches_.size()) refill();
    return batches_[at_++];
  }

 private:
  void refill() {
    std::vector<std::size_t> order(pairs_.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    batches_.clear();
    const std::size_t pool = batch_ * kBucketBatches;
    for (std::size_t at = 0; at < order.size(); at += pool) {
      const auto first = order.begin() + static_cast<std::ptrdiff_t>(at);
      const auto last = order.begin() + static_cast<std::ptrdiff_t>(std::min(at + pool, order.size()));
      std::stable_sort(first, last, [&](std::size_t a, std::size_t b) {
        return pairs_[a].target.size() < pairs_[b].target.size();
      });
      for (auto it = first; it < last; it += static_cast<std::ptrdiff_t>(std::min<std::size_t>(batch_, last - it)))
        batches_.emplace_back(it, it + static_cast<std::ptrdiff_t>(std::min<std::size_t>(batch_, last - it)));
    }
    std::shuffle(batches_.begin(), batches_.end(), rng_);
    at_ = 0;
  }

  const std::vector<EncodedPair>& pairs_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> batches_;
  std::size_t at_ = 0;
};

/// Optional side channels of a training run.
template <typename T>
struct TrainHooks {
  const std::vector<EncodedPair>* heldout = nullptr;
  std::ostream* log = nullptr;              // line-delimited JSON per history point
  std::filesystem::path checkpoint_path;    // rewritten every checkpoint_every steps
  MappingConventions conventions;
  std::function<void(const HistoryPoint&)> on_point;
};

template <typename T>
struct TrainResult {
  nn::ModelParams<T> params;
  TrainHistory history;
};

/// Trains from fresh parameters (seeded from config.seed).
template <typename T>
TrainResult<T> train(const std::vector<EncodedPair>& pairs, const Vocabs& vocabs, const TrainConfig& config,
                     const TrainHooks<T>& hooks = {}) {
  config.validate();
  nn::Hyper hp;
  hp.src_vocab = static_cast<int>(vocabs.source.size());
  hp.tgt_vocab = static_cast<int>(vocabs.target.size());
  hp.cell = config.cell;
  hp.enc_layers = hp.dec_layers = config.layers;

  std::vector<EncodedPair> usable;
  for (const auto& p : pairs)
    if (p.source.size() <= config.max_len && p.target.size() <= config.max_len && !p.target.empty())
      usable.push_back(p);
  if (usable.empty()) throw NoTrainableData();

  TrainResult<T> result{nn::ModelParams<T>::initialized(hp, config.seed), {}};
  auto& params = result.params;
  Adam<T> adam(hp, config.learning_rate);
  BatchSampler sampler(usable, config.batch_size, config.seed ^ 0x5bd1e995ull);
  std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  nn::ModelParams<T> grad = nn::ModelParams<T>::zeros(hp);

  nn::RunOptions opt;
  opt.train = true;
  opt.dropout = config.dropout;
  opt.rng = &dropout_rng;

  double window_nll = 0.0;
  std::size_t window_tokens = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const auto idx = sampler.next();
    const auto refs = detail::pair_refs<T>(usable, idx);
    grad.set_zero();
    {
      nn::Seq2SeqGraph<T> g(params, refs, opt);
      const auto& o = g.output();
      g.backward(grad, static_cast<T>(1.0 / static_cast<double>(o.tokens)));
      window_nll += o.total_nll;
      window_tokens += o.tokens;
    }
    if (config.clip_norm > 0.0) clip_global_norm(grad, config.clip_norm);
    adam.step(params, grad);

    const bool last = step == config.steps;
    if ((config.eval_every > 0 && step % config.eval_every == 0) || last) {
      HistoryPoint pt;
      pt.step = step;
      pt.train_nll = window_nll / static_cast<double>(window_tokens);
      if (hooks.heldout && !hooks.heldout->empty()) pt.heldout_log_perplexity = log_perplexity(params, *hooks.heldout);
      window_nll = 0.0;
      window_tokens = 0;
      result.history.points.push_back(pt);
      if (hooks.log) {
        nlohmann::json line = {{"step", pt.step}, {"loss", pt.train_nll}, {"perplexity", std::exp(pt.train_nll)}};
        if (!std::isnan(pt.heldout_log_perplexity)) line["heldout_log_perplexity"] = pt.heldout_log_perplexity;
        *hooks.log << line.dump() << '\n' << std::flush;
      }
      if (hooks.on_point) hooks.on_point(pt);
    }
    if (!hooks.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        (step % config.checkpoint_every == 0 || last))
      save_checkpoint(params, vocabs, hooks.conventions, hooks.checkpoint_path);
  }
  return result;
}

/// Convenience overload: encodes the pairs against `vocabs` first.
template <typename T>
TrainResult<T> train(const std::vector<TrainingPair>& pairs, const Vocabs& vocabs, const TrainConfig& config,
                     const TrainHooks<T>& hooks = {}) {
  const auto encoded = encode_pairs(pairs, vocabs, config.max_len);
  if (encoded.empty()) throw NoTrainableData();
  return train<T>(encoded, vocabs, config, hooks);
}

/// Splits examples (not pairs) into train and held-out parts, so no spec
/// appears on both sides. Deterministic for a given seed.
inline std::pair<std::vector<CorpusExample>, std::vector<CorpusExample>> split_examples(
    const std::vector<CorpusExample>& corpus, double heldout_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(corpus.size())));
  if (heldout_fraction > 0.0 && n_held == 0 && corpus.size() > 1) n_held = 1;
  std::vector<CorpusExample> train_part, held_part;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_held ? held_part : train_part).push_back(corpus[order[i]]);
  return {std::move(train_part), std::move(held_part)};
}

struct TrainingSet {
  std::vector<CorpusExample> train_examples, heldout_examples;
  Vocabs vocabs;  // built from the training pairs only
  std::vector<EncodedPair> train, heldout;
};

/// Example-level split, pair sampling and encoding as done by `vlgen train`.
inline TrainingSet prepare_training_set(const std::vector<CorpusExample>& corpus, std::size_t samples,
                                        double heldout_fraction, std::uint64_t seed, std::size_t max_len) {
  TrainingSet ts;
  std::tie(ts.train_examples, ts.heldout_examples) = split_examples(corpus, heldout_fraction, seed);
  const auto train_pairs = generate_pairs(ts.train_examples, samples, seed, max_len);
  const auto held_pairs = ts.heldout_examples.empty()
                              ? std::vector<TrainingPair>{}
                              : generate_pairs(ts.heldout_examples, samples, seed + 1, max_len);
  ts.vocabs = build_vocabs(train_pairs);
  ts.train = encode_pairs(train_pairs, ts.vocabs, max_len);
  ts.heldout = encode_pairs(held_pairs, ts.vocabs, max_len);
  if (ts.train.empty()) throw NoTrainableData();
  return ts;
}

}  // namespace vlgen
