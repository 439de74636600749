#pragma once

// Small checkpoints built in-process for evaluator and service tests.

#include <memory>

#include "support.hpp"
#include "vlgen/checkpoint.hpp"
#include "vlgen/trainer.hpp"

namespace vlgen::testkit {

inline Dataset cars() { return load_dataset(data_dir() / "rdatasets" / "mtcars.json"); }

/// A model that has memorized one spec, x = first numeric column as
/// quantitative points, over rows of mtcars, iris and a small two-column
/// table. It emits that plotable text for any input.
inline std::shared_ptr<const Checkpoint<float>> memorized_checkpoint() {
  static const auto model = [] {
    OrderedJson small = OrderedJson::array();
    for (int i = 0; i < 20; ++i) small.push_back({{"a", i * 3 % 17}, {"b", std::string(1, static_cast<char>('p' + i % 9))}});
    std::vector<CorpusExample> examples;
    for (Dataset ds : {cars(), load_dataset(data_dir() / "rdatasets" / "iris.json"), dataset_from_json(small, "small")}) {
      std::string first;
      for (const auto& f : infer_schema(ds))
        if (f.kind == FieldKind::numeric && first.empty()) first = f.name;
      CorpusExample ex;
      ex.name = ds.name;
      ex.spec = Json{{"mark", "point"}, {"encoding", {{"x", {{"field", first}, {"type", "quantitative"}}}}}};
      ex.data = std::move(ds);
      examples.push_back(std::move(ex));
    }
    const auto pairs = generate_pairs(examples, 16, 1, 300);
    auto ck = std::make_shared<Checkpoint<float>>();
    ck->vocabs = build_vocabs(pairs);
    ck->conventions.max_len = 300;
    TrainConfig cfg;
    cfg.cell = 32;
    cfg.batch_size = 8;
    cfg.steps = 500;
    cfg.learning_rate = 1e-2;
    cfg.dropout = 0.0;
    cfg.eval_every = 100;
    cfg.max_len = 300;
    ck->params = train<float>(pairs, ck->vocabs, cfg).params;
    ck->id = "memorized";
    return ck;
  }();
  return model;
}

/// Freshly initialized weights over the bundled corpus vocabulary.
inline std::shared_ptr<const Checkpoint<float>> random_checkpoint(std::size_t max_len = 300) {
  const auto corpus = load_corpus_dir(data_dir() / "corpus");
  const auto pairs = generate_pairs(corpus, 2, 1, max_len);
  auto ck = std::make_shared<Checkpoint<float>>();
  ck->vocabs = build_vocabs(pairs);
  ck->conventions.max_len = max_len;
  nn::Hyper hp;
  hp.src_vocab = static_cast<int>(ck->vocabs.source.size());
  hp.tgt_vocab = static_cast<int>(ck->vocabs.target.size());
  hp.cell = 16;
  ck->params = random_model<float>(hp, 5, 0.3);
  ck->id = "random";
  return ck;
}

}  // namespace vlgen::testkit
