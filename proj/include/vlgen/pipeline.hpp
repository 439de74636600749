#pragma once

// Dataset row -> normalized source -> beam candidates -> restored field
// names -> validity flags. Shared by the CLI, the evaluator and the HTTP
// service.

#include <string>
#include <vector>

#include "vlgen/checkpoint.hpp"
#include "vlgen/corpus.hpp"
#include "vlgen/decoder.hpp"
#include "vlgen/tokenizer.hpp"
#include "vlgen/validator.hpp"

namespace vlgen {

struct Candidate {
  std::string spec;             // field names restored
  std::string normalized_spec;  // as decoded, with placeholders
  double score = 0.0;
  double log_prob = 0.0;
  bool finished = false;
  ValidityResult validity;
};

struct Generation {
  Schema schema;
  NameMapping mapping;
  std::size_t row = 0;
  std::string source;  // normalized source text
  std::vector<Candidate> candidates;
  std::vector<Hypothesis> hypotheses;  // parallel to candidates
};

/// Decodes row `row` of `dataset` with beam width `beam_width` (1 means
/// greedy). Throws BadIndex for an out-of-range row and TooLong when the
/// normalized row does not fit the model's max_len.
template <typename T>
Generation generate(const Checkpoint<T>& model, const Dataset& dataset, std::size_t row, std::size_t beam_width,
                    bool record_attention = false, const GrammarSubset& grammar = {}) {
  if (beam_width < 1) throw DataError("beam width must be >= 1");
  Generation g;
  g.schema = infer_schema(dataset);
  if (row >= dataset.records.size())
    throw BadIndex("row " + std::to_string(row) + " outside dataset of " + std::to_string(dataset.records.size()) +
                   " records");
  g.row = row;
  std::tie(g.source, g.mapping) = forward_transform(dataset.records[row], g.schema);
  const std::size_t max_len = model.conventions.max_len;
  const TokenSequence src = encode(g.source, model.vocabs.source, max_len);

  DecodeOptions opt;
  opt.max_len = max_len;
  opt.record_attention = record_attention;
  if (beam_width == 1) g.hypotheses.push_back(greedy_decode(src, model.params, opt));
  else g.hypotheses = beam_search(src, model.params, beam_width, opt);

  for (const auto& h : g.hypotheses) {
    Candidate c;
    c.normalized_spec = decode(h.tokens, model.vocabs.target);
    c.spec = backward_transform(c.normalized_spec, g.mapping);
    c.score = h.score;
    c.log_prob = h.log_prob;
    c.finished = h.finished;
    c.validity = validate_text(c.spec, grammar, &g.schema);
    g.candidates.push_back(std::move(c));
  }
  return g;
}

}  // namespace vlgen
