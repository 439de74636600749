#pragma once

// Held-out evaluation: sample rows from each dataset, decode every beam at
// each width, validate every candidate against the dataset schema and
// aggregate per width. Accounting is per candidate: a width-k decode
// contributes up to k samples.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/checkpoint.hpp"
#include "vlgen/corpus.hpp"
#include "vlgen/errors.hpp"
#include "vlgen/pipeline.hpp"
#include "vlgen/validator.hpp"

namespace vlgen {

struct EvalConfig {
  std::vector<std::size_t> widths{5, 10, 15, 20};
  std::size_t per_dataset_rows = 10;
  std::uint64_t seed = 1;
  std::string tag = "model";
  std::size_t threads = 1;  // datasets decoded concurrently
};

struct EvalRow {
  std::string tag;
  std::size_t width = 0;
  double language_rate = 0.0;
  double visualization_rate = 0.0;
  double phantom_rate = 0.0;
  std::size_t samples = 0;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  Json metadata = Json::object();  // seed, checkpoint id, accounting, datasets

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

namespace detail {

inline std::uint64_t name_seed(std::uint64_t seed, const std::string& name) {
  return fnv1a(name.data(), name.size(), seed ^ 0xcbf29ce484222325ull);
}

/// Rows to evaluate for one dataset: a seeded sample (without replacement
/// when possible) among rows that fit max_len. Depends only on the seed and
/// the dataset itself.
inline std::vector<std::size_t> sample_rows(const Dataset& ds, std::size_t n, std::uint64_t seed,
                                            std::size_t max_len) {
  const Schema schema = infer_schema(ds);
  std::vector<std::size_t> fit;
  for (std::size_t i = 0; i < ds.records.size(); ++i)
    if (utf8_length(forward_transform(ds.records[i], schema).first) <= max_len - 1) fit.push_back(i);
  if (fit.empty()) {
    log_warning("dataset '" + ds.name + "' has no row that fits max_len; skipped");
    return {};
  }
  std::mt19937_64 rng(name_seed(seed, ds.name));
  std::vector<std::size_t> out;
  if (fit.size() >= n) {
    for (std::size_t k = 0; k < n; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, fit.size() - 1);
      std::swap(fit[k], fit[pick(rng)]);
      out.push_back(fit[k]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, fit.size() - 1);
    for (std::size_t k = 0; k < n; ++k) out.push_back(fit[pick(rng)]);
  }
  return out;
}

struct DatasetOutcome {
  std::vector<std::vector<ValidityResult>> per_width;
  std::vector<Json> diagnostics;
};

}  // namespace detail

template <typename T>
EvalReport evaluate(const Checkpoint<T>& model, const std::vector<Dataset>& datasets, const EvalConfig& cfg,
                    std::ostream* diagnostics = nullptr) {
  if (cfg.widths.empty()) throw EmptyConfiguration("no beam widths configured");
  for (std::size_t w : cfg.widths)
    if (w < 1) throw EmptyConfiguration("beam widths must be >= 1");
  if (datasets.empty()) throw EmptyConfiguration("no datasets to evaluate");
  if (cfg.per_dataset_rows < 1) throw EmptyConfiguration("per_dataset_rows must be >= 1");

  auto run_one = [&](const Dataset& ds) {
    detail::DatasetOutcome out;
    out.per_width.resize(cfg.widths.size());
    const auto rows = detail::sample_rows(ds, cfg.per_dataset_rows, cfg.seed, model.conventions.max_len);
    for (std::size_t wi = 0; wi < cfg.widths.size(); ++wi) {
      for (std::size_t row : rows) {
        const Generation g = generate(model, ds, row, cfg.widths[wi]);
        for (std::size_t c = 0; c < g.candidates.size(); ++c) {
          const auto& cand = g.candidates[c];
          out.per_width[wi].push_back(cand.validity);
          Json line = to_json(cand.validity);
          line["tag"] = cfg.tag;
          line["dataset"] = ds.name;
          line["row"] = row;
          line["width"] = cfg.widths[wi];
          line["rank"] = c;
          line["score"] = cand.score;
          line["spec"] = cand.spec;
          out.diagnostics.push_back(std::move(line));
        }
      }
    }
    return out;
  };

  std::vector<detail::DatasetOutcome> outcomes(datasets.size());
  const std::size_t threads = std::max<std::size_t>(1, cfg.threads);
  for (std::size_t at = 0; at < datasets.size(); at += threads) {
    std::vector<std::future<detail::DatasetOutcome>> futs;
    for (std::size_t i = at; i < std::min(at + threads, datasets.size()); ++i)
      futs.push_back(std::async(threads > 1 ? std::launch::async : std::launch::deferred, run_one,
                                std::cref(datasets[i])));
    for (std::size_t i = 0; i < futs.size(); ++i) outcomes[at + i] = futs[i].get();
  }

  EvalReport report;
  std::vector<std::string> names;
  for (const auto& ds : datasets) names.push_back(ds.name);
  report.metadata = {{"seed", cfg.seed},
                     {"checkpoint_id", model.id},
                     {"accounting", "per-candidate"},
                     {"per_dataset_rows", cfg.per_dataset_rows},
                     {"datasets", names}};
  for (std::size_t wi = 0; wi < cfg.widths.size(); ++wi) {
    std::vector<ValidityResult> all;
    for (const auto& o : outcomes) all.insert(all.end(), o.per_width[wi].begin(), o.per_width[wi].end());
    if (all.empty()) throw EmptyConfiguration("no candidates were produced for width " + std::to_string(cfg.widths[wi]));
    const BatchScore s = score_batch(all);
    report.rows.push_back({cfg.tag, cfg.widths[wi], s.language_rate, s.visualization_rate, s.phantom_rate, s.count});
  }
  if (diagnostics)
    for (const auto& o : outcomes)
      for (const auto& line : o.diagnostics) *diagnostics << line.dump() << '\n';
  return report;
}

/// Recomputes report rows from a diagnostics stream (one JSON object per
/// line, as written by evaluate).
inline std::vector<EvalRow> rows_from_diagnostics(std::istream& in) {
  std::map<std::pair<std::string, std::size_t>, std::vector<ValidityResult>> groups;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const Json j = Json::parse(line);
    groups[{j.at("tag").get<std::string>(), j.at("width").get<std::size_t>()}].push_back(validity_from_json(j));
  }
  std::vector<EvalRow> rows;
  for (const auto& [key, results] : groups) {
    const BatchScore s = score_batch(results);
    rows.push_back({key.first, key.second, s.language_rate, s.visualization_rate, s.phantom_rate, s.count});
  }
  return rows;
}

inline Json report_to_json(const EvalReport& r) {
  Json rows = Json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"tag", row.tag},
                    {"width", row.width},
                    {"language_rate", row.language_rate},
                    {"visualization_rate", row.visualization_rate},
                    {"phantom_rate", row.phantom_rate},
                    {"samples", row.samples}});
  return {{"format", "vlgen-eval-report"}, {"version", 1}, {"metadata", r.metadata}, {"rows", rows}};
}

inline EvalReport report_from_json(const Json& j) {
  EvalReport r;
  r.metadata = j.at("metadata");
  for (const auto& row : j.at("rows"))
    r.rows.push_back({row.at("tag"), row.at("width"), row.at("language_rate"), row.at("visualization_rate"),
                      row.at("phantom_rate"), row.at("samples")});
  return r;
}

struct RenderedReport {
  std::string table;  // human-readable
  std::string json;   // machine-readable, parseable with report_from_json
};

/// One block per model tag; columns are beam widths, rows are metrics.
inline RenderedReport render_report(const EvalReport& r) {
  if (r.rows.empty()) throw EmptyConfiguration("report has no rows");
  std::vector<std::string> tags;
  for (const auto& row : r.rows)
    if (std::find(tags.begin(), tags.end(), row.tag) == tags.end()) tags.push_back(row.tag);

  std::string out;
  char buf[64];
  for (const auto& tag : tags) {
    std::vector<const EvalRow*> cols;
    for (const auto& row : r.rows)
      if (row.tag == tag) cols.push_back(&row);
    std::snprintf(buf, sizeof buf, "%-14s", tag.c_str());
    out += buf;
    for (const auto* c : cols) {
      std::snprintf(buf, sizeof buf, " %8s", ("k=" + std::to_string(c->width)).c_str());
      out += buf;
    }
    out += '\n';
    auto metric = [&](const char* name, auto get, const char* fmt) {
      std::snprintf(buf, sizeof buf, "%-14s", name);
      out += buf;
      for (const auto* c : cols) {
        std::snprintf(buf, sizeof buf, fmt, get(*c));
        out += buf;
      }
      out += '\n';
    };
    metric("language", [](const EvalRow& e) { return e.language_rate; }, " %8.3f");
    metric("visualization", [](const EvalRow& e) { return e.visualization_rate; }, " %8.3f");
    metric("phantom", [](const EvalRow& e) { return e.phantom_rate; }, " %8.3f");
    metric("samples", [](const EvalRow& e) { return static_cast<unsigned long long>(e.samples); }, " %8llu");
  }
  return {out, report_to_json(r).dump(2)};
}

/// Minimum/maximum rates a report must meet. Unset bounds are not checked;
/// `width` restricts the check to one beam width.
struct EvalThresholds {
  std::optional<double> min_language_rate;
  std::optional<double> min_visualization_rate;
  std::optional<double> max_phantom_rate;
  std::optional<std::size_t> width;

  static EvalThresholds from_json(const Json& j) {
    EvalThresholds t;
    if (j.contains("min_language_rate")) t.min_language_rate = j["min_language_rate"].get<double>();
    if (j.contains("min_visualization_rate")) t.min_visualization_rate = j["min_visualization_rate"].get<double>();
    if (j.contains("max_phantom_rate")) t.max_phantom_rate = j["max_phantom_rate"].get<double>();
    if (j.contains("width")) t.width = j["width"].get<std::size_t>();
    return t;
  }
};

/// Human-readable descriptions of every missed threshold.
inline std::vector<std::string> threshold_misses(const EvalReport& r, const EvalThresholds& t) {
  std::vector<std::string> misses;
  char buf[160];
  for (const auto& row : r.rows) {
    if (t.width && row.width != *t.width) continue;
    auto check = [&](bool ok, const char* what, double value, double bound) {
      if (ok) return;
      std::snprintf(buf, sizeof buf, "%s k=%zu: %s %.3f misses threshold %.3f", row.tag.c_str(), row.width, what,
                    value, bound);
      misses.emplace_back(buf);
    };
    if (t.min_language_rate)
      check(row.language_rate >= *t.min_language_rate, "language rate", row.language_rate, *t.min_language_rate);
    if (t.min_visualization_rate)
      check(row.visualization_rate >= *t.min_visualization_rate, "visualization rate", row.visualization_rate,
            *t.min_visualization_rate);
    if (t.max_phantom_rate)
      check(row.phantom_rate <= *t.max_phantom_rate, "phantom rate", row.phantom_rate, *t.max_phantom_rate);
  }
  return misses;
}

}  // namespace vlgen
