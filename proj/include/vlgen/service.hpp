#pragma once

// Transport-independent request handlers for the HTTP API (docs/api.md),
// plus the cpp-httplib binding. Handlers are const: a request never changes
// service state.

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/checkpoint.hpp"
#include "vlgen/corpus.hpp"
#include "vlgen/errors.hpp"
#include "vlgen/pipeline.hpp"

namespace vlgen {

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

struct ServiceOptions {
  std::size_t default_beam_width = 15;
  std::size_t max_beam_width = 64;
  std::size_t max_records = 100000;
};

template <typename T>
class Service {
 public:
  /// `model` may be null; generation then answers 503.
  Service(std::shared_ptr<const Checkpoint<T>> model, std::vector<Dataset> datasets, ServiceOptions opts = {})
      : model_(std::move(model)), datasets_(std::move(datasets)), opts_(opts) {}

  HttpResponse health() const {
    Json body = {{"status", model_ ? "ok" : "no-model"}, {"model_loaded", model_ != nullptr},
                 {"datasets", datasets_.size()}};
    if (model_) body["checkpoint_id"] = model_->id;
    return {200, body.dump()};
  }

  HttpResponse list_datasets() const {
    Json names = Json::array();
    for (const auto& d : datasets_) names.push_back(d.name);
    return {200, Json{{"datasets", names}}.dump()};
  }

  /// A bundled dataset chosen by `seed` (fresh entropy when absent).
  HttpResponse random_dataset(std::optional<std::uint64_t> seed) const {
    if (datasets_.empty()) return error(404, "no bundled datasets");
    std::mt19937_64 rng(seed ? *seed : std::random_device{}());
    std::uniform_int_distribution<std::size_t> pick(0, datasets_.size() - 1);
    const Dataset& d = datasets_[pick(rng)];
    OrderedJson records = OrderedJson::array();
    for (const auto& r : d.records) records.push_back(r);
    OrderedJson body = {{"name", d.name}, {"records", records}};
    return {200, body.dump()};
  }

  HttpResponse generate(std::string_view body) const {
    OrderedJson req;
    try {
      req = OrderedJson::parse(body);
    } catch (const OrderedJson::parse_error& e) {
      return error(400, std::string("malformed JSON body: ") + e.what());
    }
    if (!req.is_object()) return error(400, "request body must be a JSON object");

    Dataset ds;
    if (req.contains("data")) {
      if (!req["data"].is_array()) return error(400, "'data' must be an array of records");
      if (req["data"].empty()) return error(400, "'data' must not be empty");
      if (req["data"].size() > opts_.max_records) return error(413, "dataset has too many records");
      try {
        ds = dataset_from_json(req["data"], "request");
      } catch (const DataError& e) {
        return error(400, e.what());
      }
    } else if (req.contains("dataset")) {
      if (!req["dataset"].is_string()) return error(400, "'dataset' must be a bundled dataset name");
      const auto name = req["dataset"].get<std::string>();
      const Dataset* found = nullptr;
      for (const auto& d : datasets_)
        if (d.name == name) found = &d;
      if (!found) return error(400, "unknown bundled dataset '" + name + "'");
      ds = *found;
    } else {
      return error(400, "request needs 'data' (array of records) or 'dataset' (bundled name)");
    }

    std::size_t beam = opts_.default_beam_width, row = 0;
    std::optional<std::size_t> max_candidates;
    try {
      if (req.contains("beam_width")) beam = positive(req["beam_width"], "beam_width");
      if (req.contains("max_candidates")) max_candidates = positive(req["max_candidates"], "max_candidates");
      if (req.contains("row")) {
        if (!req["row"].is_number_unsigned()) throw DataError("'row' must be a non-negative integer");
        row = req["row"].get<std::size_t>();
      }
    } catch (const DataError& e) {
      return error(400, e.what());
    }
    if (beam > opts_.max_beam_width)
      return error(400, "beam_width may be at most " + std::to_string(opts_.max_beam_width));
    if (!model_) return error(503, "model not loaded");

    Generation g;
    try {
      g = vlgen::generate(*model_, ds, row, beam);
    } catch (const TooLong& e) {
      return error(413, std::string("dataset row is too long after normalization: ") + e.what());
    } catch (const DataError& e) {
      return error(400, e.what());
    }

    Json schema = Json::array();
    for (const auto& f : g.schema) schema.push_back({{"name", f.name}, {"kind", to_string(f.kind)}});
    Json cands = Json::array();
    const std::size_t n = std::min(g.candidates.size(), max_candidates.value_or(g.candidates.size()));
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = g.candidates[i];
      std::optional<std::size_t> dup;
      for (std::size_t j = 0; j < i && !dup; ++j)
        if (g.candidates[j].spec == c.spec) dup = j;
      Json errors = Json::array();
      for (const auto& d : c.validity.errors) errors.push_back({{"path", d.path}, {"message", d.message}});
      cands.push_back({{"spec", c.spec},
                       {"score", c.score},
                       {"log_prob", c.log_prob},
                       {"finished", c.finished},
                       {"language_valid", c.validity.language_valid},
                       {"visualization_valid", c.validity.visualization_valid},
                       {"phantom_fields", c.validity.phantom_fields},
                       {"errors", errors},
                       {"duplicate_of", dup ? Json(*dup) : Json(nullptr)}});
    }
    Json out = {{"candidates", cands},
                {"schema", schema},
                {"row", g.row},
                {"source", g.source},
                {"beam_width", beam},
                {"checkpoint_id", model_->id}};
    return {200, out.dump()};
  }

  static HttpResponse error(int status, const std::string& message) {
    return {status, Json{{"error", message}, {"status", status}}.dump()};
  }

 private:
  static std::size_t positive(const OrderedJson& v, const char* name) {
    if (!v.is_number_unsigned() || v.get<std::size_t>() < 1)
      throw DataError(std::string("'") + name + "' must be an integer >= 1");
    return v.get<std::size_t>();
  }

  std::shared_ptr<const Checkpoint<T>> model_;
  std::vector<Dataset> datasets_;
  ServiceOptions opts_;
};

/// Loads every *.json dataset file of a directory, in file-name order.
inline std::vector<Dataset> load_dataset_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Dataset> out;
  for (const auto& f : files) out.push_back(load_dataset(f));
  return out;
}

}  // namespace vlgen
