#pragma once

// Validity checks for generated specifications against the Vega-Lite subset
// the corpus uses. Language validity means the text is a JSON object.
// Visualization validity additionally requires a plotable spec: allowed
// mark, at least one allowed channel, field+type (or count) per channel,
// transforms compatible with the declared types and, when a schema is
// given, fields that exist with a compatible kind. Unknown top-level keys
// only warn.

#include <algorithm>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlgen/corpus.hpp"
#include "vlgen/errors.hpp"

namespace vlgen {

struct GrammarSubset {
  std::set<std::string> marks{"area", "bar", "circle", "line", "point", "tick"};
  std::set<std::string> channels{"x", "y", "color", "shape", "size", "row", "column"};
  std::set<std::string> types{"quantitative", "nominal", "ordinal", "temporal"};
  std::set<std::string> view_transforms{"aggregate", "bin", "calculate", "filter", "timeUnit"};
  std::set<std::string> field_transforms{"aggregate", "bin", "sort", "timeUnit"};
  std::set<std::string> aggregate_ops{"count",  "valid",  "missing", "distinct", "sum",   "mean",
                                      "average", "median", "q1",      "q3",       "min",   "max",
                                      "stdev",   "stdevp", "variance", "variancep", "argmin", "argmax"};
  std::set<std::string> time_units{"year",         "quarter",     "month",        "date",         "week",
                                   "day",          "dayofyear",   "hours",        "minutes",      "seconds",
                                   "milliseconds", "yearquarter", "yearmonth",    "yearmonthdate", "monthdate",
                                   "hoursminutes", "hoursminutesseconds", "minutesseconds"};
  // Presentation keys allowed inside a channel definition without comment.
  std::set<std::string> channel_extras{"title", "axis", "legend", "scale", "stack", "format"};
  std::set<std::string> top_level{"mark",  "encoding", "transform", "data",   "$schema",
                                  "description", "title", "width", "height", "config"};

  /// Field-level transform versus declared type.
  static bool transform_allows(const std::string& transform, const std::string& type) {
    if (transform == "aggregate") return type != "nominal";
    if (transform == "bin") return type == "quantitative";
    if (transform == "timeUnit") return type == "temporal";
    return true;
  }

  /// Declared type versus the inferred kind of the source column.
  static bool kind_allows(FieldKind kind, const std::string& type) {
    if (kind == FieldKind::numeric) return type == "quantitative" || type == "ordinal";
    return type == "nominal" || type == "ordinal" || type == "temporal";
  }
};

struct Diagnostic {
  std::string path;  // JSON pointer into the spec
  std::string message;

  friend bool operator==(const Diagnostic&, const Diagnostic&) = default;
};

struct ValidityResult {
  bool language_valid = false;
  bool visualization_valid = false;
  std::vector<std::string> phantom_fields;
  std::vector<Diagnostic> errors;
  std::vector<Diagnostic> warnings;

  friend bool operator==(const ValidityResult&, const ValidityResult&) = default;
};

struct LanguageCheck {
  bool valid = false;
  Json value;         // parsed object when valid
  std::string error;  // parser message otherwise
};

inline LanguageCheck check_language(std::string_view text) {
  LanguageCheck out;
  try {
    out.value = Json::parse(text);
  } catch (const Json::parse_error& e) {
    out.error = e.what();
    return out;
  }
  if (!out.value.is_object()) {
    out.error = std::string("top-level value is a ") + out.value.type_name() + ", not an object";
    out.value = nullptr;
    return out;
  }
  out.valid = true;
  return out;
}

namespace detail {

class SpecChecker {
 public:
  SpecChecker(const GrammarSubset& g, const Schema* schema, ValidityResult& r) : g_(g), schema_(schema), r_(r) {}

  void run(const Json& spec) {
    for (auto it = spec.begin(); it != spec.end(); ++it)
      if (!g_.top_level.count(it.key())) warn("/" + it.key(), "unknown top-level key");
    check_mark(spec);
    if (spec.contains("transform")) check_transforms(spec["transform"]);
    check_encoding(spec);
  }

 private:
  void error(std::string path, std::string msg) { r_.errors.push_back({std::move(path), std::move(msg)}); }
  void warn(std::string path, std::string msg) { r_.warnings.push_back({std::move(path), std::move(msg)}); }

  void check_mark(const Json& spec) {
    if (!spec.contains("mark")) return error("/mark", "missing mark");
    const Json& m = spec["mark"];
    const Json* type = m.is_object() && m.contains("type") ? &m["type"] : &m;
    if (!type->is_string()) return error("/mark", "mark must be a string or an object with a type");
    if (!g_.marks.count(type->get<std::string>()))
      error("/mark", "mark '" + type->get<std::string>() + "' is not supported");
  }

  // Records a field reference; names produced by transforms ("as") are
  // not phantoms.
  void reference(const std::string& path, const Json& field) {
    if (!field.is_string()) return error(path, "field must be a string");
    const auto& name = field.get_ref<const std::string&>();
    if (!schema_ || derived_.count(name)) return;
    if (!find_field(name)) {
      if (std::find(r_.phantom_fields.begin(), r_.phantom_fields.end(), name) == r_.phantom_fields.end())
        r_.phantom_fields.push_back(name);
      error(path, "field '" + name + "' does not exist in the dataset");
    }
  }

  const FieldSchema* find_field(const std::string& name) const {
    for (const auto& f : *schema_)
      if (f.name == name) return &f;
    return nullptr;
  }

  void derive(const std::string& path, const Json& as) {
    if (!as.is_string()) return error(path, "'as' must be a string");
    derived_.insert(as.get<std::string>());
  }

  void check_transforms(const Json& t) {
    if (!t.is_array()) return error("/transform", "transform must be an array");
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::string path = "/transform/" + std::to_string(i);
      const Json& step = t[i];
      if (!step.is_object()) {
        error(path, "transform entry must be an object");
        continue;
      }
      std::string kind;
      for (const auto& k : g_.view_transforms)
        if (step.contains(k)) kind = k;
      if (kind.empty()) {
        error(path, "unsupported transform");
        continue;
      }
      if (kind == "aggregate") {
        const Json& ops = step["aggregate"];
        if (!ops.is_array()) {
          error(path + "/aggregate", "aggregate must be an array");
          continue;
        }
        for (std::size_t j = 0; j < ops.size(); ++j) {
          const std::string p = path + "/aggregate/" + std::to_string(j);
          const Json& op = ops[j];
          if (!op.is_object() || !op.contains("op") || !op["op"].is_string() ||
              !g_.aggregate_ops.count(op["op"].get<std::string>())) {
            error(p, "aggregate entry needs a supported op");
            continue;
          }
          if (op.contains("field")) reference(p + "/field", op["field"]);
          else if (op["op"] != "count") error(p, "aggregate op other than count needs a field");
          if (op.contains("as")) derive(p + "/as", op["as"]);
        }
        if (step.contains("groupby")) {
          const Json& gb = step["groupby"];
          if (!gb.is_array()) error(path + "/groupby", "groupby must be an array");
          else
            for (std::size_t j = 0; j < gb.size(); ++j) reference(path + "/groupby/" + std::to_string(j), gb[j]);
        }
      } else if (kind == "bin" || kind == "timeUnit") {
        if (kind == "timeUnit" &&
            (!step["timeUnit"].is_string() || !g_.time_units.count(step["timeUnit"].get<std::string>())))
          error(path + "/timeUnit", "unsupported time unit");
        if (step.contains("field")) reference(path + "/field", step["field"]);
        else error(path, kind + " transform needs a field");
        if (step.contains("as")) derive(path + "/as", step["as"]);
        else error(path, kind + " transform needs 'as'");
      } else if (kind == "calculate") {
        if (!step["calculate"].is_string()) error(path + "/calculate", "calculate must be an expression string");
        if (step.contains("as")) derive(path + "/as", step["as"]);
        else error(path, "calculate transform needs 'as'");
      } else if (kind == "filter") {
        const Json& f = step["filter"];
        if (f.is_object() && f.contains("field")) reference(path + "/filter/field", f["field"]);
        else if (!f.is_string() && !f.is_object()) error(path + "/filter", "filter must be an expression or predicate");
      }
    }
  }

  void check_encoding(const Json& spec) {
    if (!spec.contains("encoding")) return error("/encoding", "missing encoding");
    const Json& enc = spec["encoding"];
    if (!enc.is_object() || enc.empty()) return error("/encoding", "encoding needs at least one channel");
    for (auto it = enc.begin(); it != enc.end(); ++it) {
      const std::string path = "/encoding/" + it.key();
      if (!g_.channels.count(it.key())) {
        error(path, "channel '" + it.key() + "' is not supported");
        continue;
      }
      check_channel(path, it.value());
    }
  }

  void check_channel(const std::string& path, const Json& def) {
    if (!def.is_object()) return error(path, "channel definition must be an object");
    for (auto it = def.begin(); it != def.end(); ++it) {
      const auto& k = it.key();
      if (k != "field" && k != "type" && !g_.field_transforms.count(k) && !g_.channel_extras.count(k))
        warn(path + "/" + k, "unknown channel property");
    }

    std::optional<std::string> aggregate;
    if (def.contains("aggregate")) {
      const Json& a = def["aggregate"];
      if (!a.is_string() || !g_.aggregate_ops.count(a.get<std::string>())) {
        error(path + "/aggregate", "unsupported aggregate");
      } else {
        aggregate = a.get<std::string>();
      }
    }
    const bool is_count = aggregate == "count";

    std::optional<std::string> type;
    if (def.contains("type")) {
      const Json& t = def["type"];
      if (!t.is_string() || !g_.types.count(t.get<std::string>()))
        error(path + "/type", "unsupported field type");
      else
        type = t.get<std::string>();
    }

    if (!def.contains("field")) {
      if (!is_count) error(path, "channel needs a field and type, or a count aggregate");
      if (aggregate && !is_count) error(path + "/aggregate", "aggregate '" + *aggregate + "' needs a field");
    } else {
      if (!def.contains("type")) error(path, "channel with a field needs a type");
      reference(path + "/field", def["field"]);
    }

    if (type) {
      if (aggregate && !is_count && !GrammarSubset::transform_allows("aggregate", *type))
        error(path + "/aggregate", "aggregate '" + *aggregate + "' does not apply to " + *type + " fields");
      if (def.contains("bin") && def["bin"] != false && !GrammarSubset::transform_allows("bin", *type))
        error(path + "/bin", "bin requires a quantitative field");
      if (def.contains("timeUnit") && !GrammarSubset::transform_allows("timeUnit", *type))
        error(path + "/timeUnit", "timeUnit requires a temporal field");
    }
    if (def.contains("bin") && !def["bin"].is_boolean() && !def["bin"].is_object())
      error(path + "/bin", "bin must be a boolean or an object");
    if (def.contains("timeUnit") &&
        (!def["timeUnit"].is_string() || !g_.time_units.count(def["timeUnit"].get<std::string>())))
      error(path + "/timeUnit", "unsupported time unit");
    if (def.contains("sort")) {
      const Json& s = def["sort"];
      const bool ok = s.is_null() || s.is_object() || s.is_array() || s == "ascending" || s == "descending";
      if (!ok) error(path + "/sort", "unsupported sort");
      if (s.is_object() && s.contains("field")) reference(path + "/sort/field", s["field"]);
    }

    // Column kind versus declared type and aggregate.
    if (schema_ && def.contains("field") && def["field"].is_string()) {
      const auto& name = def["field"].get_ref<const std::string&>();
      if (const FieldSchema* f = find_field(name)) {
        if (type && !GrammarSubset::kind_allows(f->kind, *type))
          error(path + "/type", "type " + *type + " is incompatible with " + to_string(f->kind) + " field '" +
                                    name + "'");
        if (f->kind == FieldKind::string && aggregate && !is_count && *aggregate != "distinct" &&
            *aggregate != "valid" && *aggregate != "missing")
          error(path + "/aggregate", "aggregate '" + *aggregate + "' does not apply to string field '" + name + "'");
      }
    }
  }

  const GrammarSubset& g_;
  const Schema* schema_;
  ValidityResult& r_;
  std::set<std::string> derived_;
};

}  // namespace detail

/// Validates a parsed spec. A non-object spec is language-invalid.
inline ValidityResult validate_spec(const Json& spec, const GrammarSubset& grammar = {},
                                    const Schema* schema = nullptr) {
  ValidityResult r;
  if (!spec.is_object()) {
    r.errors.push_back({"", "spec must be a JSON object"});
    return r;
  }
  r.language_valid = true;
  detail::SpecChecker(grammar, schema, r).run(spec);
  r.visualization_valid = r.errors.empty();
  return r;
}

/// Language check followed by validate_spec on success.
inline ValidityResult validate_text(std::string_view text, const GrammarSubset& grammar = {},
                                    const Schema* schema = nullptr) {
  auto lang = check_language(text);
  if (!lang.valid) {
    ValidityResult r;
    r.errors.push_back({"", lang.error});
    return r;
  }
  return validate_spec(lang.value, grammar, schema);
}

struct BatchScore {
  double language_rate = 0.0;
  double visualization_rate = 0.0;
  double phantom_rate = 0.0;
  std::size_t count = 0;
};

inline BatchScore score_batch(const std::vector<ValidityResult>& results) {
  if (results.empty()) throw EmptyBatch();
  std::size_t lang = 0, vis = 0, phantom = 0;
  for (const auto& r : results) {
    lang += r.language_valid;
    vis += r.visualization_valid;
    phantom += !r.phantom_fields.empty();
  }
  const double n = static_cast<double>(results.size());
  return {static_cast<double>(lang) / n, static_cast<double>(vis) / n, static_cast<double>(phantom) / n,
          results.size()};
}

inline Json to_json(const ValidityResult& r) {
  auto diags = [](const std::vector<Diagnostic>& ds) {
    Json out = Json::array();
    for (const auto& d : ds) out.push_back({{"path", d.path}, {"message", d.message}});
    return out;
  };
  return {{"language_valid", r.language_valid},
          {"visualization_valid", r.visualization_valid},
          {"phantom_fields", r.phantom_fields},
          {"errors", diags(r.errors)},
          {"warnings", diags(r.warnings)}};
}

inline ValidityResult validity_from_json(const Json& j) {
  ValidityResult r;
  r.language_valid = j.at("language_valid").get<bool>();
  r.visualization_valid = j.at("visualization_valid").get<bool>();
  r.phantom_fields = j.at("phantom_fields").get<std::vector<std::string>>();
  for (const auto& d : j.at("errors")) r.errors.push_back({d.at("path"), d.at("message")});
  for (const auto& d : j.at("warnings")) r.warnings.push_back({d.at("path"), d.at("message")});
  return r;
}

/// One JSON object per line; `extra` members are merged into each line.
inline void write_diagnostics(std::ostream& out, const ValidityResult& r, const Json& extra = Json::object()) {
  Json line = to_json(r);
  for (auto it = extra.begin(); it != extra.end(); ++it) line[it.key()] = it.value();
  out << line.dump() << '\n';
}

}  // namespace vlgen
