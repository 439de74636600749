#pragma once

// Training-pair construction: schema inference, the field-name
// normalization ("str<i>" / "num<i>" placeholders) applied to source rows
// and target specs, and its inverse on generated text.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vlgen/errors.hpp"
#include "vlgen/text.hpp"

namespace vlgen {

using Json = nlohmann::json;                // specs: keys serialize sorted
using OrderedJson = nlohmann::ordered_json;  // records: keys keep file order

struct Dataset {
  std::string name;
  std::vector<OrderedJson> records;
};

enum class FieldKind { numeric, string };

inline const char* to_string(FieldKind k) {
  return k == FieldKind::numeric ? "numeric" : "string";
}

struct FieldSchema {
  std::string name;
  FieldKind kind = FieldKind::string;

  friend bool operator==(const FieldSchema&, const FieldSchema&) = default;
};

using Schema = std::vector<FieldSchema>;

/// Ordered (original, placeholder) pairs. Placeholders are "str<i>" and
/// "num<i>" with i counted per kind in schema order.
class NameMapping {
 public:
  NameMapping() = default;

  void add(std::string original, std::string placeholder) {
    if (to_placeholder_.count(original) || to_original_.count(placeholder))
      throw DataError("name mapping would not be bijective for '" + original + "'");
    to_placeholder_.emplace(original, placeholder);
    to_original_.emplace(placeholder, original);
    pairs_.emplace_back(std::move(original), std::move(placeholder));
  }

  const std::vector<std::pair<std::string, std::string>>& pairs() const { return pairs_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }

  const std::string* placeholder_for(const std::string& original) const {
    auto it = to_placeholder_.find(original);
    return it == to_placeholder_.end() ? nullptr : &it->second;
  }
  const std::string* original_for(const std::string& placeholder) const {
    auto it = to_original_.find(placeholder);
    return it == to_original_.end() ? nullptr : &it->second;
  }

  friend bool operator==(const NameMapping& a, const NameMapping& b) { return a.pairs_ == b.pairs_; }

 private:
  std::vector<std::pair<std::string, std::string>> pairs_;
  std::unordered_map<std::string, std::string> to_placeholder_;
  std::unordered_map<std::string, std::string> to_original_;
};

struct TrainingPair {
  std::string source;
  std::string target;
};

/// One corpus file: a dataset plus a Vega-Lite spec drawn over it.
struct CorpusExample {
  Dataset data;
  Json spec;
  std::string name;
};

inline constexpr std::string_view kStringPrefix = "str";
inline constexpr std::string_view kNumericPrefix = "num";

namespace detail {

inline bool parses_as_decimal(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, std::chars_format::general);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(v);
}

inline bool is_numeric_value(const OrderedJson& v) {
  if (v.is_number()) return true;
  if (v.is_string()) return parses_as_decimal(v.get_ref<const std::string&>());
  return false;
}

inline std::vector<std::string> keys_of(const OrderedJson& record) {
  std::vector<std::string> keys;
  keys.reserve(record.size());
  for (auto it = record.begin(); it != record.end(); ++it) keys.push_back(it.key());
  return keys;
}

}  // namespace detail

/// One FieldSchema per field in first-record key order. A column is numeric
/// iff it has at least one non-null value and every non-null value parses
/// as a decimal number.
inline Schema infer_schema(const Dataset& dataset) {
  if (dataset.records.empty()) throw EmptyDataset();
  for (const auto& r : dataset.records)
    if (!r.is_object()) throw DataError("dataset '" + dataset.name + "' has a non-object record");

  const auto names = detail::keys_of(dataset.records.front());
  const std::set<std::string> expected(names.begin(), names.end());
  for (std::size_t i = 1; i < dataset.records.size(); ++i) {
    const auto keys = detail::keys_of(dataset.records[i]);
    if (std::set<std::string>(keys.begin(), keys.end()) != expected)
      throw RaggedDataset("record " + std::to_string(i) + " of dataset '" + dataset.name +
                          "' has a different field set than record 0");
  }

  Schema schema;
  schema.reserve(names.size());
  for (const auto& name : names) {
    bool any = false;
    bool numeric = true;
    for (const auto& r : dataset.records) {
      const auto& v = r[name];
      if (v.is_null()) continue;
      any = true;
      if (!detail::is_numeric_value(v)) {
        numeric = false;
        break;
      }
    }
    schema.push_back({name, any && numeric ? FieldKind::numeric : FieldKind::string});
  }
  return schema;
}

/// The placeholder mapping implied by a schema, independent of any record.
inline NameMapping make_mapping(const Schema& schema) {
  NameMapping mapping;
  std::size_t n_str = 0, n_num = 0;
  for (const auto& f : schema)
    if (f.kind == FieldKind::string)
      mapping.add(f.name, std::string(kStringPrefix) + std::to_string(n_str++));
  for (const auto& f : schema)
    if (f.kind == FieldKind::numeric)
      mapping.add(f.name, std::string(kNumericPrefix) + std::to_string(n_num++));
  return mapping;
}

/// Serializes one record as a compact JSON object with placeholder keys;
/// string fields come first, then numeric fields, each in schema order.
inline std::pair<std::string, NameMapping> forward_transform(const OrderedJson& record,
                                                             const Schema& schema) {
  if (!record.is_object()) throw SchemaMismatch("record is not a JSON object");
  std::set<std::string> known;
  for (const auto& f : schema) known.insert(f.name);
  for (auto it = record.begin(); it != record.end(); ++it)
    if (!known.count(it.key())) throw SchemaMismatch("field '" + it.key() + "' is not in the schema");

  NameMapping mapping = make_mapping(schema);
  std::string out = "{";
  bool first = true;
  for (const auto& [original, placeholder] : mapping.pairs()) {
    auto it = record.find(original);
    if (it == record.end()) throw SchemaMismatch("record lacks schema field '" + original + "'");
    if (!first) out += ',';
    first = false;
    out += '"';
    out += placeholder;
    out += "\":";
    out += it->dump(-1, ' ', false, OrderedJson::error_handler_t::replace);
  }
  out += '}';
  return {std::move(out), std::move(mapping)};
}

namespace detail {

// Rewrites every field reference in a spec through `rename`. Field
// references are: channel "field", channel "sort.field", and "field" members
// of view-level transforms.
template <typename Fn>
void rewrite_field_refs(Json& spec, Fn&& rename) {
  auto fix = [&](Json& holder) {
    if (!holder.is_object()) return;
    auto it = holder.find("field");
    if (it != holder.end() && it->is_string()) *it = rename(it->get<std::string>());
  };
  if (auto enc = spec.find("encoding"); enc != spec.end() && enc->is_object()) {
    for (auto& [channel, def] : enc->items()) {
      if (!def.is_object()) continue;
      fix(def);
      if (auto s = def.find("sort"); s != def.end()) fix(*s);
    }
  }
  if (auto tr = spec.find("transform"); tr != spec.end() && tr->is_array()) {
    for (auto& t : *tr) {
      fix(t);
      for (const char* key : {"aggregate", "bin", "timeUnit"}) {
        auto it = t.find(key);
        if (it != t.end() && it->is_array())
          for (auto& item : *it) fix(item);
      }
      if (auto g = t.find("groupby"); g != t.end() && g->is_array())
        for (auto& name : *g)
          if (name.is_string()) name = rename(name.get<std::string>());
    }
  }
}

}  // namespace detail

/// Drops inline data and replaces original field names with placeholders.
inline Json normalize_spec(const Json& spec, const NameMapping& mapping) {
  Json out = spec;
  out.erase("data");
  out.erase("$schema");
  detail::rewrite_field_refs(out, [&](const std::string& name) {
    const std::string* p = mapping.placeholder_for(name);
    return p ? *p : name;
  });
  return out;
}

inline std::string spec_to_text(const Json& spec) {
  return spec.dump(-1, ' ', false, Json::error_handler_t::replace);
}

/// Replaces every quoted string token whose content is a mapped placeholder
/// with the (JSON-escaped) original name. Works on arbitrary, possibly
/// malformed text; unmapped placeholders are left untouched.
inline std::string backward_transform(std::string_view text, const NameMapping& mapping) {
  if (mapping.empty()) return std::string(text);
  std::string out;
  out.reserve(text.size() + 16);
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '"') {
      out.push_back(text[i++]);
      continue;
    }
    // Find the closing quote, honoring backslash escapes.
    std::size_t j = i + 1;
    while (j < text.size() && text[j] != '"') j += (text[j] == '\\') ? 2 : 1;
    if (j >= text.size()) {
      out.append(text.substr(i));
      break;
    }
    const std::string content(text.substr(i + 1, j - i - 1));
    if (const std::string* original = mapping.original_for(content)) {
      out += Json(*original).dump(-1, ' ', false, Json::error_handler_t::replace);
    } else {
      out.append(text.substr(i, j - i + 1));
    }
    i = j + 1;
  }
  return out;
}

/// Builds `samples_per_example` pairs per example. Rows are drawn without
/// replacement when the dataset has enough rows that fit `max_len`, with
/// replacement otherwise. Rows whose normalized form does not fit are
/// skipped with a warning (never truncated).
inline std::vector<TrainingPair> generate_pairs(const std::vector<CorpusExample>& corpus,
                                                std::size_t samples_per_example,
                                                std::uint64_t seed,
                                                std::size_t max_len = 500) {
  if (samples_per_example < 1) throw DataError("samples_per_example must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<TrainingPair> pairs;
  pairs.reserve(corpus.size() * samples_per_example);

  for (const auto& ex : corpus) {
    const Schema schema = infer_schema(ex.data);
    const NameMapping mapping = make_mapping(schema);
    const std::string target = spec_to_text(normalize_spec(ex.spec, mapping));
    if (utf8_length(target) > max_len - 1) {
      log_warning("skipping example '" + ex.name + "': normalized spec exceeds max_len");
      continue;
    }

    std::vector<std::string> sources;
    sources.reserve(ex.data.records.size());
    std::size_t skipped = 0;
    for (const auto& r : ex.data.records) {
      auto src = forward_transform(r, schema).first;
      if (utf8_length(src) > max_len - 1) {
        ++skipped;
        continue;
      }
      sources.push_back(std::move(src));
    }
    if (skipped > 0)
      log_warning("example '" + ex.name + "': skipped " + std::to_string(skipped) +
                  " rows longer than max_len");
    if (sources.empty()) {
      log_warning("skipping example '" + ex.name + "': no row fits max_len");
      continue;
    }

    if (sources.size() >= samples_per_example) {
      std::vector<std::size_t> idx(sources.size());
      std::iota(idx.begin(), idx.end(), 0);
      // Partial Fisher-Yates: the first n slots become a uniform sample.
      for (std::size_t k = 0; k < samples_per_example; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
        std::swap(idx[k], idx[pick(rng)]);
        pairs.push_back({sources[idx[k]], target});
      }
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, sources.size() - 1);
      for (std::size_t k = 0; k < samples_per_example; ++k) pairs.push_back({sources[pick(rng)], target});
    }
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Loading

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline Dataset dataset_from_json(const OrderedJson& array, std::string name) {
  if (!array.is_array()) throw DataError("dataset '" + name + "' is not a JSON array of records");
  Dataset ds{std::move(name), {}};
  ds.records.reserve(array.size());
  for (const auto& r : array) {
    if (!r.is_object()) throw DataError("dataset '" + ds.name + "' contains a non-object record");
    ds.records.push_back(r);
  }
  return ds;
}

/// Loads a JSON file holding an array of records, or a {"values": [...]} object.
inline Dataset load_dataset(const std::filesystem::path& path) {
  OrderedJson j;
  try {
    j = OrderedJson::parse(read_file(path));
  } catch (const OrderedJson::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (j.is_object() && j.contains("values")) j = j["values"];
  return dataset_from_json(j, path.stem().string());
}

/// Parses one corpus file: either {"data": [...], "spec": {...}} or a
/// Vega-Lite spec carrying inline {"data": {"values": [...]}}.
inline CorpusExample parse_corpus_example(std::string_view text, std::string name) {
  OrderedJson j;
  try {
    j = OrderedJson::parse(text);
  } catch (const OrderedJson::parse_error& e) {
    throw DataError(name + ": " + e.what());
  }
  if (!j.is_object()) throw DataError(name + ": corpus file must hold a JSON object");
  if (j.contains("data") && j["data"].is_array() && j.contains("spec")) {
    return {dataset_from_json(j["data"], name), Json::parse(j["spec"].dump()), name};
  }
  if (j.contains("data") && j["data"].is_object() && j["data"].contains("values")) {
    Dataset ds = dataset_from_json(j["data"]["values"], name);
    Json spec = Json::parse(j.dump());
    spec.erase("data");
    return {std::move(ds), std::move(spec), name};
  }
  throw DataError(name + ": expected {\"data\": [...], \"spec\": {...}} or inline data values");
}

/// Loads every *.json file of a corpus directory in file-name order.
inline std::vector<CorpusExample> load_corpus_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError(dir.string() + " is not a directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<CorpusExample> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(parse_corpus_example(read_file(f), f.stem().string()));
  return out;
}

/// Thin CSV converter: first line is the header; numeric-looking cells become
/// numbers, empty cells and "NA" become null. Double-quoted cells may contain
/// commas and doubled quotes.
inline Dataset dataset_from_csv(std::string_view text, std::string name) {
  std::vector<std::vector<std::pair<std::string, bool>>> rows;  // (cell, was_quoted)
  std::vector<std::pair<std::string, bool>> row;
  std::string cell;
  bool quoted = false, in_quotes = false;
  auto end_cell = [&] {
    row.emplace_back(std::move(cell), quoted);
    cell.clear();
    quoted = false;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (c == '"') {
        in_quotes = false;
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = quoted = true;
    } else if (c == ',') {
      end_cell();
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_cell();
      if (!(row.size() == 1 && row[0].first.empty() && !row[0].second)) rows.push_back(std::move(row));
      row.clear();
    } else {
      cell.push_back(c);
    }
  }
  if (!cell.empty() || !row.empty()) {
    end_cell();
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw EmptyDataset();

  const auto& header = rows.front();
  Dataset ds{std::move(name), {}};
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size())
      throw RaggedDataset("CSV row " + std::to_string(r) + " has " + std::to_string(rows[r].size()) +
                          " cells, header has " + std::to_string(header.size()));
    OrderedJson rec = OrderedJson::object();
    for (std::size_t c = 0; c < header.size(); ++c) {
      const auto& [value, was_quoted] = rows[r][c];
      if (!was_quoted && (value.empty() || value == "NA")) {
        rec[header[c].first] = nullptr;
      } else if (!was_quoted && detail::parses_as_decimal(value)) {
        rec[header[c].first] = OrderedJson::parse(value.front() == '+' ? value.substr(1) : value, nullptr, false);
        if (rec[header[c].first].is_discarded()) rec[header[c].first] = std::stod(value);
      } else {
        rec[header[c].first] = value;
      }
    }
    ds.records.push_back(std::move(rec));
  }
  if (ds.records.empty()) throw EmptyDataset();
  return ds;
}

}  // namespace vlgen
