// vlgen command-line tool: train, generate, evaluate, validate, attention,
// serve and convert-csv. Exit codes: 0 success, 1 usage, 2 data error,
// 3 checkpoint error, 4 evaluation threshold missed.

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlgen/checkpoint.hpp"
#include "vlgen/corpus.hpp"
#include "vlgen/decoder.hpp"
#include "vlgen/evaluator.hpp"
#include "vlgen/http.hpp"
#include "vlgen/pipeline.hpp"
#include "vlgen/service.hpp"
#include "vlgen/trainer.hpp"
#include "vlgen/validator.hpp"

namespace fs = std::filesystem;
using namespace vlgen;
using Real = float;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitCheckpoint = 3;
constexpr int kExitThreshold = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string default_data_dir(const char* sub) { return (fs::path(VLGEN_DATA_DIR) / sub).string(); }

/// --checkpoint wins; otherwise VLGEN_CHECKPOINT.
fs::path resolve_checkpoint(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("VLGEN_CHECKPOINT"); env && *env) return env;
  throw UsageError("no checkpoint given (use --checkpoint or set VLGEN_CHECKPOINT)");
}

Dataset load_any_dataset(const fs::path& path) {
  if (path.extension() == ".csv") return dataset_from_csv(read_file(path), path.stem().string());
  return load_dataset(path);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string corpus = default_data_dir("corpus");
  std::string out;
  std::string log;
  std::string history;
  std::size_t samples = 50;
  double heldout = 0.05;
  TrainConfig cfg;
};

int run_train(const TrainArgs& a) {
  const auto corpus = load_corpus_dir(a.corpus);
  if (corpus.empty()) throw DataError("corpus directory " + a.corpus + " has no examples");
  const TrainingSet ts = prepare_training_set(corpus, a.samples, a.heldout, a.cfg.seed, a.cfg.max_len);
  const auto& vocabs = ts.vocabs;
  std::cout << "examples: " << ts.train_examples.size() << " train, " << ts.heldout_examples.size() << " held out\n"
            << "pairs: " << ts.train.size() << " train, " << ts.heldout.size() << " held out\n"
            << "vocab: " << vocabs.source.size() << " source, " << vocabs.target.size() << " target\n";

  TrainHooks<Real> hooks;
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::trunc);
    if (!log) throw DataError("cannot write " + a.log);
    hooks.log = &log;
  }
  if (!ts.heldout.empty()) hooks.heldout = &ts.heldout;
  hooks.checkpoint_path = a.out;
  hooks.conventions.max_len = a.cfg.max_len;
  const auto t0 = std::chrono::steady_clock::now();
  hooks.on_point = [&](const HistoryPoint& p) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("step %6zu  train nll %.4f  held-out log ppl %.4f  (%.0fs)\n", p.step, p.train_nll,
                p.heldout_log_perplexity, secs);
    std::fflush(stdout);
  };

  const auto result = train<Real>(ts.train, vocabs, a.cfg, hooks);
  const std::string id = save_checkpoint(result.params, vocabs, hooks.conventions, a.out);
  if (!a.history.empty()) {
    Json h = Json::array();
    for (const auto& p : result.history.points) {
      Json row = {{"step", p.step}, {"train_nll", p.train_nll}};
      row["heldout_log_perplexity"] = std::isnan(p.heldout_log_perplexity) ? Json(nullptr) : Json(p.heldout_log_perplexity);
      h.push_back(row);
    }
    write_text(a.history, h.dump(2) + "\n");
  }
  std::cout << "saved " << a.out << " (id " << id << ")\n";
  return 0;
}

Checkpoint<Real> open_checkpoint(const std::string& flag) {
  return load_checkpoint<Real>(resolve_checkpoint(flag));
}

struct GenerateArgs {
  std::string checkpoint, data, out;
  std::size_t row = 0, beam = 15;
};

int run_generate(const GenerateArgs& a) {
  const auto model = open_checkpoint(a.checkpoint);
  const Dataset ds = load_any_dataset(a.data);
  const Generation g = generate(model, ds, a.row, a.beam);
  Json cands = Json::array();
  for (std::size_t i = 0; i < g.candidates.size(); ++i) {
    const auto& c = g.candidates[i];
    Json j = to_json(c.validity);
    j["spec"] = c.spec;
    j["score"] = c.score;
    j["log_prob"] = c.log_prob;
    j["finished"] = c.finished;
    cands.push_back(j);
    std::printf("%2zu  %8.4f  lang=%d vis=%d  %s\n", i, c.score, c.validity.language_valid,
                c.validity.visualization_valid, c.spec.c_str());
  }
  if (!a.out.empty()) {
    Json out = {{"dataset", ds.name}, {"row", g.row},           {"source", g.source},
                {"beam_width", a.beam}, {"checkpoint_id", model.id}, {"candidates", cands}};
    write_text(a.out, out.dump(2) + "\n");
  }
  return 0;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::vector<std::string> datasets{default_data_dir("rdatasets")};
  std::vector<std::size_t> widths{5, 10, 15, 20};
  std::size_t rows = 10, threads = 1;
  std::uint64_t seed = 1;
  std::string tag = "model", out, diagnostics, thresholds;
};

int run_evaluate(const EvaluateArgs& a) {
  const auto model = open_checkpoint(a.checkpoint);
  std::vector<Dataset> datasets;
  for (const auto& p : a.datasets) {
    if (fs::is_directory(p)) {
      for (auto& d : load_dataset_dir(p)) datasets.push_back(std::move(d));
    } else {
      datasets.push_back(load_any_dataset(p));
    }
  }
  EvalConfig cfg;
  cfg.widths = a.widths;
  cfg.per_dataset_rows = a.rows;
  cfg.seed = a.seed;
  cfg.tag = a.tag;
  cfg.threads = a.threads;
  std::ofstream diag;
  if (!a.diagnostics.empty()) {
    diag.open(a.diagnostics, std::ios::trunc);
    if (!diag) throw DataError("cannot write " + a.diagnostics);
  }
  const EvalReport report = evaluate(model, datasets, cfg, a.diagnostics.empty() ? nullptr : &diag);
  const RenderedReport r = render_report(report);
  std::cout << r.table;
  if (!a.out.empty()) write_text(a.out, r.json + "\n");
  if (!a.thresholds.empty()) {
    Json t;
    try {
      t = Json::parse(read_file(a.thresholds));
    } catch (const Json::exception& e) {
      throw DataError(a.thresholds + ": " + e.what());
    }
    const auto misses = threshold_misses(report, EvalThresholds::from_json(t));
    for (const auto& m : misses) std::cout << "MISS " << m << '\n';
    if (!misses.empty()) return kExitThreshold;
  }
  return 0;
}

struct ValidateArgs {
  std::vector<std::string> specs;
  std::string data, out;
};

int run_validate(const ValidateArgs& a) {
  std::optional<Schema> schema;
  if (!a.data.empty()) schema = infer_schema(load_any_dataset(a.data));
  std::ofstream out;
  if (!a.out.empty()) {
    out.open(a.out, std::ios::trunc);
    if (!out) throw DataError("cannot write " + a.out);
  }
  std::vector<ValidityResult> results;
  for (const auto& path : a.specs) {
    const auto r = validate_text(read_file(path), {}, schema ? &*schema : nullptr);
    std::printf("%s  lang=%d vis=%d", path.c_str(), r.language_valid, r.visualization_valid);
    for (const auto& e : r.errors) std::printf("  [%s] %s", e.path.c_str(), e.message.c_str());
    std::printf("\n");
    if (out.is_open()) write_diagnostics(out, r, {{"file", path}});
    results.push_back(r);
  }
  const auto s = score_batch(results);
  std::printf("language %.3f  visualization %.3f  phantom %.3f  (n=%zu)\n", s.language_rate, s.visualization_rate,
              s.phantom_rate, s.count);
  return 0;
}

struct AttentionArgs {
  std::string checkpoint, data, out;
  std::size_t row = 0, beam = 1, rank = 0;
  bool json = false;
};

int run_attention(const AttentionArgs& a) {
  const auto model = open_checkpoint(a.checkpoint);
  const Dataset ds = load_any_dataset(a.data);
  const Generation g = generate(model, ds, a.row, a.beam, /*record_attention=*/true);
  if (a.rank >= g.hypotheses.size())
    throw DataError("rank " + std::to_string(a.rank) + " but only " + std::to_string(g.hypotheses.size()) +
                    " hypotheses were produced");
  const auto m = export_attention(g.hypotheses[a.rank], g.source, g.candidates[a.rank].normalized_spec);
  const std::string text = a.json ? to_json(m).dump() + "\n" : to_tsv(m);
  if (a.out.empty()) std::cout << text;
  else write_text(a.out, text);
  return 0;
}

struct ServeArgs {
  std::string checkpoint, datasets = default_data_dir("rdatasets"), host = "127.0.0.1";
  int port = 8080;
  std::size_t threads = 4;
};

int run_serve(const ServeArgs& a) {
  std::shared_ptr<const Checkpoint<Real>> model;
  try {
    model = std::make_shared<Checkpoint<Real>>(open_checkpoint(a.checkpoint));
  } catch (const UsageError&) {
    log_warning("starting without a model; POST /generate will answer 503");
  }
  Service<Real> service(model, load_dataset_dir(a.datasets));
  httplib::Server server;
  server.new_task_queue = [n = a.threads] { return new httplib::ThreadPool(n); };
  install_routes(server, service);
  log_info("listening on http://" + a.host + ":" + std::to_string(a.port));
  if (!server.listen(a.host, a.port)) throw DataError("cannot listen on " + a.host + ":" + std::to_string(a.port));
  return 0;
}

int run_convert(const std::string& in, const std::string& out) {
  const Dataset ds = dataset_from_csv(read_file(in), fs::path(in).stem().string());
  OrderedJson arr = OrderedJson::array();
  for (const auto& r : ds.records) arr.push_back(r);
  write_text(out, arr.dump() + "\n");
  std::cout << ds.records.size() << " records written to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generate Vega-Lite specifications from tabular data with a character-level seq2seq model"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model on a corpus directory");
  train_cmd->add_option("--corpus", ta.corpus, "Corpus directory of {data, spec} JSON files")->capture_default_str();
  train_cmd->add_option("-o,--out", ta.out, "Checkpoint path to write")->required();
  train_cmd->add_option("--samples", ta.samples, "Rows sampled per example")->capture_default_str();
  train_cmd->add_option("--heldout", ta.heldout, "Fraction of examples held out")->capture_default_str();
  train_cmd->add_option("--steps", ta.cfg.steps)->capture_default_str();
  train_cmd->add_option("--batch", ta.cfg.batch_size)->capture_default_str();
  train_cmd->add_option("--lr", ta.cfg.learning_rate)->capture_default_str();
  train_cmd->add_option("--dropout", ta.cfg.dropout)->capture_default_str();
  train_cmd->add_option("--cell", ta.cfg.cell, "LSTM cell size")->capture_default_str();
  train_cmd->add_option("--layers", ta.cfg.layers, "Encoder and decoder depth")->capture_default_str();
  train_cmd->add_option("--max-len", ta.cfg.max_len)->capture_default_str();
  train_cmd->add_option("--seed", ta.cfg.seed)->capture_default_str();
  train_cmd->add_option("--eval-every", ta.cfg.eval_every)->capture_default_str();
  train_cmd->add_option("--checkpoint-every", ta.cfg.checkpoint_every, "0 writes only at the end")
      ->capture_default_str();
  train_cmd->add_option("--clip", ta.cfg.clip_norm, "Global gradient norm bound (0 disables)")->capture_default_str();
  train_cmd->add_option("--log", ta.log, "Line-delimited JSON training log");
  train_cmd->add_option("--history", ta.history, "JSON file for the training history");

  GenerateArgs ga;
  auto* gen_cmd = app.add_subcommand("generate", "Generate candidate specs for one dataset row");
  gen_cmd->add_option("-c,--checkpoint", ga.checkpoint, "Checkpoint (default: $VLGEN_CHECKPOINT)");
  gen_cmd->add_option("-d,--data", ga.data, "Dataset file (.json records or .csv)")->required();
  gen_cmd->add_option("--row", ga.row)->capture_default_str();
  gen_cmd->add_option("-k,--beam", ga.beam, "Beam width; 1 decodes greedily")->capture_default_str();
  gen_cmd->add_option("-o,--out", ga.out, "JSON output file");

  EvaluateArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score beam outputs on held-out datasets");
  eval_cmd->add_option("-c,--checkpoint", ea.checkpoint, "Checkpoint (default: $VLGEN_CHECKPOINT)");
  eval_cmd->add_option("--datasets", ea.datasets, "Dataset files or directories")->capture_default_str();
  eval_cmd->add_option("--widths", ea.widths, "Beam widths")->delimiter(',')->capture_default_str();
  eval_cmd->add_option("--rows", ea.rows, "Rows sampled per dataset")->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed)->capture_default_str();
  eval_cmd->add_option("--tag", ea.tag, "Model tag in the report")->capture_default_str();
  eval_cmd->add_option("--threads", ea.threads, "Datasets decoded concurrently")->capture_default_str();
  eval_cmd->add_option("-o,--out", ea.out, "JSON report file");
  eval_cmd->add_option("--diagnostics", ea.diagnostics, "Line-delimited per-candidate validity file");
  eval_cmd->add_option("--thresholds", ea.thresholds, "JSON thresholds; exit 4 when one is missed");

  ValidateArgs va;
  auto* val_cmd = app.add_subcommand("validate", "Check spec files for language and visualization validity");
  val_cmd->add_option("specs", va.specs, "Spec text files")->required();
  val_cmd->add_option("-d,--data", va.data, "Dataset whose schema field references must match");
  val_cmd->add_option("-o,--out", va.out, "Line-delimited diagnostics file");

  AttentionArgs aa;
  auto* att_cmd = app.add_subcommand("attention", "Export the attention matrix of one decode");
  att_cmd->add_option("-c,--checkpoint", aa.checkpoint, "Checkpoint (default: $VLGEN_CHECKPOINT)");
  att_cmd->add_option("-d,--data", aa.data, "Dataset file")->required();
  att_cmd->add_option("--row", aa.row)->capture_default_str();
  att_cmd->add_option("-k,--beam", aa.beam)->capture_default_str();
  att_cmd->add_option("--rank", aa.rank, "Which beam result to export")->capture_default_str();
  att_cmd->add_flag("--json", aa.json, "Write JSON instead of TSV");
  att_cmd->add_option("-o,--out", aa.out, "Output file (default: stdout)");

  ServeArgs sa;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("-c,--checkpoint", sa.checkpoint, "Checkpoint (default: $VLGEN_CHECKPOINT)");
  serve_cmd->add_option("--datasets", sa.datasets, "Directory of bundled datasets")->capture_default_str();
  serve_cmd->add_option("--host", sa.host)->capture_default_str();
  serve_cmd->add_option("--port", sa.port)->capture_default_str();
  serve_cmd->add_option("--threads", sa.threads, "Worker threads")->capture_default_str();

  std::string csv_in, csv_out;
  auto* conv_cmd = app.add_subcommand("convert-csv", "Convert a CSV file to a JSON record array");
  conv_cmd->add_option("input", csv_in)->required();
  conv_cmd->add_option("output", csv_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }
  if (quiet) set_log_level(LogLevel::warning);

  try {
    if (*train_cmd) return run_train(ta);
    if (*gen_cmd) return run_generate(ga);
    if (*eval_cmd) return run_evaluate(ea);
    if (*val_cmd) return run_validate(va);
    if (*att_cmd) return run_attention(aa);
    if (*serve_cmd) return run_serve(sa);
    if (*conv_cmd) return run_convert(csv_in, csv_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const CorruptCheckpoint& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
