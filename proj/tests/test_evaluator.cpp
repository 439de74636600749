#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "vlgen/evaluator.hpp"

using namespace vlgen;
using namespace vlgen::testkit;

namespace {

std::vector<Dataset> two_datasets() {
  return {cars(), load_dataset(data_dir() / "rdatasets" / "iris.json")};
}

}  // namespace

TEST(Evaluate, RejectsEmptyConfiguration) {
  const auto model = random_checkpoint();
  EvalConfig cfg;
  cfg.widths.clear();
  EXPECT_THROW(evaluate(*model, two_datasets(), cfg), EmptyConfiguration);
  cfg.widths = {0};
  EXPECT_THROW(evaluate(*model, two_datasets(), cfg), EmptyConfiguration);
  EXPECT_THROW(evaluate(*model, {}, EvalConfig{}), EmptyConfiguration);
  cfg.widths = {1};
  cfg.per_dataset_rows = 0;
  EXPECT_THROW(evaluate(*model, two_datasets(), cfg), EmptyConfiguration);
}

TEST(Evaluate, ConstantGeneratorScoresPerfectly) {
  const auto model = memorized_checkpoint();
  const auto g = generate(*model, cars(), 3, 1);
  ASSERT_EQ(g.candidates.size(), 1u);
  EXPECT_EQ(g.candidates[0].spec, R"({"encoding":{"x":{"field":"mpg","type":"quantitative"}},"mark":"point"})");

  EvalConfig cfg;
  cfg.widths = {1};
  cfg.per_dataset_rows = 5;
  const auto report = evaluate(*model, two_datasets(), cfg);
  ASSERT_EQ(report.rows.size(), 1u);
  EXPECT_EQ(report.rows[0].samples, 10u);
  EXPECT_EQ(report.rows[0].language_rate, 1.0);
  EXPECT_EQ(report.rows[0].visualization_rate, 1.0);
  EXPECT_EQ(report.rows[0].phantom_rate, 0.0);
}

TEST(Evaluate, RandomParametersAlmostNeverProduceJson) {
  const auto model = random_checkpoint(120);
  EvalConfig cfg;
  cfg.widths = {4};
  cfg.per_dataset_rows = 5;
  const std::vector<Dataset> ds{load_dataset(data_dir() / "rdatasets" / "ToothGrowth.json"),
                                load_dataset(data_dir() / "rdatasets" / "warpbreaks.json")};
  const auto report = evaluate(*model, ds, cfg);
  EXPECT_GT(report.rows[0].samples, 0u);
  EXPECT_LT(report.rows[0].language_rate, 0.05);
}

TEST(Evaluate, OneRowPerWidthAndOrderInvariant) {
  const auto model = memorized_checkpoint();
  EvalConfig cfg;
  cfg.widths = {1, 2, 3, 4};
  cfg.per_dataset_rows = 2;
  auto ds = two_datasets();
  std::ostringstream diag;
  const auto a = evaluate(*model, ds, cfg, &diag);
  ASSERT_EQ(a.rows.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.rows[i].width, i + 1);
    EXPECT_LE(a.rows[i].samples, 2 * 2 * (i + 1));
  }
  std::reverse(ds.begin(), ds.end());
  const auto b = evaluate(*model, ds, cfg);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.rows[i].language_rate, b.rows[i].language_rate);
    EXPECT_EQ(a.rows[i].visualization_rate, b.rows[i].visualization_rate);
    EXPECT_EQ(a.rows[i].samples, b.rows[i].samples);
  }

  // Every counted candidate has a diagnostics line and the rates are
  // recomputable from them.
  std::istringstream in(diag.str());
  const auto rows = rows_from_diagnostics(in);
  ASSERT_EQ(rows.size(), a.rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].width, a.rows[i].width);
    EXPECT_EQ(rows[i].samples, a.rows[i].samples);
    EXPECT_DOUBLE_EQ(rows[i].language_rate, a.rows[i].language_rate);
    EXPECT_DOUBLE_EQ(rows[i].visualization_rate, a.rows[i].visualization_rate);
    EXPECT_DOUBLE_EQ(rows[i].phantom_rate, a.rows[i].phantom_rate);
  }
}

TEST(Evaluate, ThreadsDoNotChangeResults) {
  const auto model = memorized_checkpoint();
  EvalConfig cfg;
  cfg.widths = {2};
  cfg.per_dataset_rows = 3;
  std::ostringstream one, many;
  evaluate(*model, two_datasets(), cfg, &one);
  cfg.threads = 2;
  evaluate(*model, two_datasets(), cfg, &many);
  EXPECT_EQ(one.str(), many.str());
}

TEST(Report, RenderAndParseBack) {
  EvalReport r;
  r.rows = {{"bi", 5, 0.9, 0.8, 0.1, 50}, {"bi", 15, 0.95, 0.85, 0.05, 150}, {"uni", 5, 0.5, 0.25, 0.0, 50}};
  r.metadata = {{"seed", 1}};
  const auto out = render_report(r);
  EXPECT_NE(out.table.find("k=15"), std::string::npos);
  EXPECT_NE(out.table.find("uni"), std::string::npos);
  EXPECT_NE(out.table.find("0.850"), std::string::npos);
  const auto back = report_from_json(Json::parse(out.json));
  ASSERT_EQ(back.rows.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.rows[i].tag, r.rows[i].tag);
    EXPECT_EQ(back.rows[i].width, r.rows[i].width);
    EXPECT_EQ(back.rows[i].language_rate, r.rows[i].language_rate);
    EXPECT_EQ(back.rows[i].visualization_rate, r.rows[i].visualization_rate);
    EXPECT_EQ(back.rows[i].samples, r.rows[i].samples);
  }
  EXPECT_EQ(back.metadata, r.metadata);
  EXPECT_THROW(render_report(EvalReport{}), EmptyConfiguration);
}

TEST(Report, Thresholds) {
  EvalReport r;
  r.rows = {{"m", 5, 0.6, 0.4, 0.2, 10}, {"m", 15, 0.8, 0.6, 0.1, 30}};
  EvalThresholds t = EvalThresholds::from_json({{"min_language_rate", 0.7}, {"min_visualization_rate", 0.5}});
  EXPECT_EQ(threshold_misses(r, t).size(), 2u);
  t.width = 15;
  EXPECT_TRUE(threshold_misses(r, t).empty());
  t.max_phantom_rate = 0.05;
  ASSERT_EQ(threshold_misses(r, t).size(), 1u);
  EXPECT_NE(threshold_misses(r, t)[0].find("phantom"), std::string::npos);
}

TEST(Rows, SampledRowsDependOnlyOnSeedAndDataset) {
  const Dataset ds = cars();
  const auto a = detail::sample_rows(ds, 10, 7, 500);
  EXPECT_EQ(a, detail::sample_rows(ds, 10, 7, 500));
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 10u);
  EXPECT_NE(a, detail::sample_rows(ds, 10, 8, 500));
  EXPECT_TRUE(detail::sample_rows(ds, 10, 7, 5).empty());
}
