#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "muffin/training.hpp"
#include "muffin_cli/cli.hpp"
#include "muffin_cli/plot.hpp"
#include "test_support.hpp"

namespace muffin {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string out, err;
};

Result muffin_cmd(std::vector<std::string> args) {
  args.insert(args.begin(), "muffin");
  args.insert(args.begin() + 1, "--quiet");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << text;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("muffin_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
    fs::create_directories(root_);
    spit(root_ / "syn.json", R"({"num_phonemes": 8, "num_utterances": 16, "blocks": {"gop": 4, "dur": 1, "eng": 2, "ssl": 5}})");
    spit(root_ / "train.json", R"({"epochs": 2, "trials": 2, "batch_size": 8,
      "model": {"d_model": 6, "phone_blocks": 1, "word_blocks": 1, "utt_blocks": 1, "dropout": 0.1}})");
    unsetenv("MUFFIN_THREADS");
  }
  void TearDown() override {
    unsetenv("MUFFIN_THREADS");
    fs::remove_all(root_);
  }
  fs::path p(const std::string& rel) const { return root_ / rel; }
  void gen(const std::string& out, const std::string& seed = "7") {
    ASSERT_EQ(muffin_cmd({"gen", "--config", p("syn.json"), "--seed", seed, "--out", p(out)}).code, 0);
  }
  void train(const std::string& out, const std::string& corpus = "corpus") {
    const auto r = muffin_cmd({"train", "--config", p("train.json"), "--corpus", p(corpus), "--out", p(out)});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  fs::path root_;
};

TEST_F(CliTest, GenIsReproducible) {
  gen("corpus");
  gen("again");
  EXPECT_EQ(cli::sha256_path(p("corpus/manifest.jsonl")), cli::sha256_path(p("again/manifest.jsonl")));
  EXPECT_EQ(cli::sha256_path(p("corpus/features")), cli::sha256_path(p("again/features")));
  const json a = json::parse(slurp(p("corpus/run.json"))), b = json::parse(slurp(p("again/run.json")));
  EXPECT_EQ(a["outputs"], b["outputs"]);
  EXPECT_EQ(a["config_sha256"], b["config_sha256"]);
  EXPECT_EQ(a["seeds"], json::array({7}));
  gen("other", "8");
  EXPECT_NE(cli::sha256_path(p("corpus/features")), cli::sha256_path(p("other/features")));
}

TEST_F(CliTest, TrainIsReproducibleAcrossThreadCounts) {
  gen("corpus");
  train("a");
  setenv("MUFFIN_THREADS", "2", 1);
  train("b");
  for (const char* f : {"trial_1/best.ckpt", "trial_2/last.ckpt", "trial_1/epochs.csv", "aggregate.json"})
    EXPECT_EQ(slurp(p("a") / f), slurp(p("b") / f)) << f;
  const json m = json::parse(slurp(p("a/run.json")));
  EXPECT_EQ(m["seeds"], json::array({1, 2}));
  EXPECT_EQ(m["config"]["epochs"], 2);
  const json agg = json::parse(slurp(p("a/aggregate.json")));
  EXPECT_EQ(agg["selection_phone_mse"]["trials"], 2);
}

TEST_F(CliTest, TrainResumeMatchesUninterrupted) {
  gen("corpus");
  ASSERT_EQ(muffin_cmd({"train", "--config", p("train.json"), "--corpus", p("corpus"), "--seed", "1", "--out", p("full")}).code, 0);
  const corpus::Corpus c = corpus::load_corpus_dir(p("corpus"));
  train::Trainer t(c, train::parse_train_config(slurp(p("train.json"))), 1);
  t.run_epoch();
  train::save_checkpoint(t.state(), p("partial.ckpt"));
  ASSERT_EQ(muffin_cmd({"train", "--corpus", p("corpus"), "--ckpt", p("partial.ckpt"), "--out", p("resumed")}).code, 0);
  EXPECT_EQ(slurp(p("full/trial_1/last.ckpt")), slurp(p("resumed/trial_1/last.ckpt")));
  EXPECT_EQ(slurp(p("full/trial_1/best.ckpt")), slurp(p("resumed/trial_1/best.ckpt")));
}

TEST_F(CliTest, TuneThenEval) {
  gen("corpus");
  train("run");
  const std::string ckpt = p("run/trial_1/best.ckpt");
  ASSERT_EQ(muffin_cmd({"tune", "--ckpt", ckpt, "--corpus", p("corpus"), "--mode", "per-phoneme", "--out", p("tune")}).code, 0);
  const json th = json::parse(slurp(p("tune/thresholds.json")));
  ASSERT_EQ(th["values"].size(), 8u);
  const auto grid = eval::threshold_grid();
  for (double v : th["values"].get<std::vector<double>>()) EXPECT_NE(std::find(grid.begin(), grid.end(), v), grid.end());

  auto r = muffin_cmd({"eval", "--ckpt", ckpt, "--corpus", p("corpus"), "--threshold", "0.4", "--out", p("ev")});
  ASSERT_EQ(r.code, 0) << r.err;
  const json rep = json::parse(slurp(p("ev/report.json")));
  EXPECT_EQ(rep["mdd"]["RE"].get<double>() + rep["mdd"]["FAR"].get<double>(), 1.0);
  EXPECT_EQ(rep["threshold"]["values"], json::array({0.4}));
  EXPECT_EQ(eval::parse_pr_curve_csv(slurp(p("ev/pr_curve.csv"))).size(), 11u);

  r = muffin_cmd({"eval", "--ckpt", ckpt, "--corpus", p("corpus"), "--threshold", p("tune/thresholds.json"), "--mode",
                  "per-phoneme", "--out", p("ev2")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(json::parse(slurp(p("ev2/report.json")))["threshold"]["values"], th["values"]);
}

TEST_F(CliTest, AblateWritesOneDirectoryPerRow) {
  gen("corpus");
  gen("test", "9");
  spit(p("grid.json"), R"({
    "base": {"epochs": 1, "trials": 1, "batch_size": 8, "model": {"d_model": 6, "phone_blocks": 1, "word_blocks": 1, "utt_blocks": 1}},
    "test_corpus": "test",
    "rows": [
      {"name": "full"},
      {"name": "no_mdd", "config": {"toggles": {"mdd": false}}},
      {"name": "no_conpco", "config": {"toggles": {"con": false, "pc": false, "ordinal": false}}}
    ]})");
  const auto r = muffin_cmd({"ablate", "--grid", p("grid.json"), "--corpus", p("corpus"), "--out", p("abl")});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* row : {"full", "no_mdd", "no_conpco"}) {
    EXPECT_TRUE(fs::exists(p("abl") / row / "trial_1/components.json")) << row;
    EXPECT_TRUE(fs::exists(p("abl") / row / "trial_1/report.json")) << row;
  }
  const json full = json::parse(slurp(p("abl/full/trial_1/components.json")));
  const json no_mdd = json::parse(slurp(p("abl/no_mdd/trial_1/components.json")));
  const json no_con = json::parse(slurp(p("abl/no_conpco/trial_1/components.json")));
  EXPECT_GT(full["det"].get<double>(), 0.0);
  EXPECT_EQ(no_mdd["det"], 0.0);
  EXPECT_EQ(no_mdd["diag"], 0.0);
  EXPECT_GT(no_mdd["apa_phone"].get<double>(), 0.0);
  for (const char* k : {"con", "pc", "ordinal"}) EXPECT_EQ(no_con[k], 0.0) << k;
  EXPECT_NE(slurp(p("abl/summary.csv")).find("no_mdd,F1,"), std::string::npos);
}

TEST_F(CliTest, PlotsAreDeterministic) {
  gen("corpus");
  train("run");
  ASSERT_EQ(muffin_cmd({"eval", "--ckpt", p("run/trial_1/best.ckpt"), "--corpus", p("corpus"), "--out", p("ev")}).code, 0);
  for (const char* out : {"a.svg", "b.svg"}) {
    ASSERT_EQ(muffin_cmd({"plot", "pr", p("ev/pr_curve.csv"), "--label", "model", "--out", p(out)}).code, 0);
    ASSERT_EQ(muffin_cmd({"plot", "embed", p("ev/embeddings.csv"), "--out", p(std::string("e") + out)}).code, 0);
  }
  EXPECT_EQ(slurp(p("a.svg")), slurp(p("b.svg")));
  EXPECT_EQ(slurp(p("ea.svg")), slurp(p("eb.svg")));
  EXPECT_TRUE(fs::exists(p("a.svg.run.json")));
}

TEST_F(CliTest, ExitCodes) {
  EXPECT_EQ(muffin_cmd({}).code, cli::kValidationError);
  EXPECT_EQ(muffin_cmd({"frobnicate"}).code, cli::kValidationError);
  EXPECT_EQ(muffin_cmd({"gen", "--out", p("x"), "--bogus"}).code, cli::kValidationError);
  EXPECT_EQ(muffin_cmd({"--help"}).code, cli::kOk);
  spit(p("bad.json"), R"({"num_phonemes": 1})");
  EXPECT_EQ(muffin_cmd({"gen", "--config", p("bad.json"), "--out", p("x")}).code, cli::kValidationError);
  spit(p("typo.json"), R"({"num_phonemess": 8})");
  const auto typo = muffin_cmd({"gen", "--config", p("typo.json"), "--out", p("x")});
  EXPECT_EQ(typo.code, cli::kValidationError);
  EXPECT_NE(typo.err.find("num_phonemess"), std::string::npos);
  gen("corpus");
  spit(p("junk.ckpt"), "not a checkpoint");
  EXPECT_EQ(muffin_cmd({"eval", "--ckpt", p("junk.ckpt"), "--corpus", p("corpus"), "--out", p("e")}).code, cli::kRuntimeError);
  train("run");
  EXPECT_EQ(muffin_cmd({"eval", "--ckpt", p("run/trial_1/best.ckpt"), "--corpus", p("corpus"), "--mode", "per-phoneme",
                        "--threshold", "0.3", "--out", p("e")})
                .code,
            cli::kValidationError);
  setenv("MUFFIN_THREADS", "zero", 1);
  EXPECT_EQ(muffin_cmd({"train", "--config", p("train.json"), "--corpus", p("corpus"), "--out", p("t")}).code,
            cli::kValidationError);
}

// ---- library helpers ----------------------------------------------------------------------

TEST(Sha256, KnownDigest) {
  EXPECT_EQ(cli::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(SyntheticConfigJson, RoundTrip) {
  corpus::SyntheticConfig c;
  c.num_phonemes = 11;
  c.mispronunciation_rates.assign(11, 0.2);
  c.blocks = {3, 1, 1, 2};
  c.noise = 0.0;
  const auto back = cli::parse_synthetic_config(cli::synthetic_config_json(c));
  EXPECT_EQ(cli::synthetic_config_json(back), cli::synthetic_config_json(c));
  EXPECT_EQ(back.num_phonemes, 11u);
  EXPECT_EQ(back.blocks, c.blocks);
  EXPECT_THROW(cli::parse_synthetic_config(R"({"blocks": {"mfcc": 3}})"), train::ConfigError);
}

TEST(PrPlot, OneVertexPerGridPoint) {
  std::vector<eval::PrPoint> pts;
  for (double t : eval::threshold_grid()) pts.push_back({t, 1.0 - t, 0.5 + 0.4 * t, std::nullopt});
  pts.back().precision.reset();
  const std::string svg = cli::render_pr_curve({{"only", pts}});
  const auto start = svg.find("class=\"pr\"");
  ASSERT_NE(start, std::string::npos);
  const auto open = svg.find("points=\"", start) + 8;
  const std::string coords = svg.substr(open, svg.find('"', open) - open);
  EXPECT_EQ(std::count(coords.begin(), coords.end(), ',') , 11);
  EXPECT_EQ(svg, cli::render_pr_curve({{"only", pts}}));
  EXPECT_THROW(cli::render_pr_curve({{"short", {pts[0]}}}), cli::PlotError);
}

TEST(Pca, TwoDimensionalInputIsAnOrthogonalTransform) {
  Rng rng(3);
  std::vector<std::vector<double>> rows(40, std::vector<double>(2));
  for (auto& r : rows) r = {rng.normal(0, 3), rng.normal(1, 1)};
  const auto proj = cli::pca_2d(rows);
  double m0 = 0, m1 = 0;
  for (const auto& r : rows) m0 += r[0], m1 += r[1];
  m0 /= 40;
  m1 /= 40;
  // Gram matrices of the centered input and of the projection agree.
  for (std::size_t i = 0; i < 40; i += 3)
    for (std::size_t j = 0; j < 40; j += 5) {
      const double g_in = (rows[i][0] - m0) * (rows[j][0] - m0) + (rows[i][1] - m1) * (rows[j][1] - m1);
      const double g_out = proj[i][0] * proj[j][0] + proj[i][1] * proj[j][1];
      EXPECT_NEAR(g_in, g_out, 1e-9);
    }
}

TEST(Pca, FirstAxisCarriesMostVariance) {
  Rng rng(4);
  std::vector<std::vector<double>> rows(60, std::vector<double>(5));
  for (auto& r : rows) {
    const double a = rng.normal(0, 5), b = rng.normal(0, 1);
    r = {a, -a + 0.1 * b, b, 0.5 * a, rng.normal(0, 0.01)};
  }
  const auto proj = cli::pca_2d(rows);
  double v0 = 0, v1 = 0;
  for (const auto& q : proj) v0 += q[0] * q[0], v1 += q[1] * q[1];
  EXPECT_GT(v0, v1);
  EXPECT_THROW(cli::pca_2d({{1.0, 2.0}}), cli::PlotError);
}

TEST(EmbeddingsCsv, ParseAndRender) {
  const std::string csv =
      "utterance,position,canonical,symbol,accuracy,e0,e1,e2\n"
      "u0,0,0,AA,2,0.1,0.2,0.3\n"
      "u0,1,1,AE,0.5,1.1,-0.2,0.3\n"
      "u1,0,0,AA,1.5,0.4,0.9,-1\n";
  const auto t = cli::parse_embeddings_csv(csv);
  ASSERT_EQ(t.rows.size(), 3u);
  EXPECT_EQ(t.category[1], "AE");
  EXPECT_EQ(t.accuracy[2], 1.5);
  EXPECT_EQ(t.rows[2], (std::vector<double>{0.4, 0.9, -1.0}));
  const std::string svg = cli::render_embeddings(t);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_THROW(cli::parse_embeddings_csv("symbol,accuracy\n"), cli::PlotError);
}

}  // namespace
}  // namespace muffin
