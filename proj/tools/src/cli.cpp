#include "muffin_cli/cli.hpp"

#include <openssl/evp.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <thread>

#include "muffin/evaluation.hpp"
#include "muffin/training.hpp"
#include "muffin_cli/plot.hpp"

#ifndef MUFFIN_VERSION
#define MUFFIN_VERSION "unknown"
#endif

namespace muffin::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using train::ConfigError;

namespace {

// ---- small IO helpers ---------------------------------------------------------------

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + p.string());
}

json parse_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": not valid JSON: " + e.what());
  }
}

std::shared_ptr<spdlog::logger> log() {
  static std::shared_ptr<spdlog::logger> l = [] {
    auto lg = spdlog::stderr_logger_mt("muffin");
    lg->set_pattern("[%l] %v");
    return lg;
  }();
  return l;
}

// ---- synthetic config ---------------------------------------------------------------

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + key + ": " + e.what());
  }
}

void reject_unknown(const json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

// ---- manifests ------------------------------------------------------------------------

struct Manifest {
  std::string command;
  std::vector<std::string> args;
  json seeds = json::array();
  json config = json::object();
  json inputs = json::array();
  json outputs = json::array();

  void input(const std::string& role, const fs::path& p) {
    inputs.push_back({{"role", role}, {"path", p.string()}, {"sha256", sha256_path(p)}});
  }
  void output(const fs::path& base, const fs::path& p) {
    outputs.push_back({{"path", fs::relative(p, base).generic_string()}, {"sha256", sha256_path(p)}});
  }
  void write(const fs::path& p) const {
    json j;
    j["tool"] = "muffin";
    j["version"] = MUFFIN_VERSION;
    j["command"] = command;
    j["args"] = args;
    j["seeds"] = seeds;
    j["config"] = config;
    j["config_sha256"] = sha256_hex(config.dump());
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    write_file(p, j.dump(2) + "\n");
  }
};

// ---- parallel trials ------------------------------------------------------------------

template <typename F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers = std::min(n, thread_budget());
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            body(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);  // lowest failing index, independent of scheduling
}

// ---- shared pipeline pieces -------------------------------------------------------------

struct TrialOutcome {
  std::uint64_t seed = 0;
  train::Checkpoint best;
  std::vector<train::EpochLog> log;
  std::map<std::string, double> metrics;
};

// Keeps the header and the first `rows` data lines of an existing epoch log.
std::string log_prefix(const fs::path& csv, std::size_t rows) {
  if (!fs::exists(csv)) return {};
  std::istringstream in(read_file(csv));
  std::string line, out;
  for (std::size_t i = 0; i <= rows && std::getline(in, line); ++i) out += line + "\n";
  return out;
}

std::string csv_rows(const std::vector<train::EpochLog>& log) {
  const std::string all = train::epoch_log_csv(log);
  return all.substr(all.find('\n') + 1);
}

TrialOutcome run_trial(const corpus::Corpus& corpus, const train::TrainConfig& config, std::uint64_t seed,
                       const fs::path& dir, std::optional<train::Checkpoint> resume) {
  fs::create_directories(dir);
  train::Trainer trainer = resume ? train::Trainer(corpus, std::move(*resume)) : train::Trainer(corpus, config, seed);
  const fs::path csv = dir / "epochs.csv";
  std::string prefix = trainer.state().epoch > 0 ? log_prefix(csv, trainer.state().epoch) : std::string();
  if (prefix.empty()) prefix = train::epoch_log_csv({});
  TrialOutcome r;
  r.seed = trainer.state().seed;
  while (!trainer.done()) {
    r.log.push_back(trainer.run_epoch());
    const auto& e = r.log.back();
    log()->info("seed {} epoch {}/{} loss {:.6f} lr {:.2e} val_mse {:.5f}", r.seed, e.epoch, trainer.state().config.epochs,
                e.components.total, e.lr, e.val_phone_mse);
    train::save_checkpoint(trainer.state(), dir / "last.ckpt");
    write_file(csv, prefix + csv_rows(r.log));
  }
  if (r.log.empty()) write_file(csv, prefix);
  train::save_checkpoint(trainer.state(), dir / "last.ckpt");
  r.best = trainer.best_checkpoint();
  train::save_checkpoint(r.best, dir / "best.ckpt");
  r.metrics["best_epoch"] = static_cast<double>(r.best.best.epoch);
  r.metrics["selection_phone_mse"] = r.best.best.metric;
  if (!r.log.empty()) r.metrics["final_total_loss"] = r.log.back().components.total;
  json comps = json::object();
  if (!r.log.empty())
    for (const auto& [k, v] : r.log.back().components.as_map()) comps[k] = v;
  comps["total"] = r.log.empty() ? 0.0 : r.log.back().components.total;
  write_file(dir / "components.json", comps.dump(2) + "\n");
  return r;
}

void check_compatible(const train::Checkpoint& ckpt, const corpus::Corpus& corpus) {
  if (!(ckpt.inventory == corpus.inventory)) throw ConfigError("corpus phoneme inventory differs from the checkpoint's");
  if (!(ckpt.model_config.feature_blocks == corpus.blocks)) throw ConfigError("corpus feature blocks differ from the checkpoint's");
}

std::map<std::string, double> report_metrics(const eval::ApaReport& apa, const eval::MddReport& mdd) {
  std::map<std::string, double> m;
  if (apa.phone.pcc) m["phone_pcc"] = *apa.phone.pcc;
  m["phone_mse"] = apa.phone.mse;
  if (apa.utt[4].pcc) m["utt_total_pcc"] = *apa.utt[4].pcc;
  const auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) m[k] = *v;
  };
  put("RE", mdd.detection.recall);
  put("PR", mdd.detection.precision);
  put("F1", mdd.detection.f1);
  put("FAR", mdd.detection.far);
  put("FRR", mdd.detection.frr);
  put("DER", mdd.der);
  put("PER", mdd.per);
  return m;
}

struct Thresholds {
  std::string mode = "global";
  std::vector<double> values{0.4};
};

Thresholds resolve_thresholds(const std::string& arg, const std::string& mode) {
  if (mode != "global" && mode != "per-phoneme") throw ConfigError("--mode must be 'global' or 'per-phoneme'");
  Thresholds t;
  t.mode = mode;
  if (arg.empty()) {
    if (mode == "per-phoneme") throw ConfigError("--mode per-phoneme needs --threshold pointing at a tune output");
    return t;
  }
  std::size_t used = 0;
  double v = 0.0;
  bool numeric = true;
  try {
    v = std::stod(arg, &used);
  } catch (const std::logic_error&) {
    numeric = false;
  }
  if (numeric && used == arg.size()) {
    if (mode == "per-phoneme") throw ConfigError("--mode per-phoneme needs a thresholds file, not a number");
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("--threshold must lie in [0, 1]");
    t.values = {v};
    return t;
  }
  const json j = parse_json_file(arg);
  try {
    if (mode == "global") {
      t.values = {j.at("global").get<double>()};
    } else {
      t.values = j.at("values").get<std::vector<double>>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(arg + ": not a thresholds file: " + e.what());
  }
  return t;
}

std::string embeddings_csv(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus) {
  std::ostringstream s;
  s.precision(9);
  const std::size_t d = preds.empty() ? 0 : preds[0].phone_repr.shape()[1];
  s << "utterance,position,canonical,symbol,accuracy";
  for (std::size_t j = 0; j < d; ++j) s << ",e" << j;
  s << '\n';
  for (std::size_t u = 0; u < preds.size(); ++u) {
    const auto& r = corpus.utterances[u];
    for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
      const auto& seg = r.phonemes[t];
      s << r.id << ',' << t << ',' << seg.canonical << ',' << corpus.inventory.symbol(seg.canonical) << ',' << seg.accuracy;
      for (std::size_t j = 0; j < d; ++j) s << ',' << preds[u].phone_repr(t, j);
      s << '\n';
    }
  }
  return s.str();
}

struct EvalResult {
  std::string report;
  std::string pr_csv;
  std::map<std::string, double> metrics;
};

EvalResult evaluate(const train::Checkpoint& ckpt, const corpus::Corpus& corpus, const Thresholds& th,
                    std::vector<net::Prediction>* keep = nullptr) {
  check_compatible(ckpt, corpus);
  auto preds = eval::predict_corpus(ckpt.params, ckpt.model_config, ckpt.vocab, corpus);
  const auto segs = eval::decide_segments(preds, corpus, th.values);
  const auto apa = eval::apa_report(preds, corpus);
  const auto mdd = eval::mdd_report(segs, corpus);
  const auto stats = corpus::compute_stats(corpus);
  const auto buckets = eval::bucketed_report(eval::per_phoneme_metrics(segs, corpus.inventory.size()), stats);
  const auto scores = eval::detector_scores(preds, corpus);
  EvalResult r;
  r.report = eval::report_json(apa, mdd, buckets, th.mode, th.values);
  r.pr_csv = eval::pr_curve_csv(eval::pr_curve(scores.probs, scores.gold, eval::threshold_grid()));
  r.metrics = report_metrics(apa, mdd);
  if (keep) *keep = std::move(preds);
  return r;
}

std::string aggregate_json(const std::map<std::string, train::Aggregate>& agg) {
  json j = json::object();
  for (const auto& [k, a] : agg) j[k] = {{"mean", a.mean}, {"stddev", a.stddev}, {"trials", a.count}};
  return j.dump(2) + "\n";
}

std::vector<std::string> tail_args(const std::vector<std::string>& args) { return {args.begin() + 1, args.end()}; }

// ---- commands ---------------------------------------------------------------------------

struct Options {
  std::string config, out, ckpt, corpus, threshold, mode = "global", grid;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> inputs, labels;
};

int cmd_gen(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  corpus::SyntheticConfig cfg;
  if (!o.config.empty()) cfg = parse_synthetic_config(read_file(o.config));
  const std::uint64_t seed = o.seed.value_or(1);
  const auto syn = corpus::generate_synthetic(cfg, seed);
  const fs::path dir = o.out;
  corpus::write_corpus_dir(syn.corpus, dir);
  json truth;
  truth["zipf_probabilities"] = syn.truth.zipf_probabilities;
  truth["mispronunciation_rates"] = syn.truth.mispronunciation_rates;
  truth["quality_direction"] = syn.truth.quality_direction;
  truth["quality_gain"] = syn.truth.quality_gain;
  write_file(dir / "truth.json", truth.dump(2) + "\n");

  Manifest m;
  m.command = "gen";
  m.args = tail_args(args);
  m.seeds = {seed};
  m.config = json::parse(synthetic_config_json(cfg));
  if (!o.config.empty()) m.input("config", o.config);
  m.output(dir, dir / "manifest.jsonl");
  m.output(dir, dir / "features");
  m.output(dir, dir / "truth.json");
  m.write(dir / "run.json");
  out << "wrote " << syn.corpus.size() << " utterances to " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const corpus::Corpus corpus = corpus::load_corpus_dir(o.corpus);
  const fs::path dir = o.out;
  std::optional<train::Checkpoint> resume;
  train::TrainConfig cfg;
  if (!o.ckpt.empty()) {
    resume = train::load_checkpoint(o.ckpt);
    cfg = resume->config;
  } else if (!o.config.empty()) {
    cfg = train::parse_train_config(read_file(o.config));
  }
  cfg.validate();
  std::vector<std::uint64_t> seeds = resume ? std::vector<std::uint64_t>{resume->seed} : cfg.trial_seeds();
  if (o.seed && !resume) seeds = {*o.seed};

  std::vector<TrialOutcome> trials(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    trials[i] = run_trial(corpus, cfg, seeds[i], dir / ("trial_" + std::to_string(seeds[i])), resume);
  });
  std::vector<std::map<std::string, double>> metrics;
  for (const auto& t : trials) metrics.push_back(t.metrics);
  write_file(dir / "aggregate.json", aggregate_json(train::aggregate_trials(metrics)));

  Manifest m;
  m.command = "train";
  m.args = tail_args(args);
  for (auto s : seeds) m.seeds.push_back(s);
  m.config = json::parse(train::train_config_json(cfg));
  m.input("corpus", o.corpus);
  if (!o.config.empty()) m.input("config", o.config);
  if (!o.ckpt.empty()) m.input("resume", o.ckpt);
  for (auto s : seeds) {
    const fs::path t = dir / ("trial_" + std::to_string(s));
    for (const char* f : {"epochs.csv", "best.ckpt", "last.ckpt", "components.json"}) m.output(dir, t / f);
  }
  m.output(dir, dir / "aggregate.json");
  m.write(dir / "run.json");
  for (const auto& t : trials)
    out << "seed " << t.seed << ": best epoch " << t.best.best.epoch << ", selection phone MSE " << t.best.best.metric << "\n";
  return kOk;
}

int cmd_eval(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const train::Checkpoint ckpt = train::load_checkpoint(o.ckpt);
  const corpus::Corpus corpus = corpus::load_corpus_dir(o.corpus);
  const Thresholds th = resolve_thresholds(o.threshold, o.mode);
  std::vector<net::Prediction> preds;
  const EvalResult r = evaluate(ckpt, corpus, th, &preds);
  const fs::path dir = o.out;
  write_file(dir / "report.json", r.report);
  write_file(dir / "pr_curve.csv", r.pr_csv);
  write_file(dir / "embeddings.csv", embeddings_csv(preds, corpus));

  Manifest m;
  m.command = "eval";
  m.args = tail_args(args);
  m.seeds = {ckpt.seed};
  m.config = {{"mode", th.mode}, {"thresholds", th.values}};
  m.input("checkpoint", o.ckpt);
  m.input("corpus", o.corpus);
  if (!o.threshold.empty() && fs::exists(o.threshold)) m.input("thresholds", o.threshold);
  for (const char* f : {"report.json", "pr_curve.csv", "embeddings.csv"}) m.output(dir, dir / f);
  m.write(dir / "run.json");
  for (const auto& [k, v] : r.metrics) out << k << ' ' << v << '\n';
  return kOk;
}

int cmd_tune(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.mode != "global" && o.mode != "per-phoneme") throw ConfigError("--mode must be 'global' or 'per-phoneme'");
  const train::Checkpoint ckpt = train::load_checkpoint(o.ckpt);
  const corpus::Corpus corpus = corpus::load_corpus_dir(o.corpus);
  check_compatible(ckpt, corpus);
  const auto preds = eval::predict_corpus(ckpt.params, ckpt.model_config, ckpt.vocab, corpus);
  const auto scores = eval::detector_scores(preds, corpus);
  const auto global = eval::tune_global_threshold(scores.probs, scores.gold);
  json j;
  j["mode"] = o.mode;
  j["global"] = global.threshold;
  j["global_f1"] = global.f1;
  if (o.mode == "per-phoneme") {
    const auto per = eval::tune_per_phoneme_thresholds(scores.probs, scores.gold, scores.canonical, corpus.inventory.size(),
                                                       global.threshold);
    j["values"] = per.values();
    json detail = json::array();
    for (std::size_t k = 0; k < per.phonemes.size(); ++k) {
      const auto& p = per.phonemes[k];
      detail.push_back({{"symbol", corpus.inventory.symbol(k)},
                        {"threshold", p.threshold},
                        {"fallback", p.fallback},
                        {"auprc", p.auprc ? json(*p.auprc) : json(nullptr)},
                        {"precision_x_recall", p.score ? json(*p.score) : json(nullptr)}});
    }
    j["phonemes"] = detail;
  } else {
    j["values"] = {global.threshold};
  }
  const fs::path dir = o.out;
  write_file(dir / "thresholds.json", j.dump(2) + "\n");
  write_file(dir / "pr_curve.csv", eval::pr_curve_csv(global.curve));

  Manifest m;
  m.command = "tune";
  m.args = tail_args(args);
  m.seeds = {ckpt.seed};
  m.config = {{"mode", o.mode}, {"grid_stride", 0.1}};
  m.input("checkpoint", o.ckpt);
  m.input("corpus", o.corpus);
  m.output(dir, dir / "thresholds.json");
  m.output(dir, dir / "pr_curve.csv");
  m.write(dir / "run.json");
  out << "global threshold " << global.threshold << " (F1 " << global.f1 << ")\n";
  return kOk;
}

int cmd_ablate(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  const fs::path grid_path = o.grid;
  const json grid = parse_json_file(grid_path);
  reject_unknown(grid, {"base", "rows", "test_corpus", "threshold"}, "grid");
  if (!grid.contains("rows") || !grid["rows"].is_array() || grid["rows"].empty())
    throw ConfigError("grid: 'rows' must be a nonempty array");
  const json base = grid.value("base", json::object());
  const corpus::Corpus corpus = corpus::load_corpus_dir(o.corpus);
  std::optional<corpus::Corpus> test;
  fs::path test_path;
  if (grid.contains("test_corpus")) {
    test_path = grid["test_corpus"].get<std::string>();
    if (test_path.is_relative()) test_path = grid_path.parent_path() / test_path;
    test = corpus::load_corpus_dir(test_path);
  }
  Thresholds th;
  if (grid.contains("threshold")) th.values = {grid["threshold"].get<double>()};

  struct Row {
    std::string name;
    train::TrainConfig config;
  };
  std::vector<Row> rows;
  for (const json& r : grid["rows"]) {
    reject_unknown(r, {"name", "config"}, "grid row");
    json patched = base;
    patched.merge_patch(r.value("config", json::object()));
    Row row{r.at("name").get<std::string>(), train::parse_train_config(patched.dump())};
    if (row.name.empty() || row.name.find('/') != std::string::npos) throw ConfigError("grid row names must be plain words");
    if (o.seed) row.config.seeds = {*o.seed}, row.config.trials = 1;
    rows.push_back(std::move(row));
  }

  // Flatten (row, seed) so the thread budget covers the whole matrix.
  struct Job {
    std::size_t row;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (auto s : rows[r].config.trial_seeds()) jobs.push_back({r, s});
  std::vector<std::map<std::string, double>> job_metrics(jobs.size());
  const fs::path dir = o.out;
  parallel_for(jobs.size(), [&](std::size_t i) {
    const Row& row = rows[jobs[i].row];
    const fs::path tdir = dir / row.name / ("trial_" + std::to_string(jobs[i].seed));
    TrialOutcome t = run_trial(corpus, row.config, jobs[i].seed, tdir, std::nullopt);
    job_metrics[i] = t.metrics;
    if (test) {
      const EvalResult e = evaluate(t.best, *test, th);
      write_file(tdir / "report.json", e.report);
      for (const auto& [k, v] : e.metrics) job_metrics[i][k] = v;
    }
  });

  std::ostringstream summary;
  summary.precision(17);
  summary << "row,metric,mean,stddev,trials\n";
  Manifest m;
  m.command = "ablate";
  m.args = tail_args(args);
  m.config = grid;
  m.input("grid", grid_path);
  m.input("corpus", o.corpus);
  if (test) m.input("test_corpus", test_path);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<std::map<std::string, double>> ms;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].row == r) {
        ms.push_back(job_metrics[i]);
        m.seeds.push_back({{"row", rows[r].name}, {"seed", jobs[i].seed}});
        const fs::path tdir = dir / rows[r].name / ("trial_" + std::to_string(jobs[i].seed));
        for (const char* f : {"epochs.csv", "best.ckpt", "components.json"}) m.output(dir, tdir / f);
        if (test) m.output(dir, tdir / "report.json");
      }
    const auto agg = train::aggregate_trials(ms);
    write_file(dir / rows[r].name / "aggregate.json", aggregate_json(agg));
    write_file(dir / rows[r].name / "config.json", train::train_config_json(rows[r].config) + "\n");
    m.output(dir, dir / rows[r].name / "aggregate.json");
    for (const auto& [k, a] : agg) summary << rows[r].name << ',' << k << ',' << a.mean << ',' << a.stddev << ',' << a.count << '\n';
  }
  write_file(dir / "summary.csv", summary.str());
  m.output(dir, dir / "summary.csv");
  m.write(dir / "run.json");
  out << "ablation over " << rows.size() << " rows written to " << dir.string() << "\n";
  return kOk;
}

int cmd_plot_pr(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (!o.labels.empty() && o.labels.size() != o.inputs.size()) throw ConfigError("give one --label per curve or none");
  std::vector<CurveSeries> series;
  Manifest m;
  for (std::size_t i = 0; i < o.inputs.size(); ++i) {
    const fs::path p = o.inputs[i];
    series.push_back({o.labels.empty() ? p.parent_path().filename().string() + "/" + p.stem().string() : o.labels[i],
                      eval::parse_pr_curve_csv(read_file(p))});
    m.input("curve", p);
  }
  const fs::path svg = o.out;
  write_file(svg, render_pr_curve(series));
  m.command = "plot pr";
  m.args = tail_args(args);
  m.output(svg.parent_path().empty() ? fs::path(".") : svg.parent_path(), svg);
  m.write(fs::path(svg.string() + ".run.json"));
  out << "wrote " << svg.string() << "\n";
  return kOk;
}

int cmd_plot_embed(const Options& o, const std::vector<std::string>& args, std::ostream& out) {
  if (o.inputs.size() != 1) throw ConfigError("plot embed takes exactly one embeddings CSV");
  const fs::path svg = o.out;
  write_file(svg, render_embeddings(parse_embeddings_csv(read_file(o.inputs[0]))));
  Manifest m;
  m.command = "plot embed";
  m.args = tail_args(args);
  m.input("embeddings", o.inputs[0]);
  m.output(svg.parent_path().empty() ? fs::path(".") : svg.parent_path(), svg);
  m.write(fs::path(svg.string() + ".run.json"));
  out << "wrote " << svg.string() << "\n";
  return kOk;
}

}  // namespace

// ---- public helpers ------------------------------------------------------------------------

corpus::SyntheticConfig parse_synthetic_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("synthetic config is not valid JSON: ") + e.what());
  }
  reject_unknown(j, {"num_phonemes", "zipf_exponent", "mispronunciation_rates", "rate_min", "rate_max", "num_utterances",
                     "min_words", "max_words", "min_word_phonemes", "max_word_phonemes", "blocks", "noise", "quality_gain",
                     "substitution_gain", "p_deletion", "p_substitution", "p_unknown", "p_accented", "p_perfect"},
                 "synthetic config");
  corpus::SyntheticConfig c;
  take(j, "num_phonemes", c.num_phonemes);
  take(j, "zipf_exponent", c.zipf_exponent);
  take(j, "mispronunciation_rates", c.mispronunciation_rates);
  take(j, "rate_min", c.rate_min);
  take(j, "rate_max", c.rate_max);
  take(j, "num_utterances", c.num_utterances);
  take(j, "min_words", c.min_words);
  take(j, "max_words", c.max_words);
  take(j, "min_word_phonemes", c.min_word_phonemes);
  take(j, "max_word_phonemes", c.max_word_phonemes);
  take(j, "noise", c.noise);
  take(j, "quality_gain", c.quality_gain);
  take(j, "substitution_gain", c.substitution_gain);
  take(j, "p_deletion", c.p_deletion);
  take(j, "p_substitution", c.p_substitution);
  take(j, "p_unknown", c.p_unknown);
  take(j, "p_accented", c.p_accented);
  take(j, "p_perfect", c.p_perfect);
  if (j.contains("blocks")) {
    const json& b = j["blocks"];
    reject_unknown(b, {"gop", "dur", "eng", "ssl"}, "synthetic config.blocks");
    take(b, "gop", c.blocks.gop);
    take(b, "dur", c.blocks.dur);
    take(b, "eng", c.blocks.eng);
    take(b, "ssl", c.blocks.ssl);
  }
  return c;
}

std::string synthetic_config_json(const corpus::SyntheticConfig& c) {
  json j{{"num_phonemes", c.num_phonemes},
         {"zipf_exponent", c.zipf_exponent},
         {"mispronunciation_rates", c.mispronunciation_rates},
         {"rate_min", c.rate_min},
         {"rate_max", c.rate_max},
         {"num_utterances", c.num_utterances},
         {"min_words", c.min_words},
         {"max_words", c.max_words},
         {"min_word_phonemes", c.min_word_phonemes},
         {"max_word_phonemes", c.max_word_phonemes},
         {"blocks", {{"gop", c.blocks.gop}, {"dur", c.blocks.dur}, {"eng", c.blocks.eng}, {"ssl", c.blocks.ssl}}},
         {"noise", c.noise},
         {"quality_gain", c.quality_gain},
         {"substitution_gain", c.substitution_gain},
         {"p_deletion", c.p_deletion},
         {"p_substitution", c.p_substitution},
         {"p_unknown", c.p_unknown},
         {"p_accented", c.p_accented},
         {"p_perfect", c.p_perfect}};
  return j.dump(2);
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream s;
  for (unsigned int i = 0; i < len; ++i) s << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return s.str();
}

std::string sha256_path(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("missing input " + path.string());
  if (!fs::is_directory(path)) return sha256_hex(read_file(path));
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(path))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += fs::relative(f, path).generic_string() + '\t' + sha256_hex(read_file(f)) + '\n';
  return sha256_hex(listing);
}

std::size_t thread_budget() {
  const char* env = std::getenv("MUFFIN_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("MUFFIN_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint pronunciation assessment and mispronunciation detection", "muffin"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings");
  Options o;

  auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  gen->add_option("--config", o.config, "Synthetic corpus config (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--seed", o.seed, "Generator seed (default 1)");
  gen->add_option("--out", o.out, "Output corpus directory")->required();

  auto* tr = app.add_subcommand("train", "Train one model per seed");
  tr->add_option("--config", o.config, "Training config (JSON)")->check(CLI::ExistingFile);
  tr->add_option("--corpus", o.corpus, "Training corpus directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--seed", o.seed, "Run a single trial with this seed");
  tr->add_option("--ckpt", o.ckpt, "Resume from this checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--out", o.out, "Run directory")->required();
  tr->get_option("--seed")->excludes("--ckpt");

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on a corpus");
  ev->add_option("--ckpt", o.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", o.corpus, "Evaluation corpus directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--threshold", o.threshold, "Detection threshold in [0,1], or a thresholds.json from tune");
  ev->add_option("--mode", o.mode, "global or per-phoneme")->check(CLI::IsMember({"global", "per-phoneme"}));
  ev->add_option("--out", o.out, "Output directory")->required();

  auto* tu = app.add_subcommand("tune", "Tune detection thresholds on a held-out corpus");
  tu->add_option("--ckpt", o.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  tu->add_option("--corpus", o.corpus, "Held-out corpus directory")->required()->check(CLI::ExistingDirectory);
  tu->add_option("--mode", o.mode, "global or per-phoneme")->check(CLI::IsMember({"global", "per-phoneme"}));
  tu->add_option("--out", o.out, "Output directory")->required();

  auto* ab = app.add_subcommand("ablate", "Train and score every row of a toggle grid");
  ab->add_option("--grid", o.grid, "Ablation grid (JSON)")->required()->check(CLI::ExistingFile);
  ab->add_option("--corpus", o.corpus, "Training corpus directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--seed", o.seed, "Run every row with this single seed");
  ab->add_option("--out", o.out, "Output directory")->required();

  auto* pl = app.add_subcommand("plot", "Render figures as SVG");
  pl->require_subcommand(1);
  auto* pr = pl->add_subcommand("pr", "Overlay precision-recall curves");
  pr->add_option("curves", o.inputs, "PR curve CSV files")->required()->check(CLI::ExistingFile);
  pr->add_option("--label", o.labels, "Legend label per curve");
  pr->add_option("--out", o.out, "Output SVG")->required();
  auto* em = pl->add_subcommand("embed", "Scatter phoneme representations");
  em->add_option("embeddings", o.inputs, "Embeddings CSV written by eval")->required()->check(CLI::ExistingFile);
  em->add_option("--out", o.out, "Output SVG")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kValidationError;
  }
  log()->set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (gen->parsed()) return cmd_gen(o, args, out);
    if (tr->parsed()) return cmd_train(o, args, out);
    if (ev->parsed()) return cmd_eval(o, args, out);
    if (tu->parsed()) return cmd_tune(o, args, out);
    if (ab->parsed()) return cmd_ablate(o, args, out);
    if (pr->parsed()) return cmd_plot_pr(o, args, out);
    if (em->parsed()) return cmd_plot_embed(o, args, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const corpus::CorpusError& e) {
    err << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kValidationError;
}

}  // namespace muffin::cli
