#include "muffin/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "muffin/rng.hpp"

namespace muffin::eval {

using json = nlohmann::ordered_json;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw MetricError(what);
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::vector<double> grid_or_default(std::span<const double> grid) {
  if (!grid.empty()) return {grid.begin(), grid.end()};
  return threshold_grid();
}

void check_scores(std::span<const double> probs, std::span<const int> gold) {
  require(probs.size() == gold.size(), "detector scores and gold labels differ in length");
  for (int g : gold) require(g == 0 || g == 1, "gold labels must be 0 or 1");
}

bool has_both_classes(std::span<const int> gold) {
  const auto pos = std::count(gold.begin(), gold.end(), 1);
  return pos > 0 && static_cast<std::size_t>(pos) < gold.size();
}

std::optional<double> safe_pearson(std::span<const double> x, std::span<const double> y) {
  try {
    return pearson(x, y);
  } catch (const MetricError&) {
    return std::nullopt;
  }
}

AspectScore aspect(const std::vector<double>& pred, const std::vector<double>& gold) {
  return AspectScore{safe_pearson(pred, gold), mean_squared_error(pred, gold)};
}

Summary summarize(const std::vector<std::optional<double>>& values) {
  std::vector<double> v;
  for (const auto& x : values)
    if (x) v.push_back(*x);
  Summary s;
  s.phonemes = v.size();
  if (v.empty()) return s;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  s.mean = mean;
  s.stddev = std::sqrt(ss / static_cast<double>(v.size()));
  return s;
}

BucketCell cell_of(const std::vector<const PhonemeMetrics*>& members) {
  std::vector<std::optional<double>> per, re, pr, f1;
  for (const PhonemeMetrics* m : members) {
    per.push_back(m->per);
    re.push_back(m->detection.recall);
    pr.push_back(m->detection.precision);
    f1.push_back(m->detection.f1);
  }
  return BucketCell{summarize(per), summarize(re), summarize(pr), summarize(f1)};
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json summary_json(const Summary& s) { return json{{"mean", opt(s.mean)}, {"stddev", opt(s.stddev)}, {"phonemes", s.phonemes}}; }

json cell_json(const BucketCell& c) {
  return json{{"PER", summary_json(c.per)}, {"RE", summary_json(c.recall)}, {"PR", summary_json(c.precision)}, {"F1", summary_json(c.f1)}};
}

json aspect_json(const AspectScore& a) { return json{{"pcc", opt(a.pcc)}, {"mse", a.mse}}; }

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "pearson: length mismatch");
  require(x.size() >= 2, "pearson: need at least two points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, "pearson: undefined for zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double mean_squared_error(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "mse: length mismatch");
  require(!x.empty(), "mse: no values");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return s / static_cast<double>(x.size());
}

// ---- detection / diagnosis -------------------------------------------------------------

DetectionCounts& DetectionCounts::operator+=(const DetectionCounts& o) {
  ta += o.ta;
  fr += o.fr;
  fa += o.fa;
  tr += o.tr;
  cd += o.cd;
  de += o.de;
  return *this;
}

DetectionCounts count_detections(std::span<const SegmentOutcome> segments) {
  DetectionCounts c;
  for (const SegmentOutcome& s : segments) {
    require((s.gold_error == 0 || s.gold_error == 1) && (s.flagged == 0 || s.flagged == 1),
            "count_detections: labels must be 0 or 1");
    if (s.gold_error == 0) {
      (s.flagged ? c.fr : c.ta) += 1;
    } else if (!s.flagged) {
      ++c.fa;
    } else {
      ++c.tr;
      (s.predicted == s.gold_pronounced ? c.cd : c.de) += 1;
    }
  }
  return c;
}

DetectionMetrics detection_metrics(const DetectionCounts& c) {
  DetectionMetrics m;
  m.recall = ratio(c.tr, c.tr + c.fa);
  // Written as a complement so RE + FAR is exactly 1 in floating point.
  if (m.recall) m.far = 1.0 - *m.recall;
  m.precision = ratio(c.tr, c.tr + c.fr);
  m.frr = ratio(c.fr, c.fr + c.ta);
  if (m.recall && m.precision) {
    const double s = *m.recall + *m.precision;
    m.f1 = s > 0.0 ? 2.0 * *m.recall * *m.precision / s : 0.0;
  }
  return m;
}

std::optional<double> diagnostic_error_rate(const DetectionCounts& c) { return ratio(c.de, c.cd + c.de); }

std::size_t edit_distance(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double phone_error_rate(const std::vector<std::vector<std::size_t>>& predicted,
                        const std::vector<std::vector<std::size_t>>& actual, std::size_t del_id) {
  require(predicted.size() == actual.size(), "phone_error_rate: sequence counts differ");
  std::size_t edits = 0, length = 0;
  auto strip = [del_id](const std::vector<std::size_t>& s) {
    std::vector<std::size_t> out;
    std::copy_if(s.begin(), s.end(), std::back_inserter(out), [del_id](std::size_t v) { return v != del_id; });
    return out;
  };
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const auto p = strip(predicted[i]);
    const auto a = strip(actual[i]);
    edits += edit_distance(p, a);
    length += a.size();
  }
  require(length > 0, "phone_error_rate: empty actual sequence");
  return static_cast<double>(edits) / static_cast<double>(length);
}

// ---- thresholds ------------------------------------------------------------------------

std::vector<double> threshold_grid(double stride) {
  require(stride > 0.0 && stride <= 1.0, "threshold grid stride must lie in (0, 1]");
  const auto steps = static_cast<std::size_t>(std::llround(1.0 / stride));
  require(std::abs(static_cast<double>(steps) * stride - 1.0) < 1e-9, "threshold grid stride must divide 1");
  std::vector<double> g(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) g[k] = static_cast<double>(k) / static_cast<double>(steps);
  return g;
}

std::vector<PrPoint> pr_curve(std::span<const double> probs, std::span<const int> gold, std::span<const double> grid) {
  check_scores(probs, gold);
  std::vector<PrPoint> curve;
  for (double t : grid_or_default(grid)) {
    DetectionCounts c;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const bool flag = probs[i] > t;
      if (gold[i] == 1)
        (flag ? c.tr : c.fa) += 1;
      else
        (flag ? c.fr : c.ta) += 1;
    }
    const DetectionMetrics m = detection_metrics(c);
    curve.push_back(PrPoint{t, m.recall.value_or(0.0), m.precision, m.f1});
  }
  return curve;
}

double auprc(std::span<const double> probs, std::span<const int> gold) {
  check_scores(probs, gold);
  const auto positives = static_cast<std::size_t>(std::count(gold.begin(), gold.end(), 1));
  require(positives > 0, "auprc: no positive labels");
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, flagged = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && probs[order[j]] == probs[order[i]]) {
      tp += static_cast<std::size_t>(gold[order[j]]);
      ++flagged;
      ++j;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    area += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(flagged);
    prev_recall = recall;
    i = j;
  }
  return area;
}

GlobalThreshold tune_global_threshold(std::span<const double> probs, std::span<const int> gold,
                                      std::span<const double> grid) {
  check_scores(probs, gold);
  require(has_both_classes(gold), "tune_threshold: gold labels need both classes");
  GlobalThreshold g;
  g.curve = pr_curve(probs, gold, grid);
  double best = -1.0;
  for (const PrPoint& p : g.curve) {
    const double f = p.f1.value_or(-1.0);
    if (f > best) {
      best = f;
      g.threshold = p.threshold;
    }
  }
  g.f1 = std::max(best, 0.0);
  return g;
}

std::vector<double> PerPhonemeThresholds::values() const {
  std::vector<double> v;
  for (const auto& p : phonemes) v.push_back(p.threshold);
  return v;
}

PerPhonemeThresholds tune_per_phoneme_thresholds(std::span<const double> probs, std::span<const int> gold,
                                                 std::span<const std::size_t> phoneme_ids, std::size_t num_phonemes,
                                                 double fallback, std::span<const double> grid) {
  check_scores(probs, gold);
  require(phoneme_ids.size() == probs.size(), "per-phoneme tuning: one phoneme id per score");
  const std::vector<double> points = grid_or_default(grid);
  PerPhonemeThresholds out;
  out.global = fallback;
  out.phonemes.assign(num_phonemes, PhonemeThreshold{fallback, true, std::nullopt, std::nullopt});
  std::vector<std::vector<double>> p(num_phonemes);
  std::vector<std::vector<int>> g(num_phonemes);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    require(phoneme_ids[i] < num_phonemes, "per-phoneme tuning: phoneme id out of range");
    p[phoneme_ids[i]].push_back(probs[i]);
    g[phoneme_ids[i]].push_back(gold[i]);
  }
  for (std::size_t k = 0; k < num_phonemes; ++k) {
    if (!has_both_classes(g[k])) continue;
    PhonemeThreshold& t = out.phonemes[k];
    t.fallback = false;
    t.auprc = auprc(p[k], g[k]);
    double best = -1.0;
    for (const PrPoint& pt : pr_curve(p[k], g[k], points)) {
      const double s = pt.precision ? *pt.precision * pt.recall : 0.0;
      if (s > best) {
        best = s;
        t.threshold = pt.threshold;
      }
    }
    t.score = best;
  }
  return out;
}

// ---- pipeline ----------------------------------------------------------------------------

std::vector<net::Prediction> predict_corpus(const net::ModelParams& params, const net::ModelConfig& cfg,
                                            const net::WordVocab& vocab, const corpus::Corpus& corpus) {
  std::vector<net::Prediction> out;
  out.reserve(corpus.size());
  for (const auto& r : corpus.utterances) out.push_back(net::predict(params, cfg, vocab, r));
  return out;
}

DetectorScores detector_scores(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus) {
  require(preds.size() == corpus.size(), "one prediction per utterance required");
  DetectorScores s;
  for (std::size_t u = 0; u < preds.size(); ++u) {
    const auto& r = corpus.utterances[u];
    require(preds[u].det_prob.size() == r.phonemes.size(), "prediction length differs from utterance " + r.id);
    for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
      s.probs.push_back(preds[u].det_prob[t]);
      s.gold.push_back(r.phonemes[t].error_state);
      s.canonical.push_back(r.phonemes[t].canonical);
    }
  }
  return s;
}

std::vector<SegmentResult> decide_segments(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus,
                                           std::span<const double> thresholds) {
  require(preds.size() == corpus.size(), "one prediction per utterance required");
  require(thresholds.size() == 1 || thresholds.size() >= corpus.inventory.size(),
          "thresholds: give one global value or one per phoneme");
  for (double t : thresholds) require(t >= 0.0 && t <= 1.0, "thresholds must lie in [0, 1]");
  std::vector<SegmentResult> out;
  for (std::size_t u = 0; u < preds.size(); ++u) {
    const auto& r = corpus.utterances[u];
    const auto& p = preds[u];
    require(p.det_prob.size() == r.phonemes.size(), "prediction length differs from utterance " + r.id);
    std::vector<std::size_t> canonical;
    for (const auto& seg : r.phonemes) canonical.push_back(seg.canonical);
    const net::MddDecision d = thresholds.size() == 1 ? net::infer_mdd(p.det_prob, p.diag_logits, thresholds[0], canonical)
                                                      : net::infer_mdd(p.det_prob, p.diag_logits, thresholds, canonical);
    for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
      const auto& seg = r.phonemes[t];
      out.push_back(SegmentResult{u, seg.canonical, seg.error_state, seg.pronounced, p.det_prob[t], d.flagged[t], d.diagnosis[t]});
    }
  }
  return out;
}

ApaReport apa_report(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus) {
  require(preds.size() == corpus.size(), "one prediction per utterance required");
  std::vector<double> pp, pg;
  std::array<std::vector<double>, corpus::kWordAspects> wp, wg;
  std::array<std::vector<double>, corpus::kUtteranceAspects> up, ug;
  for (std::size_t u = 0; u < preds.size(); ++u) {
    const auto& r = corpus.utterances[u];
    const auto& p = preds[u];
    for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
      pp.push_back(p.phone_scores[t]);
      pg.push_back(r.phonemes[t].accuracy);
    }
    for (std::size_t m = 0; m < r.words.size(); ++m) {
      const std::array<double, 3> gold{r.words[m].accuracy, r.words[m].stress, r.words[m].total};
      for (std::size_t a = 0; a < corpus::kWordAspects; ++a) {
        wp[a].push_back(p.word_scores(m, a));
        wg[a].push_back(gold[a]);
      }
    }
    const auto gold = r.scores.as_array();
    for (std::size_t a = 0; a < corpus::kUtteranceAspects; ++a) {
      up[a].push_back(p.utt_scores[a]);
      ug[a].push_back(gold[a]);
    }
  }
  ApaReport rep;
  rep.phone = aspect(pp, pg);
  for (std::size_t a = 0; a < corpus::kWordAspects; ++a) rep.word[a] = aspect(wp[a], wg[a]);
  for (std::size_t a = 0; a < corpus::kUtteranceAspects; ++a) rep.utt[a] = aspect(up[a], ug[a]);
  return rep;
}

MddReport mdd_report(const std::vector<SegmentResult>& segments, const corpus::Corpus& corpus) {
  std::vector<SegmentOutcome> outcomes;
  outcomes.reserve(segments.size());
  std::vector<std::vector<std::size_t>> predicted(corpus.size()), actual(corpus.size());
  for (const SegmentResult& s : segments) {
    outcomes.push_back({s.gold_error, s.flagged, s.gold_pronounced, s.predicted});
    require(s.utterance < corpus.size(), "segment refers to a missing utterance");
    predicted[s.utterance].push_back(s.predicted);
    actual[s.utterance].push_back(s.gold_pronounced);
  }
  MddReport rep;
  rep.counts = count_detections(outcomes);
  rep.detection = detection_metrics(rep.counts);
  rep.der = diagnostic_error_rate(rep.counts);
  try {
    rep.per = phone_error_rate(predicted, actual, corpus.inventory.del());
  } catch (const MetricError&) {
    rep.per = std::nullopt;
  }
  return rep;
}

std::vector<PhonemeMetrics> per_phoneme_metrics(const std::vector<SegmentResult>& segments, std::size_t num_phonemes) {
  std::vector<std::vector<SegmentOutcome>> groups(num_phonemes);
  std::vector<std::size_t> mismatches(num_phonemes, 0);
  for (const SegmentResult& s : segments) {
    require(s.canonical < num_phonemes, "segment canonical id out of range");
    groups[s.canonical].push_back({s.gold_error, s.flagged, s.gold_pronounced, s.predicted});
    if (s.predicted != s.gold_pronounced) ++mismatches[s.canonical];
  }
  std::vector<PhonemeMetrics> out(num_phonemes);
  for (std::size_t k = 0; k < num_phonemes; ++k) {
    out[k].segments = groups[k].size();
    out[k].detection = detection_metrics(count_detections(groups[k]));
    out[k].per = ratio(mismatches[k], groups[k].size());
  }
  return out;
}

BucketReport bucketed_report(const std::vector<PhonemeMetrics>& phonemes, const corpus::CorpusStats& stats) {
  require(phonemes.size() == stats.phonemes.size(), "bucketed_report: metrics and stats cover different inventories");
  std::vector<const PhonemeMetrics*> all;
  std::array<std::vector<const PhonemeMetrics*>, 3> occ, rate;
  std::array<std::array<std::vector<const PhonemeMetrics*>, 3>, 3> cell;
  for (std::size_t k = 0; k < phonemes.size(); ++k) {
    const auto o = static_cast<std::size_t>(stats.phonemes[k].occurrence);
    const auto r = static_cast<std::size_t>(stats.phonemes[k].rate);
    all.push_back(&phonemes[k]);
    occ[o].push_back(&phonemes[k]);
    rate[r].push_back(&phonemes[k]);
    cell[o][r].push_back(&phonemes[k]);
  }
  BucketReport rep;
  rep.overall = cell_of(all);
  for (std::size_t i = 0; i < 3; ++i) {
    rep.by_occurrence[i] = cell_of(occ[i]);
    rep.by_rate[i] = cell_of(rate[i]);
    for (std::size_t j = 0; j < 3; ++j) rep.cells[i][j] = cell_of(cell[i][j]);
  }
  return rep;
}

double significance_test(std::span<const double> a, std::span<const double> b, std::size_t iterations, std::uint64_t seed) {
  require(a.size() == b.size(), "significance_test: paired samples differ in length");
  require(!a.empty(), "significance_test: no samples");
  require(iterations > 0, "significance_test: need at least one iteration");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double n = static_cast<double>(d.size());
  double observed = 0.0;
  for (double v : d) observed += v;
  observed = std::abs(observed / n);
  const double slack = 1e-12 * std::max(1.0, observed);
  Rng rng(seed);
  std::size_t hits = 0;
  for (std::size_t it = 0; it < iterations; ++it) {
    double s = 0.0;
    for (double v : d) s += (rng.next_u64() >> 63) ? -v : v;
    if (std::abs(s / n) >= observed - slack) ++hits;
  }
  return static_cast<double>(hits + 1) / static_cast<double>(iterations + 1);
}

std::string report_json(const ApaReport& apa, const MddReport& mdd, const std::optional<BucketReport>& buckets,
                        const std::string& threshold_mode, const std::vector<double>& thresholds) {
  json j;
  j["threshold"] = {{"mode", threshold_mode}, {"values", thresholds}};
  json word, utt;
  for (std::size_t a = 0; a < corpus::kWordAspects; ++a) word[std::string(corpus::kWordAspectNames[a])] = aspect_json(apa.word[a]);
  for (std::size_t a = 0; a < corpus::kUtteranceAspects; ++a)
    utt[std::string(corpus::kUtteranceAspectNames[a])] = aspect_json(apa.utt[a]);
  j["apa"] = {{"phoneme", {{"accuracy", aspect_json(apa.phone)}}}, {"word", word}, {"utterance", utt}};
  const auto& c = mdd.counts;
  j["mdd"] = {{"counts", {{"TA", c.ta}, {"FR", c.fr}, {"FA", c.fa}, {"TR", c.tr}, {"CD", c.cd}, {"DE", c.de}}},
              {"RE", opt(mdd.detection.recall)},
              {"PR", opt(mdd.detection.precision)},
              {"F1", opt(mdd.detection.f1)},
              {"FAR", opt(mdd.detection.far)},
              {"FRR", opt(mdd.detection.frr)},
              {"DER", opt(mdd.der)},
              {"PER", opt(mdd.per)}};
  if (buckets) {
    static const char* occ[] = {"many", "medium", "few"};
    static const char* rate[] = {"high", "medium", "low"};
    json b;
    b["overall"] = cell_json(buckets->overall);
    for (std::size_t i = 0; i < 3; ++i) b["occurrence"][occ[i]] = cell_json(buckets->by_occurrence[i]);
    for (std::size_t i = 0; i < 3; ++i) b["rate"][rate[i]] = cell_json(buckets->by_rate[i]);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = 0; k < 3; ++k) b["cells"][std::string(occ[i]) + "/" + rate[k]] = cell_json(buckets->cells[i][k]);
    j["buckets"] = b;
  }
  return j.dump(2) + "\n";
}

std::string pr_curve_csv(const std::vector<PrPoint>& curve) {
  std::string out = "threshold,recall,precision,f1\n";
  for (const PrPoint& p : curve) {
    out += format_double(p.threshold) + "," + format_double(p.recall) + ",";
    if (p.precision) out += format_double(*p.precision);
    out += ",";
    if (p.f1) out += format_double(*p.f1);
    out += "\n";
  }
  return out;
}

std::vector<PrPoint> parse_pr_curve_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "PR curve CSV is empty");
  require(line.rfind("threshold,recall,precision", 0) == 0, "PR curve CSV has an unexpected header: " + line);
  std::vector<PrPoint> curve;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    require(f.size() >= 3, "PR curve CSV line " + std::to_string(row) + ": expected at least 3 fields");
    try {
      PrPoint p;
      p.threshold = std::stod(f[0]);
      p.recall = std::stod(f[1]);
      if (!f[2].empty()) p.precision = std::stod(f[2]);
      if (f.size() > 3 && !f[3].empty()) p.f1 = std::stod(f[3]);
      curve.push_back(p);
    } catch (const std::exception&) {
      throw MetricError("PR curve CSV line " + std::to_string(row) + ": not a number");
    }
  }
  return curve;
}

}  // namespace muffin::eval
