#pragma once

// Scoring rubric: PCC/MSE for assessment, detection and diagnosis rates,
// phone error rate, threshold tuning, bucketed imbalance breakdowns and a
// paired approximate-randomization test.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "muffin/corpus.hpp"
#include "muffin/network.hpp"

namespace muffin::eval {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

double pearson(std::span<const double> x, std::span<const double> y);
double mean_squared_error(std::span<const double> x, std::span<const double> y);

// ---- detection / diagnosis -------------------------------------------------------------

struct DetectionCounts {
  std::size_t ta = 0;  // correct segment, accepted
  std::size_t fr = 0;  // correct segment, flagged
  std::size_t fa = 0;  // mispronounced segment, accepted
  std::size_t tr = 0;  // mispronounced segment, flagged
  std::size_t cd = 0;  // flagged mispronunciation, right diagnosis
  std::size_t de = 0;  // flagged mispronunciation, wrong diagnosis

  DetectionCounts& operator+=(const DetectionCounts& o);
  friend bool operator==(const DetectionCounts&, const DetectionCounts&) = default;
};

struct SegmentOutcome {
  int gold_error = 0;
  int flagged = 0;
  std::size_t gold_pronounced = 0;
  std::size_t predicted = 0;
};

DetectionCounts count_detections(std::span<const SegmentOutcome> segments);

/// Rates whose denominator is zero are absent, never 0.
struct DetectionMetrics {
  std::optional<double> recall, precision, f1, far, frr;
};

DetectionMetrics detection_metrics(const DetectionCounts& c);
std::optional<double> diagnostic_error_rate(const DetectionCounts& c);

std::size_t edit_distance(std::span<const std::size_t> a, std::span<const std::size_t> b);
/// Σ edit distance / Σ actual length after removing `del_id` from both sides.
double phone_error_rate(const std::vector<std::vector<std::size_t>>& predicted,
                        const std::vector<std::vector<std::size_t>>& actual, std::size_t del_id);

// ---- thresholds ------------------------------------------------------------------------

/// {0, stride, 2·stride, …, 1}, each point computed as k·stride.
std::vector<double> threshold_grid(double stride = 0.1);

struct PrPoint {
  double threshold = 0.0;
  double recall = 0.0;
  std::optional<double> precision;
  std::optional<double> f1;
};

std::vector<PrPoint> pr_curve(std::span<const double> probs, std::span<const int> gold, std::span<const double> grid);
/// Average precision over every distinct score (step-wise area under the PR curve).
double auprc(std::span<const double> probs, std::span<const int> gold);

struct GlobalThreshold {
  double threshold = 0.4;
  double f1 = 0.0;
  std::vector<PrPoint> curve;
};

/// Grid threshold with the highest F1; ties go to the lower threshold.
GlobalThreshold tune_global_threshold(std::span<const double> probs, std::span<const int> gold,
                                      std::span<const double> grid = {});

struct PhonemeThreshold {
  double threshold = 0.4;
  bool fallback = true;           // phoneme lacked both classes
  std::optional<double> auprc;
  std::optional<double> score;    // precision × recall at the chosen threshold
};

struct PerPhonemeThresholds {
  double global = 0.4;
  std::vector<PhonemeThreshold> phonemes;
  std::vector<double> values() const;
};

/// Per phoneme: the grid point with the largest precision × recall (the
/// rectangle under the PR curve at that point). Phonemes without both classes
/// fall back to `fallback`.
PerPhonemeThresholds tune_per_phoneme_thresholds(std::span<const double> probs, std::span<const int> gold,
                                                 std::span<const std::size_t> phoneme_ids, std::size_t num_phonemes,
                                                 double fallback, std::span<const double> grid = {});

// ---- pipeline ----------------------------------------------------------------------------

std::vector<net::Prediction> predict_corpus(const net::ModelParams& params, const net::ModelConfig& cfg,
                                            const net::WordVocab& vocab, const corpus::Corpus& corpus);

struct SegmentResult {
  std::size_t utterance = 0;
  std::size_t canonical = 0;
  int gold_error = 0;
  std::size_t gold_pronounced = 0;
  double det_prob = 0.0;
  int flagged = 0;
  std::size_t predicted = 0;
};

/// Detector probabilities and gold labels flattened over the corpus.
struct DetectorScores {
  std::vector<double> probs;
  std::vector<int> gold;
  std::vector<std::size_t> canonical;
};

DetectorScores detector_scores(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus);

/// Thresholds indexed by canonical phoneme (size 1 means one global threshold).
std::vector<SegmentResult> decide_segments(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus,
                                           std::span<const double> thresholds);

struct AspectScore {
  std::optional<double> pcc;  // absent when either side has zero variance
  double mse = 0.0;
};

struct ApaReport {
  AspectScore phone;
  std::array<AspectScore, corpus::kWordAspects> word;
  std::array<AspectScore, corpus::kUtteranceAspects> utt;
};

ApaReport apa_report(const std::vector<net::Prediction>& preds, const corpus::Corpus& corpus);

struct MddReport {
  DetectionCounts counts;
  DetectionMetrics detection;
  std::optional<double> der;
  std::optional<double> per;
};

MddReport mdd_report(const std::vector<SegmentResult>& segments, const corpus::Corpus& corpus);

struct Summary {
  std::optional<double> mean, stddev;  // over phonemes where the metric is defined
  std::size_t phonemes = 0;
};

struct BucketCell {
  Summary per, recall, precision, f1;
};

struct PhonemeMetrics {
  DetectionMetrics detection;
  std::optional<double> per;  // positional mismatch rate of the emitted phoneme
  std::size_t segments = 0;
};

std::vector<PhonemeMetrics> per_phoneme_metrics(const std::vector<SegmentResult>& segments, std::size_t num_phonemes);

struct BucketReport {
  BucketCell overall;
  std::array<BucketCell, 3> by_occurrence;            // many, medium, few
  std::array<BucketCell, 3> by_rate;                  // high, medium, low
  std::array<std::array<BucketCell, 3>, 3> cells;     // [occurrence][rate]
};

/// Aggregates per-phoneme metrics over the stats' bucket assignment.
BucketReport bucketed_report(const std::vector<PhonemeMetrics>& phonemes, const corpus::CorpusStats& stats);

/// Two-sided paired approximate randomization; p = (hits + 1) / (iterations + 1).
double significance_test(std::span<const double> a, std::span<const double> b, std::size_t iterations,
                         std::uint64_t seed);

std::string report_json(const ApaReport& apa, const MddReport& mdd, const std::optional<BucketReport>& buckets,
                        const std::string& threshold_mode, const std::vector<double>& thresholds);
std::string pr_curve_csv(const std::vector<PrPoint>& curve);
/// Reads the CSV written by pr_curve_csv.
std::vector<PrPoint> parse_pr_curve_csv(const std::string& text);

}  // namespace muffin::eval
