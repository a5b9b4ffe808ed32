#pragma once

// Learner-utterance data model, the JSON-lines manifest + f32 sidecar format,
// and per-phoneme corpus statistics.

#include <array>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace muffin::corpus {

using PhonemeId = std::size_t;

class CorpusError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Canonical phoneme symbols plus two reserved diagnosis labels: DEL for an
/// omitted phoneme and UNK for a sound outside the inventory.
class PhonemeInventory {
 public:
  static constexpr std::string_view kDel = "DEL";
  static constexpr std::string_view kUnk = "UNK";

  PhonemeInventory() : PhonemeInventory(cmu39_symbols()) {}
  explicit PhonemeInventory(std::vector<std::string> symbols);

  static const std::vector<std::string>& cmu39_symbols();

  std::size_t size() const { return symbols_.size(); }
  /// Diagnosis vocabulary: inventory + DEL + UNK.
  std::size_t vocab_size() const { return symbols_.size() + 2; }
  PhonemeId del() const { return symbols_.size(); }
  PhonemeId unk() const { return symbols_.size() + 1; }
  bool is_canonical(PhonemeId id) const { return id < symbols_.size(); }

  const std::vector<std::string>& symbols() const { return symbols_; }
  const std::string& symbol(PhonemeId id) const;
  std::optional<PhonemeId> find(std::string_view symbol) const;
  /// Includes DEL/UNK. Throws CorpusError on unknown symbols.
  PhonemeId id(std::string_view symbol) const;

  friend bool operator==(const PhonemeInventory& a, const PhonemeInventory& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, PhonemeId> index_;
};

struct FeatureBlocks {
  std::size_t gop = 84;
  std::size_t dur = 1;
  std::size_t eng = 7;
  std::size_t ssl = 3072;

  std::size_t total() const { return gop + dur + eng + ssl; }
  std::size_t ssl_offset() const { return gop + dur + eng; }
  friend bool operator==(const FeatureBlocks&, const FeatureBlocks&) = default;
};

struct PhonemeSegment {
  PhonemeId canonical = 0;
  PhonemeId pronounced = 0;
  int error_state = 0;
  double accuracy = 2.0;
  std::size_t word_index = 0;
  std::size_t feat_ref = 0;     // row in the utterance's feature sidecar
  std::vector<float> features;  // D_feat values, attached on load
  friend bool operator==(const PhonemeSegment&, const PhonemeSegment&) = default;
};

struct WordEntry {
  std::string text;
  double accuracy = 10.0;
  double stress = 10.0;
  double total = 10.0;
  friend bool operator==(const WordEntry&, const WordEntry&) = default;
};

inline constexpr std::size_t kWordAspects = 3;
inline constexpr std::size_t kUtteranceAspects = 5;
inline constexpr std::array<std::string_view, kWordAspects> kWordAspectNames{"accuracy", "stress", "total"};
inline constexpr std::array<std::string_view, kUtteranceAspects> kUtteranceAspectNames{
    "accuracy", "completeness", "fluency", "prosody", "total"};

struct UtteranceScores {
  double accuracy = 10.0;
  double completeness = 10.0;
  double fluency = 10.0;
  double prosody = 10.0;
  double total = 10.0;

  std::array<double, kUtteranceAspects> as_array() const { return {accuracy, completeness, fluency, prosody, total}; }
  friend bool operator==(const UtteranceScores&, const UtteranceScores&) = default;
};

struct UtteranceRecord {
  std::string id;
  std::vector<WordEntry> words;
  std::vector<PhonemeSegment> phonemes;
  UtteranceScores scores;

  std::size_t num_phonemes() const { return phonemes.size(); }
  std::size_t num_words() const { return words.size(); }
  friend bool operator==(const UtteranceRecord&, const UtteranceRecord&) = default;
};

struct Corpus {
  PhonemeInventory inventory;
  FeatureBlocks blocks;
  std::vector<UtteranceRecord> utterances;

  std::size_t size() const { return utterances.size(); }
  bool empty() const { return utterances.empty(); }
  /// Same header, subset of utterances.
  Corpus subset(const std::vector<std::size_t>& indices) const;
  friend bool operator==(const Corpus&, const Corpus&) = default;
};

struct Violation {
  std::string path;  // e.g. "phonemes[3].accuracy"
  std::string message;
};

/// Every violated invariant, with field paths. Empty means the record is ok.
/// `feature_dim` of 0 skips the feature-length check.
std::vector<Violation> validate_record(const UtteranceRecord& record, const PhonemeInventory& inventory,
                                       std::size_t feature_dim = 0);

/// Reads a JSON-lines manifest (first line may be the corpus header) and the
/// per-utterance `<id>.f32` sidecars in `feature_dir`.
Corpus load_corpus(const std::filesystem::path& manifest, const std::filesystem::path& feature_dir);
void write_corpus(const Corpus& corpus, const std::filesystem::path& manifest, const std::filesystem::path& feature_dir);

/// Convenience layout: `<dir>/manifest.jsonl` with sidecars under `<dir>/features/`.
Corpus load_corpus_dir(const std::filesystem::path& dir);
void write_corpus_dir(const Corpus& corpus, const std::filesystem::path& dir);

// ---- statistics -------------------------------------------------------------

enum class OccurrenceBucket { kMany, kMedium, kFew };
enum class RateBucket { kHigh, kMedium, kLow };

std::string_view to_string(OccurrenceBucket b);
std::string_view to_string(RateBucket b);

struct BucketEdges {
  std::array<double, 2> count_edges{1300.0, 600.0};
  std::array<double, 2> rate_edges{0.051, 0.034};
};

struct PhonemeStats {
  std::string symbol;
  std::size_t count = 0;           // q_k
  std::size_t mispronounced = 0;   // mp_k
  std::size_t correct = 0;         // cp_k
  double inverse_log_freq = 0.0;   // c_k
  double quantity_factor = 0.0;    // QF_k
  double mispron_rate = 0.0;       // d_k
  double difficulty_factor = 0.0;  // DF_k
  OccurrenceBucket occurrence = OccurrenceBucket::kFew;
  RateBucket rate = RateBucket::kLow;
};

struct CorpusStats {
  std::vector<PhonemeStats> phonemes;  // indexed by PhonemeId

  std::vector<double> quantity_factors() const;
  std::vector<double> difficulty_factors() const;
};

inline constexpr double kNaturalLogBase = 2.718281828459045;

/// c_k = log(Σq / q_k) in the given base, normalized by the maximum.
std::vector<double> quantity_factors(const std::vector<double>& counts, double log_base = kNaturalLogBase);
/// d_k = mp_k / (mp_k + cp_k), normalized by the maximum.
std::vector<double> difficulty_factors(const std::vector<double>& mispronounced, const std::vector<double>& correct);

CorpusStats compute_stats(const std::vector<std::string>& symbols, const std::vector<std::size_t>& counts,
                          const std::vector<std::size_t>& mispronounced, const BucketEdges& edges = {});
CorpusStats compute_stats(const Corpus& corpus, const BucketEdges& edges = {});

struct BucketAssignment {
  std::vector<OccurrenceBucket> occurrence;
  std::vector<RateBucket> rate;
};

/// Thresholds are exclusive upward: a count exactly on an edge falls to the lower bucket.
BucketAssignment bucket_phonemes(const CorpusStats& stats, const BucketEdges& edges = {});
void apply_buckets(CorpusStats& stats, const BucketAssignment& buckets);

/// Deterministic JSON, rows sorted by symbol.
std::string stats_report_json(const CorpusStats& stats);

}  // namespace muffin::corpus
