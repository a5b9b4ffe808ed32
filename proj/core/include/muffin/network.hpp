#pragma once

// Three-level phoneme → word → utterance hierarchy built from
// convolution-augmented Branchformer blocks, with the phoneme-level feedback
// heads (error detector, diagnosis predictor, accuracy regressor).

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "muffin/corpus.hpp"
#include "muffin/numerics.hpp"
#include "muffin/rng.hpp"

namespace muffin::net {

struct ModelConfig {
  std::size_t d_model = 24;
  std::size_t heads = 1;
  std::size_t phone_blocks = 3;
  std::size_t word_blocks = 2;
  std::size_t utt_blocks = 1;
  std::size_t conv_kernel = 3;
  corpus::FeatureBlocks feature_blocks;
  std::size_t phoneme_vocab = 39;  // canonical inventory size M
  std::size_t word_vocab = 1;      // includes the OOV token
  std::size_t max_phonemes = 128;
  std::size_t max_words = 64;
  double dropout = 0.1;

  static constexpr std::size_t kPhoneAspects = 1;
  static constexpr std::size_t kWordAspects = corpus::kWordAspects;
  static constexpr std::size_t kUttAspects = corpus::kUtteranceAspects;

  std::size_t diag_vocab() const { return phoneme_vocab + 2; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Word-token vocabulary for the word prompt embedding. Id 0 is OOV.
class WordVocab {
 public:
  static constexpr std::string_view kOov = "<oov>";

  WordVocab() : tokens_{std::string(kOov)} { index_.emplace(tokens_[0], 0); }
  explicit WordVocab(std::vector<std::string> tokens);
  /// Tokens seen at least `min_count` times, most frequent first (ties by text), capped at `max_size` incl. OOV.
  static WordVocab build(const corpus::Corpus& corpus, std::size_t min_count = 1, std::size_t max_size = 4096);

  std::size_t id(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  friend bool operator==(const WordVocab& a, const WordVocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Named trainable arrays in a fixed, config-derived order.
class ModelParams {
 public:
  void add(std::string name, num::Array value);
  const num::Array& at(std::string_view name) const;
  num::Array& at(std::string_view name);
  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<num::Array>& arrays() const { return arrays_; }
  std::vector<num::Array>& arrays() { return arrays_; }
  std::size_t parameter_count() const;

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    return a.names_ == b.names_ && a.arrays_ == b.arrays_;
  }

 private:
  std::vector<std::string> names_;
  std::vector<num::Array> arrays_;
  std::unordered_map<std::string, std::size_t> index_;
};

ModelParams init_model(const ModelConfig& config, std::uint64_t seed);
/// Closed-form parameter count for a config (no allocation).
std::size_t parameter_count(const ModelConfig& config);

/// Parameters registered as leaves on a tape.
class BoundParams {
 public:
  BoundParams(num::Tape& tape, const ModelParams& params);
  num::Var operator[](std::string_view name) const;
  num::Tape& tape() const { return *tape_; }
  /// Gradient arrays aligned with ModelParams::names().
  std::vector<num::Array> gradients(const num::Gradients& grads) const;

 private:
  num::Tape* tape_;
  const ModelParams* params_;
  std::vector<num::Var> vars_;
};

/// One utterance prepared for the network; rows past the real length are padding.
struct UtteranceInput {
  num::Array features;                   // [T × D_feat]
  std::vector<std::size_t> canonical;    // T
  std::vector<std::size_t> word_index;   // T
  num::Mask mask;                // T, true for real positions
  std::vector<std::size_t> word_tokens;  // one per word
  std::size_t length() const { return canonical.size(); }
  std::size_t valid_length() const;
  std::size_t num_words() const { return word_tokens.size(); }
};

UtteranceInput make_input(const corpus::UtteranceRecord& record, const WordVocab& vocab, std::size_t pad_to = 0);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // dropout draws; dropout is skipped without one
  double dropout = 0.0;  // set from the config by forward()
};

struct PhonemeStage {
  num::Var fused;   // X^p [T×d]
  num::Var prompt;  // E^p [T×d]
  num::Var repr;    // H^p [T×d]
};

struct WordStage {
  std::array<num::Var, 3> aspect_repr;  // H^{w1..3} [M×d]
  num::Var scores;                      // [M×3]
};

struct ForwardOutput {
  PhonemeStage phone;
  num::Var det_prob;      // [T×1]
  num::Var diag_logits;   // [T×V]
  num::Var phone_scores;  // [T×1]
  WordStage word;
  num::Var utt_repr;    // H^u [T×d]
  num::Var utt_scores;  // [1×5]
  num::Mask mask;
};

num::Var branchformer_block(const BoundParams& p, const std::string& prefix, const num::Var& x,
                            std::span<const std::uint8_t> mask, const ForwardOptions& opts);

/// Depthwise conv → single-head self-attention → mean, over the given rows only.
num::Var attention_pool(const BoundParams& p, const std::string& prefix, const num::Var& x,
                        std::span<const std::size_t> rows);

PhonemeStage forward_phoneme_stage(const BoundParams& p, const ModelConfig& cfg, const UtteranceInput& in,
                                   const ForwardOptions& opts);
num::Var detect_head(const BoundParams& p, const num::Var& repr);
num::Var diagnose_head(const BoundParams& p, const num::Var& repr);
WordStage forward_word_stage(const BoundParams& p, const ModelConfig& cfg, const PhonemeStage& phone,
                             const UtteranceInput& in, const ForwardOptions& opts);
num::Var forward_utterance_stage(const BoundParams& p, const ModelConfig& cfg, const PhonemeStage& phone,
                                 const WordStage& word, const UtteranceInput& in, const ForwardOptions& opts,
                                 num::Var* utt_repr = nullptr);

ForwardOutput forward(const BoundParams& p, const ModelConfig& cfg, const UtteranceInput& in,
                      const ForwardOptions& opts = {});

/// Inference-time detection and diagnosis.
struct MddDecision {
  std::vector<int> flagged;              // 1 if P_det > threshold
  std::vector<std::size_t> diagnosis;    // canonical phoneme when not flagged
};

MddDecision infer_mdd(std::span<const double> det_prob, const num::Array& diag_logits, double threshold,
                      std::span<const std::size_t> canonical);
/// Same, with one threshold per canonical phoneme.
MddDecision infer_mdd(std::span<const double> det_prob, const num::Array& diag_logits,
                      std::span<const double> thresholds_by_phoneme, std::span<const std::size_t> canonical);

/// Plain (no-gradient) outputs for one utterance.
struct Prediction {
  std::vector<double> det_prob;
  num::Array diag_logits;
  std::vector<double> phone_scores;
  num::Array word_scores;  // [M×3]
  std::array<double, 5> utt_scores{};
  num::Array phone_repr;   // [N×d]
};

Prediction predict(const ModelParams& params, const ModelConfig& cfg, const WordVocab& vocab,
                   const corpus::UtteranceRecord& record);

}  // namespace muffin::net
