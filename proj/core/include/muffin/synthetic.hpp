#pragma once

// Synthetic learner corpus with a known best-possible fit.
//
// Canonical phonemes are dealt from a shuffled pool whose counts follow a Zipf
// law (floor quotas, remainder to the head ranks); each segment then draws its
// error state from a per-phoneme Bernoulli rate. Features are
//
//   x = E[canonical] + gain·(q − ½)·u + sub_gain·(E'[pronounced] − E[canonical])·[pron ≠ canon] + noise
//
// with q = accuracy / 2 and u a unit direction orthogonal to every phoneme
// embedding, so ⟨x, u⟩ recovers the accuracy exactly when noise is zero.
// Aspect scores are fixed functions of the segment qualities:
//
//   word accuracy  = 10·mean(q)          word stress = 10·q(first phoneme)
//   word total     = (accuracy + stress)/2
//   utt accuracy   = 10·mean(q)          utt completeness = 10·(1 − deleted fraction)
//   utt fluency    = 10·(1 − mispronounced fraction)
//   utt prosody    = mean word stress    utt total = mean of the other four

#include <cstdint>
#include <vector>

#include "muffin/corpus.hpp"

namespace muffin::corpus {

struct SyntheticConfig {
  std::size_t num_phonemes = 20;
  double zipf_exponent = 1.2;
  /// One rate per phoneme; when empty, rates are spread evenly over
  /// [rate_min, rate_max] and assigned to phonemes in a seeded random order.
  std::vector<double> mispronunciation_rates;
  double rate_min = 0.05;
  double rate_max = 0.30;
  std::size_t num_utterances = 100;
  std::size_t min_words = 2, max_words = 5;
  std::size_t min_word_phonemes = 1, max_word_phonemes = 4;
  FeatureBlocks blocks{8, 1, 3, 12};
  double noise = 0.1;
  double quality_gain = 3.0;
  double substitution_gain = 1.0;
  /// Error-type mix among mispronounced segments.
  double p_deletion = 0.25, p_substitution = 0.45, p_unknown = 0.2, p_accented = 0.1;
  /// Share of correct segments scored exactly 2.
  double p_perfect = 0.5;
};

struct GeneratorTruth {
  std::vector<double> zipf_probabilities;
  std::vector<double> mispronunciation_rates;
  std::vector<std::vector<double>> canonical_embeddings;   // M × D
  std::vector<std::vector<double>> pronounced_embeddings;  // (M+2) × D, DEL and UNK last
  std::vector<double> quality_direction;                   // unit, D
  double quality_gain = 0.0;
};

struct SyntheticCorpus {
  Corpus corpus;
  GeneratorTruth truth;
};

/// Deterministic in (config, seed). Throws CorpusError on infeasible configs.
SyntheticCorpus generate_synthetic(const SyntheticConfig& config, std::uint64_t seed);

/// Inventory used for synthetic corpora: the first M CMU symbols, or P00.. beyond 39.
PhonemeInventory synthetic_inventory(std::size_t num_phonemes);

/// The accuracy the generator encoded into a feature vector (exact at zero noise).
double oracle_accuracy(const GeneratorTruth& truth, const std::vector<float>& features);

}  // namespace muffin::corpus
