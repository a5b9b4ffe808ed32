#pragma once

// Training objectives: the weighted APA regression stack, detection and
// diagnosis NLLs, the contrastive phonemic ordinal regularizer (ConPCO), and
// the phoneme-specific logit perturbation (PhnVar).

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "muffin/corpus.hpp"
#include "muffin/network.hpp"
#include "muffin/numerics.hpp"
#include "muffin/rng.hpp"

namespace muffin::loss {

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LossWeights {
  double phone = 3.0;
  double word = 1.0;
  double utt = 1.0;
  double lambda = 1.0;     // ConPCO weight
  double tau = 1.0;        // contrastive temperature
  double ordinal_c = 3.0;  // compactness constant, at least the top phoneme score
  double alpha = 1.0;      // PhnVar quantity exponent
  double beta = 1.0;       // PhnVar difficulty exponent
  double sigma = 1.0;      // PhnVar noise scale

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

enum class Mode { kTrain, kEval };

// ---- APA ------------------------------------------------------------------------

/// Predictions and gold scores for one granularity: rows are items, columns aspects.
struct ScoreBlock {
  num::Var pred;     // [R × A]
  num::Array gold;   // [R × A]
  num::Mask mask;    // R, nonzero rows count; empty means all rows
};

/// weight · (Σ_aspects MSE_aspect) / A over the unmasked rows.
num::Var granularity_loss(const ScoreBlock& block, double weight);

struct ApaTerms {
  std::optional<num::Var> phone, word, utt;
};

ApaTerms apa_loss(const std::optional<ScoreBlock>& phone, const std::optional<ScoreBlock>& word,
                  const std::optional<ScoreBlock>& utt, const LossWeights& weights);

// ---- MDD ------------------------------------------------------------------------

struct MddTerms {
  num::Var det;
  num::Var diag;
};

/// Sums over unmasked positions. `det_prob` is [T×1] or [T]; `diag_log_probs` is [T×V].
MddTerms mdd_loss(const num::Var& det_prob, const num::Var& diag_log_probs, std::span<const int> gold_error,
                  std::span<const std::size_t> gold_pronounced, std::span<const std::uint8_t> mask);

// ---- ConPCO ---------------------------------------------------------------------

struct Projection {
  num::Var w;
  num::Var b;
};

struct CentroidPairs {
  std::vector<std::size_t> categories;  // ascending phoneme ids present in the batch
  num::Var speech;                      // z^p [M_batch × d], unit rows
  num::Var text;                        // z^t [M_batch × d], unit rows
  num::Var speech_rows;                 // every projected, normalized H^p row [N × d]
  std::vector<std::size_t> row_pair;    // row → index into categories
};

/// `phone_repr` and `prompt` are [N×d] over the batch's real positions.
CentroidPairs build_centroid_pairs(const num::Var& phone_repr, const num::Var& prompt, std::span<const double> accuracy,
                                   std::span<const std::size_t> phoneme_ids, const Projection& speech_proj,
                                   const Projection& text_proj);

num::Var contrastive_term(const num::Var& speech, const num::Var& text, double tau);
num::Var phonemic_characteristic_term(const num::Var& speech);
/// (1/N) Σ |C − y_i| · ‖rows_i − centroids_i‖.
num::Var ordinal_term(const num::Var& rows, const num::Var& centroids, std::span<const double> accuracy, double c);

// ---- PhnVar ---------------------------------------------------------------------

/// s_k = exp((α ln QF_k + β ln DF_k) / (α + β)).
std::vector<double> phnvar_scale(std::span<const double> qf, std::span<const double> df, double alpha, double beta);
double phnvar_scale(double qf, double df, double alpha, double beta);
/// Extends inventory scales to the diagnosis vocabulary: DEL and UNK get the minimum.
std::vector<double> phnvar_vocab_scales(std::span<const double> phoneme_scales);

/// Noise δ·s_k with δ ~ N(0, σ²), one draw per (row, class).
num::Array phnvar_noise(std::size_t rows, std::span<const double> class_scales, double sigma, Rng& rng);
num::Array phnvar_perturb(const num::Array& logits, std::span<const double> class_scales, double sigma, Rng& rng,
                          Mode mode);
num::Var phnvar_perturb(const num::Var& logits, std::span<const double> class_scales, double sigma, Rng& rng, Mode mode);

// ---- total --------------------------------------------------------------------------

enum class PhnVarMode { kOff, kFull, kNoDf, kNoQf };

std::string_view to_string(PhnVarMode m);
PhnVarMode phnvar_mode_from_string(std::string_view s);

struct Toggles {
  bool mdd = true;
  bool apa_phone = true;
  bool apa_word = true;
  bool apa_utt = true;
  bool con = true;
  bool pc = true;
  bool ordinal = true;
  PhnVarMode phnvar = PhnVarMode::kFull;
  friend bool operator==(const Toggles&, const Toggles&) = default;
};

/// Weighted contribution of every term; `total` is their sum.
struct LossComponents {
  double apa_phone = 0.0, apa_word = 0.0, apa_utt = 0.0;
  double det = 0.0, diag = 0.0;
  double con = 0.0, pc = 0.0, ordinal = 0.0;
  double total = 0.0;

  std::map<std::string, double> as_map() const;
  static const std::vector<std::string>& names();
  LossComponents& operator+=(const LossComponents& o);
  LossComponents scaled(double c) const;
};

struct BatchItem {
  const corpus::UtteranceRecord* record;
  const net::ForwardOutput* output;
};

struct LossResult {
  num::Var total;
  LossComponents components;
};

/// PhnVar scales per diagnosis class, chosen by the toggle's ablation mode.
std::vector<double> phnvar_class_scales(const corpus::CorpusStats& stats, PhnVarMode mode, const LossWeights& w);

/// L = APA + det + diag + λ(con + pc + o). Det/diag are summed per utterance
/// and averaged over the batch. `class_scales` is required when PhnVar is on.
LossResult total_loss(const net::BoundParams& params, std::span<const BatchItem> batch, const LossWeights& weights,
                      const Toggles& toggles, std::span<const double> class_scales, Rng* rng, Mode mode);

}  // namespace muffin::loss
