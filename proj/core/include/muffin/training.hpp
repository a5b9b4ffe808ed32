#pragma once

// Training loop: Adam with plateau decay and global-norm clipping, a seeded
// train/validation split with selection by validation phoneme MSE, versioned
// binary checkpoints, and multi-trial aggregation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "muffin/corpus.hpp"
#include "muffin/network.hpp"
#include "muffin/numerics.hpp"
#include "muffin/objectives.hpp"
#include "muffin/rng.hpp"

namespace muffin::train {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 25;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  double decay = 0.1;
  double plateau_tolerance = 1e-6;
  std::size_t trials = 5;
  std::vector<std::uint64_t> seeds;  // empty: 1..trials
  double validation_fraction = 0.2;
  double grad_clip = 5.0;            // global norm; 0 disables
  std::size_t word_min_count = 1;
  loss::Toggles toggles;
  loss::LossWeights weights;
  net::ModelConfig model;            // data-dependent sizes are filled in from the corpus

  void validate() const;
  std::vector<std::uint64_t> trial_seeds() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// JSON with every field optional; unknown keys are rejected.
TrainConfig parse_train_config(const std::string& json_text);
std::string train_config_json(const TrainConfig& config);
std::string model_config_json(const net::ModelConfig& config);
net::ModelConfig parse_model_config(const std::string& json_text);

/// Model config with feature widths, inventory size and vocabulary size taken from the data.
net::ModelConfig resolve_model_config(const net::ModelConfig& base, const corpus::Corpus& corpus,
                                      const net::WordVocab& vocab);

struct AdamState {
  std::vector<num::Array> m, v;
  std::uint64_t step = 0;
  friend bool operator==(const AdamState&, const AdamState&) = default;
};

struct AdamHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

void adam_step(net::ModelParams& params, const std::vector<num::Array>& grads, AdamState& state, double lr,
               const AdamHyper& h = {});
/// Scales gradients in place so their global norm is at most `max_norm`; returns the norm before clipping.
double clip_global_norm(std::vector<num::Array>& grads, double max_norm);

/// Plateau learning-rate schedule on the epoch training loss.
struct PlateauState {
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  double lr = 1e-3;
  friend bool operator==(const PlateauState&, const PlateauState&) = default;
};

/// Returns true when the rate was decayed.
bool plateau_update(PlateauState& s, double epoch_loss, std::size_t patience, double decay, double tolerance);

struct BestRecord {
  std::size_t epoch = 0;  // epochs completed when the best params were taken; 0 means init
  double metric = std::numeric_limits<double>::infinity();
  friend bool operator==(const BestRecord&, const BestRecord&) = default;
};

struct Checkpoint {
  TrainConfig config;
  net::ModelConfig model_config;
  net::WordVocab vocab;
  corpus::PhonemeInventory inventory;
  std::vector<double> class_scales;  // PhnVar scale per diagnosis class; empty when off
  std::uint64_t seed = 0;
  std::size_t epoch = 0;             // epochs completed
  std::string rng_state;             // stream for the next epoch
  PlateauState plateau;
  BestRecord best;
  std::vector<std::size_t> train_indices, val_indices;
  net::ModelParams params;
  net::ModelParams best_params;
  AdamState adam;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  loss::LossComponents components;  // mean over batches
  double val_phone_mse = std::numeric_limits<double>::quiet_NaN();
};

std::string epoch_log_csv(const std::vector<EpochLog>& log);

/// Mean squared phoneme-accuracy error of `params` over the given utterances.
double phone_mse(const net::ModelParams& params, const net::ModelConfig& cfg, const net::WordVocab& vocab,
                 const corpus::Corpus& corpus, const std::vector<std::size_t>& indices);

/// Deterministic seeded split; the validation part holds round(fraction·n) utterances, at most n−1.
void split_indices(std::size_t n, double fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val);

class Trainer {
 public:
  Trainer(const corpus::Corpus& corpus, const TrainConfig& config, std::uint64_t seed);
  Trainer(const corpus::Corpus& corpus, Checkpoint resume);

  bool done() const { return state_.epoch >= state_.config.epochs; }
  EpochLog run_epoch();
  const Checkpoint& state() const { return state_; }
  /// Checkpoint whose params are the selected (best) ones.
  Checkpoint best_checkpoint() const;

 private:
  void check_corpus() const;

  const corpus::Corpus* corpus_;
  Checkpoint state_;
};

struct TrialResult {
  Checkpoint final_state;
  Checkpoint best;
  std::vector<EpochLog> log;
};

TrialResult train_trial(const corpus::Corpus& corpus, const TrainConfig& config, std::uint64_t seed,
                        const std::function<void(const EpochLog&)>& on_epoch = {});

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population
  std::size_t count = 0;
};

/// Per-metric mean and population stddev; metrics absent from a trial are skipped for that trial.
std::map<std::string, Aggregate> aggregate_trials(const std::vector<std::map<std::string, double>>& trials);

}  // namespace muffin::train
