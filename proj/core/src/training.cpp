#include "muffin/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

namespace muffin::train {

using json = nlohmann::ordered_json;
using num::Array;
using num::Shape;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

// ---- JSON helpers ---------------------------------------------------------------

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  require(j.is_object(), where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.contains(it.key()), where + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

json double_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double double_from(const json& j, double missing) { return j.is_null() ? missing : j.get<double>(); }

json model_to_json(const net::ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"heads", c.heads},
              {"phone_blocks", c.phone_blocks},
              {"word_blocks", c.word_blocks},
              {"utt_blocks", c.utt_blocks},
              {"conv_kernel", c.conv_kernel},
              {"max_phonemes", c.max_phonemes},
              {"max_words", c.max_words},
              {"dropout", c.dropout},
              {"phoneme_vocab", c.phoneme_vocab},
              {"word_vocab", c.word_vocab},
              {"feature_blocks",
               {{"gop", c.feature_blocks.gop},
                {"dur", c.feature_blocks.dur},
                {"eng", c.feature_blocks.eng},
                {"ssl", c.feature_blocks.ssl}}}};
}

net::ModelConfig model_from_json(const json& j) {
  const std::string w = "model";
  reject_unknown(j, {"d_model", "heads", "phone_blocks", "word_blocks", "utt_blocks", "conv_kernel", "max_phonemes",
                     "max_words", "dropout", "phoneme_vocab", "word_vocab", "feature_blocks"},
                 w);
  net::ModelConfig c;
  read(j, "d_model", c.d_model, w);
  read(j, "heads", c.heads, w);
  read(j, "phone_blocks", c.phone_blocks, w);
  read(j, "word_blocks", c.word_blocks, w);
  read(j, "utt_blocks", c.utt_blocks, w);
  read(j, "conv_kernel", c.conv_kernel, w);
  read(j, "max_phonemes", c.max_phonemes, w);
  read(j, "max_words", c.max_words, w);
  read(j, "dropout", c.dropout, w);
  read(j, "phoneme_vocab", c.phoneme_vocab, w);
  read(j, "word_vocab", c.word_vocab, w);
  if (j.contains("feature_blocks")) {
    const json& f = j.at("feature_blocks");
    reject_unknown(f, {"gop", "dur", "eng", "ssl"}, "model.feature_blocks");
    read(f, "gop", c.feature_blocks.gop, "model.feature_blocks");
    read(f, "dur", c.feature_blocks.dur, "model.feature_blocks");
    read(f, "eng", c.feature_blocks.eng, "model.feature_blocks");
    read(f, "ssl", c.feature_blocks.ssl, "model.feature_blocks");
  }
  return c;
}

json config_to_json(const TrainConfig& c) {
  const auto& t = c.toggles;
  const auto& w = c.weights;
  return json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"patience", c.patience},
              {"decay", c.decay},
              {"plateau_tolerance", c.plateau_tolerance},
              {"trials", c.trials},
              {"seeds", c.seeds},
              {"validation_fraction", c.validation_fraction},
              {"grad_clip", c.grad_clip},
              {"word_min_count", c.word_min_count},
              {"toggles",
               {{"mdd", t.mdd},
                {"apa_phone", t.apa_phone},
                {"apa_word", t.apa_word},
                {"apa_utt", t.apa_utt},
                {"con", t.con},
                {"pc", t.pc},
                {"ordinal", t.ordinal},
                {"phnvar", std::string(loss::to_string(t.phnvar))}}},
              {"weights",
               {{"phone", w.phone},
                {"word", w.word},
                {"utt", w.utt},
                {"lambda", w.lambda},
                {"tau", w.tau},
                {"ordinal_c", w.ordinal_c},
                {"alpha", w.alpha},
                {"beta", w.beta},
                {"sigma", w.sigma}}},
              {"model", model_to_json(c.model)}};
}

TrainConfig config_from_json(const json& j) {
  const std::string w = "config";
  reject_unknown(j, {"lr", "batch_size", "epochs", "patience", "decay", "plateau_tolerance", "trials", "seeds",
                     "validation_fraction", "grad_clip", "word_min_count", "toggles", "weights", "model"},
                 w);
  TrainConfig c;
  read(j, "lr", c.lr, w);
  read(j, "batch_size", c.batch_size, w);
  read(j, "epochs", c.epochs, w);
  read(j, "patience", c.patience, w);
  read(j, "decay", c.decay, w);
  read(j, "plateau_tolerance", c.plateau_tolerance, w);
  read(j, "trials", c.trials, w);
  read(j, "seeds", c.seeds, w);
  read(j, "validation_fraction", c.validation_fraction, w);
  read(j, "grad_clip", c.grad_clip, w);
  read(j, "word_min_count", c.word_min_count, w);
  if (j.contains("toggles")) {
    const json& t = j.at("toggles");
    reject_unknown(t, {"mdd", "apa_phone", "apa_word", "apa_utt", "con", "pc", "ordinal", "phnvar"}, "config.toggles");
    read(t, "mdd", c.toggles.mdd, "config.toggles");
    read(t, "apa_phone", c.toggles.apa_phone, "config.toggles");
    read(t, "apa_word", c.toggles.apa_word, "config.toggles");
    read(t, "apa_utt", c.toggles.apa_utt, "config.toggles");
    read(t, "con", c.toggles.con, "config.toggles");
    read(t, "pc", c.toggles.pc, "config.toggles");
    read(t, "ordinal", c.toggles.ordinal, "config.toggles");
    if (t.contains("phnvar")) {
      try {
        c.toggles.phnvar = loss::phnvar_mode_from_string(t.at("phnvar").get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(std::string("config.toggles.phnvar: ") + e.what());
      }
    }
  }
  if (j.contains("weights")) {
    const json& x = j.at("weights");
    const std::string ww = "config.weights";
    reject_unknown(x, {"phone", "word", "utt", "lambda", "tau", "ordinal_c", "alpha", "beta", "sigma"}, ww);
    read(x, "phone", c.weights.phone, ww);
    read(x, "word", c.weights.word, ww);
    read(x, "utt", c.weights.utt, ww);
    read(x, "lambda", c.weights.lambda, ww);
    read(x, "tau", c.weights.tau, ww);
    read(x, "ordinal_c", c.weights.ordinal_c, ww);
    read(x, "alpha", c.weights.alpha, ww);
    read(x, "beta", c.weights.beta, ww);
    read(x, "sigma", c.weights.sigma, ww);
  }
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  return c;
}

// ---- binary helpers -------------------------------------------------------------

constexpr char kMagic[8] = {'M', 'U', 'F', 'F', 'I', 'N', 'C', 'K'};
constexpr char kTrailer[4] = {'D', 'O', 'N', 'E'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  template <typename T>
  void le(T v) {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    U u = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
  void str(const std::string& s) {
    le<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    need(sizeof(U));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return std::bit_cast<T>(u);
  }
  std::string str() { return bytes(checked_size(le<std::uint64_t>())); }
  std::size_t checked_size(std::uint64_t n) const {
    if (n > in_.size()) throw CheckpointError("checkpoint truncated or corrupt: length field exceeds file size");
    return static_cast<std::size_t>(n);
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

void write_params(Writer& w, const net::ModelParams& p) {
  w.le<std::uint32_t>(static_cast<std::uint32_t>(p.names().size()));
  for (std::size_t i = 0; i < p.names().size(); ++i) {
    w.str(p.names()[i]);
    const Array& a = p.arrays()[i];
    w.le<std::uint32_t>(static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) w.le<std::uint64_t>(d);
    for (double v : a.data()) w.le<float>(static_cast<float>(v));
  }
}

net::ModelParams read_params(Reader& r) {
  net::ModelParams p;
  const std::uint32_t n = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.le<std::uint32_t>();
    if (rank > 2) throw CheckpointError("checkpoint corrupt: parameter " + name + " has rank " + std::to_string(rank));
    Shape shape;
    std::size_t size = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.checked_size(r.le<std::uint64_t>()));
      size *= shape.back();
    }
    r.need(size * 4);
    std::vector<double> data(size);
    for (double& v : data) v = static_cast<double>(r.le<float>());
    p.add(std::move(name), Array(std::move(shape), std::move(data)));
  }
  return p;
}

json checkpoint_header(const Checkpoint& c) {
  return json{{"config", config_to_json(c.config)},
              {"model_config", model_to_json(c.model_config)},
              {"vocab", c.vocab.tokens()},
              {"inventory", c.inventory.symbols()},
              {"class_scales", c.class_scales},
              {"seed", c.seed},
              {"epoch", c.epoch},
              {"rng_state", c.rng_state},
              {"plateau", {{"best", double_or_null(c.plateau.best)}, {"bad_epochs", c.plateau.bad_epochs}, {"lr", c.plateau.lr}}},
              {"best", {{"epoch", c.best.epoch}, {"metric", double_or_null(c.best.metric)}}},
              {"train_indices", c.train_indices},
              {"val_indices", c.val_indices},
              {"adam_step", c.adam.step}};
}

// Round every parameter to 32-bit so checkpoints capture the state exactly.
void round_to_f32(net::ModelParams& p) {
  for (Array& a : p.arrays())
    for (double& v : a.data()) v = static_cast<double>(static_cast<float>(v));
}

Rng epoch_stream(std::uint64_t seed, std::size_t epoch) { return Rng(seed).fork(1000 + epoch); }

std::vector<double> training_class_scales(const corpus::Corpus& corpus, const std::vector<std::size_t>& indices,
                                          const TrainConfig& cfg) {
  if (cfg.toggles.phnvar == loss::PhnVarMode::kOff) return {};
  const std::size_t M = corpus.inventory.size();
  std::vector<double> counts(M, 0.0), mp(M, 0.0);
  for (std::size_t i : indices)
    for (const auto& seg : corpus.utterances[i].phonemes) {
      counts[seg.canonical] += 1.0;
      if (seg.error_state == 1) mp[seg.canonical] += 1.0;
    }
  std::vector<std::size_t> present;
  std::vector<double> q, m, c;
  for (std::size_t k = 0; k < M; ++k)
    if (counts[k] > 0) {
      present.push_back(k);
      q.push_back(counts[k]);
      m.push_back(mp[k]);
      c.push_back(counts[k] - mp[k]);
    }
  std::vector<double> qf, df;
  try {
    qf = corpus::quantity_factors(q);
    df = corpus::difficulty_factors(m, c);
  } catch (const corpus::CorpusError& e) {
    throw ConfigError(std::string("PhnVar statistics unavailable on the training split: ") + e.what());
  }
  double alpha = cfg.weights.alpha, beta = cfg.weights.beta;
  if (cfg.toggles.phnvar == loss::PhnVarMode::kNoDf) beta = 0.0;
  if (cfg.toggles.phnvar == loss::PhnVarMode::kNoQf) alpha = 0.0;
  const std::vector<double> s = loss::phnvar_scale(qf, df, alpha, beta);
  // Phonemes absent from training get the most conservative scale, like DEL/UNK.
  std::vector<double> full(M, *std::min_element(s.begin(), s.end()));
  for (std::size_t i = 0; i < present.size(); ++i) full[present[i]] = s[i];
  return loss::phnvar_vocab_scales(full);
}

}  // namespace

// ---- config ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  require(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  require(batch_size >= 1, "batch_size must be at least 1");
  require(patience >= 1, "patience must be at least 1");
  require(decay > 0.0 && decay < 1.0, "decay must lie in (0, 1)");
  require(plateau_tolerance >= 0.0, "plateau_tolerance must be nonnegative");
  require(trials >= 1 || !seeds.empty(), "at least one trial is required");
  require(seeds.empty() || seeds.size() == trials, "seeds must list one seed per trial");
  require(validation_fraction >= 0.0 && validation_fraction < 1.0, "validation_fraction must lie in [0, 1)");
  require(grad_clip >= 0.0, "grad_clip must be nonnegative");
  require(toggles.mdd || toggles.apa_phone || toggles.apa_word || toggles.apa_utt ||
              (weights.lambda > 0.0 && (toggles.con || toggles.pc || toggles.ordinal)),
          "every loss component is disabled");
  try {
    weights.validate();
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::uint64_t> TrainConfig::trial_seeds() const {
  if (!seeds.empty()) return seeds;
  std::vector<std::uint64_t> s(trials);
  std::iota(s.begin(), s.end(), 1);
  return s;
}

TrainConfig parse_train_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c = config_from_json(j);
  c.validate();
  return c;
}

std::string train_config_json(const TrainConfig& config) { return config_to_json(config).dump(2); }

std::string model_config_json(const net::ModelConfig& config) { return model_to_json(config).dump(2); }

net::ModelConfig parse_model_config(const std::string& json_text) {
  try {
    return model_from_json(json::parse(json_text));
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
  }
}

net::ModelConfig resolve_model_config(const net::ModelConfig& base, const corpus::Corpus& corpus,
                                      const net::WordVocab& vocab) {
  net::ModelConfig c = base;
  c.feature_blocks = corpus.blocks;
  c.phoneme_vocab = corpus.inventory.size();
  c.word_vocab = vocab.size();
  for (const auto& u : corpus.utterances) {
    c.max_phonemes = std::max(c.max_phonemes, u.phonemes.size());
    c.max_words = std::max(c.max_words, u.words.size());
  }
  return c;
}

// ---- optimizer ----------------------------------------------------------------------

void adam_step(net::ModelParams& params, const std::vector<Array>& grads, AdamState& state, double lr, const AdamHyper& h) {
  auto& arrays = params.arrays();
  if (grads.size() != arrays.size()) throw std::invalid_argument("adam_step: one gradient per parameter required");
  if (state.m.empty()) {
    for (const Array& a : arrays) {
      state.m.push_back(Array::zeros_like(a));
      state.v.push_back(Array::zeros_like(a));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(h.beta1, t), c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    Array& p = arrays[i];
    Array& m = state.m[i];
    Array& v = state.v[i];
    const Array& g = grads[i];
    if (g.size() != p.size()) throw std::invalid_argument("adam_step: gradient size mismatch for " + params.names()[i]);
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + h.eps);
    }
  }
}

double clip_global_norm(std::vector<Array>& grads, double max_norm) {
  double sq = 0.0;
  for (const Array& g : grads)
    for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double c = max_norm / norm;
    for (Array& g : grads)
      for (double& v : g.data()) v *= c;
  }
  return norm;
}

bool plateau_update(PlateauState& s, double epoch_loss, std::size_t patience, double decay, double tolerance) {
  if (epoch_loss < s.best - tolerance) {
    s.best = epoch_loss;
    s.bad_epochs = 0;
    return false;
  }
  if (++s.bad_epochs >= patience) {
    s.lr *= decay;
    s.bad_epochs = 0;
    return true;
  }
  return false;
}

// ---- checkpoints --------------------------------------------------------------------

std::string serialize_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.str(checkpoint_header(c).dump());
  write_params(w, c.params);
  write_params(w, c.best_params);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(c.adam.m.size()));
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    w.le<std::uint64_t>(c.adam.m[i].size());
    for (double v : c.adam.m[i].data()) w.le<double>(v);
    for (double v : c.adam.v[i].data()) w.le<double>(v);
  }
  w.bytes(kTrailer, sizeof kTrailer);
  return w.take();
}

Checkpoint parse_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw CheckpointError("not a muffin checkpoint (bad magic bytes)");
  r.bytes(sizeof kMagic);
  const std::uint32_t version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  try {
    const json h = json::parse(r.str());
    c.config = config_from_json(h.at("config"));
    c.model_config = model_from_json(h.at("model_config"));
    c.vocab = net::WordVocab(h.at("vocab").get<std::vector<std::string>>());
    c.inventory = corpus::PhonemeInventory(h.at("inventory").get<std::vector<std::string>>());
    c.class_scales = h.at("class_scales").get<std::vector<double>>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.epoch = h.at("epoch").get<std::size_t>();
    c.rng_state = h.at("rng_state").get<std::string>();
    const json& pl = h.at("plateau");
    c.plateau.best = double_from(pl.at("best"), std::numeric_limits<double>::infinity());
    c.plateau.bad_epochs = pl.at("bad_epochs").get<std::size_t>();
    c.plateau.lr = pl.at("lr").get<double>();
    c.best.epoch = h.at("best").at("epoch").get<std::size_t>();
    c.best.metric = double_from(h.at("best").at("metric"), std::numeric_limits<double>::infinity());
    c.train_indices = h.at("train_indices").get<std::vector<std::size_t>>();
    c.val_indices = h.at("val_indices").get<std::vector<std::size_t>>();
    c.adam.step = h.at("adam_step").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header corrupt: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint header invalid: ") + e.what());
  }
  c.params = read_params(r);
  c.best_params = read_params(r);
  const std::uint32_t n = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t size = r.checked_size(r.le<std::uint64_t>());
    if (i >= c.params.arrays().size() || c.params.arrays()[i].size() != size)
      throw CheckpointError("checkpoint corrupt: optimizer moments do not match the parameters");
    r.need(size * 16);
    Array m = Array::zeros_like(c.params.arrays()[i]), v = m;
    for (double& x : m.data()) x = r.le<double>();
    for (double& x : v.data()) x = r.le<double>();
    c.adam.m.push_back(std::move(m));
    c.adam.v.push_back(std::move(v));
  }
  if (r.bytes(sizeof kTrailer) != std::string(kTrailer, sizeof kTrailer) || !r.at_end())
    throw CheckpointError("checkpoint corrupt: bad trailer");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

// ---- logs -----------------------------------------------------------------------------

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,lr";
  for (const auto& n : loss::LossComponents::names()) out << ',' << n;
  out << ",total,val_phone_mse\n";
  for (const EpochLog& e : log) {
    const auto m = e.components.as_map();
    out << e.epoch << ',' << e.lr;
    for (const auto& n : loss::LossComponents::names()) out << ',' << m.at(n);
    out << ',' << e.components.total << ',';
    if (std::isfinite(e.val_phone_mse)) out << e.val_phone_mse;
    out << '\n';
  }
  return out.str();
}

double phone_mse(const net::ModelParams& params, const net::ModelConfig& cfg, const net::WordVocab& vocab,
                 const corpus::Corpus& corpus, const std::vector<std::size_t>& indices) {
  double sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i : indices) {
    const auto& r = corpus.utterances.at(i);
    const net::Prediction p = net::predict(params, cfg, vocab, r);
    for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
      const double d = p.phone_scores[t] - r.phonemes[t].accuracy;
      sq += d * d;
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("phone_mse: no phonemes to score");
  return sq / static_cast<double>(n);
}

void split_indices(std::size_t n, double fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& val) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng(seed).fork(2);
  rng.shuffle(order);
  std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (n_val >= n) n_val = n == 0 ? 0 : n - 1;
  val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
}

// ---- trainer --------------------------------------------------------------------------

Trainer::Trainer(const corpus::Corpus& corpus, const TrainConfig& config, std::uint64_t seed) : corpus_(&corpus) {
  config.validate();
  require(!corpus.empty(), "cannot train on an empty corpus");
  Checkpoint& s = state_;
  s.config = config;
  s.seed = seed;
  split_indices(corpus.size(), config.validation_fraction, seed, s.train_indices, s.val_indices);
  s.vocab = net::WordVocab::build(corpus.subset(s.train_indices), config.word_min_count);
  s.inventory = corpus.inventory;
  s.model_config = resolve_model_config(config.model, corpus, s.vocab);
  s.class_scales = training_class_scales(corpus, s.train_indices, config);
  s.params = net::init_model(s.model_config, seed);
  s.best_params = s.params;
  s.plateau.lr = config.lr;
  s.rng_state = epoch_stream(seed, 0).state();
}

Trainer::Trainer(const corpus::Corpus& corpus, Checkpoint resume) : corpus_(&corpus), state_(std::move(resume)) {
  state_.config.validate();
  check_corpus();
}

void Trainer::check_corpus() const {
  if (!(corpus_->inventory == state_.inventory)) throw ConfigError("resume: corpus inventory differs from the checkpoint");
  if (!(corpus_->blocks == state_.model_config.feature_blocks)) throw ConfigError("resume: feature blocks differ from the checkpoint");
  for (std::size_t i : state_.train_indices)
    if (i >= corpus_->size()) throw ConfigError("resume: corpus is smaller than the checkpoint's split");
  for (std::size_t i : state_.val_indices)
    if (i >= corpus_->size()) throw ConfigError("resume: corpus is smaller than the checkpoint's split");
}

EpochLog Trainer::run_epoch() {
  Checkpoint& s = state_;
  const TrainConfig& cfg = s.config;
  Rng rng;
  rng.set_state(s.rng_state);

  std::vector<std::size_t> order = s.train_indices;
  rng.shuffle(order);

  EpochLog log;
  log.epoch = s.epoch + 1;
  log.lr = s.plateau.lr;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    try {
      num::Tape tape;
      const net::BoundParams bound(tape, s.params);
      const net::ForwardOptions opts{true, &rng};
      std::vector<net::UtteranceInput> inputs;
      std::vector<net::ForwardOutput> outputs;
      inputs.reserve(end - start);
      outputs.reserve(end - start);
      std::vector<loss::BatchItem> items;
      for (std::size_t b = start; b < end; ++b) {
        const auto& rec = corpus_->utterances[order[b]];
        inputs.push_back(net::make_input(rec, s.vocab));
        outputs.push_back(net::forward(bound, s.model_config, inputs.back(), opts));
      }
      for (std::size_t b = start; b < end; ++b) items.push_back({&corpus_->utterances[order[b]], &outputs[b - start]});
      const loss::LossResult res =
          loss::total_loss(bound, items, cfg.weights, cfg.toggles, s.class_scales, &rng, loss::Mode::kTrain);
      std::vector<Array> grads = bound.gradients(tape.backward(res.total));
      clip_global_norm(grads, cfg.grad_clip);
      adam_step(s.params, grads, s.adam, s.plateau.lr);
      for (const Array& a : s.params.arrays())
        if (!a.all_finite()) throw num::NonFiniteError("parameter update produced non-finite values");
      log.components += res.components;
      ++batches;
    } catch (const num::NonFiniteError& e) {
      throw TrainingDiverged("training diverged at epoch " + std::to_string(log.epoch) + ", batch " +
                             std::to_string(batches + 1) + " (lr " + std::to_string(s.plateau.lr) + "): " + e.what());
    }
  }
  if (batches > 0) log.components = log.components.scaled(1.0 / static_cast<double>(batches));
  round_to_f32(s.params);
  ++s.epoch;

  const auto& select_on = s.val_indices.empty() ? s.train_indices : s.val_indices;
  const double metric = phone_mse(s.params, s.model_config, s.vocab, *corpus_, select_on);
  if (!s.val_indices.empty()) log.val_phone_mse = metric;
  if (metric < s.best.metric) {
    s.best = {s.epoch, metric};
    s.best_params = s.params;
  }
  plateau_update(s.plateau, log.components.total, cfg.patience, cfg.decay, cfg.plateau_tolerance);
  s.rng_state = epoch_stream(s.seed, s.epoch).state();
  return log;
}

Checkpoint Trainer::best_checkpoint() const {
  Checkpoint c = state_;
  c.params = state_.best_params;
  return c;
}

TrialResult train_trial(const corpus::Corpus& corpus, const TrainConfig& config, std::uint64_t seed,
                        const std::function<void(const EpochLog&)>& on_epoch) {
  Trainer trainer(corpus, config, seed);
  TrialResult r;
  while (!trainer.done()) {
    r.log.push_back(trainer.run_epoch());
    if (on_epoch) on_epoch(r.log.back());
  }
  r.final_state = trainer.state();
  r.best = trainer.best_checkpoint();
  return r;
}

std::map<std::string, Aggregate> aggregate_trials(const std::vector<std::map<std::string, double>>& trials) {
  if (trials.empty()) throw std::invalid_argument("aggregate_trials: no trials");
  std::map<std::string, std::vector<double>> values;
  for (const auto& t : trials)
    for (const auto& [k, v] : t) values[k].push_back(v);
  std::map<std::string, Aggregate> out;
  for (auto& [k, vs] : values) {
    std::sort(vs.begin(), vs.end());  // order-independent summation
    Aggregate a;
    a.count = vs.size();
    a.mean = std::accumulate(vs.begin(), vs.end(), 0.0) / static_cast<double>(vs.size());
    double ss = 0.0;
    for (double v : vs) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / static_cast<double>(vs.size()));
    out[k] = a;
  }
  return out;
}

}  // namespace muffin::train
