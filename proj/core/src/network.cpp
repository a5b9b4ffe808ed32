#include "muffin/network.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>

namespace muffin::net {

using num::Array;
using num::Mask;
using num::Shape;
using num::Var;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument("model: " + what);
}

enum class Init { kFanIn, kEmbedding, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

class Layout {
 public:
  void linear(const std::string& name, std::size_t in, std::size_t out, bool bias = true) {
    specs_.push_back({name + ".w", {in, out}, Init::kFanIn, in});
    if (bias) specs_.push_back({name + ".b", {out}, Init::kZeros});
  }
  void conv(const std::string& name, std::size_t kernel, std::size_t channels) {
    specs_.push_back({name + ".k", {kernel, channels}, Init::kFanIn, kernel});
    specs_.push_back({name + ".b", {channels}, Init::kZeros});
  }
  void layer_norm(const std::string& name, std::size_t d) {
    specs_.push_back({name + ".gamma", {d}, Init::kOnes});
    specs_.push_back({name + ".beta", {d}, Init::kZeros});
  }
  void embedding(const std::string& name, std::size_t rows, std::size_t d) {
    specs_.push_back({name, {rows, d}, Init::kEmbedding});
  }
  void zeros(const std::string& name, Shape shape) { specs_.push_back({name, std::move(shape), Init::kZeros}); }

  void block(const std::string& p, std::size_t d, std::size_t k) {
    layer_norm(p + ".ln_attn", d);
    linear(p + ".attn.q", d, d);
    linear(p + ".attn.k", d, d);
    linear(p + ".attn.v", d, d);
    linear(p + ".ff1", d, d);
    linear(p + ".ff2", d, d);
    layer_norm(p + ".ln_conv", d);
    conv(p + ".conv.dw", k, d);
    linear(p + ".conv.pw", d, d);
    linear(p + ".merge", 2 * d, d);
  }
  void pool(const std::string& p, std::size_t d, std::size_t k) {
    conv(p + ".conv", k, d);
    linear(p + ".q", d, d, false);
    linear(p + ".k", d, d, false);
  }

  const std::vector<ParamSpec>& specs() const { return specs_; }

 private:
  std::vector<ParamSpec> specs_;
};

Layout layout(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, k = c.conv_kernel;
  Layout l;
  l.linear("phone.proj", c.feature_blocks.total(), d);
  l.embedding("phone.emb.token", c.phoneme_vocab, d);
  l.embedding("phone.emb.pos", c.max_phonemes, d);
  for (std::size_t i = 0; i < c.phone_blocks; ++i) l.block("phone.enc." + std::to_string(i), d, k);
  l.linear("phone.det.hidden", d, d);
  l.layer_norm("phone.det.ln", d);
  l.linear("phone.det.out", d, 1);
  l.linear("phone.diag", d, c.diag_vocab());
  l.linear("phone.score", d, 1);

  l.pool("word.pool_x", d, k);
  l.pool("word.pool_h", d, k);
  l.linear("word.proj", 2 * d, d);
  l.embedding("word.emb.token", c.word_vocab, d);
  l.embedding("word.emb.pos", c.max_words, d);
  for (std::size_t i = 0; i < c.word_blocks; ++i) l.block("word.enc." + std::to_string(i), d, k);
  for (std::size_t j = 0; j < ModelConfig::kWordAspects; ++j) {
    l.conv("word.aspect." + std::to_string(j) + ".conv", k, d);
    l.linear("word.aspect." + std::to_string(j) + ".score", d, 1);
  }

  l.zeros("utt.merge", {ModelConfig::kWordAspects});
  for (std::size_t j = 0; j < 3; ++j) l.conv("utt.dc." + std::to_string(j), k, d);
  l.linear("utt.proj", 3 * d, d);
  for (std::size_t i = 0; i < c.utt_blocks; ++i) l.block("utt.enc." + std::to_string(i), d, k);
  for (std::size_t j = 0; j < ModelConfig::kUttAspects; ++j) l.pool("utt.pool." + std::to_string(j), d, k);
  l.linear("utt.ssl", c.feature_blocks.ssl, d);
  for (std::size_t j = 0; j < ModelConfig::kUttAspects; ++j) l.linear("utt.score." + std::to_string(j), d, 1);

  l.linear("conpco.speech", d, d);
  l.linear("conpco.text", d, d);
  return l;
}

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t v : s) n *= v;
  return n;
}

Var linear(const BoundParams& p, const std::string& name, const Var& x) {
  return add_bias(matmul(x, p[name + ".w"]), p[name + ".b"]);
}

Var conv(const BoundParams& p, const std::string& name, const Var& x) {
  return add_bias(depthwise_conv1d(x, p[name + ".k"]), p[name + ".b"]);
}

Var layer_norm(const BoundParams& p, const std::string& name, const Var& x) {
  return layer_norm_rows(x, p[name + ".gamma"], p[name + ".beta"]);
}

Var dropout(const Var& x, const ForwardOptions& opts) {
  const double rate = opts.dropout;
  if (!opts.training || opts.rng == nullptr || rate <= 0.0) return x;
  Array keep(x.shape());
  const double kept_scale = 1.0 / (1.0 - rate);
  for (double& v : keep.data()) v = opts.rng->bernoulli(rate) ? 0.0 : kept_scale;
  return mul(x, x.tape()->constant(std::move(keep)));
}

std::vector<std::vector<std::size_t>> word_spans(const UtteranceInput& in) {
  std::vector<std::vector<std::size_t>> spans(in.num_words());
  for (std::size_t t = 0; t < in.length(); ++t) {
    if (!in.mask[t]) continue;
    require(in.word_index[t] < spans.size(), "word index out of range at position " + std::to_string(t));
    spans[in.word_index[t]].push_back(t);
  }
  for (std::size_t m = 0; m < spans.size(); ++m) require(!spans[m].empty(), "word " + std::to_string(m) + " has no phonemes");
  return spans;
}

std::vector<std::size_t> valid_rows(const UtteranceInput& in) {
  std::vector<std::size_t> rows;
  for (std::size_t t = 0; t < in.length(); ++t)
    if (in.mask[t]) rows.push_back(t);
  return rows;
}

}  // namespace

// ---- config, vocab, params -------------------------------------------------

void ModelConfig::validate() const {
  require(d_model > 0, "d_model must be positive");
  require(heads == 1, "only single-head attention is supported");
  require(phone_blocks > 0 && word_blocks > 0 && utt_blocks > 0, "each level needs at least one block");
  require(conv_kernel % 2 == 1, "conv kernel must be odd");
  require(phoneme_vocab > 0, "empty phoneme inventory");
  require(word_vocab > 0, "word vocabulary must hold the OOV token");
  require(feature_blocks.ssl > 0, "the SSL feature block is required");
  require(max_phonemes > 0 && max_words > 0, "positional tables must be nonempty");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
}

WordVocab::WordVocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty() || tokens_[0] != kOov) throw std::invalid_argument("word vocab: first token must be " + std::string(kOov));
  for (std::size_t i = 0; i < tokens_.size(); ++i)
    if (!index_.emplace(tokens_[i], i).second) throw std::invalid_argument("word vocab: duplicate token '" + tokens_[i] + "'");
}

WordVocab WordVocab::build(const corpus::Corpus& corpus, std::size_t min_count, std::size_t max_size) {
  std::map<std::string, std::size_t> counts;
  for (const auto& u : corpus.utterances)
    for (const auto& w : u.words) ++counts[w.text];
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [text, n] : counts)
    if (n >= min_count && text != kOov) ranked.emplace_back(text, n);
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens{std::string(kOov)};
  for (auto& [text, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(text);
  }
  return WordVocab(std::move(tokens));
}

std::size_t WordVocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? 0 : it->second;
}

void ModelParams::add(std::string name, Array value) {
  if (!index_.emplace(name, names_.size()).second) throw std::invalid_argument("params: duplicate name " + name);
  names_.push_back(std::move(name));
  arrays_.push_back(std::move(value));
}

const Array& ModelParams::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("params: no parameter named " + std::string(name));
  return arrays_[it->second];
}

Array& ModelParams::at(std::string_view name) {
  return const_cast<Array&>(static_cast<const ModelParams&>(*this).at(name));
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Array& a : arrays_) n += a.size();
  return n;
}

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams params;
  const Layout l = layout(config);
  for (const ParamSpec& s : l.specs()) {
    Array a(s.shape);
    switch (s.init) {
      case Init::kFanIn: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.fan_in));
        for (double& v : a.data()) v = rng.uniform(-bound, bound);
        break;
      }
      case Init::kEmbedding:
        for (double& v : a.data()) v = rng.normal(0.0, 0.02);
        break;
      case Init::kOnes:
        for (double& v : a.data()) v = 1.0;
        break;
      case Init::kZeros:
        break;
    }
    // Values are kept 32-bit representable so checkpoints store them exactly.
    for (double& v : a.data()) v = static_cast<double>(static_cast<float>(v));
    params.add(s.name, std::move(a));
  }
  return params;
}

std::size_t parameter_count(const ModelConfig& config) {
  std::size_t n = 0;
  const Layout l = layout(config);
  for (const ParamSpec& s : l.specs()) n += shape_size(s.shape);
  return n;
}

BoundParams::BoundParams(num::Tape& tape, const ModelParams& params) : tape_(&tape), params_(&params) {
  vars_.reserve(params.arrays().size());
  for (const Array& a : params.arrays()) vars_.push_back(tape.leaf(a));
}

Var BoundParams::operator[](std::string_view name) const {
  const Array& target = params_->at(name);
  return vars_[static_cast<std::size_t>(&target - params_->arrays().data())];
}

std::vector<Array> BoundParams::gradients(const num::Gradients& grads) const {
  std::vector<Array> out;
  out.reserve(vars_.size());
  for (const Var& v : vars_) out.push_back(grads.of(v));
  return out;
}

// ---- inputs ------------------------------------------------------------------

std::size_t UtteranceInput::valid_length() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }));
}

UtteranceInput make_input(const corpus::UtteranceRecord& record, const WordVocab& vocab, std::size_t pad_to) {
  const std::size_t n = record.phonemes.size();
  require(n > 0, "utterance " + record.id + " has no phonemes");
  require(!record.words.empty(), "utterance " + record.id + " has no words");
  const std::size_t T = std::max(n, pad_to);
  const std::size_t D = record.phonemes[0].features.size();
  require(D > 0, "utterance " + record.id + " has no features attached");

  UtteranceInput in;
  in.features = Array(Shape{T, D});
  in.canonical.assign(T, 0);
  in.word_index.assign(T, 0);
  in.mask.assign(T, 0);
  for (std::size_t t = 0; t < n; ++t) {
    const auto& seg = record.phonemes[t];
    require(seg.features.size() == D, "utterance " + record.id + ": ragged feature rows");
    for (std::size_t j = 0; j < D; ++j) in.features(t, j) = static_cast<double>(seg.features[j]);
    in.canonical[t] = seg.canonical;
    in.word_index[t] = seg.word_index;
    in.mask[t] = 1;
  }
  for (const auto& w : record.words) in.word_tokens.push_back(vocab.id(w.text));
  return in;
}

// ---- layers --------------------------------------------------------------------

Var branchformer_block(const BoundParams& p, const std::string& prefix, const Var& x, std::span<const std::uint8_t> mask,
                       const ForwardOptions& opts) {
  const Var a = layer_norm(p, prefix + ".ln_attn", x);
  const Var att = single_head_attention(linear(p, prefix + ".attn.q", a), linear(p, prefix + ".attn.k", a),
                                        linear(p, prefix + ".attn.v", a), mask);
  Var global = linear(p, prefix + ".ff2", gelu(linear(p, prefix + ".ff1", att)));
  global = dropout(global, opts);

  Var local = mask_rows(layer_norm(p, prefix + ".ln_conv", x), mask);
  local = gelu(linear(p, prefix + ".conv.pw", conv(p, prefix + ".conv.dw", local)));
  local = dropout(local, opts);

  const std::vector<Var> branches{global, local};
  return add(x, linear(p, prefix + ".merge", concat_cols(branches)));
}

Var attention_pool(const BoundParams& p, const std::string& prefix, const Var& x, std::span<const std::size_t> rows) {
  require(!rows.empty(), "attention pool over zero rows");
  const Var c = conv(p, prefix + ".conv", gather_rows(x, rows));
  const Var q = matmul(c, p[prefix + ".q.w"]);
  const Var k = matmul(c, p[prefix + ".k.w"]);
  return mean_rows(single_head_attention(q, k, c));
}

PhonemeStage forward_phoneme_stage(const BoundParams& p, const ModelConfig& cfg, const UtteranceInput& in,
                                   const ForwardOptions& opts) {
  const std::size_t T = in.length();
  require(T <= cfg.max_phonemes, "utterance longer than max_phonemes (" + std::to_string(T) + ")");
  require(in.features.cols() == cfg.feature_blocks.total(),
          "feature width " + std::to_string(in.features.cols()) + " does not match the config");
  for (std::size_t t = 0; t < T; ++t) require(in.canonical[t] < cfg.phoneme_vocab, "canonical id out of range");
  num::Tape& tape = p.tape();

  PhonemeStage s;
  s.fused = linear(p, "phone.proj", tape.constant(in.features));
  std::vector<std::size_t> positions(T);
  for (std::size_t t = 0; t < T; ++t) positions[t] = t;
  s.prompt = add(gather_rows(p["phone.emb.token"], in.canonical), gather_rows(p["phone.emb.pos"], positions));
  Var h = add(s.fused, s.prompt);
  for (std::size_t i = 0; i < cfg.phone_blocks; ++i) h = branchformer_block(p, "phone.enc." + std::to_string(i), h, in.mask, opts);
  s.repr = h;
  return s;
}

Var detect_head(const BoundParams& p, const Var& repr) {
  const Var h = layer_norm(p, "phone.det.ln", linear(p, "phone.det.hidden", repr));
  return sigmoid(linear(p, "phone.det.out", h));
}

Var diagnose_head(const BoundParams& p, const Var& repr) { return linear(p, "phone.diag", repr); }

WordStage forward_word_stage(const BoundParams& p, const ModelConfig& cfg, const PhonemeStage& phone,
                             const UtteranceInput& in, const ForwardOptions& opts) {
  const auto spans = word_spans(in);
  const std::size_t M = spans.size();
  require(M <= cfg.max_words, "utterance has more than max_words words");
  for (std::size_t tok : in.word_tokens) require(tok < cfg.word_vocab, "word token id out of range");

  std::vector<Var> from_x, from_h;
  for (const auto& rows : spans) {
    from_x.push_back(attention_pool(p, "word.pool_x", phone.fused, rows));
    from_h.push_back(attention_pool(p, "word.pool_h", phone.repr, rows));
  }
  const std::vector<Var> pooled{concat_rows(from_x), concat_rows(from_h)};
  std::vector<std::size_t> positions(M);
  for (std::size_t m = 0; m < M; ++m) positions[m] = m;
  const Var prompt = add(gather_rows(p["word.emb.token"], in.word_tokens), gather_rows(p["word.emb.pos"], positions));
  Var h = add(linear(p, "word.proj", concat_cols(pooled)), prompt);
  const Mask all(M, 1);
  for (std::size_t i = 0; i < cfg.word_blocks; ++i) h = branchformer_block(p, "word.enc." + std::to_string(i), h, all, opts);

  WordStage w;
  std::vector<Var> scores;
  for (std::size_t j = 0; j < ModelConfig::kWordAspects; ++j) {
    const std::string pre = "word.aspect." + std::to_string(j);
    w.aspect_repr[j] = conv(p, pre + ".conv", h);
    scores.push_back(linear(p, pre + ".score", w.aspect_repr[j]));
  }
  w.scores = concat_cols(scores);
  return w;
}

Var forward_utterance_stage(const BoundParams& p, const ModelConfig& cfg, const PhonemeStage& phone,
                            const WordStage& word, const UtteranceInput& in, const ForwardOptions& opts, Var* utt_repr) {
  num::Tape& tape = p.tape();
  const Var weights = softmax_rows(p["utt.merge"]);
  Var merged;
  for (std::size_t j = 0; j < ModelConfig::kWordAspects; ++j) {
    const std::size_t col[] = {j};
    const Var term = scale_by(word.aspect_repr[j], pick(weights, col));
    merged = merged.valid() ? add(merged, term) : term;
  }
  const Var expanded = gather_rows(merged, in.word_index);

  const std::vector<Var> streams{conv(p, "utt.dc.0", mask_rows(phone.fused, in.mask)),
                                 conv(p, "utt.dc.1", mask_rows(phone.repr, in.mask)),
                                 conv(p, "utt.dc.2", mask_rows(expanded, in.mask))};
  Var h = linear(p, "utt.proj", concat_cols(streams));
  for (std::size_t i = 0; i < cfg.utt_blocks; ++i) h = branchformer_block(p, "utt.enc." + std::to_string(i), h, in.mask, opts);
  if (utt_repr != nullptr) *utt_repr = h;

  const auto rows = valid_rows(in);
  const std::size_t off = cfg.feature_blocks.ssl_offset(), n_ssl = cfg.feature_blocks.ssl;
  Array ssl_mean(Shape{1, n_ssl});
  for (std::size_t t : rows)
    for (std::size_t j = 0; j < n_ssl; ++j) ssl_mean[j] += in.features(t, off + j);
  for (double& v : ssl_mean.data()) v /= static_cast<double>(rows.size());
  const Var ssl = linear(p, "utt.ssl", tape.constant(std::move(ssl_mean)));

  std::vector<Var> scores;
  for (std::size_t j = 0; j < ModelConfig::kUttAspects; ++j) {
    const Var pooled = add(attention_pool(p, "utt.pool." + std::to_string(j), h, rows), ssl);
    scores.push_back(linear(p, "utt.score." + std::to_string(j), pooled));
  }
  return concat_cols(scores);
}

ForwardOutput forward(const BoundParams& p, const ModelConfig& cfg, const UtteranceInput& in,
                      const ForwardOptions& options) {
  require(in.mask.size() == in.length() && in.word_index.size() == in.length() && in.features.rows() == in.length(),
          "inconsistent utterance input");
  require(in.valid_length() > 0, "utterance has no real positions");
  ForwardOptions opts = options;
  opts.dropout = cfg.dropout;
  ForwardOutput out;
  out.phone = forward_phoneme_stage(p, cfg, in, opts);
  out.det_prob = detect_head(p, out.phone.repr);
  out.diag_logits = diagnose_head(p, out.phone.repr);
  out.phone_scores = linear(p, "phone.score", out.phone.repr);
  out.word = forward_word_stage(p, cfg, out.phone, in, opts);
  out.utt_scores = forward_utterance_stage(p, cfg, out.phone, out.word, in, opts, &out.utt_repr);
  out.mask = in.mask;
  return out;
}

// ---- inference ---------------------------------------------------------------

namespace {

MddDecision decide(std::span<const double> det_prob, const Array& logits, std::span<const std::size_t> canonical,
                   const std::function<double(std::size_t)>& threshold_for) {
  const std::size_t T = det_prob.size();
  if (canonical.size() != T || logits.rows() != T)
    throw num::ShapeError("infer_mdd: det_prob, logits and canonical must have one row per phoneme");
  if (logits.cols() < 2) throw num::ShapeError("infer_mdd: diagnosis vocabulary needs at least two entries");
  MddDecision d;
  d.flagged.resize(T);
  d.diagnosis.resize(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (canonical[t] >= logits.cols()) throw std::invalid_argument("infer_mdd: canonical id out of range");
    d.flagged[t] = det_prob[t] > threshold_for(canonical[t]) ? 1 : 0;
    if (!d.flagged[t]) {
      d.diagnosis[t] = canonical[t];
      continue;
    }
    std::size_t best = canonical[t] == 0 ? 1 : 0;
    for (std::size_t v = 0; v < logits.cols(); ++v)
      if (v != canonical[t] && logits(t, v) > logits(t, best)) best = v;
    d.diagnosis[t] = best;
  }
  return d;
}

}  // namespace

MddDecision infer_mdd(std::span<const double> det_prob, const Array& diag_logits, double threshold,
                      std::span<const std::size_t> canonical) {
  return decide(det_prob, diag_logits, canonical, [threshold](std::size_t) { return threshold; });
}

MddDecision infer_mdd(std::span<const double> det_prob, const Array& diag_logits,
                      std::span<const double> thresholds_by_phoneme, std::span<const std::size_t> canonical) {
  return decide(det_prob, diag_logits, canonical, [&](std::size_t k) {
    if (k >= thresholds_by_phoneme.size()) throw std::invalid_argument("infer_mdd: no threshold for phoneme " + std::to_string(k));
    return thresholds_by_phoneme[k];
  });
}

Prediction predict(const ModelParams& params, const ModelConfig& cfg, const WordVocab& vocab,
                   const corpus::UtteranceRecord& record) {
  num::Tape tape;
  const BoundParams p(tape, params);
  const UtteranceInput in = make_input(record, vocab);
  const ForwardOutput out = forward(p, cfg, in);
  Prediction pr;
  const std::size_t T = in.length();
  for (std::size_t t = 0; t < T; ++t) {
    pr.det_prob.push_back(out.det_prob.value()[t]);
    pr.phone_scores.push_back(out.phone_scores.value()[t]);
  }
  pr.diag_logits = out.diag_logits.value();
  pr.word_scores = out.word.scores.value();
  for (std::size_t j = 0; j < ModelConfig::kUttAspects; ++j) pr.utt_scores[j] = out.utt_scores.value()[j];
  pr.phone_repr = out.phone.repr.value();
  return pr;
}

}  // namespace muffin::net
