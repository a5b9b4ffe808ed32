#include "muffin/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace muffin::loss {

using num::Array;
using num::Shape;
using num::Var;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw LossError(what);
}

Var constant_like(const Var& v, Array a) { return v.tape()->constant(std::move(a)); }

Var zero_scalar(num::Tape& tape) { return tape.constant(Array::scalar(0.0)); }

Var linear(const Projection& p, const Var& x) { return add_bias(matmul(x, p.w), p.b); }

}  // namespace

void LossWeights::validate() const {
  require(phone >= 0.0 && word >= 0.0 && utt >= 0.0, "loss weights: APA weights must be nonnegative");
  require(lambda >= 0.0, "loss weights: lambda must be nonnegative");
  require(tau > 0.0, "loss weights: tau must be positive");
  require(ordinal_c >= 2.0, "loss weights: ordinal constant must be at least the top phoneme score (2)");
  require(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0, "loss weights: alpha, beta >= 0 with alpha + beta > 0");
  require(sigma >= 0.0, "loss weights: sigma must be nonnegative");
}

// ---- APA ------------------------------------------------------------------------

Var granularity_loss(const ScoreBlock& block, double weight) {
  const Array& p = block.pred.value();
  require(p.rows() == block.gold.rows() && p.cols() == block.gold.cols() && p.size() == block.gold.size(),
          "apa_loss: prediction shape " + num::shape_string(p.shape()) + " vs gold " +
              num::shape_string(block.gold.shape()));
  require(block.mask.empty() || block.mask.size() == p.rows(), "apa_loss: mask length mismatch");
  std::size_t kept = p.rows();
  if (!block.mask.empty()) kept = static_cast<std::size_t>(std::count_if(block.mask.begin(), block.mask.end(), [](auto m) { return m != 0; }));
  require(kept > 0, "apa_loss: empty mask");

  Array gold = block.gold;
  if (gold.shape() != p.shape()) gold = Array(p.shape(), std::vector<double>(block.gold.data().begin(), block.gold.data().end()));
  Var diff = sub(block.pred, constant_like(block.pred, std::move(gold)));
  if (!block.mask.empty()) diff = mask_rows(diff, block.mask);
  return scale(sum(square(diff)), weight / (static_cast<double>(kept) * static_cast<double>(p.cols())));
}

ApaTerms apa_loss(const std::optional<ScoreBlock>& phone, const std::optional<ScoreBlock>& word,
                  const std::optional<ScoreBlock>& utt, const LossWeights& weights) {
  ApaTerms t;
  if (phone) t.phone = granularity_loss(*phone, weights.phone);
  if (word) t.word = granularity_loss(*word, weights.word);
  if (utt) t.utt = granularity_loss(*utt, weights.utt);
  return t;
}

// ---- MDD ------------------------------------------------------------------------

MddTerms mdd_loss(const Var& det_prob, const Var& diag_log_probs, std::span<const int> gold_error,
                  std::span<const std::size_t> gold_pronounced, std::span<const std::uint8_t> mask) {
  const Array& P = det_prob.value();
  const Array& L = diag_log_probs.value();
  const std::size_t T = P.size();
  require(gold_error.size() == T && gold_pronounced.size() == T && L.rows() == T,
          "mdd_loss: one label per position required");
  require(mask.empty() || mask.size() == T, "mdd_loss: mask length mismatch");

  Array pos(P.shape()), neg(P.shape());
  Array keep(Shape{T});
  for (std::size_t t = 0; t < T; ++t) {
    require(gold_error[t] == 0 || gold_error[t] == 1, "mdd_loss: error state must be 0 or 1");
    require(gold_pronounced[t] < L.cols(), "mdd_loss: gold phoneme id " + std::to_string(gold_pronounced[t]) +
                                               " outside the diagnosis vocabulary of " + std::to_string(L.cols()));
    const double m = mask.empty() || mask[t] ? 1.0 : 0.0;
    pos[t] = m * gold_error[t];
    neg[t] = m * (1 - gold_error[t]);
    keep[t] = m;
  }
  const Var log_p = log_clamped(det_prob);
  const Var log_q = log_clamped(affine(det_prob, -1.0, 1.0));
  const Var ll = add(mul(log_p, constant_like(det_prob, std::move(pos))), mul(log_q, constant_like(det_prob, std::move(neg))));
  MddTerms out;
  out.det = scale(sum(ll), -1.0);
  out.diag = scale(sum(mul(pick(diag_log_probs, gold_pronounced), constant_like(diag_log_probs, std::move(keep)))), -1.0);
  return out;
}

// ---- ConPCO ---------------------------------------------------------------------

CentroidPairs build_centroid_pairs(const Var& phone_repr, const Var& prompt, std::span<const double> accuracy,
                                   std::span<const std::size_t> phoneme_ids, const Projection& speech_proj,
                                   const Projection& text_proj) {
  const std::size_t N = phone_repr.value().rows();
  require(N > 0, "build_centroid_pairs: empty batch");
  require(prompt.value().rows() == N && accuracy.size() == N && phoneme_ids.size() == N,
          "build_centroid_pairs: inputs must have one row per phoneme");
  const Var speech = linear(speech_proj, phone_repr);
  const Var text = linear(text_proj, prompt);

  CentroidPairs pairs;
  pairs.categories.assign(phoneme_ids.begin(), phoneme_ids.end());
  std::sort(pairs.categories.begin(), pairs.categories.end());
  pairs.categories.erase(std::unique(pairs.categories.begin(), pairs.categories.end()), pairs.categories.end());

  pairs.row_pair.resize(N);
  std::vector<Var> zs, zt;
  for (std::size_t c = 0; c < pairs.categories.size(); ++c) {
    const std::size_t k = pairs.categories[c];
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < N; ++i)
      if (phoneme_ids[i] == k) {
        best = std::max(best, accuracy[i]);
        pairs.row_pair[i] = c;
      }
    std::vector<std::size_t> top;
    for (std::size_t i = 0; i < N; ++i)
      if (phoneme_ids[i] == k && accuracy[i] == best) top.push_back(i);
    zs.push_back(mean_rows(gather_rows(speech, top)));
    zt.push_back(mean_rows(gather_rows(text, top)));
  }
  pairs.speech = normalize_rows(concat_rows(zs));
  pairs.text = normalize_rows(concat_rows(zt));
  pairs.speech_rows = normalize_rows(speech);
  return pairs;
}

Var contrastive_term(const Var& speech, const Var& text, double tau) {
  require(tau > 0.0, "contrastive_term: tau must be positive");
  const std::size_t M = speech.value().rows();
  require(M >= 1 && text.value().rows() == M, "contrastive_term: need matching nonempty pair sets");
  const Var sim = scale(matmul(normalize_rows(speech), transpose(normalize_rows(text))), 1.0 / tau);
  std::vector<std::size_t> diag(M);
  for (std::size_t i = 0; i < M; ++i) diag[i] = i;
  const Var p2t = mean(pick(log_softmax_rows(sim), diag));
  const Var t2p = mean(pick(log_softmax_rows(transpose(sim)), diag));
  return scale(add(p2t, t2p), -1.0);
}

Var phonemic_characteristic_term(const Var& speech) {
  const std::size_t M = speech.value().rows();
  if (M < 2) return zero_scalar(*speech.tape());
  std::vector<std::size_t> left, right;
  for (std::size_t i = 0; i < M; ++i)
    for (std::size_t j = 0; j < M; ++j)
      if (i != j) {
        left.push_back(i);
        right.push_back(j);
      }
  const Var dist = row_norms(sub(gather_rows(speech, left), gather_rows(speech, right)));
  return scale(sum(dist), -1.0 / static_cast<double>(M * (M - 1)));
}

Var ordinal_term(const Var& rows, const Var& centroids, std::span<const double> accuracy, double c) {
  const std::size_t N = rows.value().rows();
  require(N > 0, "ordinal_term: no rows");
  require(centroids.value().rows() == N && accuracy.size() == N, "ordinal_term: one centroid and score per row");
  Array w(Shape{N});
  for (std::size_t i = 0; i < N; ++i) w[i] = std::abs(c - accuracy[i]);
  const Var dist = row_norms(sub(rows, centroids));
  return scale(sum(mul(dist, constant_like(rows, std::move(w)))), 1.0 / static_cast<double>(N));
}

// ---- PhnVar ---------------------------------------------------------------------

double phnvar_scale(double qf, double df, double alpha, double beta) {
  require(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0, "phnvar_scale: need alpha, beta >= 0 and alpha + beta > 0");
  require(std::isfinite(qf) && std::isfinite(df) && qf >= 0.0 && df >= 0.0, "phnvar_scale: factors must be finite and nonnegative");
  if (beta == 0.0) return qf;
  if (alpha == 0.0) return df;
  return std::exp((alpha * std::log(qf) + beta * std::log(df)) / (alpha + beta));
}

std::vector<double> phnvar_scale(std::span<const double> qf, std::span<const double> df, double alpha, double beta) {
  require(!qf.empty(), "phnvar_scale: quantity factors missing");
  require(qf.size() == df.size(), "phnvar_scale: quantity and difficulty factors differ in length");
  std::vector<double> s(qf.size());
  for (std::size_t k = 0; k < qf.size(); ++k) s[k] = phnvar_scale(qf[k], df[k], alpha, beta);
  return s;
}

std::vector<double> phnvar_vocab_scales(std::span<const double> phoneme_scales) {
  require(!phoneme_scales.empty(), "phnvar_vocab_scales: no phoneme scales");
  std::vector<double> s(phoneme_scales.begin(), phoneme_scales.end());
  const double floor = *std::min_element(s.begin(), s.end());
  s.push_back(floor);  // DEL
  s.push_back(floor);  // UNK
  return s;
}

Array phnvar_noise(std::size_t rows, std::span<const double> class_scales, double sigma, Rng& rng) {
  require(sigma >= 0.0, "phnvar_noise: sigma must be nonnegative");
  const std::size_t V = class_scales.size();
  Array noise(Shape{rows, V});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < V; ++k) noise(r, k) = rng.normal(0.0, sigma) * class_scales[k];
  return noise;
}

Array phnvar_perturb(const Array& logits, std::span<const double> class_scales, double sigma, Rng& rng, Mode mode) {
  require(mode == Mode::kTrain, "phnvar_perturb: called in eval mode");
  require(logits.cols() == class_scales.size(), "phnvar_perturb: one scale per logit column required");
  Array out = logits;
  const Array noise = phnvar_noise(logits.rows(), class_scales, sigma, rng);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
  return out;
}

Var phnvar_perturb(const Var& logits, std::span<const double> class_scales, double sigma, Rng& rng, Mode mode) {
  require(mode == Mode::kTrain, "phnvar_perturb: called in eval mode");
  const Array& g = logits.value();
  require(g.cols() == class_scales.size(), "phnvar_perturb: one scale per logit column required");
  Array noise = phnvar_noise(g.rows(), class_scales, sigma, rng);
  if (noise.shape() != g.shape()) noise = Array(g.shape(), std::vector<double>(noise.data().begin(), noise.data().end()));
  return add(logits, constant_like(logits, std::move(noise)));
}

// ---- total --------------------------------------------------------------------------

std::string_view to_string(PhnVarMode m) {
  switch (m) {
    case PhnVarMode::kOff: return "off";
    case PhnVarMode::kFull: return "full";
    case PhnVarMode::kNoDf: return "no_df";
    case PhnVarMode::kNoQf: return "no_qf";
  }
  return "off";
}

PhnVarMode phnvar_mode_from_string(std::string_view s) {
  for (PhnVarMode m : {PhnVarMode::kOff, PhnVarMode::kFull, PhnVarMode::kNoDf, PhnVarMode::kNoQf})
    if (to_string(m) == s) return m;
  throw LossError("unknown PhnVar mode '" + std::string(s) + "' (expected off, full, no_df or no_qf)");
}

const std::vector<std::string>& LossComponents::names() {
  static const std::vector<std::string> n{"apa_phone", "apa_word", "apa_utt", "det", "diag", "con", "pc", "ordinal"};
  return n;
}

std::map<std::string, double> LossComponents::as_map() const {
  return {{"apa_phone", apa_phone}, {"apa_word", apa_word}, {"apa_utt", apa_utt}, {"det", det}, {"diag", diag},
          {"con", con},             {"pc", pc},             {"ordinal", ordinal}, {"total", total}};
}

LossComponents& LossComponents::operator+=(const LossComponents& o) {
  apa_phone += o.apa_phone;
  apa_word += o.apa_word;
  apa_utt += o.apa_utt;
  det += o.det;
  diag += o.diag;
  con += o.con;
  pc += o.pc;
  ordinal += o.ordinal;
  total += o.total;
  return *this;
}

LossComponents LossComponents::scaled(double c) const {
  LossComponents r = *this;
  for (double* v : {&r.apa_phone, &r.apa_word, &r.apa_utt, &r.det, &r.diag, &r.con, &r.pc, &r.ordinal, &r.total}) *v *= c;
  return r;
}

std::vector<double> phnvar_class_scales(const corpus::CorpusStats& stats, PhnVarMode mode, const LossWeights& w) {
  if (mode == PhnVarMode::kOff) return {};
  const std::vector<double> qf = stats.quantity_factors(), df = stats.difficulty_factors();
  double alpha = w.alpha, beta = w.beta;
  if (mode == PhnVarMode::kNoDf) beta = 0.0;
  if (mode == PhnVarMode::kNoQf) alpha = 0.0;
  if (alpha + beta <= 0.0) alpha = beta = 1.0;
  return phnvar_vocab_scales(phnvar_scale(qf, df, alpha, beta));
}

LossResult total_loss(const net::BoundParams& params, std::span<const BatchItem> batch, const LossWeights& weights,
                      const Toggles& toggles, std::span<const double> class_scales, Rng* rng, Mode mode) {
  weights.validate();
  require(!batch.empty(), "total_loss: empty batch");
  const bool phnvar = toggles.phnvar != PhnVarMode::kOff && mode == Mode::kTrain;
  if (phnvar) require(rng != nullptr && !class_scales.empty(), "total_loss: PhnVar needs class scales and an rng");

  std::vector<Var> phone_pred, word_pred, utt_pred, reprs, prompts;
  std::vector<double> phone_gold, word_gold, utt_gold, accuracy;
  std::vector<std::size_t> ids;
  num::Mask phone_mask;
  std::vector<Var> det_terms, diag_terms;

  for (const BatchItem& item : batch) {
    const corpus::UtteranceRecord& r = *item.record;
    const net::ForwardOutput& out = *item.output;
    const std::size_t T = out.mask.size();
    require(T >= r.phonemes.size(), "total_loss: output shorter than the record");
    std::vector<std::size_t> real;
    for (std::size_t t = 0; t < T; ++t)
      if (out.mask[t]) real.push_back(t);
    require(real.size() == r.phonemes.size(), "total_loss: mask does not match the record length");

    phone_pred.push_back(out.phone_scores);
    for (std::size_t t = 0; t < T; ++t) {
      phone_mask.push_back(out.mask[t]);
      phone_gold.push_back(t < r.phonemes.size() ? r.phonemes[t].accuracy : 0.0);
    }
    word_pred.push_back(out.word.scores);
    for (const auto& w : r.words) word_gold.insert(word_gold.end(), {w.accuracy, w.stress, w.total});
    utt_pred.push_back(out.utt_scores);
    const auto u = r.scores.as_array();
    utt_gold.insert(utt_gold.end(), u.begin(), u.end());

    if (toggles.mdd) {
      std::vector<int> e(T, 0);
      std::vector<std::size_t> y(T, 0);
      for (std::size_t t = 0; t < r.phonemes.size(); ++t) {
        e[real[t]] = r.phonemes[t].error_state;
        y[real[t]] = r.phonemes[t].pronounced;
      }
      Var logits = out.diag_logits;
      if (phnvar) logits = phnvar_perturb(logits, class_scales, weights.sigma, *rng, mode);
      const MddTerms m = mdd_loss(out.det_prob, log_softmax_rows(logits), e, y, out.mask);
      det_terms.push_back(m.det);
      diag_terms.push_back(m.diag);
    }

    reprs.push_back(gather_rows(out.phone.repr, real));
    prompts.push_back(gather_rows(out.phone.prompt, real));
    for (const auto& seg : r.phonemes) {
      accuracy.push_back(seg.accuracy);
      ids.push_back(seg.canonical);
    }
  }

  LossResult res;
  std::vector<Var> parts;
  auto take = [&](const Var& v, double& slot) {
    slot = v.value().item();
    parts.push_back(v);
  };

  std::optional<ScoreBlock> pb, wb, ub;
  auto block = [](std::vector<Var>& preds, std::vector<double>& gold, std::size_t cols, num::Mask mask) {
    const Var pred = concat_rows(preds);
    return ScoreBlock{pred, Array(Shape{pred.value().rows(), cols}, std::move(gold)), std::move(mask)};
  };
  if (toggles.apa_phone) pb = block(phone_pred, phone_gold, 1, phone_mask);
  if (toggles.apa_word) wb = block(word_pred, word_gold, corpus::kWordAspects, {});
  if (toggles.apa_utt) ub = block(utt_pred, utt_gold, corpus::kUtteranceAspects, {});
  const ApaTerms apa = apa_loss(pb, wb, ub, weights);
  if (apa.phone) take(*apa.phone, res.components.apa_phone);
  if (apa.word) take(*apa.word, res.components.apa_word);
  if (apa.utt) take(*apa.utt, res.components.apa_utt);

  if (toggles.mdd) {
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    take(scale(sum(concat_rows(det_terms)), inv_b), res.components.det);
    take(scale(sum(concat_rows(diag_terms)), inv_b), res.components.diag);
  }

  if (weights.lambda > 0.0 && (toggles.con || toggles.pc || toggles.ordinal)) {
    const CentroidPairs pairs = build_centroid_pairs(
        concat_rows(reprs), concat_rows(prompts), accuracy, ids, Projection{params["conpco.speech.w"], params["conpco.speech.b"]},
        Projection{params["conpco.text.w"], params["conpco.text.b"]});
    if (toggles.con) take(scale(contrastive_term(pairs.speech, pairs.text, weights.tau), weights.lambda), res.components.con);
    if (toggles.pc) take(scale(phonemic_characteristic_term(pairs.speech), weights.lambda), res.components.pc);
    if (toggles.ordinal)
      take(scale(ordinal_term(pairs.speech_rows, gather_rows(pairs.speech, pairs.row_pair), accuracy, weights.ordinal_c),
                 weights.lambda),
           res.components.ordinal);
  }

  require(!parts.empty(), "total_loss: every loss component is disabled");
  Var total = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  res.total = total;
  res.components.total = total.value().item();
  return res;
}

}  // namespace muffin::loss
