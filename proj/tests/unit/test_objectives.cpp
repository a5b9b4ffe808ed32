#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_suite.hpp"
#include "muffin/objectives.hpp"
#include "test_support.hpp"

using namespace muffin;
using namespace muffin::loss;
using num::Array;
using num::Tape;
using num::Var;

namespace {

constexpr double kGradTol = 1e-4;

Projection identity_projection(Tape& t, std::size_t d) {
  Array w(num::Shape{d, d});
  for (std::size_t i = 0; i < d; ++i) w(i, i) = 1.0;
  return {t.constant(std::move(w)), t.constant(Array(num::Shape{d}))};
}

Array rows_of(std::initializer_list<std::vector<double>> rows) {
  const std::size_t r = rows.size(), c = rows.begin()->size();
  std::vector<double> data;
  for (const auto& row : rows) data.insert(data.end(), row.begin(), row.end());
  return Array(num::Shape{r, c}, std::move(data));
}

}  // namespace

// ---- APA ------------------------------------------------------------------------------

TEST(Apa, PerfectPredictionIsZero) {
  Tape t;
  const Array g = rows_of({{1.0, 2.0}, {0.5, 0.0}});
  const ScoreBlock b{t.constant(g), g, {}};
  EXPECT_EQ(granularity_loss(b, 3.0).value().item(), 0.0);
}

TEST(Apa, SinglePhonemeFixture) {
  Tape t;
  const ScoreBlock phone{t.constant(rows_of({{1.0}})), rows_of({{2.0}}), {}};
  const auto terms = apa_loss(phone, std::nullopt, std::nullopt, LossWeights{});
  ASSERT_TRUE(terms.phone.has_value());
  EXPECT_FALSE(terms.word.has_value());
  EXPECT_EQ(terms.phone->value().item(), 3.0);
}

TEST(Apa, AveragesOverAspects) {
  Tape t;
  // errors 1 and 3 on one row of two aspects: (1 + 9) / 2
  const ScoreBlock b{t.constant(rows_of({{1.0, 5.0}})), rows_of({{2.0, 2.0}}), {}};
  EXPECT_DOUBLE_EQ(granularity_loss(b, 1.0).value().item(), 5.0);
}

TEST(Apa, PaddedRowsAreIgnored) {
  Tape t;
  const num::Mask mask{1, 0};
  const ScoreBlock a{t.constant(rows_of({{1.0}, {7.0}})), rows_of({{2.0}, {0.0}}), mask};
  const ScoreBlock b{t.constant(rows_of({{1.0}, {-40.0}})), rows_of({{2.0}, {9.0}}), mask};
  EXPECT_EQ(granularity_loss(a, 3.0).value().item(), granularity_loss(b, 3.0).value().item());
  const num::Mask none{0, 0};
  EXPECT_THROW(granularity_loss(ScoreBlock{a.pred, a.gold, none}, 1.0), LossError);
}

// ---- MDD ------------------------------------------------------------------------------

TEST(Mdd, HalfProbabilityCostsLnTwo) {
  Tape t;
  const Var p = t.constant(rows_of({{0.5}}));
  const Var lp = log_softmax_rows(t.constant(Array(num::Shape{1, 41})));
  for (int e : {0, 1}) {
    const std::vector<int> gold{e};
    const std::vector<std::size_t> y{7};
    const auto m = mdd_loss(p, lp, gold, y, {});
    EXPECT_NEAR(m.det.value().item(), std::log(2.0), 1e-12);
    EXPECT_NEAR(m.diag.value().item(), std::log(41.0), 1e-12);
  }
}

TEST(Mdd, PerfectDetectorCostsNothing) {
  Tape t;
  const Var p = t.constant(rows_of({{1.0}, {0.0}}));
  const Var lp = log_softmax_rows(t.constant(Array(num::Shape{2, 4})));
  const std::vector<int> gold{1, 0};
  const std::vector<std::size_t> y{0, 1};
  EXPECT_EQ(mdd_loss(p, lp, gold, y, {}).det.value().item(), 0.0);
}

TEST(Mdd, MaskedPositionsAndRangeChecks) {
  Tape t;
  const Var p = t.constant(rows_of({{0.5}, {0.01}}));
  const Var lp = log_softmax_rows(t.constant(Array(num::Shape{2, 4})));
  const std::vector<int> gold{0, 1};
  const std::vector<std::size_t> y{1, 2};
  const num::Mask mask{1, 0};
  const auto m = mdd_loss(p, lp, gold, y, mask);
  EXPECT_NEAR(m.det.value().item(), std::log(2.0), 1e-12);
  EXPECT_NEAR(m.diag.value().item(), std::log(4.0), 1e-12);
  const std::vector<std::size_t> bad{1, 4};
  EXPECT_THROW(mdd_loss(p, lp, gold, bad, mask), LossError);
}

// ---- ConPCO ------------------------------------------------------------------------------

TEST(ConPco, SinglePairHasNoContrast) {
  Tape t;
  const Var z = t.constant(rows_of({{0.3, 0.4}}));
  EXPECT_NEAR(contrastive_term(z, t.constant(rows_of({{-1.0, 2.0}})), 1.0).value().item(), 0.0, 1e-15);
}

TEST(ConPco, OrthonormalFixture) {
  Tape t;
  const Var z = t.constant(rows_of({{1.0, 0.0}, {0.0, 1.0}}));
  const double expected = 2.0 * std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(contrastive_term(z, z, 1.0).value().item(), expected, 1e-9);
  EXPECT_NEAR(expected, 0.62652, 1e-5);
  const Var swapped = t.constant(rows_of({{0.0, 1.0}, {1.0, 0.0}}));
  EXPECT_GT(contrastive_term(z, swapped, 1.0).value().item(), contrastive_term(z, z, 1.0).value().item());
}

TEST(ConPco, ContrastIsScaleInvariant) {
  Rng rng(3);
  Tape t;
  Array a = fixtures::random_array({4, 3}, rng), b = fixtures::random_array({4, 3}, rng);
  const double base = contrastive_term(t.constant(a), t.constant(b), 0.7).value().item();
  const double factors[] = {2.0, 0.1, 5.0, 1.3};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 3; ++j) a(r, j) *= factors[r];
  EXPECT_NEAR(contrastive_term(t.constant(a), t.constant(b), 0.7).value().item(), base, 1e-12);
  EXPECT_GE(base, 0.0);
}

TEST(ConPco, CharacteristicTermFixtures) {
  Tape t;
  EXPECT_EQ(phonemic_characteristic_term(t.constant(rows_of({{1.0, 2.0}, {1.0, 2.0}}))).value().item(), 0.0);
  EXPECT_NEAR(phonemic_characteristic_term(t.constant(rows_of({{1.0, 0.0}, {0.0, 1.0}}))).value().item(), -std::sqrt(2.0),
              1e-12);
  EXPECT_EQ(phonemic_characteristic_term(t.constant(rows_of({{1.0, 0.0}}))).value().item(), 0.0);
  Rng rng(4);
  const Array z = fixtures::random_array({3, 4}, rng);
  Array z2 = z;
  for (double& v : z2.data()) v *= 2.0;
  EXPECT_NEAR(phonemic_characteristic_term(t.constant(z2)).value().item(),
              2.0 * phonemic_characteristic_term(t.constant(z)).value().item(), 1e-12);
  EXPECT_LE(phonemic_characteristic_term(t.constant(z)).value().item(), 0.0);
}

TEST(ConPco, OrdinalTermFixtures) {
  Tape t;
  const Var c = t.constant(rows_of({{0.0, 0.0}}));
  const std::vector<double> one{1.0};
  EXPECT_DOUBLE_EQ(ordinal_term(t.constant(rows_of({{2.0, 0.0}})), c, one, 3.0).value().item(), 4.0);
  EXPECT_EQ(ordinal_term(c, c, one, 3.0).value().item(), 0.0);
  // lower scores pull harder: weight 3 at y = 0, weight 1 at y = 2
  const std::vector<double> zero{0.0}, two{2.0};
  const Var r = t.constant(rows_of({{1.0, 0.0}}));
  EXPECT_DOUBLE_EQ(ordinal_term(r, c, zero, 3.0).value().item(), 3.0);
  EXPECT_DOUBLE_EQ(ordinal_term(r, c, two, 3.0).value().item(), 1.0);
}

TEST(ConPco, CentroidsUseTopScoredInstances) {
  Tape t;
  const Projection id = identity_projection(t, 2);
  const Var h = t.constant(rows_of({{3.0, 4.0}, {0.0, -1.0}, {1.0, 1.0}}));
  const Var e = t.constant(rows_of({{1.0, 0.0}, {0.0, 2.0}, {5.0, 5.0}}));
  const std::vector<double> acc{2.0, 1.0, 1.5};
  const std::vector<std::size_t> ids{4, 4, 1};
  const auto pairs = build_centroid_pairs(h, e, acc, ids, id, id);
  EXPECT_EQ(pairs.categories, (std::vector<std::size_t>{1, 4}));
  EXPECT_EQ(pairs.row_pair, (std::vector<std::size_t>{1, 1, 0}));
  const Array& zs = pairs.speech.value();
  EXPECT_NEAR(zs(1, 0), 0.6, 1e-15);  // only the 2.0-scored row of category 4
  EXPECT_NEAR(zs(1, 1), 0.8, 1e-15);
  EXPECT_NEAR(pairs.text.value()(1, 0), 1.0, 1e-15);
  EXPECT_NEAR(zs(0, 0), std::sqrt(0.5), 1e-15);
}

TEST(ConPco, DuplicatedInstanceMatchesSingleton) {
  Tape t;
  Rng rng(5);
  const Projection p{t.constant(fixtures::random_array({3, 3}, rng)), t.constant(fixtures::random_array({3}, rng))};
  const Array h = fixtures::random_array({1, 3}, rng), e = fixtures::random_array({1, 3}, rng);
  const std::vector<double> acc1{2.0}, acc2{2.0, 2.0};
  const std::vector<std::size_t> ids1{0}, ids2{0, 0};
  const auto single = build_centroid_pairs(t.constant(h), t.constant(e), acc1, ids1, p, p);
  const std::vector<Var> hh{t.constant(h), t.constant(h)}, ee{t.constant(e), t.constant(e)};
  const auto dup = build_centroid_pairs(num::concat_rows(hh), num::concat_rows(ee), acc2, ids2, p, p);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(single.speech.value()[j], dup.speech.value()[j], 1e-15);
    EXPECT_NEAR(single.text.value()[j], dup.text.value()[j], 1e-15);
  }
}

// ---- PhnVar ------------------------------------------------------------------------------

TEST(PhnVar, ScaleFixtures) {
  EXPECT_EQ(phnvar_scale(1.0, 1.0, 1.0, 1.0), 1.0);
  EXPECT_NEAR(phnvar_scale(0.25, 0.04, 1.0, 1.0), 0.1, 1e-12);
  EXPECT_EQ(phnvar_scale(0.37, 0.2, 1.0, 0.0), 0.37);
  EXPECT_EQ(phnvar_scale(0.37, 0.2, 0.0, 1.0), 0.2);
  EXPECT_THROW(phnvar_scale(0.5, 0.5, 0.0, 0.0), LossError);
  EXPECT_THROW(phnvar_scale(std::vector<double>{0.5}, std::vector<double>{}, 1.0, 1.0), LossError);
}

TEST(PhnVar, ReservedClassesGetTheMinimum) {
  const std::vector<double> s{0.5, 0.2, 1.0};
  EXPECT_EQ(phnvar_vocab_scales(s), (std::vector<double>{0.5, 0.2, 1.0, 0.2, 0.2}));
}

TEST(PhnVar, ZeroSigmaIsIdentity) {
  Rng rng(1);
  const Array g = fixtures::random_array({5, 4}, rng);
  const std::vector<double> s{0.3, 1.0, 0.1, 0.7};
  EXPECT_EQ(phnvar_perturb(g, s, 0.0, rng, Mode::kTrain), g);
}

TEST(PhnVar, EvalModeRejected) {
  Rng rng(1);
  const std::vector<double> s{1.0};
  EXPECT_THROW(phnvar_perturb(Array(num::Shape{1, 1}), s, 1.0, rng, Mode::kEval), LossError);
}

TEST(PhnVar, SeededReproducibility) {
  const std::vector<double> s{0.3, 1.0, 0.1};
  Rng a(7), b(7);
  const Array g(num::Shape{10, 3});
  EXPECT_EQ(phnvar_perturb(g, s, 1.5, a, Mode::kTrain), phnvar_perturb(g, s, 1.5, b, Mode::kTrain));
}

TEST(PhnVar, MonteCarloStatistics) {
  const std::vector<double> s{1.0, 0.5, 0.1};
  const double sigma = 0.8;
  const std::size_t n = 100000;
  Rng rng(2024);
  const Array noise = phnvar_noise(n, s, sigma, rng);
  std::vector<double> var(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    double m = 0, m2 = 0;
    for (std::size_t r = 0; r < n; ++r) {
      m += noise(r, k);
      m2 += noise(r, k) * noise(r, k);
    }
    m /= static_cast<double>(n);
    var[k] = m2 / static_cast<double>(n) - m * m;
    EXPECT_NEAR(std::sqrt(var[k]) / (sigma * s[k]), 1.0, 0.01) << "class " << k;
    EXPECT_LT(std::abs(m), 3.0 * sigma * s[k] / std::sqrt(static_cast<double>(n))) << "class " << k;
  }
  EXPECT_GT(var[0], var[1]);
  EXPECT_GT(var[1], var[2]);
}

TEST(PhnVar, ModeNamesRoundTrip) {
  for (PhnVarMode m : {PhnVarMode::kOff, PhnVarMode::kFull, PhnVarMode::kNoDf, PhnVarMode::kNoQf})
    EXPECT_EQ(phnvar_mode_from_string(to_string(m)), m);
  EXPECT_THROW(phnvar_mode_from_string("sometimes"), LossError);
}

TEST(PhnVar, ClassScalesFollowTheAblationMode) {
  const auto stats = corpus::compute_stats({"A", "B", "C"}, {900, 90, 10}, {90, 3, 5});
  const auto qf = stats.quantity_factors(), df = stats.difficulty_factors();
  const auto no_df = phnvar_class_scales(stats, PhnVarMode::kNoDf, {});
  const auto no_qf = phnvar_class_scales(stats, PhnVarMode::kNoQf, {});
  const auto full = phnvar_class_scales(stats, PhnVarMode::kFull, {});
  ASSERT_EQ(full.size(), 5u);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_EQ(no_df[k], qf[k]);
    EXPECT_EQ(no_qf[k], df[k]);
    EXPECT_NEAR(full[k], std::sqrt(qf[k] * df[k]), 1e-15);
  }
  EXPECT_TRUE(phnvar_class_scales(stats, PhnVarMode::kOff, {}).empty());
}

// ---- gradients of each term ---------------------------------------------------------------

TEST(TermGradients, Apa) {
  Rng rng(1);
  const Array gold = fixtures::random_array({4, 3}, rng);
  const num::Mask mask{1, 0, 1, 1};
  const auto f = [&](Tape&, const std::vector<Var>& v) { return granularity_loss(ScoreBlock{v[0], gold, mask}, 3.0); };
  EXPECT_LT(fixtures::gradient_check(f, {fixtures::random_array({4, 3}, rng)}), kGradTol);
}

TEST(TermGradients, DetectionAndDiagnosis) {
  Rng rng(2);
  const std::vector<int> e{1, 0, 0, 1};
  const std::vector<std::size_t> y{2, 0, 4, 1};
  const num::Mask mask{1, 1, 0, 1};
  const auto det = [&](Tape&, const std::vector<Var>& v) {
    return mdd_loss(num::sigmoid(v[0]), log_softmax_rows(v[1]), e, y, mask).det;
  };
  const auto diag = [&](Tape&, const std::vector<Var>& v) {
    return mdd_loss(num::sigmoid(v[0]), log_softmax_rows(v[1]), e, y, mask).diag;
  };
  const std::vector<Array> in{fixtures::random_array({4, 1}, rng), fixtures::random_array({4, 5}, rng)};
  EXPECT_LT(fixtures::gradient_check(det, in), kGradTol);
  EXPECT_LT(fixtures::gradient_check(diag, in), kGradTol);
}

TEST(TermGradients, ConPcoTerms) {
  Rng rng(3);
  const std::vector<double> acc{2.0, 1.0, 2.0, 0.5, 1.5, 2.0};
  const std::vector<std::size_t> ids{0, 0, 1, 2, 2, 3};
  const auto pairs_of = [&](const std::vector<Var>& v) {
    return build_centroid_pairs(v[0], v[1], acc, ids, Projection{v[2], v[3]}, Projection{v[4], v[5]});
  };
  const std::vector<Array> in{fixtures::random_array({6, 3}, rng), fixtures::random_array({6, 3}, rng),
                              fixtures::random_array({3, 3}, rng), fixtures::random_array({3}, rng),
                              fixtures::random_array({3, 3}, rng), fixtures::random_array({3}, rng)};
  const auto con = [&](Tape&, const std::vector<Var>& v) {
    const auto p = pairs_of(v);
    return contrastive_term(p.speech, p.text, 0.5);
  };
  const auto pc = [&](Tape&, const std::vector<Var>& v) { return phonemic_characteristic_term(pairs_of(v).speech); };
  const auto ord = [&](Tape&, const std::vector<Var>& v) {
    const auto p = pairs_of(v);
    return ordinal_term(p.speech_rows, num::gather_rows(p.speech, p.row_pair), acc, 3.0);
  };
  EXPECT_LT(fixtures::gradient_check(con, in), kGradTol);
  EXPECT_LT(fixtures::gradient_check(pc, in), kGradTol);
  EXPECT_LT(fixtures::gradient_check(ord, in), kGradTol);
}

// ---- total loss ------------------------------------------------------------------------------

class TotalLoss : public ::testing::Test {
 protected:
  fixtures::MicroBatch m = fixtures::make_micro_batch(5);
};

TEST_F(TotalLoss, ComponentsSumToTotal) {
  LossComponents c;
  const double total = fixtures::micro_batch_loss(m, m.params, Toggles{}, nullptr, &c);
  const auto map = c.as_map();
  double sum = 0;
  for (const auto& name : LossComponents::names()) sum += map.at(name);
  EXPECT_NEAR(sum, total, 1e-12);
  EXPECT_EQ(c.total, total);
}

TEST_F(TotalLoss, SignContract) {
  LossComponents c;
  fixtures::micro_batch_loss(m, m.params, Toggles{}, nullptr, &c);
  EXPECT_GE(c.apa_phone, 0.0);
  EXPECT_GE(c.apa_word, 0.0);
  EXPECT_GE(c.apa_utt, 0.0);
  EXPECT_GE(c.det, 0.0);
  EXPECT_GE(c.diag, 0.0);
  EXPECT_GE(c.con, 0.0);
  EXPECT_GE(c.ordinal, 0.0);
  EXPECT_LE(c.pc, 0.0);
}

TEST_F(TotalLoss, TogglesChangeOnlyTheirComponents) {
  LossComponents all;
  fixtures::micro_batch_loss(m, m.params, Toggles{}, nullptr, &all);
  const auto base = all.as_map();
  const std::vector<std::pair<std::string, std::function<void(Toggles&)>>> cases{
      {"apa_phone", [](Toggles& t) { t.apa_phone = false; }}, {"apa_word", [](Toggles& t) { t.apa_word = false; }},
      {"apa_utt", [](Toggles& t) { t.apa_utt = false; }},     {"con", [](Toggles& t) { t.con = false; }},
      {"pc", [](Toggles& t) { t.pc = false; }},               {"ordinal", [](Toggles& t) { t.ordinal = false; }},
  };
  for (const auto& [name, apply] : cases) {
    Toggles t;
    apply(t);
    LossComponents c;
    fixtures::micro_batch_loss(m, m.params, t, nullptr, &c);
    for (const auto& [k, v] : c.as_map()) {
      if (k == "total") continue;
      if (k == name)
        EXPECT_EQ(v, 0.0) << name;
      else
        EXPECT_EQ(v, base.at(k)) << name << " changed " << k;
    }
  }
  Toggles no_mdd;
  no_mdd.mdd = false;
  LossComponents c;
  fixtures::micro_batch_loss(m, m.params, no_mdd, nullptr, &c);
  EXPECT_EQ(c.det, 0.0);
  EXPECT_EQ(c.diag, 0.0);
  EXPECT_EQ(c.apa_word, base.at("apa_word"));
  EXPECT_EQ(c.con, base.at("con"));
}

TEST_F(TotalLoss, PhnVarTouchesOnlyDiagnosis) {
  LossComponents on, off;
  fixtures::micro_batch_loss(m, m.params, Toggles{}, nullptr, &on);
  Toggles t;
  t.phnvar = PhnVarMode::kOff;
  fixtures::micro_batch_loss(m, m.params, t, nullptr, &off);
  EXPECT_NE(on.diag, off.diag);
  EXPECT_EQ(on.det, off.det);
  EXPECT_EQ(on.apa_phone, off.apa_phone);
  EXPECT_EQ(on.con, off.con);
}

TEST_F(TotalLoss, ZeroLambdaWithoutPhnVarIsTheBaseObjective) {
  Tape tape;
  const net::BoundParams p(tape, m.params);
  std::vector<net::ForwardOutput> outs;
  for (const auto* r : m.records) outs.push_back(net::forward(p, m.cfg, net::make_input(*r, m.vocab)));
  std::vector<BatchItem> batch;
  for (std::size_t i = 0; i < outs.size(); ++i) batch.push_back({m.records[i], &outs[i]});
  LossWeights w;
  w.lambda = 0.0;
  Toggles t;
  t.phnvar = PhnVarMode::kOff;
  const auto res = total_loss(p, batch, w, t, {}, nullptr, Mode::kTrain);

  // independent recomputation from the forward outputs
  double phone_se = 0, word_se = 0, utt_se = 0, det = 0, diag = 0;
  std::size_t n_phone = 0, n_word = 0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const auto& r = *m.records[i];
    const auto& o = outs[i];
    const Array lp = num::log_softmax_rows(o.diag_logits).value();
    for (std::size_t n = 0; n < r.num_phonemes(); ++n) {
      const auto& seg = r.phonemes[n];
      phone_se += std::pow(o.phone_scores.value()[n] - seg.accuracy, 2);
      const double pd = o.det_prob.value()[n];
      det -= seg.error_state ? std::log(pd) : std::log(1 - pd);
      diag -= lp(n, seg.pronounced);
      ++n_phone;
    }
    for (std::size_t k = 0; k < r.num_words(); ++k) {
      const auto& wd = r.words[k];
      const double gold[] = {wd.accuracy, wd.stress, wd.total};
      for (std::size_t a = 0; a < 3; ++a) word_se += std::pow(o.word.scores.value()(k, a) - gold[a], 2);
      ++n_word;
    }
    const auto u = r.scores.as_array();
    for (std::size_t a = 0; a < 5; ++a) utt_se += std::pow(o.utt_scores.value()[a] - u[a], 2);
  }
  const double B = static_cast<double>(outs.size());
  const double expected = 3.0 * phone_se / static_cast<double>(n_phone) + word_se / (3.0 * static_cast<double>(n_word)) +
                          utt_se / (5.0 * B) + det / B + diag / B;
  EXPECT_NEAR(res.components.total, expected, 1e-10);
  EXPECT_EQ(res.components.con, 0.0);
  EXPECT_EQ(res.components.pc, 0.0);
  EXPECT_EQ(res.components.ordinal, 0.0);
}

TEST_F(TotalLoss, EverythingDisabledIsAnError) {
  Toggles t{false, false, false, false, false, false, false, PhnVarMode::kOff};
  EXPECT_THROW(fixtures::micro_batch_loss(m, m.params, t), LossError);
}

TEST_F(TotalLoss, GradientMatchesFiniteDifferencesForEveryGroup) {
  const auto errors = fixtures::network_gradient_errors(m, Toggles{}, 6);
  ASSERT_EQ(errors.size(), m.params.names().size());
  for (const auto& e : errors) EXPECT_LT(e.error, kGradTol) << e.name;
}

TEST(LossWeightsValidation, RejectsOutOfRange) {
  LossWeights w;
  w.tau = 0.0;
  EXPECT_THROW(w.validate(), LossError);
  w = {};
  w.ordinal_c = 1.5;
  EXPECT_THROW(w.validate(), LossError);
  w = {};
  w.alpha = w.beta = 0.0;
  EXPECT_THROW(w.validate(), LossError);
}
