#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "muffin/corpus.hpp"
#include "muffin/synthetic.hpp"
#include "test_support.hpp"

using namespace muffin::corpus;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("muffin_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

UtteranceRecord good_record() {
  UtteranceRecord r;
  r.id = "u1";
  r.words = {{"cat", 8, 9, 8.5}, {"sat", 5, 6, 5.5}};
  const PhonemeInventory inv;
  r.phonemes = {
      {inv.id("K"), inv.id("K"), 0, 2.0, 0, 0, {}},
      {inv.id("AE"), inv.id("AH"), 1, 0.2, 0, 1, {}},
      {inv.id("T"), inv.id("DEL"), 1, 0.0, 0, 2, {}},
      {inv.id("S"), inv.id("S"), 0, 1.5, 1, 3, {}},
  };
  r.scores = {7, 9, 8, 7.5, 7.8};
  return r;
}

bool has_path(const std::vector<Violation>& v, const std::string& path) {
  for (const auto& x : v)
    if (x.path == path) return true;
  return false;
}

}  // namespace

TEST(Inventory, DefaultIsThirtyNinePhonemes) {
  const PhonemeInventory inv;
  EXPECT_EQ(inv.size(), 39u);
  EXPECT_EQ(inv.vocab_size(), 41u);
  EXPECT_EQ(inv.symbol(inv.del()), "DEL");
  EXPECT_EQ(inv.symbol(inv.unk()), "UNK");
  EXPECT_EQ(inv.id("UNK"), inv.unk());
  EXPECT_FALSE(inv.is_canonical(inv.del()));
}

TEST(Inventory, RejectsBadSymbolSets) {
  EXPECT_THROW(PhonemeInventory({"A"}), CorpusError);
  EXPECT_THROW(PhonemeInventory({"A", "A"}), CorpusError);
  EXPECT_THROW(PhonemeInventory({"A", "DEL"}), CorpusError);
  EXPECT_THROW(PhonemeInventory().id("XX"), CorpusError);
}

TEST(Validate, WellFormedRecordIsOk) {
  EXPECT_TRUE(validate_record(good_record(), PhonemeInventory()).empty());
}

TEST(Validate, LowAccuracyWithoutErrorState) {
  UtteranceRecord r = good_record();
  r.phonemes[3].accuracy = 0.4;
  EXPECT_TRUE(has_path(validate_record(r, PhonemeInventory()), "phonemes[3].error"));
}

TEST(Validate, DeletionMustBeAnError) {
  UtteranceRecord r = good_record();
  r.phonemes[2].error_state = 0;
  r.phonemes[2].accuracy = 1.0;
  EXPECT_TRUE(has_path(validate_record(r, PhonemeInventory()), "phonemes[2].pronounced"));
}

TEST(Validate, WordScoreOutOfRange) {
  UtteranceRecord r = good_record();
  r.words[1].accuracy = 11;
  const auto v = validate_record(r, PhonemeInventory());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].path, "words[1].acc");
  EXPECT_EQ(v[0].message, "out of [0,10]");
}

TEST(Validate, WordIndexContract) {
  UtteranceRecord r = good_record();
  r.phonemes[1].word_index = 1;  // goes back to 0 afterwards
  EXPECT_TRUE(has_path(validate_record(r, PhonemeInventory()), "phonemes[2].word_index"));
  UtteranceRecord orphan = good_record();
  orphan.words.push_back({"x", 1, 1, 1});
  EXPECT_TRUE(has_path(validate_record(orphan, PhonemeInventory()), "words"));
}

TEST(Validate, ReportsEveryViolation) {
  UtteranceRecord r = good_record();
  r.words[0].stress = -1;
  r.scores.fluency = 12;
  r.phonemes[0].accuracy = 3;
  EXPECT_EQ(validate_record(r, PhonemeInventory()).size(), 3u);
}

TEST(Io, EmptyManifestGivesEmptyCorpus) {
  const fs::path dir = scratch_dir("empty");
  std::ofstream(dir / "manifest.jsonl").close();
  fs::create_directories(dir / "features");
  EXPECT_TRUE(load_corpus_dir(dir).empty());
  fs::remove_all(dir);
}

TEST(Io, RoundTripIsIdentity) {
  const auto syn = generate_synthetic(muffin::fixtures::small_synthetic(5), 11);
  const fs::path dir = scratch_dir("roundtrip");
  write_corpus_dir(syn.corpus, dir);
  const Corpus back = load_corpus_dir(dir);
  EXPECT_EQ(back, syn.corpus);

  const fs::path dir2 = scratch_dir("roundtrip2");
  write_corpus_dir(back, dir2);
  std::ifstream a(dir / "manifest.jsonl"), b(dir2 / "manifest.jsonl");
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Io, FeatureLengthMismatchIsReported) {
  const auto syn = generate_synthetic(muffin::fixtures::small_synthetic(2), 3);
  const fs::path dir = scratch_dir("mismatch");
  write_corpus_dir(syn.corpus, dir);
  const fs::path sidecar = dir / "features" / (syn.corpus.utterances[0].id + ".f32");
  fs::resize_file(sidecar, fs::file_size(sidecar) - 4);
  EXPECT_THROW(load_corpus_dir(dir), CorpusError);
  fs::remove_all(dir);
}

TEST(Io, ParseErrorNamesTheLine) {
  const auto syn = generate_synthetic(muffin::fixtures::small_synthetic(2), 3);
  const fs::path dir = scratch_dir("parse");
  write_corpus_dir(syn.corpus, dir);
  std::ofstream(dir / "manifest.jsonl", std::ios::app) << "{not json\n";
  try {
    load_corpus_dir(dir);
    FAIL() << "expected a parse error";
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.jsonl:4:"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Io, UnknownPhonemeSymbolIsRejected) {
  const fs::path dir = scratch_dir("unknown");
  fs::create_directories(dir / "features");
  nlohmann::json rec = {
      {"id", "x"},
      {"words", {{{"text", "a"}, {"acc", 5}, {"stress", 5}, {"total", 5}}}},
      {"phonemes",
       {{{"canonical", "QQ"}, {"pronounced", "QQ"}, {"error", 0}, {"acc", 2}, {"word_index", 0}, {"feat_ref", 0}}}},
      {"utt", {{"acc", 5}, {"comp", 5}, {"flu", 5}, {"pros", 5}, {"total", 5}}}};
  std::ofstream(dir / "manifest.jsonl") << rec.dump() << "\n";
  std::ofstream(dir / "features" / "x.f32", std::ios::binary).close();
  EXPECT_THROW(load_corpus_dir(dir), CorpusError);
  fs::remove_all(dir);
}

// ---- factors ---------------------------------------------------------------------------

TEST(Factors, QuantityFixture) {
  const auto qf = quantity_factors({900, 90, 10});
  ASSERT_EQ(qf.size(), 3u);
  EXPECT_NEAR(qf[0], 0.02288, 1e-5);
  EXPECT_NEAR(qf[1], 0.52288, 1e-5);
  EXPECT_EQ(qf[2], 1.0);
  const auto stats = compute_stats({"A", "B", "C"}, {900, 90, 10}, {9, 9, 1});
  EXPECT_NEAR(stats.phonemes[0].inverse_log_freq, 0.10536, 1e-5);
  EXPECT_NEAR(stats.phonemes[1].inverse_log_freq, 2.40795, 1e-5);
  EXPECT_NEAR(stats.phonemes[2].inverse_log_freq, 4.60517, 1e-5);
}

TEST(Factors, QuantityIsLogBaseInvariant) {
  muffin::Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> counts;
    for (int k = 0; k < 6; ++k) counts.push_back(1 + static_cast<double>(rng.below(5000)));
    if (std::equal(counts.begin() + 1, counts.end(), counts.begin())) continue;
    const auto a = quantity_factors(counts), b = quantity_factors(counts, 10.0), c = quantity_factors(counts, 2.0);
    for (std::size_t k = 0; k < counts.size(); ++k) {
      EXPECT_NEAR(a[k], b[k], 1e-12);
      EXPECT_NEAR(a[k], c[k], 1e-12);
    }
  }
}

TEST(Factors, QuantityDecreasesWithCount) {
  const std::vector<double> counts{50, 400, 7, 1200, 90};
  const auto qf = quantity_factors(counts);
  for (std::size_t i = 0; i < counts.size(); ++i)
    for (std::size_t j = 0; j < counts.size(); ++j)
      if (counts[i] > counts[j]) EXPECT_LT(qf[i], qf[j]);
  EXPECT_EQ(std::min_element(qf.begin(), qf.end()) - qf.begin(), 3);
}

TEST(Factors, DifficultyFixture) {
  const auto df = difficulty_factors({5, 30}, {45, 70});
  EXPECT_NEAR(df[0], 1.0 / 3.0, 1e-15);
  EXPECT_EQ(df[1], 1.0);
}

TEST(Factors, SymmetricCorpusGivesUnitFactors) {
  const auto stats = compute_stats({"A", "B", "C"}, {100, 100, 100}, {10, 10, 10});
  for (const auto& p : stats.phonemes) {
    // equal counts make c_k = ln 3 for all k
    EXPECT_EQ(p.quantity_factor, 1.0);
    EXPECT_EQ(p.difficulty_factor, 1.0);
  }
}

TEST(Factors, UndefinedCasesAreErrors) {
  EXPECT_THROW(compute_stats({"A", "B"}, {10, 0}, {1, 0}), CorpusError);
  EXPECT_THROW(compute_stats({"A", "B"}, {10, 10}, {0, 0}), CorpusError);
  EXPECT_THROW(compute_stats({"A", "B"}, {10, 10}, {11, 0}), CorpusError);
  try {
    compute_stats({"A", "ZH"}, {10, 0}, {1, 0});
  } catch (const CorpusError& e) {
    EXPECT_NE(std::string(e.what()).find("ZH"), std::string::npos);
  }
}

TEST(Factors, StatsInvariants) {
  const auto stats = compute_stats({"A", "B", "C", "D"}, {500, 40, 3000, 8}, {25, 10, 30, 1});
  double max_qf = 0, max_df = 0;
  for (const auto& p : stats.phonemes) {
    EXPECT_EQ(p.count, p.mispronounced + p.correct);
    EXPECT_GT(p.quantity_factor, 0.0);
    EXPECT_LE(p.quantity_factor, 1.0);
    EXPECT_GT(p.difficulty_factor, 0.0);
    EXPECT_LE(p.difficulty_factor, 1.0);
    max_qf = std::max(max_qf, p.quantity_factor);
    max_df = std::max(max_df, p.difficulty_factor);
  }
  EXPECT_EQ(max_qf, 1.0);
  EXPECT_EQ(max_df, 1.0);
}

// ---- buckets ---------------------------------------------------------------------------

TEST(Buckets, DefaultEdges) {
  const auto stats = compute_stats({"AH", "K", "ZH", "Y"}, {4400, 2000, 600, 601}, {300, 48, 30, 5});
  EXPECT_EQ(stats.phonemes[0].occurrence, OccurrenceBucket::kMany);
  EXPECT_EQ(stats.phonemes[2].occurrence, OccurrenceBucket::kFew);  // exactly on the lower edge
  EXPECT_EQ(stats.phonemes[3].occurrence, OccurrenceBucket::kMedium);
  // 48 / 2000 = 0.024
  EXPECT_EQ(stats.phonemes[1].rate, RateBucket::kLow);
  EXPECT_EQ(stats.phonemes[0].rate, RateBucket::kHigh);
}

TEST(Buckets, BoundaryFallsToLowerBucket) {
  const auto stats = compute_stats({"A", "B", "C"}, {1300, 700, 601}, {1, 1, 1});
  EXPECT_EQ(stats.phonemes[0].occurrence, OccurrenceBucket::kMedium);
  EXPECT_EQ(stats.phonemes[1].occurrence, OccurrenceBucket::kMedium);
  BucketEdges e;
  e.rate_edges = {0.5, 0.25};
  const auto s2 = compute_stats({"A", "B"}, {4, 4}, {2, 1}, e);
  EXPECT_EQ(s2.phonemes[0].rate, RateBucket::kMedium);
  EXPECT_EQ(s2.phonemes[1].rate, RateBucket::kLow);
}

TEST(Buckets, RateBucketAtKnownRate) {
  // 239 of 10000 is a 2.39% rate
  const auto stats = compute_stats({"K", "B"}, {10000, 100}, {239, 10});
  EXPECT_EQ(stats.phonemes[0].rate, RateBucket::kLow);
}

TEST(Buckets, NonMonotoneEdgesRejected) {
  const auto stats = compute_stats({"A", "B"}, {10, 20}, {1, 1});
  BucketEdges e;
  e.count_edges = {600, 1300};
  EXPECT_THROW(bucket_phonemes(stats, e), CorpusError);
  e = {};
  e.rate_edges = {0.03, 0.03};
  EXPECT_THROW(bucket_phonemes(stats, e), CorpusError);
}

TEST(Buckets, PartitionTheInventory) {
  const auto stats = compute_stats({"A", "B", "C", "D", "E"}, {5000, 900, 10, 700, 1400}, {400, 20, 1, 30, 40});
  const auto b = bucket_phonemes(stats);
  EXPECT_EQ(b.occurrence.size(), 5u);
  EXPECT_EQ(b.rate.size(), 5u);
}

TEST(StatsReport, SortedAndDeterministic) {
  const auto stats = compute_stats({"Z", "A", "M"}, {10, 20, 30}, {1, 2, 3});
  const std::string a = stats_report_json(stats);
  EXPECT_EQ(a, stats_report_json(stats));
  const auto j = nlohmann::json::parse(a);
  EXPECT_EQ(j["phonemes"][0]["symbol"], "A");
  EXPECT_EQ(j["phonemes"][2]["symbol"], "Z");
}
