#include "muffin/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "muffin/rng.hpp"

namespace muffin::corpus {

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw CorpusError("infeasible synthetic config: " + what);
}

void validate(const SyntheticConfig& c) {
  check(c.num_phonemes >= 2, "need at least 2 phonemes");
  check(c.zipf_exponent >= 0.0, "zipf exponent must be nonnegative");
  check(c.mispronunciation_rates.empty() || c.mispronunciation_rates.size() == c.num_phonemes,
        "one mispronunciation rate per phoneme");
  for (double r : c.mispronunciation_rates) check(r >= 0.0 && r <= 1.0, "rate outside [0,1]");
  check(c.rate_min >= 0.0 && c.rate_max <= 1.0 && c.rate_min <= c.rate_max, "rate range must lie in [0,1]");
  check(c.min_words >= 1 && c.min_words <= c.max_words, "word count range");
  check(c.min_word_phonemes >= 1 && c.min_word_phonemes <= c.max_word_phonemes, "word length range");
  check(c.blocks.total() >= 2, "feature dimension must be at least 2");
  check(c.blocks.ssl >= 1, "the SSL block needs at least one dimension");
  check(c.noise >= 0.0, "noise must be nonnegative");
  for (double p : {c.p_deletion, c.p_substitution, c.p_unknown, c.p_accented, c.p_perfect})
    check(p >= 0.0 && p <= 1.0, "probability outside [0,1]");
  check(c.p_deletion + c.p_substitution + c.p_unknown + c.p_accented > 0.0, "error-type mix sums to zero");
}

std::vector<double> random_unit(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    for (double& x : v) x = rng.normal();
    norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  } while (norm < 1e-6);
  for (double& x : v) x /= norm;
  return v;
}

// Embedding row with its component along `u` removed.
std::vector<double> orthogonal_embedding(Rng& rng, const std::vector<double>& u) {
  std::vector<double> v(u.size());
  for (double& x : v) x = rng.normal();
  const double along = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= along * u[i];
  return v;
}

// n phoneme ids whose counts are floor(n·p_k), with the leftover units given to
// the most frequent ranks so counts never increase with rank. When n ≥ M every
// phoneme occurs at least once, taken from the head of the distribution.
std::vector<PhonemeId> zipf_pool(const std::vector<double>& probs, std::size_t n) {
  const std::size_t m = probs.size();
  std::vector<std::size_t> counts(m);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < m; ++k) {
    counts[k] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * probs[k]));
    assigned += counts[k];
  }
  for (std::size_t k = 0; assigned < n; k = (k + 1) % m, ++assigned) ++counts[k];
  if (n >= m)
    for (std::size_t k = m; k-- > 0 && counts[k] == 0;) {
      const auto donor = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      --counts[donor];
      ++counts[k];
    }
  std::vector<PhonemeId> pool;
  pool.reserve(n);
  for (std::size_t k = 0; k < m; ++k) pool.insert(pool.end(), counts[k], k);
  return pool;
}

}  // namespace

PhonemeInventory synthetic_inventory(std::size_t num_phonemes) {
  const auto& cmu = PhonemeInventory::cmu39_symbols();
  std::vector<std::string> symbols;
  for (std::size_t k = 0; k < num_phonemes; ++k) {
    if (k < cmu.size()) {
      symbols.push_back(cmu[k]);
    } else {
      symbols.push_back((k < 10 ? "P0" : "P") + std::to_string(k));
    }
  }
  return PhonemeInventory(std::move(symbols));
}

SyntheticCorpus generate_synthetic(const SyntheticConfig& config, std::uint64_t seed) {
  validate(config);
  Rng rng(seed);
  const std::size_t M = config.num_phonemes;
  const std::size_t D = config.blocks.total();

  SyntheticCorpus out;
  out.corpus.inventory = synthetic_inventory(M);
  out.corpus.blocks = config.blocks;
  const PhonemeInventory& inv = out.corpus.inventory;
  GeneratorTruth& truth = out.truth;

  truth.zipf_probabilities.resize(M);
  for (std::size_t k = 0; k < M; ++k) truth.zipf_probabilities[k] = std::pow(static_cast<double>(k + 1), -config.zipf_exponent);
  const double z = std::accumulate(truth.zipf_probabilities.begin(), truth.zipf_probabilities.end(), 0.0);
  for (double& p : truth.zipf_probabilities) p /= z;

  if (!config.mispronunciation_rates.empty()) {
    truth.mispronunciation_rates = config.mispronunciation_rates;
  } else {
    std::vector<double> rates(M);
    for (std::size_t k = 0; k < M; ++k)
      rates[k] = config.rate_min + (config.rate_max - config.rate_min) * static_cast<double>(k) / static_cast<double>(M - 1);
    rng.shuffle(rates);
    truth.mispronunciation_rates = rates;
  }

  truth.quality_direction = random_unit(rng, D);
  truth.quality_gain = config.quality_gain;
  for (std::size_t k = 0; k < M; ++k) truth.canonical_embeddings.push_back(orthogonal_embedding(rng, truth.quality_direction));
  truth.pronounced_embeddings = truth.canonical_embeddings;
  truth.pronounced_embeddings.push_back(orthogonal_embedding(rng, truth.quality_direction));  // DEL
  truth.pronounced_embeddings.push_back(orthogonal_embedding(rng, truth.quality_direction));  // UNK

  const std::vector<double> error_mix{config.p_deletion, config.p_substitution, config.p_unknown, config.p_accented};

  // Word layout first, so the canonical phonemes can be dealt from a pool
  // whose composition follows the Zipf law exactly.
  std::vector<std::vector<std::size_t>> layout(config.num_utterances);
  std::size_t total_segments = 0;
  for (auto& words : layout) {
    words.resize(config.min_words + rng.below(config.max_words - config.min_words + 1));
    for (auto& len : words) {
      len = config.min_word_phonemes + rng.below(config.max_word_phonemes - config.min_word_phonemes + 1);
      total_segments += len;
    }
  }
  std::vector<PhonemeId> pool = zipf_pool(truth.zipf_probabilities, total_segments);
  rng.shuffle(pool);
  std::size_t next_segment = 0;

  for (std::size_t u = 0; u < config.num_utterances; ++u) {
    UtteranceRecord r;
    char id[32];
    std::snprintf(id, sizeof id, "utt%05zu", u);
    r.id = id;
    const std::size_t n_words = layout[u].size();
    std::vector<double> qualities;
    std::size_t deleted = 0, mispronounced = 0;
    double stress_sum = 0.0;
    for (std::size_t w = 0; w < n_words; ++w) {
      const std::size_t len = layout[u][w];
      WordEntry word;
      double q_sum = 0.0, q_first = 0.0;
      for (std::size_t i = 0; i < len; ++i) {
        PhonemeSegment seg;
        seg.canonical = pool[next_segment++];
        seg.word_index = w;
        seg.feat_ref = r.phonemes.size();
        seg.error_state = rng.bernoulli(truth.mispronunciation_rates[seg.canonical]) ? 1 : 0;
        seg.pronounced = seg.canonical;
        if (seg.error_state == 1) {
          seg.accuracy = rng.uniform(0.0, 0.5);
          switch (rng.categorical(error_mix)) {
            case 0: seg.pronounced = inv.del(); ++deleted; break;
            case 1: seg.pronounced = (seg.canonical + 1 + rng.below(M - 1)) % M; break;
            case 2: seg.pronounced = inv.unk(); break;
            default: break;  // accented: right phoneme, low score
          }
          ++mispronounced;
        } else {
          seg.accuracy = rng.bernoulli(config.p_perfect) ? 2.0 : rng.uniform(0.5, 2.0);
        }
        const double q = seg.accuracy / 2.0;
        const auto& base = truth.canonical_embeddings[seg.canonical];
        const auto& pron = truth.pronounced_embeddings[seg.pronounced];
        const bool substituted = seg.pronounced != seg.canonical;
        seg.features.resize(D);
        for (std::size_t d = 0; d < D; ++d) {
          double x = base[d] + config.quality_gain * (q - 0.5) * truth.quality_direction[d];
          if (substituted) x += config.substitution_gain * (pron[d] - base[d]);
          if (config.noise > 0.0) x += rng.normal(0.0, config.noise);
          seg.features[d] = static_cast<float>(x);
        }
        if (!word.text.empty()) word.text += '-';
        word.text += inv.symbol(seg.canonical);
        q_sum += q;
        if (i == 0) q_first = q;
        qualities.push_back(q);
        r.phonemes.push_back(std::move(seg));
      }
      word.accuracy = 10.0 * q_sum / static_cast<double>(len);
      word.stress = 10.0 * q_first;
      word.total = 0.5 * (word.accuracy + word.stress);
      stress_sum += word.stress;
      r.words.push_back(std::move(word));
    }
    const double n = static_cast<double>(qualities.size());
    r.scores.accuracy = 10.0 * std::accumulate(qualities.begin(), qualities.end(), 0.0) / n;
    r.scores.completeness = 10.0 * (1.0 - static_cast<double>(deleted) / n);
    r.scores.fluency = 10.0 * (1.0 - static_cast<double>(mispronounced) / n);
    r.scores.prosody = stress_sum / static_cast<double>(n_words);
    r.scores.total = 0.25 * (r.scores.accuracy + r.scores.completeness + r.scores.fluency + r.scores.prosody);
    out.corpus.utterances.push_back(std::move(r));
  }
  return out;
}

double oracle_accuracy(const GeneratorTruth& truth, const std::vector<float>& features) {
  double along = 0.0;
  for (std::size_t d = 0; d < features.size(); ++d) along += static_cast<double>(features[d]) * truth.quality_direction[d];
  return 2.0 * (along / truth.quality_gain + 0.5);
}

}  // namespace muffin::corpus
