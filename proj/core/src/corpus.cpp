#include "muffin/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace muffin::corpus {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---- inventory --------------------------------------------------------------

const std::vector<std::string>& PhonemeInventory::cmu39_symbols() {
  static const std::vector<std::string> symbols{"AA", "AE", "AH", "AO", "AW", "AY", "B",  "CH", "D",  "DH",
                                                "EH", "ER", "EY", "F",  "G",  "HH", "IH", "IY", "JH", "K",
                                                "L",  "M",  "N",  "NG", "OW", "OY", "P",  "R",  "S",  "SH",
                                                "T",  "TH", "UH", "UW", "V",  "W",  "Y",  "Z",  "ZH"};
  return symbols;
}

PhonemeInventory::PhonemeInventory(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.size() < 2) throw CorpusError("phoneme inventory needs at least 2 symbols");
  for (PhonemeId i = 0; i < symbols_.size(); ++i) {
    const std::string& s = symbols_[i];
    if (s.empty()) throw CorpusError("phoneme inventory: empty symbol");
    if (s == kDel || s == kUnk) throw CorpusError("phoneme inventory: '" + s + "' is reserved");
    if (!index_.emplace(s, i).second) throw CorpusError("phoneme inventory: duplicate symbol '" + s + "'");
  }
}

const std::string& PhonemeInventory::symbol(PhonemeId id) const {
  static const std::string del_symbol(kDel), unk_symbol(kUnk);
  if (id < symbols_.size()) return symbols_[id];
  if (id == del()) return del_symbol;
  if (id == unk()) return unk_symbol;
  throw CorpusError("phoneme id " + std::to_string(id) + " out of range");
}

std::optional<PhonemeId> PhonemeInventory::find(std::string_view symbol) const {
  if (symbol == kDel) return del();
  if (symbol == kUnk) return unk();
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

PhonemeId PhonemeInventory::id(std::string_view symbol) const {
  if (auto found = find(symbol)) return *found;
  throw CorpusError("unknown phoneme symbol '" + std::string(symbol) + "'");
}

Corpus Corpus::subset(const std::vector<std::size_t>& indices) const {
  Corpus out{inventory, blocks, {}};
  out.utterances.reserve(indices.size());
  for (std::size_t i : indices) out.utterances.push_back(utterances.at(i));
  return out;
}

// ---- validation -----------------------------------------------------------------

namespace {

bool in_range(double v, double lo, double hi) { return v >= lo && v <= hi; }

std::string index_path(std::string_view field, std::size_t i) {
  return std::string(field) + "[" + std::to_string(i) + "]";
}

}  // namespace

std::vector<Violation> validate_record(const UtteranceRecord& record, const PhonemeInventory& inventory,
                                       std::size_t feature_dim) {
  std::vector<Violation> out;
  auto fail = [&](std::string path, std::string message) { out.push_back({std::move(path), std::move(message)}); };

  if (record.id.empty()) fail("id", "empty utterance id");
  if (record.phonemes.empty()) fail("phonemes", "utterance has no phoneme segments");

  for (std::size_t w = 0; w < record.words.size(); ++w) {
    const WordEntry& word = record.words[w];
    const std::string base = index_path("words", w);
    if (!in_range(word.accuracy, 0, 10)) fail(base + ".acc", "out of [0,10]");
    if (!in_range(word.stress, 0, 10)) fail(base + ".stress", "out of [0,10]");
    if (!in_range(word.total, 0, 10)) fail(base + ".total", "out of [0,10]");
  }

  std::size_t expected_word = 0;
  for (std::size_t n = 0; n < record.phonemes.size(); ++n) {
    const PhonemeSegment& seg = record.phonemes[n];
    const std::string base = index_path("phonemes", n);
    if (!inventory.is_canonical(seg.canonical)) fail(base + ".canonical", "not an inventory phoneme");
    if (seg.pronounced >= inventory.vocab_size()) fail(base + ".pronounced", "outside the diagnosis vocabulary");
    if (seg.error_state != 0 && seg.error_state != 1) fail(base + ".error", "error state must be 0 or 1");
    if (!in_range(seg.accuracy, 0, 2)) fail(base + ".acc", "out of [0,2]");
    const bool low = seg.accuracy < 0.5;
    if (seg.error_state == 1 && !low) fail(base + ".error", "mispronounced segment must have accuracy < 0.5");
    if (seg.error_state == 0 && low) fail(base + ".error", "accuracy < 0.5 requires error state 1");
    if (seg.error_state == 0 && seg.pronounced != seg.canonical)
      fail(base + ".pronounced", "correct segment must be pronounced as its canonical phoneme");
    if (feature_dim > 0 && seg.features.size() != feature_dim)
      fail(base + ".features", "expected " + std::to_string(feature_dim) + " values, got " +
                                   std::to_string(seg.features.size()));
    if (!std::all_of(seg.features.begin(), seg.features.end(), [](float v) { return std::isfinite(v); }))
      fail(base + ".features", "non-finite feature value");

    // word indices must start at 0 and advance by at most one per segment
    if (seg.word_index >= record.words.size()) {
      fail(base + ".word_index", "no such word");
    } else if (n == 0 ? seg.word_index != 0 : (seg.word_index != expected_word && seg.word_index != expected_word + 1)) {
      fail(base + ".word_index", "word indices must be contiguous and monotone");
    }
    expected_word = seg.word_index;
  }
  if (!record.phonemes.empty() && !record.words.empty() && record.phonemes.back().word_index + 1 != record.words.size())
    fail("words", "every word needs at least one phoneme");
  if (record.words.empty()) fail("words", "utterance has no words");

  const auto utt = record.scores.as_array();
  for (std::size_t a = 0; a < utt.size(); ++a)
    if (!in_range(utt[a], 0, 10)) fail("utt." + std::string(kUtteranceAspectNames[a]), "out of [0,10]");
  return out;
}

// ---- serialization ----------------------------------------------------------------

namespace {

constexpr const char* kUtteranceKeys[] = {"acc", "comp", "flu", "pros", "total"};

ojson header_json(const Corpus& corpus) {
  ojson h;
  h["D_feat"] = corpus.blocks.total();
  h["blocks"] = {{"gop", corpus.blocks.gop}, {"dur", corpus.blocks.dur}, {"eng", corpus.blocks.eng},
                 {"ssl", corpus.blocks.ssl}};
  h["phonemes"] = corpus.inventory.symbols();
  return h;
}

ojson record_json(const UtteranceRecord& r, const PhonemeInventory& inv) {
  ojson j;
  j["id"] = r.id;
  j["words"] = ojson::array();
  for (const WordEntry& w : r.words)
    j["words"].push_back({{"text", w.text}, {"acc", w.accuracy}, {"stress", w.stress}, {"total", w.total}});
  j["phonemes"] = ojson::array();
  for (const PhonemeSegment& p : r.phonemes)
    j["phonemes"].push_back({{"canonical", inv.symbol(p.canonical)},
                             {"pronounced", inv.symbol(p.pronounced)},
                             {"error", p.error_state},
                             {"acc", p.accuracy},
                             {"word_index", p.word_index},
                             {"feat_ref", p.feat_ref}});
  const auto s = r.scores.as_array();
  ojson utt;
  for (std::size_t a = 0; a < s.size(); ++a) utt[kUtteranceKeys[a]] = s[a];
  j["utt"] = utt;
  return j;
}

void write_f32(const fs::path& path, const UtteranceRecord& r, std::size_t dim) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + path.string());
  std::vector<const PhonemeSegment*> by_row(r.phonemes.size(), nullptr);
  for (const PhonemeSegment& p : r.phonemes) {
    if (p.feat_ref >= by_row.size()) throw CorpusError(r.id + ": feat_ref out of range");
    by_row[p.feat_ref] = &p;
  }
  std::vector<unsigned char> bytes;
  bytes.reserve(r.phonemes.size() * dim * 4);
  for (const PhonemeSegment* p : by_row) {
    if (!p) throw CorpusError(r.id + ": feat_ref values must be a permutation of 0..N-1");
    if (p->features.size() != dim) throw CorpusError(r.id + ": feature length mismatch");
    for (float v : p->features) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<unsigned char>((u >> (8 * b)) & 0xFF));
    }
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<float> read_f32(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("missing feature sidecar " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % 4 != 0) throw CorpusError(path.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> values(bytes.size() / 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    values[i] = std::bit_cast<float>(u);
  }
  return values;
}

template <typename T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw CorpusError(std::string("missing field '") + key + "'");
  return j.at(key).get<T>();
}

UtteranceRecord parse_record(const nlohmann::json& j, const PhonemeInventory& inv) {
  UtteranceRecord r;
  r.id = field<std::string>(j, "id");
  for (const auto& w : field<nlohmann::json>(j, "words"))
    r.words.push_back({field<std::string>(w, "text"), field<double>(w, "acc"), field<double>(w, "stress"),
                       field<double>(w, "total")});
  for (const auto& p : field<nlohmann::json>(j, "phonemes")) {
    PhonemeSegment s;
    s.canonical = inv.id(field<std::string>(p, "canonical"));
    s.pronounced = inv.id(field<std::string>(p, "pronounced"));
    s.error_state = field<int>(p, "error");
    s.accuracy = field<double>(p, "acc");
    s.word_index = field<std::size_t>(p, "word_index");
    s.feat_ref = field<std::size_t>(p, "feat_ref");
    r.phonemes.push_back(std::move(s));
  }
  const auto utt = field<nlohmann::json>(j, "utt");
  r.scores = {field<double>(utt, "acc"), field<double>(utt, "comp"), field<double>(utt, "flu"),
              field<double>(utt, "pros"), field<double>(utt, "total")};
  return r;
}

}  // namespace

void write_corpus(const Corpus& corpus, const fs::path& manifest, const fs::path& feature_dir) {
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  fs::create_directories(feature_dir);
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw CorpusError("cannot write " + manifest.string());
  out << header_json(corpus).dump() << '\n';
  const std::size_t dim = corpus.blocks.total();
  for (const UtteranceRecord& r : corpus.utterances) {
    out << record_json(r, corpus.inventory).dump() << '\n';
    write_f32(feature_dir / (r.id + ".f32"), r, dim);
  }
}

Corpus load_corpus(const fs::path& manifest, const fs::path& feature_dir) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw CorpusError("cannot open manifest " + manifest.string());
  Corpus corpus;
  std::string line;
  std::size_t line_no = 0;
  bool header_allowed = true;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = manifest.filename().string() + ":" + std::to_string(line_no) + ": ";
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw CorpusError(where + "parse error: " + e.what());
    }
    try {
      if (header_allowed && j.contains("D_feat")) {
        header_allowed = false;
        const auto& b = field<nlohmann::json>(j, "blocks");
        corpus.blocks = {field<std::size_t>(b, "gop"), field<std::size_t>(b, "dur"), field<std::size_t>(b, "eng"),
                         field<std::size_t>(b, "ssl")};
        if (corpus.blocks.total() != field<std::size_t>(j, "D_feat"))
          throw CorpusError("D_feat does not equal the sum of the feature blocks");
        if (j.contains("phonemes")) corpus.inventory = PhonemeInventory(j.at("phonemes").get<std::vector<std::string>>());
        continue;
      }
      header_allowed = false;
      UtteranceRecord r = parse_record(j, corpus.inventory);
      const std::size_t dim = corpus.blocks.total();
      const std::vector<float> values = read_f32(feature_dir / (r.id + ".f32"));
      if (values.size() != r.phonemes.size() * dim)
        throw CorpusError("feature length mismatch: sidecar has " + std::to_string(values.size()) + " floats, expected " +
                          std::to_string(r.phonemes.size()) + "×" + std::to_string(dim));
      for (PhonemeSegment& s : r.phonemes) {
        if (s.feat_ref >= r.phonemes.size()) throw CorpusError("feat_ref out of range");
        const auto begin = values.begin() + static_cast<std::ptrdiff_t>(s.feat_ref * dim);
        s.features.assign(begin, begin + static_cast<std::ptrdiff_t>(dim));
      }
      const auto violations = validate_record(r, corpus.inventory, dim);
      if (!violations.empty())
        throw CorpusError("invalid record '" + r.id + "': " + violations.front().path + ": " +
                          violations.front().message);
      corpus.utterances.push_back(std::move(r));
    } catch (const CorpusError& e) {
      if (std::string_view(e.what()).starts_with(where)) throw;
      throw CorpusError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError(where + e.what());
    }
  }
  return corpus;
}

Corpus load_corpus_dir(const fs::path& dir) { return load_corpus(dir / "manifest.jsonl", dir / "features"); }

void write_corpus_dir(const Corpus& corpus, const fs::path& dir) {
  write_corpus(corpus, dir / "manifest.jsonl", dir / "features");
}

// ---- statistics ------------------------------------------------------------------

std::string_view to_string(OccurrenceBucket b) {
  switch (b) {
    case OccurrenceBucket::kMany: return "many";
    case OccurrenceBucket::kMedium: return "medium";
    case OccurrenceBucket::kFew: return "few";
  }
  return "?";
}

std::string_view to_string(RateBucket b) {
  switch (b) {
    case RateBucket::kHigh: return "high";
    case RateBucket::kMedium: return "medium";
    case RateBucket::kLow: return "low";
  }
  return "?";
}

std::vector<double> quantity_factors(const std::vector<double>& counts, double log_base) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  const double log_b = std::log(log_base);
  std::vector<double> c(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (!(counts[k] > 0)) throw CorpusError("phoneme " + std::to_string(k) + " has zero occurrences");
    c[k] = std::log(total / counts[k]) / log_b;
  }
  const double mx = c.empty() ? 0.0 : *std::max_element(c.begin(), c.end());
  if (!(mx > 0)) throw CorpusError("quantity factor undefined: a single phoneme holds every occurrence");
  for (double& v : c) v /= mx;
  return c;
}

std::vector<double> difficulty_factors(const std::vector<double>& mispronounced, const std::vector<double>& correct) {
  std::vector<double> d(mispronounced.size());
  for (std::size_t k = 0; k < d.size(); ++k) {
    const double n = mispronounced[k] + correct[k];
    if (!(n > 0)) throw CorpusError("phoneme " + std::to_string(k) + " has zero occurrences");
    d[k] = mispronounced[k] / n;
  }
  const double mx = d.empty() ? 0.0 : *std::max_element(d.begin(), d.end());
  if (!(mx > 0)) throw CorpusError("difficulty factor undefined: no phoneme is ever mispronounced");
  for (double& v : d) v /= mx;
  return d;
}

std::vector<double> CorpusStats::quantity_factors() const {
  std::vector<double> out;
  for (const auto& p : phonemes) out.push_back(p.quantity_factor);
  return out;
}

std::vector<double> CorpusStats::difficulty_factors() const {
  std::vector<double> out;
  for (const auto& p : phonemes) out.push_back(p.difficulty_factor);
  return out;
}

CorpusStats compute_stats(const std::vector<std::string>& symbols, const std::vector<std::size_t>& counts,
                          const std::vector<std::size_t>& mispronounced, const BucketEdges& edges) {
  if (symbols.size() != counts.size() || counts.size() != mispronounced.size())
    throw CorpusError("compute_stats: length mismatch");
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) throw CorpusError("phoneme '" + symbols[k] + "' never occurs; its factors are undefined");
    if (mispronounced[k] > counts[k]) throw CorpusError("phoneme '" + symbols[k] + "': more errors than occurrences");
  }
  std::vector<double> q(counts.begin(), counts.end());
  std::vector<double> mp(mispronounced.begin(), mispronounced.end());
  std::vector<double> cp(q.size());
  for (std::size_t k = 0; k < q.size(); ++k) cp[k] = q[k] - mp[k];

  const double total = std::accumulate(q.begin(), q.end(), 0.0);
  const std::vector<double> qf = quantity_factors(q);
  const std::vector<double> df = difficulty_factors(mp, cp);

  CorpusStats stats;
  for (std::size_t k = 0; k < q.size(); ++k) {
    PhonemeStats row;
    row.symbol = symbols[k];
    row.count = counts[k];
    row.mispronounced = mispronounced[k];
    row.correct = counts[k] - mispronounced[k];
    row.inverse_log_freq = std::log(total / q[k]);
    row.quantity_factor = qf[k];
    row.mispron_rate = mp[k] / q[k];
    row.difficulty_factor = df[k];
    stats.phonemes.push_back(std::move(row));
  }
  apply_buckets(stats, bucket_phonemes(stats, edges));
  return stats;
}

CorpusStats compute_stats(const Corpus& corpus, const BucketEdges& edges) {
  const std::size_t m = corpus.inventory.size();
  std::vector<std::size_t> counts(m, 0), mispronounced(m, 0);
  for (const auto& u : corpus.utterances)
    for (const auto& p : u.phonemes) {
      ++counts.at(p.canonical);
      if (p.error_state == 1) ++mispronounced[p.canonical];
    }
  return compute_stats(corpus.inventory.symbols(), counts, mispronounced, edges);
}

BucketAssignment bucket_phonemes(const CorpusStats& stats, const BucketEdges& edges) {
  if (!(edges.count_edges[0] > edges.count_edges[1]) || !(edges.rate_edges[0] > edges.rate_edges[1]))
    throw CorpusError("bucket edges must be strictly decreasing");
  BucketAssignment out;
  for (const auto& p : stats.phonemes) {
    const double c = static_cast<double>(p.count);
    out.occurrence.push_back(c > edges.count_edges[0]   ? OccurrenceBucket::kMany
                             : c > edges.count_edges[1] ? OccurrenceBucket::kMedium
                                                        : OccurrenceBucket::kFew);
    out.rate.push_back(p.mispron_rate > edges.rate_edges[0]   ? RateBucket::kHigh
                       : p.mispron_rate > edges.rate_edges[1] ? RateBucket::kMedium
                                                              : RateBucket::kLow);
  }
  return out;
}

void apply_buckets(CorpusStats& stats, const BucketAssignment& buckets) {
  if (buckets.occurrence.size() != stats.phonemes.size() || buckets.rate.size() != stats.phonemes.size())
    throw CorpusError("bucket assignment size mismatch");
  for (std::size_t k = 0; k < stats.phonemes.size(); ++k) {
    stats.phonemes[k].occurrence = buckets.occurrence[k];
    stats.phonemes[k].rate = buckets.rate[k];
  }
}

std::string stats_report_json(const CorpusStats& stats) {
  std::vector<const PhonemeStats*> rows;
  for (const auto& p : stats.phonemes) rows.push_back(&p);
  std::sort(rows.begin(), rows.end(), [](const auto* a, const auto* b) { return a->symbol < b->symbol; });
  ojson out;
  out["phonemes"] = ojson::array();
  for (const auto* p : rows)
    out["phonemes"].push_back({{"symbol", p->symbol},
                               {"count", p->count},
                               {"mispronounced", p->mispronounced},
                               {"correct", p->correct},
                               {"c", p->inverse_log_freq},
                               {"QF", p->quantity_factor},
                               {"d", p->mispron_rate},
                               {"DF", p->difficulty_factor},
                               {"occurrence_bucket", to_string(p->occurrence)},
                               {"rate_bucket", to_string(p->rate)}});
  return out.dump(2) + "\n";
}

}  // namespace muffin::corpus
