#include <benchmark/benchmark.h>

#include "muffin/objectives.hpp"
#include "muffin/synthetic.hpp"
#include "muffin/training.hpp"

namespace {

using namespace muffin;

struct Fixture {
  corpus::SyntheticCorpus syn;
  net::WordVocab vocab;
  net::ModelConfig cfg;
  net::ModelParams params;
  std::vector<double> scales;

  Fixture() {
    corpus::SyntheticConfig sc;
    sc.num_utterances = 25;
    syn = corpus::generate_synthetic(sc, 1);
    vocab = net::WordVocab::build(syn.corpus);
    cfg = train::resolve_model_config(net::ModelConfig{}, syn.corpus, vocab);
    params = net::init_model(cfg, 1);
    scales = loss::phnvar_class_scales(corpus::compute_stats(syn.corpus), loss::PhnVarMode::kFull, {});
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_Predict(benchmark::State& state) {
  const Fixture& f = fixture();
  const auto& rec = f.syn.corpus.utterances[0];
  for (auto _ : state) benchmark::DoNotOptimize(net::predict(f.params, f.cfg, f.vocab, rec));
  state.counters["phonemes"] = static_cast<double>(rec.num_phonemes());
}
BENCHMARK(BM_Predict);

// One optimizer-sized batch: forward, total loss and backward for all 25 utterances.
void BM_BatchLossAndGradient(benchmark::State& state) {
  const Fixture& f = fixture();
  const loss::Toggles toggles;
  for (auto _ : state) {
    num::Tape tape;
    const net::BoundParams p(tape, f.params);
    Rng rng(3);
    std::vector<net::UtteranceInput> inputs;
    std::vector<net::ForwardOutput> outs;
    inputs.reserve(f.syn.corpus.size());
    outs.reserve(f.syn.corpus.size());
    for (const auto& r : f.syn.corpus.utterances) {
      inputs.push_back(net::make_input(r, f.vocab));
      outs.push_back(net::forward(p, f.cfg, inputs.back()));
    }
    std::vector<loss::BatchItem> batch;
    for (std::size_t i = 0; i < outs.size(); ++i) batch.push_back({&f.syn.corpus.utterances[i], &outs[i]});
    const auto res = loss::total_loss(p, batch, {}, toggles, f.scales, &rng, loss::Mode::kTrain);
    benchmark::DoNotOptimize(p.gradients(tape.backward(res.total)));
  }
}
BENCHMARK(BM_BatchLossAndGradient)->Unit(benchmark::kMillisecond);

void BM_TrainEpoch(benchmark::State& state) {
  const Fixture& f = fixture();
  train::TrainConfig cfg;
  cfg.epochs = 1000000;
  for (auto _ : state) {
    state.PauseTiming();
    train::Trainer t(f.syn.corpus, cfg, 1);
    state.ResumeTiming();
    benchmark::DoNotOptimize(t.run_epoch());
  }
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
