#include <benchmark/benchmark.h>

#include "muffin/numerics.hpp"
#include "muffin/rng.hpp"

namespace {

using muffin::num::Array;

Array random(muffin::num::Shape shape, muffin::Rng& rng) {
  Array a(std::move(shape));
  for (double& v : a.data()) v = rng.normal();
  return a;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  muffin::Rng rng(1);
  const Array a = random({n, 24}, rng), b = random({24, 24}, rng);
  for (auto _ : state) {
    muffin::num::Tape tape;
    benchmark::DoNotOptimize(muffin::num::matmul(tape.constant(a), tape.constant(b)).value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(n * 24 * 24));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_AttentionForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  muffin::Rng rng(2);
  const Array q = random({n, 24}, rng), k = random({n, 24}, rng), v = random({n, 24}, rng);
  for (auto _ : state) {
    muffin::num::Tape tape;
    const auto vq = tape.leaf(q), vk = tape.leaf(k), vv = tape.leaf(v);
    const auto out = muffin::num::sum(muffin::num::single_head_attention(vq, vk, vv));
    benchmark::DoNotOptimize(tape.backward(out));
  }
}
BENCHMARK(BM_AttentionForwardBackward)->Arg(16)->Arg(64)->Arg(128);

void BM_LayerNormForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  muffin::Rng rng(3);
  const Array x = random({n, 24}, rng), g = random({24}, rng), b = random({24}, rng);
  for (auto _ : state) {
    muffin::num::Tape tape;
    const auto out = muffin::num::sum(muffin::num::layer_norm_rows(tape.leaf(x), tape.leaf(g), tape.leaf(b)));
    benchmark::DoNotOptimize(tape.backward(out));
  }
}
BENCHMARK(BM_LayerNormForwardBackward)->Arg(64)->Arg(256);

}  // namespace

BENCHMARK_MAIN();
