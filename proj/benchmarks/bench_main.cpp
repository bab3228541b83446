// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include "qadapt/adapters.hpp"
#include "qadapt/kernels.hpp"
#include "qadapt/metrics.hpp"
#include "qadapt/pipeline.hpp"
#include "qadapt/rng.hpp"
#include "qadapt/synthetic.hpp"
#include "qadapt/training.hpp"

namespace {

using namespace qadapt;

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t = Tensor::zeros({r, c});
  for (auto& x : t.mutable_data()) x = rng.normal();
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(32)->Arg(64)->Arg(128);

CaptionModel default_model(bool adapters) {
  const ModelConfig m;
  const Vocabulary vocab = caption_vocabulary(static_cast<std::size_t>(m.vocab));
  CaptionModel cm = make_caption_model(m, FusionMode::Concat, vocab.encode(kPromptText), 2);
  if (adapters) {
    cm.adapter = AdapterConfig{.range = {3, 4}};
    insert_adapters(cm.params, m, cm.adapter, 3);
  }
  return cm;
}

VideoClip default_clip() {
  const ModelConfig m;
  SceneProgram prog = program_at(11);
  prog.informative.assign(static_cast<std::size_t>(m.frames), true);
  return render_clip(prog, RenderConfig{m.height, m.width, m.channels, m.frames}, 4, "bench");
}

void BM_EncodeClip(benchmark::State& state) {
  const CaptionModel cm = default_model(state.range(0) != 0);
  const VideoClip clip = default_clip();
  for (auto _ : state) benchmark::DoNotOptimize(encode_context(cm, clip));
}
BENCHMARK(BM_EncodeClip)->ArgName("adapters")->Arg(0)->Arg(1);

void BM_Generate(benchmark::State& state) {
  const CaptionModel cm = default_model(true);
  const VideoClip clip = default_clip();
  for (auto _ : state) benchmark::DoNotOptimize(generate(cm, clip, 12));
}
BENCHMARK(BM_Generate);

void BM_TrainStep(benchmark::State& state) {
  CaptionModel cm = default_model(true);
  apply_freeze(cm.params, TrainMode::Adapter);
  DatasetSpec spec;
  spec.n = 8;
  const auto data = make_dataset(spec, caption_vocabulary(64));
  TrainConfig cfg;
  cfg.batch = 8;
  cfg.epochs = 1;
  for (auto _ : state) benchmark::DoNotOptimize(train(cm, data, cfg));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_Metrics(benchmark::State& state) {
  DatasetSpec spec;
  spec.n = static_cast<int>(state.range(0));
  const Vocabulary vocab = caption_vocabulary(64);
  const auto data = make_dataset(spec, vocab);
  std::vector<metrics::EvalPair> pairs;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& other = data[(i + 1) % data.size()];
    pairs.push_back({tokenize(vocab.decode(other.caption)), {tokenize(vocab.decode(data[i].caption))}});
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::evaluate(pairs));
}
BENCHMARK(BM_Metrics)->Arg(16)->Arg(90);

}  // namespace

BENCHMARK_MAIN();
