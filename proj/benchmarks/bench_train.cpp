#include <benchmark/benchmark.h>

#include "aim/trainer.hpp"

using namespace aim;

namespace {

struct StepFixture {
  Dataset train;
  ExperimentConfig cfg;
  ModelBundle bundle;
  ModulationRecord rec;
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  std::vector<Tensor> params;
  SgdState opt{1e-3, 0.9};

  StepFixture() : rec(make_record(4, 2, ImbalanceMetric::cv, 0.9)) {
    DatasetSpec spec = standard_fixture(0);
    auto sets = generate(spec);
    train = std::move(sets.first);
    cfg.mode = TrainMode::aim;
    cfg.seed = 0;
    bundle = make_bundle(cfg, train);
    std::vector<int> idx(64);
    for (int i = 0; i < 64; ++i) idx[i] = i;
    for (int m = 0; m < 2; ++m) inputs.push_back(train.modality_batch(m, idx));
    labels = train.label_batch(idx);
    params = bundle.main_parameters();
    propagate(bundle.bank, bundle.net);
    update_record_for_batch(bundle, rec, inputs, labels, cfg);
  }
};

void BM_ModulatedStep(benchmark::State& state) {
  StepFixture fx;
  for (auto _ : state) {
    propagate(fx.bundle.bank, fx.bundle.net);
    Graph g;
    Graph::Activate scope(g);
    Tensor loss = phase2_objective(fx.bundle, fx.rec, fx.inputs, fx.labels, fx.cfg);
    g.backward(loss);
    sgd_step(fx.opt, fx.params);
  }
}
BENCHMARK(BM_ModulatedStep)->Unit(benchmark::kMillisecond);

void BM_Decouple(benchmark::State& state) {
  StepFixture fx;
  const Block& block = fx.bundle.net.encoders[0].blocks[1];
  const Decoupler& dec = fx.bundle.decouplers[0][1];
  for (auto _ : state) {
    benchmark::DoNotOptimize(decouple(dec, block));
  }
}
BENCHMARK(BM_Decouple);

void BM_PrototypePropagate(benchmark::State& state) {
  StepFixture fx;
  for (auto _ : state) {
    propagate(fx.bundle.bank, fx.bundle.net);
  }
}
BENCHMARK(BM_PrototypePropagate);

}  // namespace

BENCHMARK_MAIN();
