#include <benchmark/benchmark.h>

#include "aim/optim.hpp"
#include "aim/tensor.hpp"

using namespace aim;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> vals(static_cast<std::size_t>(numel(shape)));
  for (double& v : vals) v = rng.gaussian();
  return Tensor::from(std::move(shape), std::move(vals));
}

void BM_MatmulForward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(1);
  const Tensor a = random_tensor({64, n}, rng);
  const Tensor b = random_tensor({n, n}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(matmul(a, b));
  }
}
BENCHMARK(BM_MatmulForward)->Arg(16)->Arg(32)->Arg(64);

void BM_DenseBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  Rng rng(2);
  Tensor w = random_tensor({n, n}, rng).set_requires_grad(true);
  Tensor b = random_tensor({n}, rng).set_requires_grad(true);
  const Tensor x = random_tensor({64, n}, rng);
  std::vector<int> labels(64);
  for (int i = 0; i < 64; ++i) labels[i] = i % n;
  for (auto _ : state) {
    Graph g;
    Graph::Activate scope(g);
    Tensor loss = mean(distance_ce(scalar_mul(add_rowwise(matmul(x, w), b), -1.0), labels));
    g.backward(loss);
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_DenseBackward)->Arg(16)->Arg(32);

void BM_RowDistance(benchmark::State& state) {
  Rng rng(3);
  const Tensor a = random_tensor({64, 32}, rng);
  const Tensor p = random_tensor({6, 32}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(row_distance(a, p));
  }
}
BENCHMARK(BM_RowDistance);

void BM_SoftmaxRows(benchmark::State& state) {
  Rng rng(4);
  const Tensor logits = random_tensor({64, 6}, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax_rows(logits));
  }
}
BENCHMARK(BM_SoftmaxRows);

}  // namespace

BENCHMARK_MAIN();
