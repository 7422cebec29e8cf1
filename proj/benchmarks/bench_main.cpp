#include <random>

#include <benchmark/benchmark.h>

#include "advdet/attacks.hpp"
#include "advdet/detector.hpp"
#include "advdet/losses.hpp"
#include "advdet/model.hpp"

using namespace advdet;

namespace {

Classifier mnist_cnn() {
  ModelConfig c;
  c.architecture = Architecture::kSmallCnn;
  c.input_shape = {1, 28, 28};
  c.num_classes = 10;
  c.hidden = {64};
  c.seed = 1;
  Classifier m = build_classifier(c);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 0.1);
  for (double& v : m.parameters().at("out.weight").values()) v = n(rng);
  return m;
}

Tensor pixels(std::size_t batch) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(0, 255);
  Tensor t({batch, 1, 28, 28});
  for (double& v : t.values()) v = u(rng);
  return t;
}

Labels round_robin(std::size_t batch) {
  Labels y(batch);
  for (std::size_t i = 0; i < batch; ++i) y[i] = i % 10;
  return y;
}

void BM_Predict(benchmark::State& state) {
  const Classifier m = mnist_cnn();
  const Tensor x = pixels(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(m.predict(x));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Predict)->Arg(1)->Arg(64);

void BM_TrainingStep(benchmark::State& state) {
  const Classifier m = mnist_cnn();
  const auto b = static_cast<std::size_t>(state.range(0));
  const Tensor x = pixels(b);
  const Labels y = round_robin(b);
  std::vector<bool> adv(b, false);
  for (std::size_t i = 0; i < b / 10; ++i) adv[i] = true;
  for (auto _ : state) {
    Graph g;
    const NodeId in = g.input("x", x.shape());
    const TrainingLossNodes loss =
        combined_training_loss(g, m.emit(g, in), y, adv, TrainingLossSpec{});
    TensorMap bind = m.parameters();
    bind.emplace("x", x);
    benchmark::DoNotOptimize(backward(g, forward(g, bind), loss.total));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TrainingStep)->Arg(64);

void BM_Pgd10(benchmark::State& state) {
  const Classifier m = mnist_cnn();
  const Tensor x = pixels(32);
  const Labels y = round_robin(32);
  for (auto _ : state) benchmark::DoNotOptimize(pgd(m, x, y, 48.0, 12.0, 10, false, 1, 0));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Pgd10);

void BM_Auroc(benchmark::State& state) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  const auto size = static_cast<std::size_t>(state.range(0));
  std::vector<double> clean(size), adv(size);
  for (double& v : clean) v = n(rng) + 1.0;
  for (double& v : adv) v = n(rng);
  for (auto _ : state) benchmark::DoNotOptimize(auroc(clean, adv));
}
BENCHMARK(BM_Auroc)->Arg(1000)->Arg(100000);

void BM_Calibrate(benchmark::State& state) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t rows = 10000;
  Tensor logits({rows, 10});
  for (double& v : logits.values()) v = n(rng);
  const Labels y = round_robin(rows);
  for (auto _ : state) benchmark::DoNotOptimize(calibrate(logits, y));
}
BENCHMARK(BM_Calibrate);

}  // namespace

BENCHMARK_MAIN();
