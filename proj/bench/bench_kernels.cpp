#include <benchmark/benchmark.h>

#include <vector>

#include "dwmlab/kernels.hpp"
#include "dwmlab/mlp.hpp"
#include "dwmlab/rng.hpp"

using namespace dwmlab;

namespace {

struct Shapes {
  std::size_t batch, in, out;
  std::vector<double> x, wt, bias, y;
  explicit Shapes(const benchmark::State& st)
      : batch(st.range(0)), in(st.range(1)), out(st.range(2)),
        x(batch * in), wt(in * out), bias(out), y(batch * out) {
    Rng rng(7);
    for (double& v : x) v = rng.normal();
    for (double& v : wt) v = rng.normal();
  }
};

template <kernels::Exec E>
void BM_Forward(benchmark::State& st) {
  Shapes s(st);
  for (auto _ : st) {
    kernels::dense_forward(E, s.x.data(), s.wt.data(), s.bias.data(), s.y.data(), s.batch, s.in, s.out);
    benchmark::DoNotOptimize(s.y.data());
  }
  st.SetItemsProcessed(st.iterations() * s.batch * s.in * s.out);
}

template <kernels::Exec E>
void BM_BackwardInput(benchmark::State& st) {
  Shapes s(st);
  std::vector<double> dx(s.batch * s.in);
  for (auto _ : st) {
    kernels::dense_backward_input(E, s.y.data(), s.wt.data(), dx.data(), s.batch, s.in, s.out);
    benchmark::DoNotOptimize(dx.data());
  }
  st.SetItemsProcessed(st.iterations() * s.batch * s.in * s.out);
}

template <kernels::Exec E>
void BM_BackwardParams(benchmark::State& st) {
  Shapes s(st);
  std::vector<double> dwt(s.in * s.out), db(s.out);
  for (auto _ : st) {
    kernels::dense_backward_params(E, s.x.data(), s.y.data(), dwt.data(), db.data(), s.batch, s.in, s.out);
    benchmark::DoNotOptimize(dwt.data());
  }
  st.SetItemsProcessed(st.iterations() * s.batch * s.in * s.out);
}

template <kernels::Exec E>
void BM_MlpStep(benchmark::State& st) {
  const auto width = static_cast<std::size_t>(st.range(1));
  Mlp mlp(MlpArch{{64, width, width, width, 60}, Activation::mish, Activation::identity});
  mlp.set_exec(E);
  Rng rng(3);
  auto params = mlp.make_params(rng);
  Matrix x(static_cast<std::size_t>(st.range(0)), 64);
  for (double& v : x.data) v = rng.normal();
  std::vector<double> grad(params.size());
  for (auto _ : st) {
    MlpTape tape;
    Matrix y = mlp.forward(params, x, &tape);
    mlp.backward(params, tape, y, grad);
    benchmark::DoNotOptimize(grad.data());
  }
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 64, 256})->Args({64, 256, 256})->Args({256, 256, 256})->Args({256, 128, 128});
}

}  // namespace

BENCHMARK(BM_Forward<kernels::Exec::serial>)->Apply(shapes);
BENCHMARK(BM_Forward<kernels::Exec::parallel>)->Apply(shapes);
BENCHMARK(BM_BackwardInput<kernels::Exec::serial>)->Apply(shapes);
BENCHMARK(BM_BackwardInput<kernels::Exec::parallel>)->Apply(shapes);
BENCHMARK(BM_BackwardParams<kernels::Exec::serial>)->Apply(shapes);
BENCHMARK(BM_BackwardParams<kernels::Exec::parallel>)->Apply(shapes);
BENCHMARK(BM_MlpStep<kernels::Exec::serial>)->Args({64, 128})->Args({64, 256});
BENCHMARK(BM_MlpStep<kernels::Exec::parallel>)->Args({64, 128})->Args({64, 256});

BENCHMARK_MAIN();
