// Serial reference kernels against their OpenMP counterparts.
// Thread count for the parallel variants is the benchmark's second argument.

#include <benchmark/benchmark.h>

#include <random>

#include "bisenet/kernels.hpp"

using namespace bisenet;
namespace ks = bisenet::kernels;

namespace {

Tensor<float> random_tensor(Shape s, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  Tensor<float> t(s);
  for (auto& v : t.storage()) v = d(gen);
  return t;
}

struct ConvCase {
  Shape x;
  Shape w;
  ConvGeometry g;
};

// 0: dense 3x3 detail-branch layer, 1: depthwise 3x3, 2: pointwise 1x1.
ConvCase conv_case(int64_t id) {
  switch (id) {
    case 0: return {{1, 64, 64, 128}, {64, 64, 3, 3}, {1, 1, 1}};
    case 1: return {{1, 192, 32, 64}, {192, 1, 3, 3}, {1, 1, 192}};
    default: return {{1, 192, 32, 64}, {64, 192, 1, 1}, {1, 0, 1}};
  }
}

template <bool Parallel>
void BM_ConvForward(benchmark::State& st) {
  const ConvCase c = conv_case(st.range(0));
  if (Parallel) ks::set_thread_count(static_cast<int>(st.range(1)));
  const auto x = random_tensor(c.x, 1), w = random_tensor(c.w, 2);
  Tensor<float> y(conv2d_output_shape(c.x, c.w, c.g));
  for (auto _ : st) {
    if (Parallel) {
      ks::omp::conv2d_forward(x, w, nullptr, c.g, y);
    } else {
      ks::serial::conv2d_forward(x, w, nullptr, c.g, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
  const double macs = static_cast<double>(y.size()) * c.w.c * c.w.h * c.w.w;
  st.counters["GMAC/s"] = benchmark::Counter(macs * 1e-9, benchmark::Counter::kIsIterationInvariantRate);
}

template <bool Parallel>
void BM_ConvBackward(benchmark::State& st) {
  const ConvCase c = conv_case(st.range(0));
  if (Parallel) ks::set_thread_count(static_cast<int>(st.range(1)));
  const auto x = random_tensor(c.x, 1), w = random_tensor(c.w, 2);
  const auto dy = random_tensor(conv2d_output_shape(c.x, c.w, c.g), 3);
  Tensor<float> dx(c.x), dw(c.w);
  for (auto _ : st) {
    if (Parallel) {
      ks::omp::conv2d_backward_input(dy, w, c.g, dx);
      ks::omp::conv2d_backward_weight(dy, x, c.g, dw, nullptr);
    } else {
      ks::serial::conv2d_backward_input(dy, w, c.g, dx);
      ks::serial::conv2d_backward_weight(dy, x, c.g, dw, nullptr);
    }
    benchmark::DoNotOptimize(dx.data());
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_ResizeBilinear(benchmark::State& st) {
  if (Parallel) ks::set_thread_count(static_cast<int>(st.range(1)));
  const auto x = random_tensor({1, 19, 64, 128}, 4);
  Tensor<float> y({1, 19, 512, 1024});
  for (auto _ : st) {
    if (Parallel) {
      ks::omp::resize_bilinear_forward(x, y);
    } else {
      ks::serial::resize_bilinear_forward(x, y);
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void conv_args(benchmark::internal::Benchmark* b) {
  for (int id : {0, 1, 2})
    for (int t : {1, 2, 4}) b->Args({id, t});
}

void serial_conv_args(benchmark::internal::Benchmark* b) {
  for (int id : {0, 1, 2}) b->Args({id, 1});
}

}  // namespace

BENCHMARK(BM_ConvForward<false>)->Apply(serial_conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvForward<true>)->Apply(conv_args)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ConvBackward<false>)->Apply(serial_conv_args)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvBackward<true>)->Apply(conv_args)->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_ResizeBilinear<false>)->Args({0, 1})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ResizeBilinear<true>)->Args({0, 1})->Args({0, 2})->Args({0, 4})
    ->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
