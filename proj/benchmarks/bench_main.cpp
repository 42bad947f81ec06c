#include <benchmark/benchmark.h>

#include "vblora/config.hpp"
#include "vblora/core.hpp"
#include "vblora/harness.hpp"

using namespace vblora;

namespace {

void BM_TopkAdmix(benchmark::State& state) {
    const auto h = static_cast<std::size_t>(state.range(0));
    const auto k = static_cast<std::size_t>(state.range(1));
    Rng rng(1);
    const auto bank = init_bank(h, 256, rng);
    std::vector<float> sigma(h);
    for (auto& s : sigma) s = static_cast<float>(rng.normal());
    for (auto _ : state) benchmark::DoNotOptimize(topk_admix<float>(sigma, bank, k));
}
BENCHMARK(BM_TopkAdmix)->Args({90, 2})->Args({256, 2})->Args({2048, 2})->Args({256, 8})->Args({256, 256});

// One 1024 x 1024 module at r = 4, b = 256.
void BM_ComposeFactors(benchmark::State& state) {
    const auto h = static_cast<std::size_t>(state.range(0));
    Rng rng(2);
    const auto bank = init_bank(h, 256, rng);
    const auto la = init_logits(1024, 4, h, 256, rng, Side::A);
    const auto lb = init_logits(1024, 4, h, 256, rng, Side::B);
    for (auto _ : state) {
        benchmark::DoNotOptimize(compose_A(la, bank, 2));
        benchmark::DoNotOptimize(compose_B(lb, bank, 2));
    }
}
BENCHMARK(BM_ComposeFactors)->Arg(90)->Arg(256);

void BM_AdaptedForward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(3);
    const auto bank = init_bank(90, 64, rng);
    const ComposedFactors<float> f{compose_A(init_logits(256, 4, 90, 64, rng, Side::A), bank, 2),
                                   compose_B(init_logits(256, 4, 90, 64, rng, Side::B), bank, 2)};
    Matrix<float> W(256, 256), x(n, 256);
    for (auto& v : W.data()) v = static_cast<float>(rng.normal());
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    for (auto _ : state) benchmark::DoNotOptimize(adapted_forward(x, W, f));
}
BENCHMARK(BM_AdaptedForward)->Arg(16)->Arg(128);

// Forward and backward of the desk model on one training batch.
void BM_DeskStep(benchmark::State& state) {
    auto config = preset_config("desk");
    auto run = make_run(config);
    Rng rng(4);
    const auto batch = run.task.sample(config.train.batch_size, rng);
    const auto select = topk_selector<float>(2);
    AdapterState<float> grad;
    for (auto _ : state) benchmark::DoNotOptimize(batch_loss_and_grad(run.model, batch, select, grad));
}
BENCHMARK(BM_DeskStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
