#include <benchmark/benchmark.h>

#include "nback/metrics.hpp"
#include "nback/stimgen.hpp"
#include "nback/subjects.hpp"
#include "nback/trial_engine.hpp"

using namespace nback;

static void BM_MakeTrial(benchmark::State& state) {
  const auto cond = Condition::parse("markov:10:0.8+lure:minus:0.25");
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(make_trial(cond, 2, ++seed));
}
BENCHMARK(BM_MakeTrial);

static void BM_RunTrialRecencyBlur(benchmark::State& state) {
  auto subject = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.6,w-1=0.25,w0=0.1"));
  const auto trials = make_trial_set(Condition::uniform26(), 2, 64, 1);
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_trial(*subject, trials[i++ % trials.size()], EvalMode::autoregressive));
  }
  state.SetItemsProcessed(state.iterations() * kDefaultTurns);
}
BENCHMARK(BM_RunTrialRecencyBlur);

static void BM_KappaAndKernel(benchmark::State& state) {
  auto subject = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.6,w-1=0.25,w0=0.1"));
  std::vector<Transcript> trs;
  for (const auto& t : make_trial_set(Condition::uniform26(), 2, static_cast<int>(state.range(0)), 3)) {
    trs.push_back(run_trial(*subject, t, EvalMode::teacher_forced).transcript);
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(cohen_kappa(pool_turns(trs)));
    benchmark::DoNotOptimize(retrieval_kernel(trs, 2));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * kDefaultTurns);
}
BENCHMARK(BM_KappaAndKernel)->Arg(50)->Arg(200);
