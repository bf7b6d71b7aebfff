#include <benchmark/benchmark.h>

#include <memory>

#include "nback/stimgen.hpp"
#include "nback/tiny/model.hpp"
#include "nback/tiny/tiny_subject.hpp"
#include "nback/trial_engine.hpp"

using namespace nback;

namespace {

struct Model {
  tiny::ModelConfig config;
  std::shared_ptr<const tiny::Params<float>> params =
      std::make_shared<const tiny::Params<float>>(tiny::init_params<float>(config, 1));
  std::vector<tiny::TokenSequence> batch(int count, int n) const {
    std::vector<tiny::TokenSequence> out;
    for (const auto& t : make_trial_set(Condition::uniform26(), n, count, 9)) {
      out.push_back(tiny::encode_trial(config, t.sequence, n));
    }
    return out;
  }
};

}  // namespace

static void BM_TinyForward(benchmark::State& state) {
  Model m;
  const auto seq = m.batch(1, 2).front();
  for (auto _ : state) benchmark::DoNotOptimize(tiny::forward<float>(m.config, *m.params, seq));
}
BENCHMARK(BM_TinyForward);

static void BM_TinyLossAndGrads(benchmark::State& state) {
  Model m;
  const auto batch = m.batch(static_cast<int>(state.range(0)), 3);
  tiny::Params<float> grads(m.params->layout);
  for (auto _ : state) {
    benchmark::DoNotOptimize(tiny::loss_and_grads<float>(m.config, *m.params, batch, 1.0 / double(batch.size()), grads));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_TinyLossAndGrads)->Arg(16)->Arg(128);

static void BM_TinySubjectTrial(benchmark::State& state) {
  Model m;
  auto subject = tiny::make_tiny_subject(m.config, m.params);
  const auto trials = make_trial_set(Condition::uniform26(), 2, 16, 4);
  RunOptions opt;
  if (state.range(0)) opt.want_hidden = {"emb", "block1", "block2"};
  std::size_t i = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(run_trial(*subject, trials[i++ % trials.size()], EvalMode::teacher_forced, opt));
  }
  state.SetItemsProcessed(state.iterations() * kDefaultTurns);
}
BENCHMARK(BM_TinySubjectTrial)->Arg(0)->Arg(1);
