#include <benchmark/benchmark.h>

#include "nback/human_ref.hpp"
#include "nback/intervention.hpp"
#include "nback/metrics.hpp"
#include "nback/probes.hpp"
#include "nback/rng.hpp"
#include "nback/subjects.hpp"
#include "nback/trial_engine.hpp"

using namespace nback;

namespace {

Eigen::MatrixXd gaussian(int rows, int cols, std::uint64_t seed) {
  Stream s(seed, "bench");
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = s.normal();
  return m;
}

// Oracle transcripts plus synthetic 48-d states (letter prototype + noise) at every answer turn.
struct ProbeData {
  std::vector<Transcript> transcripts;
  probes::HiddenRecord record;
  ProbeData(int trials, int n) {
    auto oracle = make_builtin_subject(BuiltinSpec::parse("oracle"));
    for (const auto& t : make_trial_set(Condition::uniform26(), n, trials, 2)) {
      transcripts.push_back(run_trial(*oracle, t, EvalMode::teacher_forced).transcript);
    }
    const Eigen::MatrixXd proto = gaussian(26, 48, 3);
    Stream noise(4, "noise");
    record.subject = "synthetic";
    record.d = 48;
    record.layers = {"x"};
    record.states.resize(1);
    for (const auto& tr : transcripts) {
      record.trial_ids.push_back(tr.trial_id);
      std::vector<int> turns;
      Eigen::MatrixXd m(kDefaultTurns - n, 48);
      for (int t = n; t < kDefaultTurns; ++t) {
        turns.push_back(t);
        m.row(t - n) = proto.row(tr.turns[static_cast<std::size_t>(t)].stimulus.index());
        for (int j = 0; j < 48; ++j) m(t - n, j) += 0.5 * noise.normal();
      }
      record.turns.push_back(turns);
      record.states[0].push_back(m);
    }
  }
};

}  // namespace

static void BM_ProbeCentroidsAndDecode(benchmark::State& state) {
  const ProbeData d(static_cast<int>(state.range(0)), 2);
  for (auto _ : state) {
    const auto c = probes::stimulus_centroids(d.record, d.transcripts);
    benchmark::DoNotOptimize(probes::decode_current_letter(d.record, d.transcripts, "x", c.at("x")));
  }
}
BENCHMARK(BM_ProbeCentroidsAndDecode)->Arg(50)->Arg(200);

static void BM_ProbeLeaveOneTrialOut(benchmark::State& state) {
  const ProbeData d(100, 2);
  for (auto _ : state) benchmark::DoNotOptimize(probes::decode_leave_one_trial_out(d.record, d.transcripts, "x"));
}
BENCHMARK(BM_ProbeLeaveOneTrialOut);

static void BM_FitSubspaceAndRemove(benchmark::State& state) {
  const Eigen::MatrixXd id = gaussian(26, 48, 5);
  const Eigen::RowVectorXd h = gaussian(1, 48, 6).row(0);
  for (auto _ : state) {
    const auto sub = fit_letter_subspace(id, 25);
    benchmark::DoNotOptimize(apply_removal(h, sub, 1.0));
  }
}
BENCHMARK(BM_FitSubspaceAndRemove);

static void BM_ApplyRemoval(benchmark::State& state) {
  const auto sub = fit_letter_subspace(gaussian(26, 48, 7), static_cast<int>(state.range(0)));
  const Eigen::RowVectorXd h = gaussian(1, 48, 8).row(0);
  for (auto _ : state) benchmark::DoNotOptimize(apply_removal(h, sub, 0.5));
}
BENCHMARK(BM_ApplyRemoval)->Arg(1)->Arg(25);

static void BM_LogisticFit(benchmark::State& state) {
  Stream s(9, "logistic");
  std::vector<double> x;
  std::vector<int> y;
  for (int i = 0; i < state.range(0); ++i) {
    x.push_back(s.normal());
    y.push_back(s.bernoulli(1.0 / (1.0 + std::exp(-(0.3 + 1.2 * x.back())))) ? 1 : 0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(human::fit_logistic(x, y));
}
BENCHMARK(BM_LogisticFit)->Arg(1000)->Arg(10000);

static void BM_BootstrapMean(benchmark::State& state) {
  Stream s(10, "boot");
  std::vector<double> xs;
  for (int i = 0; i < 500; ++i) xs.push_back(s.uniform01());
  for (auto _ : state) benchmark::DoNotOptimize(bootstrap_ci(xs, mean_of, 2000, 1));
}
BENCHMARK(BM_BootstrapMean);
