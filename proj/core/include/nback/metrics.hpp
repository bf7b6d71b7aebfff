#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nback/trial_engine.hpp"

namespace nback {

struct PooledTurn {
  ResponseSymbol target;
  ResponseSymbol prediction;
  SymbolProbs probs{};
  std::string trial_id;
  int t = 0;
  int n = 0;
};

// Evaluable turns (t >= n) of non-failed transcripts; all transcripts must share one load.
std::vector<PooledTurn> pool_turns(const std::vector<Transcript>& transcripts);

struct KappaResult {
  double kappa = 0.0;
  double p_observed = 0.0;
  double p_expected = 0.0;
  std::size_t count = 0;
};

KappaResult cohen_kappa(const std::vector<PooledTurn>& pool);

// (a - 1/m) / (1 - 1/m)
double chance_corrected(double accuracy, double m);

struct AccuracySummary {
  double mean = 0.0;
  double se = 0.0;  // standard error over trials
  std::size_t trials = 0;
  std::size_t failed = 0;
};

AccuracySummary summarize_accuracy(const std::vector<Transcript>& transcripts);

// Offsets run from min(-5, -n) to 0 so that rho_{-n} exists for every load.
struct KernelEstimate {
  int n = 0;
  int min_offset = -5;
  std::vector<double> rho;         // index k - min_offset
  std::vector<double> se;
  std::vector<std::size_t> count;  // turns kept after the exclusion filter
  std::vector<std::size_t> excluded;
  double mean_dash_mass = 0.0;     // dash mass is never counted toward rho

  double at(int k) const;
  std::size_t count_at(int k) const;
};

// Throws CapabilityError when the transcripts carry only top-1 outputs.
KernelEstimate retrieval_kernel(const std::vector<Transcript>& transcripts, int n);

struct Frontier {
  double correct_mass = 0.0;
  double interference_mass = 0.0;
};

Frontier frontier(const std::map<int, KernelEstimate>& kernels, const std::vector<int>& loads);

// Accuracies of the conditions entering the three contrasts.
struct ContrastInputs {
  std::optional<double> base;          // uniform26
  std::optional<double> lure_minus;    // uniform26 + lures at t-(n-1)
  std::optional<double> lure_plus;     // uniform26 + lures at t-(n+1)
  std::optional<double> reduced10;
  std::optional<double> markov_high;   // markov10, p_tran = 0.8
  std::optional<double> markov_zero;   // markov10, p_tran = 0

  // Picks the inputs out of a table keyed by condition name.
  static ContrastInputs from_table(const std::map<std::string, double>& accuracy_by_condition);
};

struct ContrastReport {
  std::optional<double> delta_lure;
  // Single-side lure effects a_side - a_base, available when only one side was run.
  std::optional<double> delta_lure_minus;
  std::optional<double> delta_lure_plus;
  std::optional<double> delta_vocab;
  std::optional<double> delta_tran;
  ContrastInputs components;
};

// Throws ParameterError when require_all is set and a component is missing.
ContrastReport contrasts(const ContrastInputs& inputs, bool require_all = true);

struct PearsonResult {
  double r = 0.0;
  double p = 1.0;
  std::size_t n = 0;
};

PearsonResult pearson(std::span<const double> x, std::span<const double> y);

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

using Statistic = std::function<double(std::span<const double>)>;

double mean_of(std::span<const double> xs);

// Linear-interpolation quantile of a sorted sample.
double sorted_quantile(std::span<const double> sorted, double q);

// Percentile interval over seeded resamples with replacement.
Interval bootstrap_ci(std::span<const double> samples, const Statistic& statistic, int resamples,
                      std::uint64_t seed, double level = 0.95);

}  // namespace nback
