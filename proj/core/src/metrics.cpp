#include "nback/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include <boost/math/special_functions/beta.hpp>

#include "nback/error.hpp"
#include "nback/rng.hpp"

namespace nback {

std::vector<PooledTurn> pool_turns(const std::vector<Transcript>& transcripts) {
  std::vector<PooledTurn> pool;
  std::optional<int> load;
  for (const auto& tr : transcripts) {
    if (tr.failed) continue;
    if (load && *load != tr.n) throw ParameterError("pool_turns: transcripts mix memory loads");
    load = tr.n;
    for (const auto& turn : tr.turns) {
      if (turn.t < tr.n) continue;
      pool.push_back({turn.truth, turn.dist.top1, turn.dist.probs, tr.trial_id, turn.t, tr.n});
    }
  }
  return pool;
}

KappaResult cohen_kappa(const std::vector<PooledTurn>& pool) {
  if (pool.empty()) throw ParameterError("cohen_kappa: empty pool");
  // Index 27 holds the garbled-output sentinel so it gets its own marginal cell.
  std::array<double, kSymbolCount + 1> target{};
  std::array<double, kSymbolCount + 1> predicted{};
  std::size_t agree = 0;
  for (const auto& p : pool) {
    target[p.target.index()] += 1.0;
    predicted[p.prediction.index()] += 1.0;
    if (p.target == p.prediction) ++agree;
  }
  const double total = static_cast<double>(pool.size());
  KappaResult r;
  r.count = pool.size();
  r.p_observed = agree / total;
  for (std::size_t a = 0; a < target.size(); ++a) r.p_expected += (target[a] / total) * (predicted[a] / total);
  if (r.p_expected >= 1.0 - 1e-15) throw UndefinedValueError("cohen_kappa: expected agreement is 1");
  r.kappa = (r.p_observed - r.p_expected) / (1.0 - r.p_expected);
  return r;
}

double chance_corrected(double accuracy, double m) {
  if (!(m >= 2.0)) throw ParameterError("chance_corrected: alphabet size must be >= 2");
  return (accuracy - 1.0 / m) / (1.0 - 1.0 / m);
}

AccuracySummary summarize_accuracy(const std::vector<Transcript>& transcripts) {
  AccuracySummary s;
  std::vector<double> acc;
  for (const auto& tr : transcripts) {
    if (tr.failed) {
      ++s.failed;
      continue;
    }
    acc.push_back(score_accuracy(tr));
  }
  s.trials = acc.size();
  if (acc.empty()) throw UndefinedValueError("summarize_accuracy: no completed trials");
  s.mean = mean_of(acc);
  if (acc.size() > 1) {
    double ss = 0.0;
    for (double a : acc) ss += (a - s.mean) * (a - s.mean);
    s.se = std::sqrt(ss / static_cast<double>(acc.size() - 1) / static_cast<double>(acc.size()));
  }
  return s;
}

double KernelEstimate::at(int k) const {
  if (k < min_offset || k > 0) throw ParameterError("kernel offset out of range");
  return rho[k - min_offset];
}

std::size_t KernelEstimate::count_at(int k) const {
  if (k < min_offset || k > 0) throw ParameterError("kernel offset out of range");
  return count[k - min_offset];
}

KernelEstimate retrieval_kernel(const std::vector<Transcript>& transcripts, int n) {
  KernelEstimate est;
  est.n = n;
  est.min_offset = std::min(-5, -n);
  const std::size_t width = static_cast<std::size_t>(-est.min_offset + 1);
  std::vector<double> sum(width, 0.0);
  std::vector<double> sumsq(width, 0.0);
  est.count.assign(width, 0);
  est.excluded.assign(width, 0);
  double dash_total = 0.0;
  std::size_t turns = 0;
  for (const auto& tr : transcripts) {
    if (tr.failed) continue;
    if (tr.n != n) throw ParameterError("retrieval_kernel: transcript load differs from n");
    if (!tr.has_distribution) {
      throw CapabilityError("retrieval_kernel: subject '" + tr.subject_name + "' reports top-1 only");
    }
    for (const auto& turn : tr.turns) {
      const int t = turn.t;
      if (t < n) continue;
      ++turns;
      dash_total += turn.dist.probs[kDashIndex];
      const Letter memory = tr.turns[t - n].stimulus;
      for (int k = est.min_offset; k <= 0; ++k) {
        if (t + k < 0) continue;
        const std::size_t slot = static_cast<std::size_t>(k - est.min_offset);
        const Letter item = tr.turns[t + k].stimulus;
        if (k != -n && item == memory) {
          ++est.excluded[slot];
          continue;
        }
        const double p = turn.dist.probs[item.index()];
        sum[slot] += p;
        sumsq[slot] += p * p;
        ++est.count[slot];
      }
    }
  }
  est.rho.assign(width, 0.0);
  est.se.assign(width, 0.0);
  for (std::size_t i = 0; i < width; ++i) {
    const double c = static_cast<double>(est.count[i]);
    if (c == 0) {
      est.rho[i] = std::nan("");
      est.se[i] = std::nan("");
      continue;
    }
    est.rho[i] = sum[i] / c;
    if (c > 1) {
      const double var = std::max(0.0, (sumsq[i] - c * est.rho[i] * est.rho[i]) / (c - 1));
      est.se[i] = std::sqrt(var / c);
    }
  }
  if (turns == 0) throw UndefinedValueError("retrieval_kernel: no evaluable turns");
  est.mean_dash_mass = dash_total / static_cast<double>(turns);
  return est;
}

Frontier frontier(const std::map<int, KernelEstimate>& kernels, const std::vector<int>& loads) {
  if (loads.empty()) throw ParameterError("frontier: no loads requested");
  Frontier f;
  for (int n : loads) {
    auto it = kernels.find(n);
    if (it == kernels.end()) throw ParameterError("frontier: missing kernel for n=" + std::to_string(n));
    const auto& k = it->second;
    f.correct_mass += k.at(-n);
    double interference = 0.0;
    for (int off = -n + 1; off <= 0; ++off) interference += k.at(off);
    f.interference_mass += interference;
  }
  f.correct_mass /= static_cast<double>(loads.size());
  f.interference_mass /= static_cast<double>(loads.size());
  return f;
}

ContrastInputs ContrastInputs::from_table(const std::map<std::string, double>& table) {
  auto get = [&](const Condition& c) -> std::optional<double> {
    auto it = table.find(c.name());
    if (it == table.end()) return std::nullopt;
    return it->second;
  };
  ContrastInputs in;
  in.base = get(Condition::uniform26());
  in.lure_minus = get(Condition::uniform26().with_lure(LureSide::minus_one, 0.25));
  in.lure_plus = get(Condition::uniform26().with_lure(LureSide::plus_one, 0.25));
  in.reduced10 = get(Condition::reduced(10));
  in.markov_high = get(Condition::markov(10, 0.8));
  in.markov_zero = get(Condition::markov(10, 0.0));
  return in;
}

ContrastReport contrasts(const ContrastInputs& in, bool require_all) {
  ContrastReport r;
  r.components = in;
  if (in.base && in.lure_minus && in.lure_plus) {
    r.delta_lure = 0.5 * (*in.lure_minus + *in.lure_plus) - *in.base;
  }
  if (in.base && in.lure_minus) r.delta_lure_minus = *in.lure_minus - *in.base;
  if (in.base && in.lure_plus) r.delta_lure_plus = *in.lure_plus - *in.base;
  if (in.base && in.reduced10) {
    r.delta_vocab = chance_corrected(*in.reduced10, 10) - chance_corrected(*in.base, 26);
  }
  if (in.markov_high && in.markov_zero) r.delta_tran = *in.markov_high - *in.markov_zero;
  if (require_all && !(r.delta_lure && r.delta_vocab && r.delta_tran)) {
    throw ParameterError("contrasts: missing component accuracies");
  }
  return r;
}

PearsonResult pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ParameterError("pearson: samples differ in length");
  if (x.size() < 3) throw ParameterError("pearson: need at least 3 pairs");
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw UndefinedValueError("pearson: zero variance");
  PearsonResult res;
  res.n = x.size();
  res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(x.size()) - 2.0;
  const double one_minus_r2 = 1.0 - res.r * res.r;
  if (one_minus_r2 <= 0.0) {
    res.p = 0.0;
  } else {
    const double t2 = res.r * res.r * df / one_minus_r2;
    res.p = boost::math::ibeta(df / 2.0, 0.5, df / (df + t2));
  }
  return res;
}

double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw ParameterError("mean of an empty sample");
  double s = 0.0;
  for (double v : xs) s += v;
  return s / static_cast<double>(xs.size());
}

double sorted_quantile(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw ParameterError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

Interval bootstrap_ci(std::span<const double> samples, const Statistic& statistic, int resamples,
                      std::uint64_t seed, double level) {
  if (samples.empty()) throw ParameterError("bootstrap_ci: empty sample");
  if (resamples < 100) throw ParameterError("bootstrap_ci: need at least 100 resamples");
  if (!(level > 0.0 && level < 1.0)) throw ParameterError("bootstrap_ci: level must be in (0,1)");
  Stream stream(seed, "bootstrap");
  std::vector<double> draw(samples.size());
  std::vector<double> stats;
  stats.reserve(static_cast<std::size_t>(resamples));
  const auto size = static_cast<std::uint32_t>(samples.size());
  for (int b = 0; b < resamples; ++b) {
    for (auto& d : draw) d = samples[stream.uniform_below(size)];
    stats.push_back(statistic(draw));
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0;
  return {sorted_quantile(stats, tail), sorted_quantile(stats, 1.0 - tail)};
}

}  // namespace nback
