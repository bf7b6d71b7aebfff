#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "nback/error.hpp"
#include "nback/metrics.hpp"
#include "nback/rng.hpp"

#include "kappa_oracle.hpp"
#include "test_support.hpp"

using namespace nback;
using nback::testing::confusion_kappa;
using nback::testing::random_pool;
using nback::testing::run_set;

TEST_CASE("kappa matches an independent confusion-matrix computation on 100 random pools") {
  Stream s(2024, "kappa-pools");
  for (int i = 0; i < 100; ++i) {
    const int size = 5 + static_cast<int>(s.uniform_below(96));
    const int alphabet = 2 + static_cast<int>(s.uniform_below(25));
    const auto pool = random_pool(s, size, alphabet);
    double ref = 0;
    try {
      ref = confusion_kappa(pool);
    } catch (...) {
      continue;
    }
    if (!std::isfinite(ref)) continue;
    CHECK(std::abs(cohen_kappa(pool).kappa - ref) < 1e-12);
  }
}

TEST_CASE("kappa invariance under turn permutation and < 1 with any disagreement (property)") {
  Stream s(5, "kappa-perm");
  std::mt19937_64 g(5);
  for (int i = 0; i < 50; ++i) {
    auto pool = random_pool(s, 60, 8);
    const double k = cohen_kappa(pool).kappa;
    std::shuffle(pool.begin(), pool.end(), g);
    CHECK(cohen_kappa(pool).kappa == doctest::Approx(k).epsilon(1e-12));
    CHECK(k < 1.0);
  }
  std::vector<PooledTurn> perfect(30);
  for (int i = 0; i < 30; ++i) perfect[i].target = perfect[i].prediction = Letter::from_index(i % 5);
  CHECK(cohen_kappa(perfect).kappa == 1.0);
  perfect[3].prediction = Letter::from_index(4);
  CHECK(cohen_kappa(perfect).kappa < 1.0);
}

TEST_CASE("kappa undefined when expected agreement is 1") {
  std::vector<PooledTurn> pool(10);
  for (auto& p : pool) p.target = p.prediction = Letter::from_index(2);
  CHECK_THROWS_AS(cohen_kappa(pool), UndefinedValueError);
  CHECK_THROWS_AS(cohen_kappa({}), ParameterError);
}

TEST_CASE("pool_turns: evaluable turns only, failed trials skipped, single load enforced") {
  auto ts = run_set("oracle", Condition::uniform26(), 3, 4, 1);
  CHECK(pool_turns(ts).size() == 4 * 47);
  ts[1].failed = true;
  CHECK(pool_turns(ts).size() == 3 * 47);
  auto other = run_set("oracle", Condition::uniform26(), 2, 1, 1);
  ts.push_back(other.front());
  CHECK_THROWS_AS(pool_turns(ts), ParameterError);
}

TEST_CASE("chance_corrected examples and monotonicity") {
  CHECK(chance_corrected(1.0, 26) == doctest::Approx(1.0));
  CHECK(chance_corrected(1.0 / 26, 26) == doctest::Approx(0.0));
  CHECK(chance_corrected(0.55, 10) == doctest::Approx(0.5));
  double prev = -1e9;
  for (double a = 0; a <= 1.0; a += 0.01) {
    const double v = chance_corrected(a, 7);
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("kernel: closed-form expectation for recency_blur within 3 SE over >= 10^4 turns") {
  // w at -2, -1, 0; floor spreads over the 26 letters. At offset k != -n a kept turn has
  // x_{t+k} != x_{t-n}, so w_{-n} never lands on it and every other weight coincides with
  // probability 1/26.
  const std::array<double, 6> w = {0, 0, 0, 0.6, 0.25, 0.1};
  const double floor = 0.05;
  const int n = 2;
  const auto ts = run_set("recency_blur?w-2=0.6,w-1=0.25,w0=0.1", Condition::uniform26(), n, 220, 31);
  const auto est = retrieval_kernel(ts, n);
  REQUIRE(est.count_at(-n) >= 10000);
  double total_w = 0;
  for (double x : w) total_w += x;
  for (int k = -5; k <= 0; ++k) {
    const double wk = w[k + 5];
    const double others = k == -n ? total_w - wk : total_w - wk - w[-n + 5];
    const double expected = wk + floor / 26 + others / 26;
    const double se = est.se[static_cast<std::size_t>(k - est.min_offset)];
    CHECK(std::abs(est.at(k) - expected) <= 3 * std::max(se, 1e-12));
  }
  CHECK(est.mean_dash_mass == 0.0);
}

TEST_CASE("kernel: bounds, exclusion rule and recount (property)") {
  for (int n : {1, 3, 6}) {
    const auto ts = run_set("recency_blur?w-5=0.1,w-3=0.3,w-1=0.2,w0=0.1", Condition::reduced(5), n, 40, 7 + n);
    const auto est = retrieval_kernel(ts, n);
    CHECK(est.min_offset == std::min(-5, -n));
    for (int k = est.min_offset; k <= 0; ++k) {
      // Independent recount of the kept turns and their mean.
      double sum = 0;
      std::size_t kept = 0, dropped = 0;
      for (const auto& tr : ts) {
        const auto x = tr.stimuli();
        for (int t = n; t < 50; ++t) {
          if (t + k < 0) continue;
          if (k != -n && x[t + k] == x[t - n]) {
            ++dropped;
            continue;
          }
          sum += tr.turns[t].dist.probs[x[t + k].index()];
          ++kept;
        }
      }
      CHECK(est.count_at(k) == kept);
      CHECK(est.excluded[static_cast<std::size_t>(k - est.min_offset)] == dropped);
      CHECK(est.at(k) == doctest::Approx(sum / kept).epsilon(1e-12));
      CHECK(est.at(k) >= 0.0);
      CHECK(est.at(k) <= 1.0);
    }
  }
}

TEST_CASE("kernel refuses top-1-only transcripts") {
  auto ts = run_set("oracle", Condition::uniform26(), 2, 2, 1);
  ts[0].has_distribution = false;
  CHECK_THROWS_AS(retrieval_kernel(ts, 2), CapabilityError);
}

TEST_CASE("frontier: oracle (1, 0), uniform (1/26, mean n/26), recency_blur weight sums") {
  const std::vector<int> loads = {1, 2, 3, 4};
  std::map<int, KernelEstimate> oracle, uniform, blur;
  for (int n : loads) {
    oracle[n] = retrieval_kernel(run_set("oracle", Condition::uniform26(), n, 20, 3), n);
    uniform[n] = retrieval_kernel(run_set("uniform", Condition::uniform26(), n, 20, 3), n);
    blur[n] = retrieval_kernel(run_set("recency_blur?w-1=0.3,w0=0.7", Condition::uniform26(), n, 150, 3), n);
  }
  const auto fo = frontier(oracle, loads);
  CHECK(fo.correct_mass == 1.0);
  CHECK(fo.interference_mass == 0.0);
  const auto fu = frontier(uniform, loads);
  CHECK(fu.correct_mass == doctest::Approx(1.0 / 26).epsilon(1e-12));
  CHECK(fu.interference_mass == doctest::Approx((1 + 2 + 3 + 4) / 4.0 / 26).epsilon(1e-12));
  // Closed form: at n = 1 only w_0 is interference and w_{-1} is the target.
  const auto f1 = frontier(blur, {1});
  CHECK(f1.correct_mass == doctest::Approx(0.3 + 0.7 / 26).epsilon(0.02));
  CHECK(f1.interference_mass == doctest::Approx(0.7 + 0.3 / 26).epsilon(0.02));
  CHECK_THROWS_AS(frontier(oracle, {5}), ParameterError);
}

TEST_CASE("contrasts: arithmetic examples") {
  ContrastInputs in;
  in.base = in.lure_minus = in.lure_plus = in.reduced10 = in.markov_high = in.markov_zero = 0.5;
  auto r = contrasts(in);
  CHECK(*r.delta_lure == 0.0);
  CHECK(*r.delta_tran == 0.0);
  in.lure_minus = 0.4;
  in.lure_plus = 0.6;
  in.base = 0.55;
  r = contrasts(in);
  CHECK(*r.delta_lure == doctest::Approx(-0.05));
  CHECK(*r.delta_lure_minus == doctest::Approx(-0.15));
  CHECK(*r.delta_vocab == doctest::Approx(chance_corrected(0.5, 10) - chance_corrected(0.55, 26)));
  ContrastInputs partial;
  partial.base = 0.5;
  CHECK_THROWS_AS(contrasts(partial), ParameterError);
  CHECK_FALSE(contrasts(partial, false).delta_lure.has_value());
}

TEST_CASE("contrast inputs pick conditions by name") {
  const auto in = ContrastInputs::from_table({{"uniform26", 0.9}, {"markov10_p0.8", 0.7}, {"markov10_p0", 0.5}});
  CHECK(*in.base == 0.9);
  CHECK(*contrasts(in, false).delta_tran == doctest::Approx(0.2));
}

TEST_CASE("pearson: exact lines, symmetry, affine invariance, zero variance") {
  std::vector<double> x, y, z;
  Stream s(3, "pearson");
  for (int i = 0; i < 30; ++i) {
    x.push_back(s.normal());
    z.push_back(s.normal() + 0.5 * x.back());
  }
  for (double v : x) y.push_back(2 * v + 1);
  CHECK(pearson(x, y).r == doctest::Approx(1.0));
  std::vector<double> neg;
  for (double v : x) neg.push_back(-v);
  CHECK(pearson(x, neg).r == doctest::Approx(-1.0));
  const auto a = pearson(x, z);
  const auto b = pearson(z, x);
  CHECK(a.r == doctest::Approx(b.r).epsilon(1e-14));
  CHECK(a.p == doctest::Approx(b.p).epsilon(1e-12));
  std::vector<double> zt;
  for (double v : z) zt.push_back(3.5 * v - 7);
  CHECK(pearson(x, zt).r == doctest::Approx(a.r).epsilon(1e-12));
  std::vector<double> flat(30, 1.0);
  CHECK_THROWS_AS(pearson(x, flat), UndefinedValueError);
}

TEST_CASE("pearson p matches a 10^5-permutation test within 0.01 (n = 20)") {
  Stream s(77, "perm");
  std::vector<double> x, y;
  for (int i = 0; i < 20; ++i) {
    x.push_back(s.normal());
    y.push_back(0.45 * x.back() + s.normal());
  }
  const auto res = pearson(x, y);
  std::mt19937_64 g(1);
  std::vector<double> perm = y;
  int extreme = 0;
  const int reps = 100000;
  for (int r = 0; r < reps; ++r) {
    std::shuffle(perm.begin(), perm.end(), g);
    if (std::abs(pearson(x, perm).r) >= std::abs(res.r) - 1e-15) ++extreme;
  }
  CHECK(std::abs(double(extreme) / reps - res.p) < 0.01);
}

TEST_CASE("bootstrap: constant sample, plug-in containment, validation") {
  const std::vector<double> c(40, 0.3);
  const auto ci = bootstrap_ci(c, mean_of, 500, 1);
  CHECK(ci.low == doctest::Approx(0.3));
  CHECK(ci.high == doctest::Approx(0.3));
  Stream s(9, "boot-test");
  for (int i = 0; i < 20; ++i) {
    std::vector<double> xs;
    for (int j = 0; j < 15; ++j) xs.push_back(s.normal() * 3);
    const auto iv = bootstrap_ci(xs, mean_of, 400, static_cast<std::uint64_t>(i));
    const double m = mean_of(xs);
    CHECK(iv.low <= m);
    CHECK(iv.high >= m);
  }
  CHECK_THROWS_AS(bootstrap_ci({}, mean_of, 500, 1), ParameterError);
  CHECK_THROWS_AS(bootstrap_ci(c, mean_of, 99, 1), ParameterError);
  CHECK(bootstrap_ci(c, mean_of, 500, 4).low == bootstrap_ci(c, mean_of, 500, 4).low);
}

TEST_CASE("bootstrap: coverage of the mean is 95% +- 2% over 1000 Gaussian samples of n = 50") {
  Stream s(123, "coverage");
  int covered = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    std::vector<double> xs;
    for (int j = 0; j < 50; ++j) xs.push_back(s.normal());
    const auto iv = bootstrap_ci(xs, mean_of, 2000, static_cast<std::uint64_t>(rep));
    covered += (iv.low <= 0.0 && 0.0 <= iv.high) ? 1 : 0;
  }
  CHECK(std::abs(covered / 1000.0 - 0.95) <= 0.02);
}

TEST_CASE("sorted_quantile interpolates linearly") {
  const std::vector<double> v = {1, 2, 3, 4};
  CHECK(sorted_quantile(v, 0.0) == 1);
  CHECK(sorted_quantile(v, 1.0) == 4);
  CHECK(sorted_quantile(v, 0.5) == doctest::Approx(2.5));
}
