#pragma once

// Simulated adaptive-design cohort with a known selection mechanism.
// Latent ability drives both discriminability and accuracy; advancement from level k
// follows a logistic model in the observed d' at k, so selection is ignorable given d'.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "nback/human_ref.hpp"
#include "nback/rng.hpp"

namespace nback::testing {

struct Cohort {
  human::StudyRecord study;
  std::map<int, double> population_mean;  // every simulated participant, observed or not
  std::map<int, double> naive_mean;       // observed participants only, unweighted
  std::map<int, std::pair<double, double>> generator;  // k -> (beta0, beta1)
};

inline Cohort simulate_cohort(int participants, std::uint64_t seed, int max_level = 4,
                              std::vector<double> beta0 = {0.8, 0.4, 0.0}, double beta1 = 1.0) {
  Cohort c;
  c.study.study_id = "sim";
  c.study.design = human::Design::adaptive;
  c.study.first_level = 1;
  for (int k = 1; k < max_level; ++k) c.generator[k] = {beta0[static_cast<std::size_t>(k - 1)], beta1};
  Stream s(seed, "cohort");
  std::map<int, double> pop_sum, obs_sum;
  std::map<int, int> obs_count;
  for (int i = 0; i < participants; ++i) {
    human::Participant p;
    p.id = "p" + std::to_string(i);
    const double theta = s.normal();
    bool reached = true;
    for (int k = 1; k <= max_level; ++k) {
      const double d = theta + 0.5 * s.normal();
      const double a = std::clamp(0.85 - 0.08 * (k - 1) + 0.06 * theta + 0.03 * s.normal(), 0.0, 1.0);
      const double u = s.uniform01();
      pop_sum[k] += a;
      if (!reached) continue;
      p.accuracy[k] = a;
      p.dprime[k] = d;
      obs_sum[k] += a;
      ++obs_count[k];
      if (k < max_level) {
        const auto [b0, b1] = c.generator[k];
        const bool adv = u < 1.0 / (1.0 + std::exp(-(b0 + b1 * d)));
        p.advanced[k + 1] = adv;
        reached = adv;
      }
    }
    c.study.participants.push_back(std::move(p));
  }
  for (int k = 1; k <= max_level; ++k) {
    c.population_mean[k] = pop_sum[k] / participants;
    c.naive_mean[k] = obs_sum[k] / obs_count[k];
  }
  return c;
}

}  // namespace nback::testing
