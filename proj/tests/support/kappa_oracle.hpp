#pragma once

#include <vector>

#include "nback/metrics.hpp"
#include "nback/rng.hpp"

namespace nback::testing {

// Reference kappa from an explicit 28 x 28 confusion matrix (27 symbols + garbled sentinel).
inline double confusion_kappa(const std::vector<PooledTurn>& pool) {
  constexpr int K = kSymbolCount + 1;
  std::vector<std::vector<double>> m(K, std::vector<double>(K, 0.0));
  for (const auto& p : pool) m[p.target.index()][p.prediction.index()] += 1.0;
  const double total = static_cast<double>(pool.size());
  double diag = 0, chance = 0;
  for (int i = 0; i < K; ++i) {
    diag += m[i][i];
    double row = 0, col = 0;
    for (int j = 0; j < K; ++j) {
      row += m[i][j];
      col += m[j][i];
    }
    chance += (row / total) * (col / total);
  }
  const double po = diag / total;
  return (po - chance) / (1 - chance);
}

inline std::vector<PooledTurn> random_pool(Stream& s, int size, int alphabet) {
  std::vector<PooledTurn> pool(static_cast<std::size_t>(size));
  for (auto& p : pool) {
    p.target = Letter::from_index(static_cast<int>(s.uniform_below(static_cast<std::uint32_t>(alphabet))));
    const auto u = s.uniform01();
    if (u < 0.4) {
      p.prediction = p.target;
    } else if (u < 0.45) {
      p.prediction = ResponseSymbol::sentinel();
    } else if (u < 0.5) {
      p.prediction = ResponseSymbol::dash();
    } else {
      p.prediction = Letter::from_index(static_cast<int>(s.uniform_below(static_cast<std::uint32_t>(alphabet))));
    }
  }
  return pool;
}

}  // namespace nback::testing
