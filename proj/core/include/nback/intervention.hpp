#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "nback/stimgen.hpp"
#include "nback/subject.hpp"

namespace nback {

struct LetterSubspace {
  Eigen::MatrixXd basis;           // k x d, orthonormal rows
  Eigen::RowVectorXd mu_proj;      // d, mean over letters of the projection onto the basis
  Eigen::RowVectorXd letter_mean;  // d, mean identity row (kept to re-derive mu_proj for subsets)
  Eigen::VectorXd singular_values; // all singular values of the centered identity matrix
  std::string source_layer;

  int k() const { return static_cast<int>(basis.rows()); }
  int d() const { return static_cast<int>(basis.cols()); }
  // Subspace spanned by the chosen rows of this basis (0-based).
  LetterSubspace select(const std::vector<int>& directions) const;
};

// identity: 26 x d. Throws ParameterError when the centered rank is below k.
LetterSubspace fit_letter_subspace(const Eigen::MatrixXd& identity, int k, const std::string& source_layer = {});

// h - alpha (B^T B h - mu_proj); returns h unchanged when alpha == 0.
Eigen::RowVectorXd apply_removal(const Eigen::RowVectorXd& h, const LetterSubspace& sub, double alpha);

void save_subspace(const std::filesystem::path& path, const LetterSubspace& sub);
LetterSubspace load_subspace(const std::filesystem::path& path);

struct SweepCell {
  std::string kind;  // "single" or "prefix"
  int index = 0;     // single: 0-based direction; prefix: direction count
  double alpha = 0.0;
  std::vector<int> directions() const;
  std::string label() const;
};

struct SweepConfig {
  std::vector<int> loads = {1, 2, 3, 4};
  std::vector<double> alphas = {0.3, 0.5, 1.0};
  int max_directions = 5;    // singles 0..max-1 and prefixes 1..max
  bool singles = true;
  bool prefixes = true;
  int trials_per_cell = 50;
  std::uint64_t seed = 0;
  EvalMode mode = EvalMode::teacher_forced;
  Condition condition = Condition::uniform26();
  int workers = 1;

  std::vector<SweepCell> cells() const;
};

struct SweepRow {
  SweepCell cell;
  int n = 0;
  double baseline_acc = 0.0;
  double intervened_acc = 0.0;
  double gain() const { return intervened_acc - baseline_acc; }
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::map<int, double> baseline;                     // load -> unintervened accuracy
  std::map<int, std::vector<std::uint64_t>> trial_seeds;  // load -> seeds shared by every cell
  std::string subject;
};

// Trials for one load of a sweep; every cell of that load reuses exactly these.
std::vector<TrialSpec> sweep_trials(const SweepConfig& config, int n);

SweepResult sweep(const SubjectFactory& factory, const LetterSubspace& subspace, const SweepConfig& config);

struct SweepSummary {
  double baseline_mean = 0.0;
  double best_mean = 0.0;
  double gain = 0.0;
  std::map<int, SweepRow> best_by_load;
  bool optimistic = true;  // best cell picked after the fact, per load
};

SweepSummary summarize_best(const SweepResult& result, const std::vector<int>& loads = {1, 2, 3, 4});

}  // namespace nback
