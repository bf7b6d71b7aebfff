#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "nback/metrics.hpp"

namespace nback::human {

enum class Design { fixed, adaptive, literature_only };

struct Participant {
  std::string id;
  std::map<int, double> accuracy;  // level -> a_{i,n}
  std::map<int, double> dprime;    // level -> d'_{i,k}
  std::map<int, bool> advanced;    // destination level k+1 -> A_{i,k+1}
};

struct LiteratureSummary {
  double mean = 0.0;
  double se = 0.0;
};

struct StudyRecord {
  std::string study_id;
  Design design = Design::fixed;
  int first_level = 1;  // adaptive: every participant starts here
  std::vector<Participant> participants;
  std::map<int, LiteratureSummary> literature;

  // Adaptive: a participant is observed at level n when n is the first level or they
  // advanced into it.
  bool observed_at(const Participant& p, int level) const;
  std::vector<int> levels() const;
  void validate() const;
};

struct Coefficients {
  double beta0 = 0.0;
  double beta1 = 0.0;
  int iterations = 0;
  double gradient_norm = 0.0;
};

// Transition k -> k+1 coefficients.
struct ProgressionModel {
  std::map<int, Coefficients> transitions;
};

// Logistic MLE of P(advance to k+1 | d'_k) by damped Newton.
Coefficients fit_logistic(const std::vector<double>& x, const std::vector<int>& y);
Coefficients fit_progression(const StudyRecord& study, int k);
// Fits every transition needed to reach max_level.
ProgressionModel fit_progression_model(const StudyRecord& study, int max_level);

struct IpwResult {
  double mean = 0.0;
  std::size_t participants = 0;
  std::size_t clipped = 0;  // weights capped at 1e6
};

inline constexpr double kMinPropensity = 1e-6;
inline constexpr double kMaxWeight = 1e6;

IpwResult ipw_mean(const StudyRecord& study, const ProgressionModel& model, int n);

// Study mean at level n: IPW-corrected for adaptive designs, the reported mean for
// literature-only studies, the plain participant mean otherwise. Empty when the study
// does not cover n.
std::optional<double> study_mean(const StudyRecord& study, int n, const ProgressionModel* model = nullptr);

double aggregate(const std::vector<StudyRecord>& studies, int n);
std::size_t contributing_studies(const std::vector<StudyRecord>& studies, int n);

struct ReferenceRow {
  int n = 0;
  double mean = 0.0;
  Interval ci;
  std::size_t studies = 0;
  int resamples_used = 0;
  int resamples_failed = 0;
};

std::vector<ReferenceRow> bootstrap_reference(const std::vector<StudyRecord>& studies, const std::vector<int>& levels,
                                              int resamples, std::uint64_t seed, int workers = 1);

std::vector<StudyRecord> studies_from_json(const nlohmann::json& j);
nlohmann::json studies_to_json(const std::vector<StudyRecord>& studies);
std::vector<StudyRecord> load_studies(const std::filesystem::path& path);

}  // namespace nback::human
