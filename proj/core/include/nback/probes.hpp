#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "nback/metrics.hpp"
#include "nback/trial_engine.hpp"

namespace nback::probes {

inline constexpr std::size_t kDefaultMinSamples = 5;

// Answer-position states of a run, aligned with its transcripts.
struct HiddenRecord {
  std::string subject;
  std::vector<std::string> layers;
  int d = 0;
  std::string position_kind = "answer_position";
  std::vector<std::string> trial_ids;
  std::vector<std::vector<int>> turns;              // [trial] -> turn indices t
  std::vector<std::vector<Eigen::MatrixXd>> states;  // [layer][trial], one row per listed turn

  std::size_t layer_index(const std::string& id) const;
  std::size_t trial_count() const { return trial_ids.size(); }
};

// Builds a record from run_trial outputs; failed trials are skipped.
HiddenRecord make_hidden_record(const std::string& subject, const std::vector<std::string>& layers,
                                const std::vector<TrialResult>& results);

void write_hidden_file(const std::filesystem::path& path, const HiddenRecord& record);
HiddenRecord read_hidden_file(const std::filesystem::path& path);

// 26 x d letter means; rows below the sample minimum are flagged invalid.
struct CentroidSet {
  Eigen::MatrixXd means;
  std::array<std::size_t, kLetterCount> counts{};
  std::array<bool, kLetterCount> valid{};

  std::size_t valid_count() const;
};

using LetterCentroids = std::map<std::string, CentroidSet>;  // layer id -> centroids

// Pairs each hidden-record trial with its transcript by trial id.
std::vector<const Transcript*> align_transcripts(const HiddenRecord& hidden,
                                                 const std::vector<Transcript>& transcripts);

LetterCentroids stimulus_centroids(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                   std::size_t min_samples = kDefaultMinSamples);

// Identity representations as centroid sets; adds an "average" family holding the entry-wise
// mean over the supplied families when there is more than one.
std::map<std::string, LetterCentroids> identity_centroids(const IdentityStates& states);

struct CosineMean {
  double value = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;  // flagged letters or zero-norm rows
};

double cosine(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b);

// Mean over letters of cos(row_a(c), row_b(c)) for letters valid on both sides.
CosineMean matched_cosine(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                          const std::array<bool, kLetterCount>* valid_a = nullptr,
                          const std::array<bool, kLetterCount>* valid_b = nullptr);

CosineMean letter_alignment(const CentroidSet& stimulus, const CentroidSet& identity);

struct DecodeResult {
  double accuracy = 0.0;
  std::size_t turns = 0;
};

// Nearest-centroid (cosine) decoding of the current letter at one layer.
DecodeResult decode_current_letter(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                   const std::string& layer, const CentroidSet& centroids);
// Same, re-estimating centroids without the scored trial.
DecodeResult decode_leave_one_trial_out(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                        const std::string& layer, std::size_t min_samples = kDefaultMinSamples);

int nearest_centroid(const Eigen::Ref<const Eigen::RowVectorXd>& h, const CentroidSet& centroids);

// Means grouped by the letter p turns back, p = 0..n, raw and centered by the global mean.
struct PositionalMeans {
  int n = 0;
  Eigen::RowVectorXd global_mean;
  std::vector<CentroidSet> raw;
  std::vector<CentroidSet> centered;
};

std::map<std::string, PositionalMeans> positional_means(const HiddenRecord& hidden,
                                                        const std::vector<Transcript>& transcripts, int n,
                                                        std::size_t min_samples = kDefaultMinSamples);

struct SubspaceSimilarity {
  Eigen::MatrixXd S;
  double mean_abs_offdiag = 0.0;
  std::size_t excluded = 0;
};

SubspaceSimilarity subspace_similarity(const PositionalMeans& means);

// R_p for p = 0..n against readout rows r_c (26 x d).
std::vector<CosineMean> readout_alignment(const PositionalMeans& means, const Eigen::MatrixXd& readout);

struct TrialMetrics {
  std::string trial_id;
  std::string layer;
  double accuracy = 0.0;
  std::optional<double> letter_alignment;
  std::optional<double> decodability;
  std::optional<double> subspace_similarity;
  std::optional<double> target_alignment;
};

// Per-trial statistics from trial states against run-level centroids and global mean.
std::vector<TrialMetrics> trial_metrics(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                        int n, const LetterCentroids& run_centroids,
                                        const std::map<std::string, PositionalMeans>& run_positional,
                                        const LetterCentroids* identity, const Eigen::MatrixXd* readout);

struct CorrelationRow {
  std::string metric;
  std::string layer;
  std::optional<PearsonResult> result;  // empty when a side has zero variance
  std::size_t samples = 0;
};

std::vector<CorrelationRow> trial_correlations(const std::vector<TrialMetrics>& rows);

}  // namespace nback::probes
