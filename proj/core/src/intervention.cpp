#include "nback/intervention.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"
#include "nback/metrics.hpp"
#include "nback/parallel.hpp"
#include "nback/rng.hpp"
#include "nback/trial_engine.hpp"

namespace nback {

LetterSubspace LetterSubspace::select(const std::vector<int>& directions) const {
  if (directions.empty()) throw ParameterError("subspace selection is empty");
  LetterSubspace out;
  out.basis.resize(static_cast<Eigen::Index>(directions.size()), basis.cols());
  for (std::size_t i = 0; i < directions.size(); ++i) {
    const int r = directions[i];
    if (r < 0 || r >= k()) throw ParameterError("subspace direction " + std::to_string(r) + " out of range");
    out.basis.row(static_cast<Eigen::Index>(i)) = basis.row(r);
  }
  out.letter_mean = letter_mean;
  out.mu_proj = (letter_mean * out.basis.transpose()) * out.basis;
  out.singular_values = singular_values;
  out.source_layer = source_layer;
  return out;
}

LetterSubspace fit_letter_subspace(const Eigen::MatrixXd& identity, int k, const std::string& source_layer) {
  if (identity.rows() != kLetterCount) throw ParameterError("fit_letter_subspace: identity matrix needs 26 rows");
  if (k < 1 || k > kLetterCount - 1) throw ParameterError("fit_letter_subspace: k must be in 1..25");
  if (!identity.allFinite()) throw NumericalError("fit_letter_subspace: non-finite identity states");
  const Eigen::RowVectorXd mean = identity.colwise().mean();
  const Eigen::MatrixXd centered = identity.rowwise() - mean;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double tol = std::max(1e-300, s.size() ? s(0) * 1e-10 * static_cast<double>(std::max(centered.rows(), centered.cols())) : 0.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) rank += s(i) > tol ? 1 : 0;
  if (rank < k) {
    throw ParameterError("fit_letter_subspace: centered identity matrix has rank " + std::to_string(rank) +
                         ", cannot extract " + std::to_string(k) + " directions");
  }
  LetterSubspace sub;
  sub.basis = svd.matrixV().leftCols(k).transpose();
  sub.letter_mean = mean;
  // Mean of the row projections equals the projection of the mean row.
  sub.mu_proj = (mean * sub.basis.transpose()) * sub.basis;
  sub.singular_values = s;
  sub.source_layer = source_layer;
  return sub;
}

Eigen::RowVectorXd apply_removal(const Eigen::RowVectorXd& h, const LetterSubspace& sub, double alpha) {
  if (h.size() != sub.basis.cols()) throw ParameterError("apply_removal: dimension mismatch");
  if (alpha == 0.0) return h;
  const Eigen::RowVectorXd proj = (h * sub.basis.transpose()) * sub.basis;
  return h - alpha * (proj - sub.mu_proj);
}

void save_subspace(const std::filesystem::path& path, const LetterSubspace& sub) {
  nlohmann::json header = {{"format", "nback-subspace/1"},
                           {"k", sub.k()},
                           {"d", sub.d()},
                           {"source_layer", sub.source_layer},
                           {"singular_values", std::vector<double>(sub.singular_values.data(),
                                                                   sub.singular_values.data() + sub.singular_values.size())}};
  std::vector<float> blob;
  for (Eigen::Index r = 0; r < sub.basis.rows(); ++r) {
    for (Eigen::Index c = 0; c < sub.basis.cols(); ++c) blob.push_back(static_cast<float>(sub.basis(r, c)));
  }
  for (Eigen::Index c = 0; c < sub.letter_mean.size(); ++c) blob.push_back(static_cast<float>(sub.letter_mean(c)));
  write_blob_file(path, std::move(header), blob);
}

LetterSubspace load_subspace(const std::filesystem::path& path) {
  const BlobFile f = read_blob_file(path);
  if (f.header.value("format", std::string{}) != "nback-subspace/1") {
    throw ParameterError(path.string() + " is not a subspace file");
  }
  const int k = f.header.at("k").get<int>();
  const int d = f.header.at("d").get<int>();
  if (f.blob.size() != static_cast<std::size_t>((k + 1) * d)) throw ParameterError(path.string() + ": bad blob size");
  LetterSubspace sub;
  Eigen::MatrixXd basis(k, d);
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < d; ++c) basis(r, c) = f.blob[static_cast<std::size_t>(r * d + c)];
  }
  // Gram-Schmidt restores orthonormality lost to float32 storage.
  for (int r = 0; r < k; ++r) {
    for (int q = 0; q < r; ++q) basis.row(r) -= basis.row(r).dot(basis.row(q)) * basis.row(q);
    basis.row(r).normalize();
  }
  sub.basis = basis;
  sub.letter_mean.resize(d);
  for (int c = 0; c < d; ++c) sub.letter_mean(c) = f.blob[static_cast<std::size_t>(k * d + c)];
  sub.mu_proj = (sub.letter_mean * sub.basis.transpose()) * sub.basis;
  const auto sv = f.header.value("singular_values", std::vector<double>{});
  sub.singular_values = Eigen::Map<const Eigen::VectorXd>(sv.data(), static_cast<Eigen::Index>(sv.size()));
  sub.source_layer = f.header.value("source_layer", std::string{});
  return sub;
}

std::vector<int> SweepCell::directions() const {
  std::vector<int> out;
  if (kind == "single") {
    out.push_back(index);
  } else {
    for (int i = 0; i < index; ++i) out.push_back(i);
  }
  return out;
}

std::string SweepCell::label() const {
  return (kind == "single" ? "dir" + std::to_string(index) : "top" + std::to_string(index));
}

std::vector<SweepCell> SweepConfig::cells() const {
  std::vector<SweepCell> out;
  for (double a : alphas) {
    if (singles) {
      for (int i = 0; i < max_directions; ++i) out.push_back({"single", i, a});
    }
    if (prefixes) {
      for (int i = 1; i <= max_directions; ++i) out.push_back({"prefix", i, a});
    }
  }
  return out;
}

std::vector<TrialSpec> sweep_trials(const SweepConfig& config, int n) {
  return make_trial_set(config.condition, n, config.trials_per_cell,
                        derive_seed(derive_seed(config.seed, label_hash("sweep")), static_cast<std::uint64_t>(n)),
                        "sweep/");
}

namespace {

double run_cell(Subject& subject, const std::vector<TrialSpec>& trials, EvalMode mode) {
  std::vector<Transcript> transcripts;
  transcripts.reserve(trials.size());
  for (const auto& t : trials) {
    TrialResult r = run_trial(subject, t, mode);
    if (r.transcript.failed) {
      throw SubjectFailure("sweep trial " + t.trial_id + " failed: " + r.transcript.failure_reason);
    }
    transcripts.push_back(std::move(r.transcript));
  }
  return summarize_accuracy(transcripts).mean;
}

}  // namespace

SweepResult sweep(const SubjectFactory& factory, const LetterSubspace& subspace, const SweepConfig& config) {
  if (config.trials_per_cell < 1) throw ParameterError("sweep: trials_per_cell must be >= 1");
  if (config.max_directions > subspace.k()) {
    throw ParameterError("sweep: subspace holds only " + std::to_string(subspace.k()) + " directions");
  }
  {
    auto probe = factory();
    if (!probe->capabilities().intervene) {
      throw CapabilityError("subject '" + probe->name() + "' does not support residual interventions");
    }
  }
  const auto cells = config.cells();
  const auto shared = std::make_shared<const LetterSubspace>(subspace);
  std::map<int, std::vector<TrialSpec>> trials;
  SweepResult result;
  for (int n : config.loads) {
    trials[n] = sweep_trials(config, n);
    for (const auto& t : trials[n]) result.trial_seeds[n].push_back(t.sequence.seed);
  }
  const int per_load = static_cast<int>(cells.size()) + 1;  // slot 0 is the baseline
  const int jobs = per_load * static_cast<int>(config.loads.size());
  std::vector<double> acc(static_cast<std::size_t>(jobs));
  std::vector<std::string> names(static_cast<std::size_t>(jobs));
  parallel_for(jobs, config.workers, [&](int j) {
    const int n = config.loads[static_cast<std::size_t>(j / per_load)];
    const int slot = j % per_load;
    auto subject = factory();
    if (slot == 0) {
      subject->set_intervention(std::nullopt);
    } else {
      const auto& cell = cells[static_cast<std::size_t>(slot - 1)];
      Intervention iv;
      iv.subspace = std::make_shared<const LetterSubspace>(shared->select(cell.directions()));
      iv.alpha = cell.alpha;
      subject->set_intervention(iv);
    }
    names[static_cast<std::size_t>(j)] = subject->name();
    acc[static_cast<std::size_t>(j)] = run_cell(*subject, trials.at(n), config.mode);
  });
  result.subject = names.front();
  for (std::size_t li = 0; li < config.loads.size(); ++li) {
    const int n = config.loads[li];
    const double base = acc[li * static_cast<std::size_t>(per_load)];
    result.baseline[n] = base;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      result.rows.push_back({cells[c], n, base, acc[li * static_cast<std::size_t>(per_load) + c + 1]});
    }
  }
  return result;
}

SweepSummary summarize_best(const SweepResult& result, const std::vector<int>& loads) {
  SweepSummary s;
  if (loads.empty()) throw ParameterError("summarize_best: no loads");
  for (int n : loads) {
    auto b = result.baseline.find(n);
    if (b == result.baseline.end()) throw ParameterError("summarize_best: no baseline for n=" + std::to_string(n));
    const SweepRow* best = nullptr;
    for (const auto& r : result.rows) {
      if (r.n == n && (!best || r.intervened_acc > best->intervened_acc)) best = &r;
    }
    if (!best) throw ParameterError("summarize_best: no cells for n=" + std::to_string(n));
    s.best_by_load[n] = *best;
    s.baseline_mean += b->second;
    s.best_mean += best->intervened_acc;
  }
  s.baseline_mean /= static_cast<double>(loads.size());
  s.best_mean /= static_cast<double>(loads.size());
  s.gain = s.best_mean - s.baseline_mean;
  return s;
}

}  // namespace nback
