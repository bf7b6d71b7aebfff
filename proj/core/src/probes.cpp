#include "nback/probes.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"

namespace nback::probes {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

std::size_t HiddenRecord::layer_index(const std::string& id) const {
  auto it = std::find(layers.begin(), layers.end(), id);
  if (it == layers.end()) throw ParameterError("hidden record has no layer '" + id + "'");
  return static_cast<std::size_t>(it - layers.begin());
}

HiddenRecord make_hidden_record(const std::string& subject, const std::vector<std::string>& layers,
                                const std::vector<TrialResult>& results) {
  if (layers.empty()) throw ParameterError("make_hidden_record: no layers requested");
  HiddenRecord rec;
  rec.subject = subject;
  rec.layers = layers;
  rec.states.resize(layers.size());
  for (const auto& r : results) {
    if (r.transcript.failed || r.states.empty()) continue;
    rec.trial_ids.push_back(r.transcript.trial_id);
    std::vector<int> ts;
    for (const auto& s : r.states) ts.push_back(s.t);
    rec.turns.push_back(ts);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& first = r.states.front().layers.at(layers[l]);
      const int d = static_cast<int>(first.size());
      if (rec.d == 0) rec.d = d;
      if (d != rec.d) throw ParameterError("make_hidden_record: state dimensions differ");
      MatrixXd m(static_cast<Eigen::Index>(r.states.size()), d);
      for (std::size_t i = 0; i < r.states.size(); ++i) {
        const auto& v = r.states[i].layers.at(layers[l]);
        if (static_cast<int>(v.size()) != d) throw ParameterError("make_hidden_record: state dimensions differ");
        for (int j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = v[static_cast<std::size_t>(j)];
      }
      rec.states[l].push_back(std::move(m));
    }
  }
  return rec;
}

void write_hidden_file(const std::filesystem::path& path, const HiddenRecord& rec) {
  nlohmann::json header = {{"format", "nback-hidden/1"},
                           {"subject", rec.subject},
                           {"layers", rec.layers},
                           {"d", rec.d},
                           {"position_kind", rec.position_kind}};
  nlohmann::json trials = nlohmann::json::array();
  std::vector<float> blob;
  for (std::size_t i = 0; i < rec.trial_ids.size(); ++i) {
    trials.push_back({{"trial_id", rec.trial_ids[i]}, {"turns", rec.turns[i]}});
  }
  header["trials"] = trials;
  // Layout: layer-major, then trial, then turn, then dimension.
  for (const auto& layer : rec.states) {
    for (const auto& m : layer) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) blob.push_back(static_cast<float>(m(r, c)));
      }
    }
  }
  write_blob_file(path, std::move(header), blob);
}

HiddenRecord read_hidden_file(const std::filesystem::path& path) {
  const BlobFile f = read_blob_file(path);
  if (f.header.value("format", std::string{}) != "nback-hidden/1") {
    throw ParameterError(path.string() + " is not a hidden-state file");
  }
  HiddenRecord rec;
  rec.subject = f.header.at("subject").get<std::string>();
  rec.layers = f.header.at("layers").get<std::vector<std::string>>();
  rec.d = f.header.at("d").get<int>();
  rec.position_kind = f.header.value("position_kind", std::string("answer_position"));
  for (const auto& t : f.header.at("trials")) {
    rec.trial_ids.push_back(t.at("trial_id").get<std::string>());
    rec.turns.push_back(t.at("turns").get<std::vector<int>>());
  }
  std::size_t pos = 0;
  rec.states.resize(rec.layers.size());
  for (auto& layer : rec.states) {
    for (const auto& ts : rec.turns) {
      MatrixXd m(static_cast<Eigen::Index>(ts.size()), rec.d);
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          if (pos >= f.blob.size()) throw ParameterError(path.string() + ": blob is truncated");
          m(r, c) = f.blob[pos++];
        }
      }
      layer.push_back(std::move(m));
    }
  }
  if (pos != f.blob.size()) throw ParameterError(path.string() + ": blob size does not match header");
  return rec;
}

std::size_t CentroidSet::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true));
}

std::vector<const Transcript*> align_transcripts(const HiddenRecord& hidden,
                                                 const std::vector<Transcript>& transcripts) {
  std::unordered_map<std::string, const Transcript*> by_id;
  for (const auto& t : transcripts) by_id.emplace(t.trial_id, &t);
  std::vector<const Transcript*> out;
  for (std::size_t i = 0; i < hidden.trial_ids.size(); ++i) {
    auto it = by_id.find(hidden.trial_ids[i]);
    if (it == by_id.end()) throw ParameterError("no transcript for hidden trial " + hidden.trial_ids[i]);
    const Transcript& tr = *it->second;
    for (int t : hidden.turns[i]) {
      if (t < 0 || t >= static_cast<int>(tr.turns.size())) {
        throw ParameterError("hidden turn index outside transcript " + tr.trial_id);
      }
    }
    out.push_back(&tr);
  }
  return out;
}

namespace {

// Accumulates per-letter sums and counts; the letter of a row is chosen by key(trial, row).
struct GroupSums {
  MatrixXd sums;
  std::array<std::size_t, kLetterCount> counts{};

  explicit GroupSums(int d) : sums(MatrixXd::Zero(kLetterCount, d)) {}

  void add(int letter, const Eigen::Ref<const RowVectorXd>& v) {
    sums.row(letter) += v;
    ++counts[static_cast<std::size_t>(letter)];
  }

  CentroidSet finish(std::size_t min_samples) const {
    CentroidSet c;
    c.means = MatrixXd::Zero(kLetterCount, sums.cols());
    c.counts = counts;
    for (int l = 0; l < kLetterCount; ++l) {
      const auto cnt = counts[static_cast<std::size_t>(l)];
      c.valid[static_cast<std::size_t>(l)] = cnt >= std::max<std::size_t>(min_samples, 1);
      if (cnt > 0) c.means.row(l) = sums.row(l) / static_cast<double>(cnt);
    }
    return c;
  }
};

// Letter p turns back from turn t of a transcript, if any.
std::optional<int> letter_back(const Transcript& tr, int t, int p) {
  if (t - p < 0) return std::nullopt;
  return tr.turns[static_cast<std::size_t>(t - p)].stimulus.index();
}

GroupSums group_layer(const HiddenRecord& hidden, const std::vector<const Transcript*>& trs, std::size_t layer,
                      int p, std::optional<std::size_t> skip_trial = std::nullopt,
                      const RowVectorXd* center = nullptr) {
  GroupSums g(hidden.d);
  for (std::size_t i = 0; i < trs.size(); ++i) {
    if (skip_trial && *skip_trial == i) continue;
    const auto& m = hidden.states[layer][i];
    for (std::size_t r = 0; r < hidden.turns[i].size(); ++r) {
      const auto letter = letter_back(*trs[i], hidden.turns[i][r], p);
      if (!letter) continue;
      if (center) {
        g.add(*letter, m.row(static_cast<Eigen::Index>(r)) - *center);
      } else {
        g.add(*letter, m.row(static_cast<Eigen::Index>(r)));
      }
    }
  }
  return g;
}

}  // namespace

LetterCentroids stimulus_centroids(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                   std::size_t min_samples) {
  const auto trs = align_transcripts(hidden, transcripts);
  LetterCentroids out;
  for (std::size_t l = 0; l < hidden.layers.size(); ++l) {
    out[hidden.layers[l]] = group_layer(hidden, trs, l, 0).finish(min_samples);
  }
  return out;
}

std::map<std::string, LetterCentroids> identity_centroids(const IdentityStates& states) {
  std::map<std::string, LetterCentroids> out;
  for (const auto& [family, layers] : states) {
    for (const auto& [layer, m] : layers) {
      if (m.rows() != kLetterCount) throw ParameterError("identity states must have 26 rows");
      CentroidSet c;
      c.means = m;
      c.counts.fill(1);
      c.valid.fill(true);
      out[family][layer] = std::move(c);
    }
  }
  if (states.size() > 1) {
    LetterCentroids avg;
    for (const auto& [family, layers] : out) {
      for (const auto& [layer, c] : layers) {
        auto it = avg.find(layer);
        if (it == avg.end()) {
          avg[layer] = c;
        } else {
          it->second.means += c.means;
        }
      }
    }
    for (auto& [layer, c] : avg) c.means /= static_cast<double>(states.size());
    out["average"] = std::move(avg);
  }
  return out;
}

double cosine(const Eigen::Ref<const RowVectorXd>& a, const Eigen::Ref<const RowVectorXd>& b) {
  if (a.size() != b.size()) throw ParameterError("cosine: vectors differ in length");
  // One scalar loop for all three sums keeps their rounding identical, and
  // sqrt(x * x) == x, so cosine(a, a) is exactly 1.
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    ab += a[j] * b[j];
    aa += a[j] * a[j];
    bb += b[j] * b[j];
  }
  if (aa == 0.0 || bb == 0.0) return std::nan("");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

CosineMean matched_cosine(const MatrixXd& a, const MatrixXd& b, const std::array<bool, kLetterCount>* valid_a,
                          const std::array<bool, kLetterCount>* valid_b) {
  if (a.rows() != kLetterCount || b.rows() != kLetterCount || a.cols() != b.cols()) {
    throw ParameterError("matched_cosine: expected two 26 x d matrices of equal width");
  }
  CosineMean r;
  double sum = 0.0;
  for (int c = 0; c < kLetterCount; ++c) {
    const auto idx = static_cast<std::size_t>(c);
    if ((valid_a && !(*valid_a)[idx]) || (valid_b && !(*valid_b)[idx])) {
      ++r.excluded;
      continue;
    }
    const double v = cosine(a.row(c), b.row(c));
    if (std::isnan(v)) {
      ++r.excluded;
      continue;
    }
    sum += v;
    ++r.used;
  }
  r.value = r.used ? sum / static_cast<double>(r.used) : std::nan("");
  return r;
}

CosineMean letter_alignment(const CentroidSet& stimulus, const CentroidSet& identity) {
  return matched_cosine(stimulus.means, identity.means, &stimulus.valid, &identity.valid);
}

int nearest_centroid(const Eigen::Ref<const RowVectorXd>& h, const CentroidSet& centroids) {
  int best = -1;
  double best_cos = -2.0;
  for (int c = 0; c < kLetterCount; ++c) {
    if (!centroids.valid[static_cast<std::size_t>(c)]) continue;
    const double v = cosine(h, centroids.means.row(c));
    if (std::isnan(v)) continue;
    if (v > best_cos) {
      best_cos = v;
      best = c;
    }
  }
  return best;
}

DecodeResult decode_current_letter(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                   const std::string& layer, const CentroidSet& centroids) {
  const auto trs = align_transcripts(hidden, transcripts);
  const std::size_t l = hidden.layer_index(layer);
  DecodeResult r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < trs.size(); ++i) {
    const auto& m = hidden.states[l][i];
    for (std::size_t row = 0; row < hidden.turns[i].size(); ++row) {
      const int truth = trs[i]->turns[static_cast<std::size_t>(hidden.turns[i][row])].stimulus.index();
      hits += nearest_centroid(m.row(static_cast<Eigen::Index>(row)), centroids) == truth ? 1 : 0;
      ++r.turns;
    }
  }
  if (r.turns == 0) throw UndefinedValueError("decode_current_letter: no turns");
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.turns);
  return r;
}

DecodeResult decode_leave_one_trial_out(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts,
                                        const std::string& layer, std::size_t min_samples) {
  const auto trs = align_transcripts(hidden, transcripts);
  const std::size_t l = hidden.layer_index(layer);
  const GroupSums total = group_layer(hidden, trs, l, 0);
  DecodeResult r;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < trs.size(); ++i) {
    // Subtract this trial's contribution from the totals.
    GroupSums rest = total;
    const auto& m = hidden.states[l][i];
    for (std::size_t row = 0; row < hidden.turns[i].size(); ++row) {
      const int letter = trs[i]->turns[static_cast<std::size_t>(hidden.turns[i][row])].stimulus.index();
      rest.sums.row(letter) -= m.row(static_cast<Eigen::Index>(row));
      --rest.counts[static_cast<std::size_t>(letter)];
    }
    const CentroidSet cents = rest.finish(min_samples);
    for (std::size_t row = 0; row < hidden.turns[i].size(); ++row) {
      const int truth = trs[i]->turns[static_cast<std::size_t>(hidden.turns[i][row])].stimulus.index();
      hits += nearest_centroid(m.row(static_cast<Eigen::Index>(row)), cents) == truth ? 1 : 0;
      ++r.turns;
    }
  }
  if (r.turns == 0) throw UndefinedValueError("decode_leave_one_trial_out: no turns");
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.turns);
  return r;
}

std::map<std::string, PositionalMeans> positional_means(const HiddenRecord& hidden,
                                                        const std::vector<Transcript>& transcripts, int n,
                                                        std::size_t min_samples) {
  if (n < 0) throw ParameterError("positional_means: n must be >= 0");
  const auto trs = align_transcripts(hidden, transcripts);
  std::map<std::string, PositionalMeans> out;
  for (std::size_t l = 0; l < hidden.layers.size(); ++l) {
    PositionalMeans pm;
    pm.n = n;
    pm.global_mean = RowVectorXd::Zero(hidden.d);
    std::size_t rows = 0;
    for (const auto& m : hidden.states[l]) {
      if (m.rows() == 0) continue;
      pm.global_mean += m.colwise().sum();
      rows += static_cast<std::size_t>(m.rows());
    }
    if (rows == 0) throw UndefinedValueError("positional_means: no states");
    pm.global_mean /= static_cast<double>(rows);
    for (int p = 0; p <= n; ++p) {
      pm.raw.push_back(group_layer(hidden, trs, l, p).finish(min_samples));
      CentroidSet c = pm.raw.back();
      for (int r = 0; r < kLetterCount; ++r) {
        if (c.counts[static_cast<std::size_t>(r)] > 0) c.means.row(r) -= pm.global_mean;
      }
      pm.centered.push_back(std::move(c));
    }
    out[hidden.layers[l]] = std::move(pm);
  }
  return out;
}

SubspaceSimilarity subspace_similarity(const PositionalMeans& means) {
  const auto P = static_cast<Eigen::Index>(means.centered.size());
  if (P == 0) throw ParameterError("subspace_similarity: no positions");
  SubspaceSimilarity s;
  s.S = MatrixXd::Identity(P, P);
  double off = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index p = 0; p < P; ++p) {
    for (Eigen::Index q = p + 1; q < P; ++q) {
      const auto& a = means.centered[static_cast<std::size_t>(p)];
      const auto& b = means.centered[static_cast<std::size_t>(q)];
      const CosineMean cm = matched_cosine(a.means, b.means, &a.valid, &b.valid);
      s.excluded += cm.excluded;
      s.S(p, q) = s.S(q, p) = cm.value;
      if (!std::isnan(cm.value)) {
        off += std::abs(cm.value);
        ++pairs;
      }
    }
  }
  s.mean_abs_offdiag = pairs ? off / static_cast<double>(pairs) : std::nan("");
  return s;
}

std::vector<CosineMean> readout_alignment(const PositionalMeans& means, const MatrixXd& readout) {
  if (readout.rows() != kLetterCount) throw ParameterError("readout_alignment: readout must have 26 rows");
  std::vector<CosineMean> out;
  for (const auto& c : means.centered) out.push_back(matched_cosine(c.means, readout, &c.valid, nullptr));
  return out;
}

std::vector<TrialMetrics> trial_metrics(const HiddenRecord& hidden, const std::vector<Transcript>& transcripts, int n,
                                        const LetterCentroids& run_centroids,
                                        const std::map<std::string, PositionalMeans>& run_positional,
                                        const LetterCentroids* identity, const MatrixXd* readout) {
  const auto trs = align_transcripts(hidden, transcripts);
  std::vector<TrialMetrics> out;
  for (std::size_t l = 0; l < hidden.layers.size(); ++l) {
    const std::string& layer = hidden.layers[l];
    const CentroidSet& cents = run_centroids.at(layer);
    const PositionalMeans& pm = run_positional.at(layer);
    for (std::size_t i = 0; i < trs.size(); ++i) {
      TrialMetrics tm;
      tm.trial_id = hidden.trial_ids[i];
      tm.layer = layer;
      tm.accuracy = score_accuracy(*trs[i]);
      const std::vector<const Transcript*> one{trs[i]};
      HiddenRecord single;
      single.d = hidden.d;
      single.layers = {layer};
      single.trial_ids = {hidden.trial_ids[i]};
      single.turns = {hidden.turns[i]};
      single.states = {{hidden.states[l][i]}};

      const CentroidSet own = group_layer(single, one, 0, 0).finish(1);
      if (identity) {
        auto it = identity->find(layer);
        if (it != identity->end()) {
          const CosineMean cm = letter_alignment(own, it->second);
          if (cm.used) tm.letter_alignment = cm.value;
        }
      }
      std::size_t hits = 0;
      const auto& m = hidden.states[l][i];
      for (std::size_t row = 0; row < hidden.turns[i].size(); ++row) {
        const int truth = trs[i]->turns[static_cast<std::size_t>(hidden.turns[i][row])].stimulus.index();
        hits += nearest_centroid(m.row(static_cast<Eigen::Index>(row)), cents) == truth ? 1 : 0;
      }
      if (!hidden.turns[i].empty()) tm.decodability = static_cast<double>(hits) / static_cast<double>(hidden.turns[i].size());

      PositionalMeans trial_pm;
      trial_pm.n = n;
      trial_pm.global_mean = pm.global_mean;
      for (int p = 0; p <= n; ++p) {
        trial_pm.centered.push_back(group_layer(single, one, 0, p, std::nullopt, &pm.global_mean).finish(1));
      }
      if (n >= 1) {
        const SubspaceSimilarity ss = subspace_similarity(trial_pm);
        if (!std::isnan(ss.mean_abs_offdiag)) tm.subspace_similarity = ss.mean_abs_offdiag;
      }
      if (readout) {
        const CosineMean cm = matched_cosine(trial_pm.centered[static_cast<std::size_t>(n)].means, *readout,
                                             &trial_pm.centered[static_cast<std::size_t>(n)].valid, nullptr);
        if (cm.used) tm.target_alignment = cm.value;
      }
      out.push_back(std::move(tm));
    }
  }
  return out;
}

std::vector<CorrelationRow> trial_correlations(const std::vector<TrialMetrics>& rows) {
  using Getter = std::optional<double> TrialMetrics::*;
  const std::vector<std::pair<std::string, Getter>> metrics = {
      {"letter_alignment", &TrialMetrics::letter_alignment},
      {"decodability", &TrialMetrics::decodability},
      {"subspace_similarity", &TrialMetrics::subspace_similarity},
      {"target_alignment", &TrialMetrics::target_alignment}};
  std::vector<std::string> layers;
  for (const auto& r : rows) {
    if (std::find(layers.begin(), layers.end(), r.layer) == layers.end()) layers.push_back(r.layer);
  }
  std::vector<CorrelationRow> out;
  for (const auto& layer : layers) {
    for (const auto& [name, getter] : metrics) {
      std::vector<double> x, y;
      for (const auto& r : rows) {
        if (r.layer != layer || !(r.*getter)) continue;
        x.push_back(*(r.*getter));
        y.push_back(r.accuracy);
      }
      CorrelationRow cr;
      cr.metric = name;
      cr.layer = layer;
      cr.samples = x.size();
      if (x.size() >= 3) {
        try {
          cr.result = pearson(x, y);
        } catch (const UndefinedValueError&) {
        }
      }
      out.push_back(std::move(cr));
    }
  }
  return out;
}

}  // namespace nback::probes
