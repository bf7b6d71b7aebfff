#include "nback/human_ref.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "nback/error.hpp"
#include "nback/parallel.hpp"
#include "nback/rng.hpp"

namespace nback::human {

using json = nlohmann::json;

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double log_likelihood(const std::vector<double>& x, const std::vector<int>& y, double b0, double b1) {
  double ll = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = b0 + b1 * x[i];
    ll += y[i] ? -softplus(-z) : -softplus(z);
  }
  return ll;
}

std::string design_name(Design d) {
  switch (d) {
    case Design::fixed: return "fixed";
    case Design::adaptive: return "adaptive";
    case Design::literature_only: return "literature_only";
  }
  return "?";
}

Design parse_design(const std::string& s) {
  if (s == "fixed") return Design::fixed;
  if (s == "adaptive") return Design::adaptive;
  if (s == "literature_only") return Design::literature_only;
  throw ParameterError("unknown study design '" + s + "'");
}

template <typename V>
std::map<int, V> level_map(const json& j) {
  std::map<int, V> out;
  for (auto it = j.begin(); it != j.end(); ++it) out.emplace(std::stoi(it.key()), it.value().get<V>());
  return out;
}

template <typename V>
json level_json(const std::map<int, V>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

}  // namespace

bool StudyRecord::observed_at(const Participant& p, int level) const {
  if (design != Design::adaptive) return p.accuracy.count(level) > 0;
  if (level < first_level) return false;
  if (level == first_level) return true;
  auto it = p.advanced.find(level);
  return it != p.advanced.end() && it->second;
}

std::vector<int> StudyRecord::levels() const {
  std::set<int> s;
  if (design == Design::literature_only) {
    for (const auto& [n, _] : literature) s.insert(n);
  } else {
    for (const auto& p : participants) {
      for (const auto& [n, _] : p.accuracy) s.insert(n);
    }
  }
  return {s.begin(), s.end()};
}

void StudyRecord::validate() const {
  if (design == Design::literature_only) {
    if (literature.empty()) throw ParameterError("study " + study_id + ": literature summaries missing");
    for (const auto& [n, s] : literature) {
      if (!(s.se >= 0.0)) throw ParameterError("study " + study_id + ": negative standard error");
    }
    return;
  }
  if (participants.empty()) throw ParameterError("study " + study_id + ": no participants");
  if (design == Design::adaptive) {
    for (const auto& p : participants) {
      for (const auto& [n, _] : p.accuracy) {
        if (!observed_at(p, n)) {
          throw ParameterError("study " + study_id + ": participant " + p.id +
                               " has accuracy at a level they never reached");
        }
      }
    }
  }
}

Coefficients fit_logistic(const std::vector<double>& x, const std::vector<int>& y) {
  if (x.size() != y.size() || x.empty()) throw ParameterError("fit_logistic: bad input sizes");
  double ones = 0;
  double max0 = -INFINITY, min0 = INFINITY, max1 = -INFINITY, min1 = INFINITY;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i]) {
      ones += 1;
      max1 = std::max(max1, x[i]);
      min1 = std::min(min1, x[i]);
    } else {
      max0 = std::max(max0, x[i]);
      min0 = std::min(min0, x[i]);
    }
  }
  const double total = static_cast<double>(x.size());
  if (ones == 0 || ones == total) {
    throw SeparationError("progression fit: only one outcome observed; coefficients are unbounded");
  }
  if (max0 < min1 || max1 < min0) {
    throw SeparationError("progression fit: d' perfectly separates the outcomes; coefficients are unbounded");
  }

  Coefficients c;
  c.beta0 = std::log(ones / (total - ones));
  double ll = log_likelihood(x, y, c.beta0, c.beta1);
  for (c.iterations = 0; c.iterations < 100; ++c.iterations) {
    double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double p = sigmoid(c.beta0 + c.beta1 * x[i]);
      const double r = y[i] - p;
      const double w = p * (1 - p);
      g0 += r;
      g1 += r * x[i];
      h00 += w;
      h01 += w * x[i];
      h11 += w * x[i] * x[i];
    }
    c.gradient_norm = std::hypot(g0, g1);
    if (c.gradient_norm < 1e-8) break;
    const double det = h00 * h11 - h01 * h01;
    if (!(std::abs(det) > 1e-300)) throw NumericalError("progression fit: singular information matrix");
    double s0 = (h11 * g0 - h01 * g1) / det;
    double s1 = (h00 * g1 - h01 * g0) / det;
    // Changes below the rounding level of the summed likelihood count as "not decreasing".
    const double slack = 64 * std::numeric_limits<double>::epsilon() * (std::abs(ll) + 1.0);
    double step = 1.0;
    double next = ll;
    for (int halving = 0; halving < 60; ++halving) {
      next = log_likelihood(x, y, c.beta0 + step * s0, c.beta1 + step * s1);
      if (next >= ll - slack) break;
      step *= 0.5;
    }
    if (next < ll - slack) break;
    c.beta0 += step * s0;
    c.beta1 += step * s1;
    ll = next;
  }
  if (!std::isfinite(c.beta0) || !std::isfinite(c.beta1) || std::abs(c.beta1) > 1e6) {
    throw SeparationError("progression fit diverged; coefficients are unbounded");
  }
  return c;
}

Coefficients fit_progression(const StudyRecord& study, int k) {
  if (study.design != Design::adaptive) throw ParameterError("fit_progression: study is not adaptive");
  std::vector<double> x;
  std::vector<int> y;
  for (const auto& p : study.participants) {
    if (!study.observed_at(p, k)) continue;
    auto d = p.dprime.find(k);
    if (d == p.dprime.end()) {
      throw ParameterError("study " + study.study_id + ": participant " + p.id + " lacks d' at level " +
                           std::to_string(k));
    }
    auto a = p.advanced.find(k + 1);
    x.push_back(d->second);
    y.push_back(a != p.advanced.end() && a->second ? 1 : 0);
  }
  if (x.size() < 10) {
    throw ParameterError("fit_progression: fewer than 10 participants observed at level " + std::to_string(k));
  }
  return fit_logistic(x, y);
}

ProgressionModel fit_progression_model(const StudyRecord& study, int max_level) {
  ProgressionModel m;
  for (int k = study.first_level; k < max_level; ++k) m.transitions[k] = fit_progression(study, k);
  return m;
}

IpwResult ipw_mean(const StudyRecord& study, const ProgressionModel& model, int n) {
  IpwResult r;
  double sw = 0.0, swa = 0.0;
  for (const auto& p : study.participants) {
    if (!study.observed_at(p, n)) continue;
    auto acc = p.accuracy.find(n);
    if (acc == p.accuracy.end()) continue;
    double pi = 1.0;
    for (int k = study.first_level; k < n; ++k) {
      auto c = model.transitions.find(k);
      if (c == model.transitions.end()) {
        throw ParameterError("ipw_mean: progression model lacks transition " + std::to_string(k));
      }
      auto d = p.dprime.find(k);
      if (d == p.dprime.end()) throw ParameterError("ipw_mean: participant " + p.id + " lacks d'");
      pi *= sigmoid(c->second.beta0 + c->second.beta1 * d->second);
    }
    double w = 0.0;
    if (pi < kMinPropensity) {
      w = kMaxWeight;
      ++r.clipped;
    } else {
      w = std::min(1.0 / pi, kMaxWeight);
    }
    sw += w;
    swa += w * acc->second;
    ++r.participants;
  }
  if (r.participants == 0) {
    throw UndefinedValueError("ipw_mean: no participants observed at level " + std::to_string(n));
  }
  r.mean = swa / sw;
  return r;
}

std::optional<double> study_mean(const StudyRecord& study, int n, const ProgressionModel* model) {
  switch (study.design) {
    case Design::literature_only: {
      auto it = study.literature.find(n);
      if (it == study.literature.end()) return std::nullopt;
      return it->second.mean;
    }
    case Design::fixed: {
      double s = 0.0;
      std::size_t c = 0;
      for (const auto& p : study.participants) {
        auto it = p.accuracy.find(n);
        if (it == p.accuracy.end()) continue;
        s += it->second;
        ++c;
      }
      if (c == 0) return std::nullopt;
      return s / static_cast<double>(c);
    }
    case Design::adaptive: {
      bool any = false;
      for (const auto& p : study.participants) any = any || (study.observed_at(p, n) && p.accuracy.count(n));
      if (!any) return std::nullopt;
      if (model) return ipw_mean(study, *model, n).mean;
      const ProgressionModel fitted = fit_progression_model(study, n);
      return ipw_mean(study, fitted, n).mean;
    }
  }
  return std::nullopt;
}

double aggregate(const std::vector<StudyRecord>& studies, int n) {
  double s = 0.0;
  std::size_t c = 0;
  for (const auto& st : studies) {
    if (auto m = study_mean(st, n)) {
      s += *m;
      ++c;
    }
  }
  if (c == 0) throw UndefinedValueError("aggregate: no study contributes at n=" + std::to_string(n));
  return s / static_cast<double>(c);
}

std::size_t contributing_studies(const std::vector<StudyRecord>& studies, int n) {
  std::size_t c = 0;
  for (const auto& st : studies) {
    const auto lv = st.levels();
    if (std::find(lv.begin(), lv.end(), n) != lv.end()) ++c;
  }
  return c;
}

std::vector<ReferenceRow> bootstrap_reference(const std::vector<StudyRecord>& studies, const std::vector<int>& levels,
                                              int resamples, std::uint64_t seed, int workers) {
  if (resamples < 100) throw ParameterError("bootstrap_reference: need at least 100 resamples");
  for (const auto& st : studies) st.validate();
  const std::size_t L = levels.size();
  // NaN marks a dropped (level, resample) cell.
  std::vector<std::vector<double>> draws(static_cast<std::size_t>(resamples), std::vector<double>(L));
  parallel_for(resamples, workers, [&](int b) {
    Stream stream = Stream(seed, "human-bootstrap").child(static_cast<std::uint64_t>(b));
    std::vector<StudyRecord> sample;
    sample.reserve(studies.size());
    for (const auto& st : studies) {
      StudyRecord copy;
      copy.study_id = st.study_id;
      copy.design = st.design;
      copy.first_level = st.first_level;
      if (st.design == Design::literature_only) {
        for (const auto& [n, s] : st.literature) copy.literature[n] = {s.mean + s.se * stream.normal(), s.se};
      } else {
        const auto m = static_cast<std::uint32_t>(st.participants.size());
        copy.participants.reserve(m);
        for (std::uint32_t i = 0; i < m; ++i) copy.participants.push_back(st.participants[stream.uniform_below(m)]);
      }
      sample.push_back(std::move(copy));
    }
    auto& row = draws[static_cast<std::size_t>(b)];
    for (std::size_t l = 0; l < L; ++l) {
      try {
        row[l] = aggregate(sample, levels[l]);
      } catch (const NumericalError&) {
        row[l] = std::nan("");
      } catch (const ParameterError&) {
        row[l] = std::nan("");
      } catch (const UndefinedValueError&) {
        row[l] = std::nan("");
      }
    }
  });

  std::vector<ReferenceRow> out;
  for (std::size_t l = 0; l < L; ++l) {
    ReferenceRow r;
    r.n = levels[l];
    r.mean = aggregate(studies, r.n);
    r.studies = contributing_studies(studies, r.n);
    std::vector<double> vals;
    for (const auto& row : draws) {
      if (std::isnan(row[l])) {
        ++r.resamples_failed;
      } else {
        vals.push_back(row[l]);
      }
    }
    r.resamples_used = static_cast<int>(vals.size());
    if (vals.empty()) throw NumericalError("bootstrap_reference: every resample failed at n=" + std::to_string(r.n));
    std::sort(vals.begin(), vals.end());
    r.ci = {sorted_quantile(vals, 0.025), sorted_quantile(vals, 0.975)};
    out.push_back(r);
  }
  return out;
}

std::vector<StudyRecord> studies_from_json(const json& j) {
  const json& arr = j.is_array() ? j : j.at("studies");
  std::vector<StudyRecord> out;
  for (const auto& s : arr) {
    StudyRecord st;
    st.study_id = s.at("study_id").get<std::string>();
    st.design = parse_design(s.at("design").get<std::string>());
    st.first_level = s.value("first_level", 1);
    if (s.contains("participants")) {
      for (const auto& pj : s.at("participants")) {
        Participant p;
        p.id = pj.value("id", std::string{});
        if (pj.contains("accuracy")) p.accuracy = level_map<double>(pj.at("accuracy"));
        if (pj.contains("dprime")) p.dprime = level_map<double>(pj.at("dprime"));
        if (pj.contains("advanced")) p.advanced = level_map<bool>(pj.at("advanced"));
        st.participants.push_back(std::move(p));
      }
    }
    if (s.contains("literature")) {
      for (auto it = s.at("literature").begin(); it != s.at("literature").end(); ++it) {
        st.literature[std::stoi(it.key())] = {it.value().at("mean").get<double>(), it.value().at("se").get<double>()};
      }
    }
    st.validate();
    out.push_back(std::move(st));
  }
  return out;
}

json studies_to_json(const std::vector<StudyRecord>& studies) {
  json arr = json::array();
  for (const auto& st : studies) {
    json s = {{"study_id", st.study_id}, {"design", design_name(st.design)}};
    if (st.design == Design::adaptive) s["first_level"] = st.first_level;
    if (st.design == Design::literature_only) {
      json lit = json::object();
      for (const auto& [n, v] : st.literature) lit[std::to_string(n)] = {{"mean", v.mean}, {"se", v.se}};
      s["literature"] = lit;
    } else {
      json ps = json::array();
      for (const auto& p : st.participants) {
        json pj = {{"id", p.id}, {"accuracy", level_json(p.accuracy)}};
        if (!p.dprime.empty()) pj["dprime"] = level_json(p.dprime);
        if (!p.advanced.empty()) pj["advanced"] = level_json(p.advanced);
        ps.push_back(std::move(pj));
      }
      s["participants"] = ps;
    }
    arr.push_back(std::move(s));
  }
  return {{"studies", arr}};
}

std::vector<StudyRecord> load_studies(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open study file " + path.string());
  return studies_from_json(json::parse(in));
}

}  // namespace nback::human
