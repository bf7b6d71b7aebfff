#include <iostream>
#include <set>

#include "app.hpp"
#include "nback/error.hpp"
#include "nback/probes.hpp"
#include "nback/subject_factory.hpp"

namespace nback::app {

namespace {

// Chooses the identity family used for alignment: the cross-family average when present.
const probes::LetterCentroids* pick_family(const std::map<std::string, probes::LetterCentroids>& families,
                                          std::string* name) {
  if (families.empty()) return nullptr;
  auto it = families.find("average");
  if (it == families.end()) it = families.begin();
  *name = it->first;
  return &it->second;
}

}  // namespace

int cmd_probe(const ProbeArgs& args, std::ostream& log) {
  namespace fs = std::filesystem;
  if (args.min_samples < 1) throw ParameterError("probe: --min-samples must be >= 1");
  const auto hidden = probes::read_hidden_file(args.hidden);
  const auto all = read_transcripts_jsonl(args.transcripts);
  const std::set<std::string> wanted(hidden.trial_ids.begin(), hidden.trial_ids.end());
  std::vector<Transcript> transcripts;
  for (const auto& t : all) {
    if (wanted.count(t.trial_id)) transcripts.push_back(t);
  }
  if (transcripts.size() != wanted.size()) {
    throw ParameterError("probe: transcripts file lacks " + std::to_string(wanted.size() - transcripts.size()) +
                         " trials recorded in the hidden-state file");
  }
  int n = args.n;
  if (n == 0) n = transcripts.front().n;
  for (const auto& t : transcripts) {
    if (t.n != n) throw ParameterError("probe: hidden-state trials mix loads; pass one cell per file");
  }
  const auto min_samples = static_cast<std::size_t>(args.min_samples);

  std::map<std::string, probes::LetterCentroids> identity;
  std::optional<Eigen::MatrixXd> readout;
  std::string family;
  if (!args.subject.empty()) {
    auto subject = make_subject_factory(args.subject)();
    const auto caps = subject->capabilities();
    if (caps.hidden) identity = probes::identity_centroids(subject->identity_states());
    if (caps.readout) {
      readout = subject->readout_directions();
      if (readout->cols() != hidden.d) {
        throw ParameterError("probe: readout width " + std::to_string(readout->cols()) + " does not match state width " +
                             std::to_string(hidden.d));
      }
    }
  }
  const probes::LetterCentroids* id_family = pick_family(identity, &family);

  const auto centroids = probes::stimulus_centroids(hidden, transcripts, min_samples);
  const auto positional = probes::positional_means(hidden, transcripts, n, min_samples);

  const fs::path dir(args.out);
  fs::create_directories(dir);
  {
    CsvWriter w(dir / "probes.csv", {"layer", "metric", "value"});
    CsvWriter s(dir / "subspace.csv", {"layer", "p", "q", "similarity"});
    for (const auto& layer : hidden.layers) {
      const auto& cs = centroids.at(layer);
      auto row = [&](const std::string& metric, double v) { w.cell(layer).cell(metric).cell(v).end_row(); };
      row("valid_letters", static_cast<double>(cs.valid_count()));
      row("decodability", probes::decode_current_letter(hidden, transcripts, layer, cs).accuracy);
      row("decodability_loto", probes::decode_leave_one_trial_out(hidden, transcripts, layer, min_samples).accuracy);
      row("self_alignment", probes::matched_cosine(cs.means, cs.means, &cs.valid, &cs.valid).value);
      if (id_family && id_family->count(layer)) {
        row("letter_alignment", probes::letter_alignment(cs, id_family->at(layer)).value);
      }
      const auto& pm = positional.at(layer);
      const auto sim = probes::subspace_similarity(pm);
      row("subspace_similarity", sim.mean_abs_offdiag);
      for (int p = 0; p <= n; ++p) {
        for (int q = 0; q <= n; ++q) s.cell(layer).cell(p).cell(q).cell(sim.S(p, q)).end_row();
      }
      if (readout) {
        const auto r = probes::readout_alignment(pm, *readout);
        for (int p = 0; p <= n; ++p) row("readout_alignment_p" + std::to_string(p), r[static_cast<std::size_t>(p)].value);
        row("target_alignment", r[static_cast<std::size_t>(n)].value);
      }
    }
  }

  const auto rows = probes::trial_metrics(hidden, transcripts, n, centroids, positional,
                                          id_family, readout ? &*readout : nullptr);
  {
    CsvWriter w(dir / "trial_probe.csv", {"trial_id", "layer", "accuracy", "letter_alignment", "decodability",
                                          "subspace_similarity", "target_alignment"});
    auto opt = [](const std::optional<double>& v) { return v ? num(*v) : std::string{}; };
    for (const auto& r : rows) {
      w.cell(r.trial_id).cell(r.layer).cell(r.accuracy).cell(opt(r.letter_alignment)).cell(opt(r.decodability))
          .cell(opt(r.subspace_similarity)).cell(opt(r.target_alignment)).end_row();
    }
  }
  {
    CsvWriter w(dir / "correlations.csv", {"pair", "r", "p", "n_samples"});
    for (const auto& c : probes::trial_correlations(rows)) {
      w.cell("accuracy~" + c.metric + "@" + c.layer);
      if (c.result) {
        w.cell(c.result->r).cell(c.result->p);
      } else {
        w.empty().empty();
      }
      w.cell(c.samples).end_row();
    }
  }
  write_manifest(dir, "probe", to_json(args), {"probes.csv", "subspace.csv", "trial_probe.csv", "correlations.csv"});
  log << "probe: " << transcripts.size() << " trials, layers";
  for (const auto& l : hidden.layers) log << ' ' << l;
  if (!family.empty()) log << ", identity family " << family;
  log << " -> " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
