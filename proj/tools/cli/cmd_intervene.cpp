#include <iostream>

#include "app.hpp"
#include "nback/error.hpp"
#include "nback/intervention.hpp"
#include "nback/probes.hpp"
#include "nback/subject_factory.hpp"

namespace nback::app {

int cmd_intervene(const InterveneArgs& args, std::ostream& log) {
  namespace fs = std::filesystem;
  const SubjectFactory factory = make_subject_factory(args.subject);
  std::string subject_name;
  LetterSubspace subspace;
  {
    auto subject = factory();
    subject_name = subject->name();
    const auto caps = subject->capabilities();
    if (!caps.intervene) throw CapabilityError("subject " + subject_name + " does not support interventions");
    if (!args.subspace.empty()) {
      subspace = load_subspace(args.subspace);
    } else {
      std::string layer = args.layer;
      if (layer.empty()) {
        if (caps.layer_ids.empty()) throw ParameterError("intervene: subject lists no layers; pass --layer");
        layer = caps.layer_ids.size() > 1 ? caps.layer_ids[1] : caps.layer_ids[0];
      }
      const auto families = probes::identity_centroids(subject->identity_states());
      if (families.empty()) throw CapabilityError("subject " + subject_name + " returned no identity states");
      auto fam = families.end();
      if (!args.family.empty()) {
        fam = families.find(args.family);
        if (fam == families.end()) throw ParameterError("intervene: unknown identity family '" + args.family + "'");
      } else {
        fam = families.find("average");
        if (fam == families.end()) fam = families.begin();
      }
      auto lit = fam->second.find(layer);
      if (lit == fam->second.end()) throw ParameterError("intervene: no identity states at layer '" + layer + "'");
      subspace = fit_letter_subspace(lit->second.means, args.k, layer);
    }
  }
  if (args.max_directions > subspace.k()) {
    throw ParameterError("intervene: --max-directions " + std::to_string(args.max_directions) + " exceeds subspace rank " +
                         std::to_string(subspace.k()));
  }

  SweepConfig config;
  config.loads = args.loads;
  config.alphas = args.alphas;
  config.max_directions = args.max_directions;
  config.singles = !args.no_singles;
  config.prefixes = !args.no_prefixes;
  config.trials_per_cell = args.trials;
  config.seed = args.seed;
  config.mode = parse_eval_mode(args.mode);
  config.condition = Condition::parse(args.condition);
  config.workers = resolve_workers(args.workers);
  if (config.cells().empty()) throw ParameterError("intervene: the sweep has no cells");

  const SweepResult result = sweep(factory, subspace, config);
  const SweepSummary summary = summarize_best(result, args.loads);

  const fs::path dir(args.out);
  fs::create_directories(dir);
  save_subspace(dir / "subspace.bin", subspace);
  {
    CsvWriter w(dir / "sweep.csv", {"cell", "kind", "index", "alpha", "n", "baseline_acc", "intervened_acc", "gain"});
    for (const auto& r : result.rows) {
      w.cell(r.cell.label()).cell(r.cell.kind).cell(r.cell.index).cell(r.cell.alpha).cell(r.n).cell(r.baseline_acc)
          .cell(r.intervened_acc).cell(r.gain()).end_row();
    }
  }
  json best = json::object();
  {
    CsvWriter w(dir / "sweep_summary.csv",
                {"subject", "n", "baseline_acc", "best_acc", "gain", "best_cell", "best_alpha", "optimistic"});
    for (const auto& [n, row] : summary.best_by_load) {
      w.cell(subject_name).cell(n).cell(row.baseline_acc).cell(row.intervened_acc).cell(row.gain()).cell(row.cell.label())
          .cell(row.cell.alpha).cell(std::string("true")).end_row();
      best[std::to_string(n)] = {{"baseline_acc", row.baseline_acc}, {"best_acc", row.intervened_acc},
                                 {"cell", row.cell.label()},         {"alpha", row.cell.alpha}};
    }
    w.cell(subject_name).cell(std::string("mean")).cell(summary.baseline_mean).cell(summary.best_mean).cell(summary.gain)
        .empty().empty().cell(std::string("true")).end_row();
  }
  {
    const json j = {{"subject", subject_name},
                    {"baseline_mean", summary.baseline_mean},
                    {"best_mean", summary.best_mean},
                    {"gain", summary.gain},
                    {"optimistic", summary.optimistic},
                    {"selection", "maximum intervened accuracy over all cells, chosen per load after the fact"},
                    {"best_by_load", best},
                    {"subspace_layer", subspace.source_layer},
                    {"subspace_k", subspace.k()}};
    open_output(dir / "sweep_summary.json") << j.dump(2) << '\n';
  }
  {
    json seeds = json::object();
    for (const auto& [n, s] : result.trial_seeds) seeds[std::to_string(n)] = s;
    open_output(dir / "seeds.json") << seeds.dump(2) << '\n';
  }
  write_manifest(dir, "intervene", to_json(args),
                 {"subspace.bin", "sweep.csv", "sweep_summary.csv", "sweep_summary.json", "seeds.json"});
  log << "intervene: " << subject_name << " baseline " << summary.baseline_mean << " best " << summary.best_mean
      << " gain " << summary.gain << " (optimistic) -> " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
