#include <algorithm>
#include <iostream>

#include "app.hpp"
#include "nback/error.hpp"
#include "nback/human_ref.hpp"

namespace nback::app {

int cmd_human(const HumanArgs& args, std::ostream& log) {
  namespace fs = std::filesystem;
  if (!args.human_chance) throw ParameterError("human: --human-chance is required");
  const double chance = *args.human_chance;
  if (!(chance > 0.0 && chance < 1.0)) throw ParameterError("human: --human-chance must lie in (0, 1)");
  if (args.levels.empty()) throw ParameterError("human: no levels given");

  const auto studies = human::load_studies(args.studies);
  const int workers = resolve_workers(args.workers);
  const auto rows = human::bootstrap_reference(studies, args.levels, args.resamples, args.seed, workers);

  const fs::path dir(args.out);
  fs::create_directories(dir);
  {
    CsvWriter w(dir / "human_reference.csv", {"n", "mean", "ci_low", "ci_high", "studies_contributing"});
    CsvWriter cc(dir / "human_reference_cc.csv", {"n", "chance", "mean_cc", "ci_low_cc", "ci_high_cc"});
    CsvWriter b(dir / "human_bootstrap.csv", {"n", "resamples_used", "resamples_failed"});
    const double m = 1.0 / chance;
    for (const auto& r : rows) {
      w.cell(r.n).cell(r.mean).cell(r.ci.low).cell(r.ci.high).cell(r.studies).end_row();
      cc.cell(r.n).cell(chance).cell(chance_corrected(r.mean, m)).cell(chance_corrected(r.ci.low, m))
          .cell(chance_corrected(r.ci.high, m)).end_row();
      b.cell(r.n).cell(r.resamples_used).cell(r.resamples_failed).end_row();
    }
  }
  {
    CsvWriter w(dir / "human_progression.csv", {"study_id", "k", "beta0", "beta1", "iterations"});
    const int max_level = *std::max_element(args.levels.begin(), args.levels.end());
    for (const auto& s : studies) {
      if (s.design != human::Design::adaptive) continue;
      const auto model = human::fit_progression_model(s, max_level);
      for (const auto& [k, c] : model.transitions) {
        w.cell(s.study_id).cell(k).cell(c.beta0).cell(c.beta1).cell(c.iterations).end_row();
      }
    }
  }
  write_manifest(dir, "human", to_json(args),
                 {"human_reference.csv", "human_reference_cc.csv", "human_bootstrap.csv", "human_progression.csv"});
  log << "human: " << studies.size() << " studies, " << args.resamples << " resamples -> " << dir.string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
