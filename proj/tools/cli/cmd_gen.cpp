#include <iostream>

#include "app.hpp"

namespace nback::app {

int cmd_gen(const GenArgs& args, std::ostream& out, std::ostream& log) {
  const Condition condition = Condition::parse(args.condition);
  const auto trials = trial_set_for(condition, args.n, args.trials, args.seed);
  if (args.out.empty()) {
    for (const auto& t : trials) out << trial_to_json(t).dump() << '\n';
    return kExitOk;
  }
  namespace fs = std::filesystem;
  const fs::path path(args.out);
  {
    auto file = open_output(path);
    for (const auto& t : trials) file << trial_to_json(t).dump() << '\n';
  }
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  write_manifest(dir, "gen", to_json(args), {path.filename().string()}, path.filename().string() + ".manifest.json");
  log << "wrote " << trials.size() << " trials to " << path.string() << '\n';
  return kExitOk;
}

}  // namespace nback::app
