#include "app.hpp"

namespace nback::app {

// Keys match the long flag names so a manifest's config can be fed back through --config.
// Output locations and worker counts are deliberately absent.

json to_json(const GenArgs& a) {
  return {{"n", a.n}, {"condition", a.condition}, {"trials", a.trials}, {"seed", a.seed}, {"turns", a.turns}};
}

json to_json(const RunArgs& a) {
  return {{"subject", a.subject}, {"conditions", a.conditions}, {"loads", a.loads},     {"trials", a.trials},
          {"modes", a.modes},     {"seed", a.seed},             {"trials-file", a.trials_file},
          {"hidden", a.hidden},   {"batch-tf", a.batch_tf}};
}

json to_json(const TrainArgs& a) {
  return {{"seed", a.seed},
          {"epochs", a.epochs},
          {"warmup-epochs", a.warmup_epochs},
          {"batch", a.batch},
          {"trials-per-epoch", a.trials_per_epoch},
          {"lr", a.lr},
          {"weight-decay", a.weight_decay},
          {"patience", a.patience},
          {"eval-trials", a.eval_trials},
          {"loads", a.loads}};
}

json to_json(const ProbeArgs& a) {
  return {{"hidden", a.hidden}, {"transcripts", a.transcripts}, {"n", a.n}, {"subject", a.subject},
          {"min-samples", a.min_samples}};
}

json to_json(const InterveneArgs& a) {
  return {{"subject", a.subject},   {"loads", a.loads},       {"alphas", a.alphas},
          {"max-directions", a.max_directions}, {"k", a.k}, {"no-singles", a.no_singles},
          {"no-prefixes", a.no_prefixes}, {"trials", a.trials}, {"seed", a.seed},
          {"mode", a.mode},         {"condition", a.condition}, {"layer", a.layer},
          {"family", a.family},     {"subspace", a.subspace}};
}

json to_json(const HumanArgs& a) {
  json j = {{"studies", a.studies}, {"levels", a.levels}, {"resamples", a.resamples}, {"seed", a.seed}};
  if (a.human_chance) j["human-chance"] = *a.human_chance;
  return j;
}

json to_json(const ReportArgs& a) { return {{"inputs", a.inputs}}; }

}  // namespace nback::app
