#include "app.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "nback/error.hpp"

namespace nback::app {

namespace {

// Expands --config <file> into ordinary flags for every key the command line leaves unset.
// Accepts a flat object of flag values or a manifest written by an earlier run.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  auto it = std::find(args.begin(), args.end(), "--config");
  if (it == args.end()) return args;
  if (it + 1 == args.end()) throw ParameterError("--config needs a file");
  const std::string path = *(it + 1);
  args.erase(it, it + 2);
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot read config file " + path);
  json cfg;
  try {
    cfg = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParameterError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (cfg.contains("config") && cfg.contains("command")) {
    if (args.empty() || cfg.at("command").get<std::string>() != args.front()) {
      throw ParameterError("manifest " + path + " belongs to command '" + cfg.at("command").get<std::string>() + "'");
    }
    cfg = cfg.at("config");
  }
  if (!cfg.is_object()) throw ParameterError("config file must hold a JSON object");
  auto present = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  for (auto kv = cfg.begin(); kv != cfg.end(); ++kv) {
    const std::string flag = "--" + kv.key();
    if (present(flag)) continue;
    const json& v = kv.value();
    if (v.is_null() || (v.is_string() && v.get<std::string>().empty())) continue;
    if (v.is_boolean()) {
      if (v.get<bool>()) args.push_back(flag);
    } else if (v.is_array()) {
      if (v.empty()) continue;
      args.push_back(flag);
      for (const auto& e : v) args.push_back(scalar(e));
    } else {
      args.push_back(flag);
      args.push_back(scalar(v));
    }
  }
  return args;
}

template <typename T>
CLI::Option* list_option(CLI::App* app, const std::string& name, std::vector<T>& target, const std::string& help) {
  return app->add_option(name, target, help)->delimiter(',')->capture_default_str();
}

}  // namespace

int main_entry(const std::vector<std::string>& raw_args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"N-back working-memory evaluation and analysis workbench", "nback"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate trial sequences as JSONL");
  g->add_option("--n", gen.n, "Memory load")->capture_default_str();
  g->add_option("--condition", gen.condition,
                "uniform26 | reduced:<k> | markov:<k>:<p> | <base>+lure:<minus|plus>:<p>")->capture_default_str();
  g->add_option("--trials", gen.trials, "Number of trials")->capture_default_str();
  g->add_option("--seed", gen.seed, "Master seed")->capture_default_str();
  g->add_option("--turns", gen.turns, "Turns per trial")->capture_default_str();
  g->add_option("--out", gen.out, "Output file (stdout when omitted)");

  RunArgs run;
  auto* r = app.add_subcommand("run", "Evaluate a subject and write transcripts and behavioral CSVs");
  r->add_option("--subject", run.subject, "builtin:<kind>?k=v | tiny:<checkpoint> | wire:<endpoint>")->required();
  list_option(r, "--conditions", run.conditions, "Stimulus conditions");
  list_option(r, "--loads", run.loads, "Memory loads");
  r->add_option("--trials", run.trials, "Trials per condition and load")->capture_default_str();
  list_option(r, "--modes", run.modes, "Evaluation modes: tf, ar");
  r->add_option("--seed", run.seed, "Master seed")->capture_default_str();
  r->add_option("--trials-file", run.trials_file, "Evaluate trials from this JSONL file instead");
  list_option(r, "--hidden", run.hidden, "Capture layers to record at answer positions");
  r->add_flag("--batch-tf", run.batch_tf, "Use whole-trial scoring for teacher-forced runs when offered");
  r->add_option("--out", run.out, "Output directory")->required();
  r->add_option("--workers", run.workers, "Worker threads (default: NBACK_WORKERS or 1)");

  TrainArgs train;
  auto* t = app.add_subcommand("train-tiny", "Train the two-layer rotary transformer and write a checkpoint");
  t->add_option("--seed", train.seed, "Training seed")->capture_default_str();
  t->add_option("--epochs", train.epochs, "Epochs")->capture_default_str();
  t->add_option("--warmup-epochs", train.warmup_epochs, "Linear warmup epochs")->capture_default_str();
  t->add_option("--batch", train.batch, "Batch size")->capture_default_str();
  t->add_option("--trials-per-epoch", train.trials_per_epoch, "Fresh trials per epoch")->capture_default_str();
  t->add_option("--lr", train.lr, "Peak learning rate")->capture_default_str();
  t->add_option("--weight-decay", train.weight_decay, "AdamW weight decay")->capture_default_str();
  t->add_option("--patience", train.patience, "Stop after this many perfect epochs (0 disables)")->capture_default_str();
  t->add_option("--eval-trials", train.eval_trials, "Held-out trials per load")->capture_default_str();
  list_option(t, "--loads", train.loads, "Training loads");
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--workers", train.workers, "Worker threads (default: NBACK_WORKERS or 1)");

  ProbeArgs probe;
  auto* p = app.add_subcommand("probe", "Representational probes over recorded hidden states");
  p->add_option("--hidden", probe.hidden, "Hidden-state file written by run --hidden")->required();
  p->add_option("--transcripts", probe.transcripts, "Transcript JSONL matching the hidden states")->required();
  p->add_option("--n", probe.n, "Memory load (inferred when omitted)");
  p->add_option("--subject", probe.subject, "Subject providing identity states and readout directions");
  p->add_option("--min-samples", probe.min_samples, "Minimum samples per letter centroid")->capture_default_str();
  p->add_option("--out", probe.out, "Output directory")->required();

  InterveneArgs iv;
  auto* v = app.add_subcommand("intervene", "Sweep letter-identity removal strengths and directions");
  v->add_option("--subject", iv.subject, "Subject supporting residual interventions")->required();
  list_option(v, "--loads", iv.loads, "Memory loads");
  list_option(v, "--alphas", iv.alphas, "Removal strengths");
  v->add_option("--max-directions", iv.max_directions, "Directions swept singly and as prefixes")->capture_default_str();
  v->add_option("--k", iv.k, "Directions kept in the fitted subspace")->capture_default_str();
  v->add_flag("--no-singles", iv.no_singles, "Skip single-direction cells");
  v->add_flag("--no-prefixes", iv.no_prefixes, "Skip top-k prefix cells");
  v->add_option("--trials", iv.trials, "Trials per cell")->capture_default_str();
  v->add_option("--seed", iv.seed, "Master seed")->capture_default_str();
  v->add_option("--mode", iv.mode, "tf or ar")->capture_default_str();
  v->add_option("--condition", iv.condition, "Stimulus condition")->capture_default_str();
  v->add_option("--layer", iv.layer, "Capture layer whose identity states define the subspace");
  v->add_option("--family", iv.family, "Identity context family (family average when omitted)");
  v->add_option("--subspace", iv.subspace, "Use a saved subspace instead of fitting one");
  v->add_option("--out", iv.out, "Output directory")->required();
  v->add_option("--workers", iv.workers, "Worker threads (default: NBACK_WORKERS or 1)");

  HumanArgs human;
  double chance = 0.0;
  auto* h = app.add_subcommand("human", "Aggregate human reference studies with IPW and bootstrap CIs");
  h->add_option("--studies", human.studies, "Study file (JSON)")->required();
  list_option(h, "--levels", human.levels, "Memory loads to aggregate");
  h->add_option("--resamples", human.resamples, "Bootstrap resamples")->capture_default_str();
  h->add_option("--seed", human.seed, "Bootstrap seed")->capture_default_str();
  h->add_option("--human-chance", chance, "Chance accuracy of the human task (no default)")->required();
  h->add_option("--out", human.out, "Output directory")->required();
  h->add_option("--workers", human.workers, "Worker threads (default: NBACK_WORKERS or 1)");

  ReportArgs report;
  auto* rep = app.add_subcommand("report", "Join run, probe, sweep and human outputs into plot-data tables");
  rep->add_option("--inputs", report.inputs, "Output directories of earlier commands")->required()->delimiter(',');
  rep->add_option("--out", report.out, "Output directory")->required();

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "Serve a subject over the wire protocol (stdio unless --http)");
  s->add_option("--subject", serve.subject, "Subject to serve")->required();
  s->add_option("--http", serve.http_port, "Serve HTTP on this port (0 picks one)");
  s->add_option("--host", serve.host, "HTTP bind address")->capture_default_str();

  try {
    std::vector<std::string> args = merge_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (g->parsed()) return cmd_gen(gen, out, err);
    if (r->parsed()) return cmd_run(run, err);
    if (t->parsed()) return cmd_train(train, err);
    if (p->parsed()) return cmd_probe(probe, err);
    if (v->parsed()) return cmd_intervene(iv, err);
    if (h->parsed()) {
      human.human_chance = chance;
      return cmd_human(human, err);
    }
    if (rep->parsed()) return cmd_report(report, err);
    if (s->parsed()) return cmd_serve(serve, in, out, err);
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SequencingError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SubjectFailure& e) {
    err << "subject failure: " << e.what() << '\n';
    return kExitSubject;
  } catch (const ProtocolError& e) {
    err << "protocol error: " << e.what() << '\n';
    return kExitSubject;
  } catch (const CapabilityError& e) {
    err << "capability error: " << e.what() << '\n';
    return kExitSubject;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const UndefinedValueError& e) {
    err << "undefined value: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const json::exception& e) {
    err << "error: malformed input: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace nback::app
