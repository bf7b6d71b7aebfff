#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <set>

#include "app.hpp"
#include "nback/error.hpp"
#include "nback/metrics.hpp"
#include "nback/parallel.hpp"
#include "nback/probes.hpp"
#include "nback/subject_factory.hpp"

namespace nback::app {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Cell {
  EvalMode mode = EvalMode::teacher_forced;
  Condition condition;
  int n = 0;
  std::vector<TrialSpec> trials;
  std::vector<TrialResult> results;
  std::string key() const { return to_string(mode) + "_" + condition.name() + "_n" + std::to_string(n); }
};

std::vector<std::pair<Condition, std::vector<TrialSpec>>> load_trial_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot read trial file " + path);
  std::vector<std::pair<Condition, std::vector<TrialSpec>>> groups;
  std::map<std::string, std::size_t> index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    TrialSpec t;
    try {
      t = trial_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw ParameterError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    const std::string key = t.sequence.condition.name() + "/" + std::to_string(t.n);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, groups.size()).first;
      groups.emplace_back(t.sequence.condition, std::vector<TrialSpec>{});
    }
    groups[it->second].second.push_back(std::move(t));
  }
  if (groups.empty()) throw ParameterError("trial file " + path + " holds no trials");
  return groups;
}

double safe_accuracy(const std::vector<Transcript>& ts) {
  try {
    return summarize_accuracy(ts).mean;
  } catch (const UndefinedValueError&) {
    return kNaN;
  }
}

double safe_kappa(const std::vector<Transcript>& ts) {
  try {
    const auto pool = pool_turns(ts);
    if (pool.empty()) return kNaN;
    return cohen_kappa(pool).kappa;
  } catch (const UndefinedValueError&) {
    return kNaN;
  }
}

std::vector<Transcript> transcripts_of(const Cell& c) {
  std::vector<Transcript> ts;
  ts.reserve(c.results.size());
  for (const auto& r : c.results) ts.push_back(r.transcript);
  return ts;
}

std::string opt(const std::optional<double>& v) { return v ? num(*v) : std::string{}; }

}  // namespace

int cmd_run(const RunArgs& args, std::ostream& log) {
  namespace fs = std::filesystem;
  if (args.modes.empty()) throw ParameterError("run: no modes given");
  if (!args.trials_file.empty() && (args.conditions != RunArgs{}.conditions || args.loads != RunArgs{}.loads)) {
    // A trial file fixes conditions and loads itself.
    throw ParameterError("run: --trials-file conflicts with --conditions/--loads");
  }
  std::vector<EvalMode> modes;
  for (const auto& m : args.modes) modes.push_back(parse_eval_mode(m));
  const int workers = resolve_workers(args.workers);

  std::vector<std::pair<Condition, std::vector<TrialSpec>>> groups;
  if (!args.trials_file.empty()) {
    groups = load_trial_file(args.trials_file);
  } else {
    if (args.trials <= 0) throw ParameterError("run: --trials must be positive");
    for (const auto& name : args.conditions) {
      const Condition c = Condition::parse(name);
      for (int n : args.loads) groups.emplace_back(c, trial_set_for(c, n, args.trials, args.seed));
    }
  }

  const SubjectFactory factory = make_subject_factory(args.subject);
  std::string subject_name;
  Capabilities caps;
  {
    auto probe = factory();
    subject_name = probe->name();
    caps = probe->capabilities();
  }
  if (!args.hidden.empty()) {
    if (!caps.hidden) throw CapabilityError("subject " + subject_name + " does not expose hidden states");
    for (const auto& l : args.hidden) {
      if (std::find(caps.layer_ids.begin(), caps.layer_ids.end(), l) == caps.layer_ids.end()) {
        throw ParameterError("subject " + subject_name + " has no capture layer '" + l + "'");
      }
    }
  }

  std::vector<Cell> cells;
  for (EvalMode m : modes) {
    for (const auto& [cond, trials] : groups) {
      Cell c;
      c.mode = m;
      c.condition = cond;
      c.n = trials.front().n;
      c.trials = trials;
      c.results.resize(trials.size());
      cells.push_back(std::move(c));
    }
  }

  // Flat job list in output order, split into contiguous chunks, one subject per chunk.
  std::vector<std::pair<std::size_t, std::size_t>> jobs;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t t = 0; t < cells[c].trials.size(); ++t) jobs.emplace_back(c, t);
  }
  RunOptions options;
  options.want_hidden = args.hidden;
  options.batch_teacher_forced = args.batch_tf;
  const int chunks = std::max(1, std::min<int>(workers, static_cast<int>(jobs.size())));
  parallel_for(chunks, chunks, [&](int w) {
    const std::size_t begin = jobs.size() * static_cast<std::size_t>(w) / static_cast<std::size_t>(chunks);
    const std::size_t end = jobs.size() * static_cast<std::size_t>(w + 1) / static_cast<std::size_t>(chunks);
    auto subject = factory();
    for (std::size_t j = begin; j < end; ++j) {
      auto& cell = cells[jobs[j].first];
      cell.results[jobs[j].second] = run_trial(*subject, cell.trials[jobs[j].second], cell.mode, options);
    }
  });

  const fs::path dir(args.out);
  fs::create_directories(dir);
  std::vector<std::string> artifacts;

  std::vector<Transcript> all;
  {
    auto out = open_output(dir / "transcripts.jsonl");
    for (const auto& c : cells) {
      for (const auto& r : c.results) {
        write_transcript_jsonl(out, r.transcript);
        all.push_back(r.transcript);
      }
    }
  }
  artifacts.push_back("transcripts.jsonl");
  {
    auto out = open_output(dir / "trial_accuracy.csv");
    write_trial_accuracy_csv(out, all);
  }
  artifacts.push_back("trial_accuracy.csv");

  std::size_t failed = 0;
  {
    CsvWriter w(dir / "failures.csv", {"trial_id", "mode", "condition", "n", "reason"});
    for (const auto& t : all) {
      if (!t.failed) continue;
      ++failed;
      std::string reason = t.failure_reason;
      std::replace(reason.begin(), reason.end(), ',', ';');
      std::replace(reason.begin(), reason.end(), '\n', ' ');
      w.cell(t.trial_id).cell(to_string(t.mode)).cell(t.condition.name()).cell(t.n).cell(reason).end_row();
    }
  }
  artifacts.push_back("failures.csv");

  const std::string primary = groups.front().first.name();
  {
    CsvWriter cap(dir / "capacity.csv", {"subject", "mode", "n", "accuracy", "kappa"});
    CsvWriter all_cap(dir / "capacity_by_condition.csv",
                      {"subject", "mode", "condition", "n", "accuracy", "accuracy_se", "kappa", "trials", "failed"});
    for (const auto& c : cells) {
      const auto ts = transcripts_of(c);
      AccuracySummary s;
      try {
        s = summarize_accuracy(ts);
      } catch (const UndefinedValueError&) {
        s.mean = s.se = kNaN;
        s.trials = ts.size();
        s.failed = ts.size();
      }
      const double kappa = safe_kappa(ts);
      if (c.condition.name() == primary) {
        cap.cell(subject_name).cell(to_string(c.mode)).cell(c.n).cell(s.mean).cell(kappa).end_row();
      }
      all_cap.cell(subject_name).cell(to_string(c.mode)).cell(c.condition.name()).cell(c.n).cell(s.mean).cell(s.se)
          .cell(kappa).cell(s.trials).cell(s.failed).end_row();
    }
  }
  artifacts.push_back("capacity.csv");
  artifacts.push_back("capacity_by_condition.csv");

  if (caps.dist) {
    // (mode, condition) -> load -> kernel
    std::map<std::pair<std::string, std::string>, std::map<int, KernelEstimate>> kernels;
    std::vector<std::pair<std::string, std::string>> order;
    {
      CsvWriter k(dir / "kernel.csv", {"subject", "mode", "n", "k", "rho", "count"});
      CsvWriter kc(dir / "kernel_by_condition.csv",
                   {"subject", "mode", "condition", "n", "k", "rho", "se", "count", "excluded", "mean_dash_mass"});
      for (const auto& c : cells) {
        const auto ts = transcripts_of(c);
        const bool any = std::any_of(ts.begin(), ts.end(), [](const Transcript& t) { return !t.failed; });
        if (!any) continue;
        const KernelEstimate est = retrieval_kernel(ts, c.n);
        const auto key = std::make_pair(to_string(c.mode), c.condition.name());
        if (!kernels.count(key)) order.push_back(key);
        kernels[key][c.n] = est;
        for (int off = est.min_offset; off <= 0; ++off) {
          if (c.condition.name() == primary) {
            k.cell(subject_name).cell(to_string(c.mode)).cell(c.n).cell(off).cell(est.at(off)).cell(est.count_at(off))
                .end_row();
          }
          const auto i = static_cast<std::size_t>(off - est.min_offset);
          kc.cell(subject_name).cell(to_string(c.mode)).cell(c.condition.name()).cell(c.n).cell(off)
              .cell(est.rho[i]).cell(est.se[i]).cell(est.count[i]).cell(est.excluded[i]).cell(est.mean_dash_mass)
              .end_row();
        }
      }
    }
    artifacts.push_back("kernel.csv");
    artifacts.push_back("kernel_by_condition.csv");
    CsvWriter f(dir / "frontier.csv", {"subject", "mode", "condition", "loads", "correct_mass", "interference_mass"});
    for (const auto& key : order) {
      const auto& by_load = kernels.at(key);
      std::vector<int> loads;
      std::string label;
      for (const auto& [n, est] : by_load) {
        loads.push_back(n);
        label += (label.empty() ? "" : ";") + std::to_string(n);
      }
      const Frontier fr = frontier(by_load, loads);
      f.cell(subject_name).cell(key.first).cell(key.second).cell(label).cell(fr.correct_mass).cell(fr.interference_mass)
          .end_row();
    }
    artifacts.push_back("frontier.csv");
  }

  {
    CsvWriter w(dir / "contrasts.csv", {"subject", "mode", "n", "delta_lure", "delta_vocab", "delta_tran", "delta_lure_minus", "delta_lure_plus"});
    for (EvalMode m : modes) {
      std::map<int, std::map<std::string, double>> by_load;
      for (const auto& c : cells) {
        if (c.mode != m) continue;
        const double a = safe_accuracy(transcripts_of(c));
        if (!std::isnan(a)) by_load[c.n][c.condition.name()] = a;
      }
      std::map<std::string, std::pair<double, int>> pooled;
      for (const auto& [n, table] : by_load) {
        const auto rep = contrasts(ContrastInputs::from_table(table), false);
        w.cell(subject_name).cell(to_string(m)).cell(n).cell(opt(rep.delta_lure)).cell(opt(rep.delta_vocab))
            .cell(opt(rep.delta_tran)).cell(opt(rep.delta_lure_minus)).cell(opt(rep.delta_lure_plus)).end_row();
        for (const auto& [name, a] : table) {
          pooled[name].first += a;
          pooled[name].second += 1;
        }
      }
      // Load-averaged contrasts use only conditions present at every load.
      std::map<std::string, double> mean_table;
      for (const auto& [name, sum] : pooled) {
        if (sum.second == static_cast<int>(by_load.size())) mean_table[name] = sum.first / sum.second;
      }
      const auto rep = contrasts(ContrastInputs::from_table(mean_table), false);
      w.cell(subject_name).cell(to_string(m)).cell(std::string("all")).cell(opt(rep.delta_lure))
          .cell(opt(rep.delta_vocab)).cell(opt(rep.delta_tran)).cell(opt(rep.delta_lure_minus)).cell(opt(rep.delta_lure_plus)).end_row();
    }
  }
  artifacts.push_back("contrasts.csv");

  if (!args.hidden.empty()) {
    fs::create_directories(dir / "hidden");
    for (const auto& c : cells) {
      const std::string rel = "hidden/" + safe_name(c.key()) + ".bin";
      probes::write_hidden_file(dir / rel, probes::make_hidden_record(subject_name, args.hidden, c.results));
      artifacts.push_back(rel);
    }
  }

  write_manifest(dir, "run", to_json(args), artifacts);
  log << "run: " << subject_name << ", " << all.size() << " trials, " << failed << " failed -> " << dir.string() << '\n';
  return failed > 0 ? kExitSubject : kExitOk;
}

}  // namespace nback::app
