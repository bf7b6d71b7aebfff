#include "nback/trial_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>

#include <nlohmann/json.hpp>

#include "nback/error.hpp"
#include "nback/rng.hpp"

namespace nback {

using json = nlohmann::json;

std::string to_string(EvalMode mode) {
  return mode == EvalMode::teacher_forced ? "tf" : "ar";
}

EvalMode parse_eval_mode(const std::string& text) {
  if (text == "tf" || text == "teacher_forced") return EvalMode::teacher_forced;
  if (text == "ar" || text == "autoregressive") return EvalMode::autoregressive;
  throw ParameterError("unknown evaluation mode '" + text + "' (expected tf or ar)");
}

void Subject::set_intervention(std::optional<Intervention> intervention) {
  if (intervention) throw CapabilityError("subject '" + name() + "' does not support interventions");
}

IdentityStates Subject::identity_states() {
  throw CapabilityError("subject '" + name() + "' does not expose hidden states");
}

Eigen::MatrixXd Subject::readout_directions() {
  throw CapabilityError("subject '" + name() + "' does not expose readout directions");
}

ResponseSymbol top_symbol(const SymbolProbs& probs) {
  // Index order is already A..Z then dash, so the first maximum wins the tie rule.
  int best = 0;
  for (int i = 1; i < kSymbolCount; ++i) {
    if (probs[i] > probs[best]) best = i;
  }
  return ResponseSymbol::from_index(best);
}

SubjectDistribution normalize_distribution(const SymbolProbs& raw, bool parseable) {
  SubjectDistribution d;
  double total = 0.0;
  if (parseable) {
    for (int i = 0; i < kSymbolCount; ++i) {
      const double v = std::isfinite(raw[i]) && raw[i] > 0.0 ? raw[i] : 0.0;
      d.probs[i] = v;
      total += v;
    }
  }
  if (!parseable || !(total > 0.0) || !std::isfinite(total)) {
    d.probs.fill(1.0 / kSymbolCount);
    d.top1 = ResponseSymbol::sentinel();
    d.flagged = true;
    return d;
  }
  for (auto& v : d.probs) v /= total;
  d.top1 = top_symbol(d.probs);
  return d;
}

std::vector<Letter> Transcript::stimuli() const {
  std::vector<Letter> out;
  out.reserve(turns.size());
  for (const auto& t : turns) out.push_back(t.stimulus);
  return out;
}

ConversationContext build_context(const StimulusSequence& trial, const GroundTruth& gt,
                                  const std::vector<ResponseSymbol>& prior_responses, int t,
                                  EvalMode mode, const std::string& system_prompt) {
  if (t < 0 || t >= trial.turns()) throw ParameterError("build_context: turn index out of range");
  if (mode == EvalMode::autoregressive && static_cast<int>(prior_responses.size()) < t) {
    throw SequencingError("build_context: autoregressive mode needs the subject's earlier responses");
  }
  ConversationContext ctx;
  ctx.system_prompt = system_prompt;
  ctx.n = gt.n;
  ctx.turn = t;
  ctx.mode = mode;
  ctx.current_stimulus = trial.letters[t];
  ctx.history.reserve(t);
  for (int i = 0; i < t; ++i) {
    const ResponseSymbol r = mode == EvalMode::teacher_forced ? gt.answers[i] : prior_responses[i];
    ctx.history.emplace_back(trial.letters[i], r);
  }
  return ctx;
}

namespace {

void record_turn(Transcript& tr, TrialResult& result, int t, Letter stim, ResponseSymbol truth,
                 const TurnReply& reply, const RunOptions& options, int n) {
  TurnRecord rec;
  rec.t = t;
  rec.stimulus = stim;
  rec.truth = truth;
  rec.dist = normalize_distribution(reply.raw, reply.parseable);
  rec.correct = rec.dist.top1 == truth;
  tr.turns.push_back(rec);
  if (!options.want_hidden.empty() && t >= n) {
    TurnStates s;
    s.t = t;
    for (const auto& id : options.want_hidden) {
      auto it = reply.states.find(id);
      if (it == reply.states.end()) {
        throw CapabilityError("subject returned no state for layer '" + id + "'");
      }
      s.layers.emplace(id, it->second);
    }
    result.states.push_back(std::move(s));
  }
}

}  // namespace

TrialResult run_trial(Subject& subject, const TrialSpec& trial, EvalMode mode, const RunOptions& options) {
  const auto& seq = trial.sequence;
  const GroundTruth gt = ground_truth(seq, trial.n);
  TrialResult result;
  Transcript& tr = result.transcript;
  tr.trial_id = trial.trial_id;
  tr.n = trial.n;
  tr.mode = mode;
  tr.subject_name = subject.name();
  tr.seed = seq.seed;
  tr.condition = seq.condition;
  const Capabilities caps = subject.capabilities();
  tr.has_distribution = caps.dist;

  SessionInfo info;
  info.trial_id = trial.trial_id;
  info.n = trial.n;
  info.mode = mode;
  info.seed = seq.seed;
  info.loop_order = seq.loop_order;

  const std::string prompt =
      trial.n <= 9 ? render_system_prompt(trial.n, derive_seed(seq.seed, label_hash("prompt"))) : std::string{};

  bool opened = false;
  try {
    subject.open_session(info);
    opened = true;
    if (mode == EvalMode::teacher_forced && options.batch_teacher_forced) {
      auto replies = subject.respond_trial(trial.n, prompt, seq.letters, gt.answers, options.want_hidden);
      if (replies) {
        if (static_cast<int>(replies->size()) != seq.turns()) {
          throw ProtocolError("batch scoring returned the wrong number of turns");
        }
        for (int t = 0; t < seq.turns(); ++t) {
          record_turn(tr, result, t, seq.letters[t], gt.answers[t], (*replies)[t], options, trial.n);
        }
        subject.close_session();
        return result;
      }
    }
    std::vector<ResponseSymbol> emitted;
    emitted.reserve(seq.turns());
    for (int t = 0; t < seq.turns(); ++t) {
      const ConversationContext ctx = build_context(seq, gt, emitted, t, mode, prompt);
      const TurnReply reply = subject.respond(ctx, options.want_hidden);
      record_turn(tr, result, t, seq.letters[t], gt.answers[t], reply, options, trial.n);
      emitted.push_back(tr.turns.back().dist.top1);
    }
    subject.close_session();
  } catch (const ParameterError&) {
    throw;
  } catch (const CapabilityError&) {
    throw;
  } catch (const std::exception& e) {
    tr.failed = true;
    tr.failure_reason = e.what();
    result.states.clear();
    if (opened) {
      try {
        subject.close_session();
      } catch (...) {
      }
    }
  }
  return result;
}

double score_accuracy(const Transcript& transcript) {
  int count = 0;
  int correct = 0;
  for (const auto& t : transcript.turns) {
    if (t.t < transcript.n) continue;
    ++count;
    correct += t.correct ? 1 : 0;
  }
  if (count == 0) throw UndefinedValueError("score_accuracy: transcript has no evaluable turns");
  return static_cast<double>(correct) / count;
}

void write_transcript_jsonl(std::ostream& out, const Transcript& tr) {
  json header = {{"type", "trial"},
                 {"trial_id", tr.trial_id},
                 {"n", tr.n},
                 {"mode", to_string(tr.mode)},
                 {"subject", tr.subject_name},
                 {"seed", tr.seed},
                 {"condition", tr.condition},
                 {"has_distribution", tr.has_distribution},
                 {"failed", tr.failed},
                 {"turns", tr.turns.size()}};
  if (tr.failed) header["failure_reason"] = tr.failure_reason;
  out << header.dump() << '\n';
  for (const auto& t : tr.turns) {
    json probs = json::array();
    for (double p : t.dist.probs) probs.push_back(p);
    json row = {{"type", "turn"},
                {"trial_id", tr.trial_id},
                {"t", t.t},
                {"stimulus", std::string(1, t.stimulus.to_char())},
                {"truth", t.truth.str()},
                {"top1", t.dist.top1.str()},
                {"correct", t.correct},
                {"flagged", t.dist.flagged},
                {"probs", std::move(probs)}};
    out << row.dump() << '\n';
  }
}

std::vector<Transcript> read_transcripts_jsonl(std::istream& in) {
  std::vector<Transcript> out;
  std::string line;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type == "trial") {
      if (!out.empty() && out.back().turns.size() != expected) {
        throw ParameterError("transcript file: trial " + out.back().trial_id + " is truncated");
      }
      Transcript tr;
      tr.trial_id = j.at("trial_id").get<std::string>();
      tr.n = j.at("n").get<int>();
      tr.mode = parse_eval_mode(j.at("mode").get<std::string>());
      tr.subject_name = j.at("subject").get<std::string>();
      tr.seed = j.at("seed").get<std::uint64_t>();
      tr.condition = j.at("condition").get<Condition>();
      tr.has_distribution = j.value("has_distribution", true);
      tr.failed = j.value("failed", false);
      tr.failure_reason = j.value("failure_reason", std::string{});
      expected = j.at("turns").get<std::size_t>();
      out.push_back(std::move(tr));
    } else if (type == "turn") {
      if (out.empty() || j.at("trial_id").get<std::string>() != out.back().trial_id) {
        throw ParameterError("transcript file: turn row without its trial header");
      }
      TurnRecord rec;
      rec.t = j.at("t").get<int>();
      rec.stimulus = Letter::from_char(j.at("stimulus").get<std::string>().at(0));
      rec.truth = ResponseSymbol::parse(j.at("truth").get<std::string>());
      rec.dist.top1 = ResponseSymbol::parse(j.at("top1").get<std::string>());
      rec.dist.flagged = j.value("flagged", false);
      const auto& probs = j.at("probs");
      if (probs.size() != static_cast<std::size_t>(kSymbolCount)) {
        throw ParameterError("transcript file: probs must have 27 entries");
      }
      for (int i = 0; i < kSymbolCount; ++i) rec.dist.probs[i] = probs[i].get<double>();
      rec.correct = j.at("correct").get<bool>();
      out.back().turns.push_back(rec);
    } else {
      throw ParameterError("transcript file: unknown row type '" + type + "'");
    }
  }
  if (!out.empty() && out.back().turns.size() != expected) {
    throw ParameterError("transcript file: trial " + out.back().trial_id + " is truncated");
  }
  return out;
}

std::vector<Transcript> read_transcripts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot open transcript file " + path.string());
  return read_transcripts_jsonl(in);
}

namespace {

std::string csv_cell(const std::string& v) {
  if (v.find_first_of(",\"\r\n") == std::string::npos) return v;
  std::string q = "\"";
  for (char c : v) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + '"';
}

}  // namespace

void write_trial_accuracy_csv(std::ostream& out, const std::vector<Transcript>& transcripts) {
  out << "trial_id,subject,mode,condition,n,accuracy,failed\n";
  const auto precision = out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& tr : transcripts) {
    out << tr.trial_id << ',' << csv_cell(tr.subject_name) << ',' << to_string(tr.mode) << ','
        << tr.condition.name() << ',' << tr.n << ',';
    if (tr.failed) {
      out << ",1\n";
    } else {
      out << score_accuracy(tr) << ",0\n";
    }
  }
  out.precision(precision);
}

}  // namespace nback
