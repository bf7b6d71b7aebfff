#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "nback/stimgen.hpp"
#include "nback/subject.hpp"

namespace nback {

// Restricted, renormalized distribution over the 27 response symbols.
struct SubjectDistribution {
  SymbolProbs probs{};
  ResponseSymbol top1 = ResponseSymbol::dash();
  bool flagged = false;  // raw mass was zero or unparseable; uniform substituted
};

// Clips negative/non-finite entries to zero and renormalizes. All-zero or unparseable input
// yields the uniform distribution, the sentinel top1 and flagged = true.
SubjectDistribution normalize_distribution(const SymbolProbs& raw, bool parseable = true);

// Argmax with ties broken alphabetically, dash last.
ResponseSymbol top_symbol(const SymbolProbs& probs);

struct TurnRecord {
  int t = 0;
  Letter stimulus;
  ResponseSymbol truth;
  SubjectDistribution dist;
  bool correct = false;
};

struct Transcript {
  std::string trial_id;
  int n = 0;
  EvalMode mode = EvalMode::teacher_forced;
  std::string subject_name;
  std::uint64_t seed = 0;
  Condition condition;
  bool has_distribution = true;
  bool failed = false;
  std::string failure_reason;
  std::vector<TurnRecord> turns;

  std::vector<Letter> stimuli() const;
};

// Answer-position states for one evaluable turn.
struct TurnStates {
  int t = 0;
  std::map<std::string, std::vector<float>> layers;
};

struct TrialResult {
  Transcript transcript;
  std::vector<TurnStates> states;
};

struct RunOptions {
  std::vector<std::string> want_hidden;
  // Use the subject's whole-trial scorer in teacher-forced mode when it offers one.
  bool batch_teacher_forced = false;
};

// System prompt with N substituted and fresh 10-letter 1-back and 2-back inline examples
// drawn from example_seed.
std::string render_system_prompt(int n, std::uint64_t example_seed);

ConversationContext build_context(const StimulusSequence& trial, const GroundTruth& gt,
                                  const std::vector<ResponseSymbol>& prior_responses, int t,
                                  EvalMode mode, const std::string& system_prompt = {});

// Runs one trial turn by turn. A subject failure marks the transcript failed (with the
// reason) instead of propagating.
TrialResult run_trial(Subject& subject, const TrialSpec& trial, EvalMode mode,
                      const RunOptions& options = {});

// Mean correctness over turns t >= n; UndefinedValueError when there are none.
double score_accuracy(const Transcript& transcript);

// Transcript files: one header object per trial, then one object per turn.
void write_transcript_jsonl(std::ostream& out, const Transcript& transcript);
std::vector<Transcript> read_transcripts_jsonl(std::istream& in);
std::vector<Transcript> read_transcripts_jsonl(const std::filesystem::path& path);

// trial_id,subject,mode,condition,n,accuracy,failed
void write_trial_accuracy_csv(std::ostream& out, const std::vector<Transcript>& transcripts);

}  // namespace nback
