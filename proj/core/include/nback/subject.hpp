#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "nback/stimgen.hpp"
#include "nback/symbols.hpp"

namespace nback {

enum class EvalMode { teacher_forced, autoregressive };

std::string to_string(EvalMode mode);  // "tf" / "ar"
EvalMode parse_eval_mode(const std::string& text);

struct ConversationContext {
  std::string system_prompt;
  std::vector<std::pair<Letter, ResponseSymbol>> history;
  Letter current_stimulus;
  int n = 0;
  int turn = 0;
  EvalMode mode = EvalMode::teacher_forced;
};

struct Capabilities {
  bool dist = true;
  bool hidden = false;
  bool readout = false;
  bool intervene = false;
  int layer_count = 0;
  int d_model = 0;
  std::vector<std::string> layer_ids;  // capture identifiers, shallow to deep
};

// Trial-level information handed to a subject when its session opens.
struct SessionInfo {
  std::string trial_id;
  int n = 0;
  EvalMode mode = EvalMode::teacher_forced;
  std::uint64_t seed = 0;
  std::vector<Letter> loop_order;  // Markov trials only
};

struct TurnReply {
  SymbolProbs raw{};         // unnormalized; the harness restricts and renormalizes
  bool parseable = true;     // false when the subject produced no usable symbol
  std::map<std::string, std::vector<float>> states;  // layer id -> answer-position state
};

struct LetterSubspace;

// Residual-stream edit h <- h - alpha (proj_B(h) - mu_proj) at the answer position.
struct Intervention {
  std::shared_ptr<const LetterSubspace> subspace;
  double alpha = 0.0;
};

// Identity representations per context family and capture layer: 26 x d matrices.
using IdentityStates = std::map<std::string, std::map<std::string, Eigen::MatrixXd>>;

// A subject answers one turn at a time within a session that spans one trial.
class Subject {
 public:
  virtual ~Subject() = default;

  virtual std::string name() const = 0;
  virtual Capabilities capabilities() const { return {}; }

  virtual void open_session(const SessionInfo& info) { (void)info; }
  virtual void close_session() {}

  // want_hidden lists capture layer ids to return in TurnReply::states.
  virtual TurnReply respond(const ConversationContext& context,
                            const std::vector<std::string>& want_hidden) = 0;

  // Teacher-forced batch scoring of a whole trial; empty when unsupported.
  virtual std::optional<std::vector<TurnReply>> respond_trial(
      int n, const std::string& system_prompt, const std::vector<Letter>& stimuli,
      const std::vector<ResponseSymbol>& responses_given, const std::vector<std::string>& want_hidden) {
    (void)n, (void)system_prompt, (void)stimuli, (void)responses_given, (void)want_hidden;
    return std::nullopt;
  }

  // Throws CapabilityError unless the subject supports the capability.
  virtual void set_intervention(std::optional<Intervention> intervention);
  virtual IdentityStates identity_states();
  virtual Eigen::MatrixXd readout_directions();  // 26 x d, row c for letter c
};

using SubjectFactory = std::function<std::unique_ptr<Subject>()>;

}  // namespace nback
