#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "nback/symbols.hpp"

namespace nback {

inline constexpr int kDefaultTurns = 50;

enum class LureSide { minus_one, plus_one };

// Base stimulus distribution. Uniform26 is Reduced with all 26 letters, kept distinct so
// it serializes and prints under its own name.
struct Condition {
  enum class Kind { uniform26, reduced, markov };

  Kind kind = Kind::uniform26;
  int set_size = kLetterCount;
  double p_tran = 0.0;

  struct Lure {
    LureSide side = LureSide::minus_one;
    double p_lure = 0.25;
    friend bool operator==(const Lure&, const Lure&) = default;
  };
  std::optional<Lure> lure;  // lures wrap the base condition

  static Condition uniform26();
  static Condition reduced(int set_size);
  static Condition markov(int set_size, double p_tran);
  Condition with_lure(LureSide side, double p_lure) const;

  // Throws ParameterError on out-of-range parameters.
  void validate() const;
  // Short stable name, e.g. "uniform26", "reduced10", "markov10_p0.8", "uniform26+lure_minus_p0.25".
  std::string name() const;
  // Parses the CLI form: uniform26 | reduced:<k> | markov:<k>:<p> | <base>+lure:<minus|plus>:<p>.
  static Condition parse(const std::string& text);

  friend bool operator==(const Condition&, const Condition&) = default;
};

struct StimulusSequence {
  std::vector<Letter> letters;
  std::vector<Letter> active_set;                // alphabetical order
  std::vector<Letter> loop_order;                // Markov only; circular successor order
  std::vector<std::optional<LureSide>> lure_marks;
  std::uint64_t seed = 0;
  Condition condition;

  int turns() const { return static_cast<int>(letters.size()); }
  // Loop successor of a letter, if a loop is defined and contains it.
  std::optional<Letter> loop_successor(Letter l) const;
};

struct GroundTruth {
  std::vector<ResponseSymbol> answers;
  int n = 0;
};

// Draws the base sequence of a condition (lures, if any, are not applied here).
StimulusSequence gen_sequence(const Condition& condition, std::uint64_t seed,
                              int turns = kDefaultTurns);

// Sequential lure replacement: at turn t, with probability p_lure and when the source
// index t-(n-1) (minus) or t-(n+1) (plus) is valid, letters[t] becomes the letter at that
// source index of the sequence built so far. The Bernoulli draw is consumed at every turn.
StimulusSequence inject_lures(const StimulusSequence& base, int n, LureSide side, double p_lure,
                              std::uint64_t seed);

// Full trial for (condition, n): base sequence plus lures when the condition carries them.
StimulusSequence make_trial(const Condition& condition, int n, std::uint64_t seed,
                            int turns = kDefaultTurns);

GroundTruth ground_truth(const StimulusSequence& seq, int n);

// A trial as written to trial files.
struct TrialSpec {
  std::string trial_id;
  int n = 0;
  StimulusSequence sequence;
};

// Trial set for one (condition, n): trial i uses seed derive_seed(master_seed, i).
std::vector<TrialSpec> make_trial_set(const Condition& condition, int n, int count,
                                      std::uint64_t master_seed, const std::string& id_prefix = "",
                                      int turns = kDefaultTurns);

void to_json(nlohmann::json& j, const Condition& c);
void from_json(const nlohmann::json& j, Condition& c);
nlohmann::json trial_to_json(const TrialSpec& trial);
TrialSpec trial_from_json(const nlohmann::json& j);

std::string letters_to_string(const std::vector<Letter>& letters);
std::vector<Letter> letters_from_string(const std::string& s);

}  // namespace nback
