#include "nback/stimgen.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "nback/error.hpp"
#include "nback/rng.hpp"

namespace nback {

Condition Condition::uniform26() { return Condition{}; }

Condition Condition::reduced(int set_size) {
  Condition c;
  c.kind = Kind::reduced;
  c.set_size = set_size;
  return c;
}

Condition Condition::markov(int set_size, double p_tran) {
  Condition c;
  c.kind = Kind::markov;
  c.set_size = set_size;
  c.p_tran = p_tran;
  return c;
}

Condition Condition::with_lure(LureSide side, double p_lure) const {
  Condition c = *this;
  c.lure = Lure{side, p_lure};
  return c;
}

void Condition::validate() const {
  if (set_size < 2 || set_size > kLetterCount) {
    throw ParameterError("set_size must lie in [2, 26], got " + std::to_string(set_size));
  }
  if (kind == Kind::uniform26 && set_size != kLetterCount) {
    throw ParameterError("uniform26 condition must have set_size 26");
  }
  if (kind == Kind::markov) {
    if (!(p_tran >= 0.0 && p_tran <= 1.0)) throw ParameterError("p_tran must lie in [0, 1]");
    if (set_size < 3 && p_tran < 1.0) {
      throw ParameterError("markov condition with p_tran < 1 needs set_size >= 3");
    }
  }
  if (lure && !(lure->p_lure >= 0.0 && lure->p_lure <= 1.0)) {
    throw ParameterError("p_lure must lie in [0, 1]");
  }
}

namespace {

std::string format_prob(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p);
  return buf;
}

const char* side_name(LureSide s) { return s == LureSide::minus_one ? "minus" : "plus"; }

LureSide parse_side(const std::string& s) {
  if (s == "minus" || s == "minus-one" || s == "left") return LureSide::minus_one;
  if (s == "plus" || s == "plus-one" || s == "right") return LureSide::plus_one;
  throw ParameterError("unknown lure side: " + s);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParameterError(std::string("invalid ") + what + ": " + s);
  }
}

int parse_int(const std::string& s, const char* what) {
  try {
    std::size_t used = 0;
    int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParameterError(std::string("invalid ") + what + ": " + s);
  }
}

}  // namespace

std::string Condition::name() const {
  std::string base;
  switch (kind) {
    case Kind::uniform26: base = "uniform26"; break;
    case Kind::reduced: base = "reduced" + std::to_string(set_size); break;
    case Kind::markov: base = "markov" + std::to_string(set_size) + "_p" + format_prob(p_tran); break;
  }
  if (lure) base += std::string("+lure_") + side_name(lure->side) + "_p" + format_prob(lure->p_lure);
  return base;
}

Condition Condition::parse(const std::string& text) {
  const auto plus = text.find('+');
  const std::string base_text = text.substr(0, plus);
  Condition c;
  const auto parts = split(base_text, ':');
  if (parts.empty()) throw ParameterError("empty condition");
  if (parts[0] == "uniform26" || parts[0] == "uniform" || parts[0] == "base") {
    if (parts.size() != 1) throw ParameterError("uniform26 takes no parameters");
    c = uniform26();
  } else if (parts[0] == "reduced") {
    if (parts.size() != 2) throw ParameterError("expected reduced:<set_size>");
    c = reduced(parse_int(parts[1], "set_size"));
  } else if (parts[0] == "markov") {
    if (parts.size() != 3) throw ParameterError("expected markov:<set_size>:<p_tran>");
    c = markov(parse_int(parts[1], "set_size"), parse_double(parts[2], "p_tran"));
  } else if (parts[0] == "lure" && plus == std::string::npos) {
    // Shorthand: lure:<side>[:p] over uniform26.
    if (parts.size() < 2 || parts.size() > 3) throw ParameterError("expected lure:<side>[:p]");
    c = uniform26().with_lure(parse_side(parts[1]),
                              parts.size() == 3 ? parse_double(parts[2], "p_lure") : 0.25);
    c.validate();
    return c;
  } else {
    throw ParameterError("unknown condition: " + text);
  }
  if (plus != std::string::npos) {
    const auto lp = split(text.substr(plus + 1), ':');
    if (lp.size() < 2 || lp.size() > 3 || lp[0] != "lure") {
      throw ParameterError("expected +lure:<side>[:p] suffix in " + text);
    }
    c = c.with_lure(parse_side(lp[1]), lp.size() == 3 ? parse_double(lp[2], "p_lure") : 0.25);
  }
  c.validate();
  return c;
}

std::optional<Letter> StimulusSequence::loop_successor(Letter l) const {
  if (loop_order.empty()) return std::nullopt;
  const auto it = std::find(loop_order.begin(), loop_order.end(), l);
  if (it == loop_order.end()) return std::nullopt;
  const auto pos = static_cast<std::size_t>(it - loop_order.begin());
  return loop_order[(pos + 1) % loop_order.size()];
}

StimulusSequence gen_sequence(const Condition& condition, std::uint64_t seed, int turns) {
  condition.validate();
  if (turns < 1) throw ParameterError("turns must be >= 1");

  Stream rng(seed, "stim");
  StimulusSequence seq;
  seq.seed = seed;
  seq.condition = condition;
  seq.lure_marks.assign(static_cast<std::size_t>(turns), std::nullopt);
  seq.letters.reserve(static_cast<std::size_t>(turns));

  // Active set: partial Fisher-Yates over the alphabet; the draw order doubles as the
  // Markov loop order.
  std::vector<Letter> drawn;
  if (condition.kind == Condition::Kind::uniform26) {
    for (int i = 0; i < kLetterCount; ++i) drawn.push_back(Letter::from_index(i));
  } else {
    std::array<int, kLetterCount> pool{};
    for (int i = 0; i < kLetterCount; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < condition.set_size; ++i) {
      const int j = i + static_cast<int>(rng.uniform_below(static_cast<std::uint32_t>(kLetterCount - i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      drawn.push_back(Letter::from_index(pool[static_cast<std::size_t>(i)]));
    }
  }
  seq.active_set = drawn;
  std::sort(seq.active_set.begin(), seq.active_set.end());

  const auto k = static_cast<std::uint32_t>(seq.active_set.size());
  if (condition.kind != Condition::Kind::markov) {
    for (int t = 0; t < turns; ++t) seq.letters.push_back(seq.active_set[rng.uniform_below(k)]);
    return seq;
  }

  seq.loop_order = drawn;
  const std::size_t m = seq.loop_order.size();
  std::size_t pos = rng.uniform_below(k);
  seq.letters.push_back(seq.loop_order[pos]);
  for (int t = 1; t < turns; ++t) {
    if (rng.bernoulli(condition.p_tran)) {
      pos = (pos + 1) % m;
    } else {
      // Uniform over the loop excluding the current letter and its successor.
      const std::size_t offset = 2 + rng.uniform_below(static_cast<std::uint32_t>(m - 2));
      pos = (pos + offset) % m;
    }
    seq.letters.push_back(seq.loop_order[pos]);
  }
  return seq;
}

StimulusSequence inject_lures(const StimulusSequence& base, int n, LureSide side, double p_lure,
                              std::uint64_t seed) {
  if (n < 1) throw ParameterError("memory load n must be >= 1");
  if (!(p_lure >= 0.0 && p_lure <= 1.0)) throw ParameterError("p_lure must lie in [0, 1]");
  for (const auto& mark : base.lure_marks) {
    if (mark) throw ParameterError("base sequence already carries lure marks");
  }
  StimulusSequence out = base;
  out.lure_marks.assign(base.letters.size(), std::nullopt);
  const int offset = side == LureSide::minus_one ? n - 1 : n + 1;
  Stream rng(seed, "lure");
  for (int t = 0; t < out.turns(); ++t) {
    const bool draw = rng.bernoulli(p_lure);
    const int src = t - offset;
    // offset 0 (minus side at n = 1) would copy a letter onto itself: never eligible.
    if (!draw || src < 0 || src >= t) continue;
    out.letters[static_cast<std::size_t>(t)] = out.letters[static_cast<std::size_t>(src)];
    out.lure_marks[static_cast<std::size_t>(t)] = side;
  }
  return out;
}

StimulusSequence make_trial(const Condition& condition, int n, std::uint64_t seed, int turns) {
  if (n < 1) throw ParameterError("memory load n must be >= 1");
  Condition base_cond = condition;
  base_cond.lure.reset();
  StimulusSequence seq = gen_sequence(base_cond, seed, turns);
  if (condition.lure) {
    seq = inject_lures(seq, n, condition.lure->side, condition.lure->p_lure, seed);
  }
  seq.condition = condition;
  return seq;
}

GroundTruth ground_truth(const StimulusSequence& seq, int n) {
  if (n <= 0 || n >= seq.turns()) {
    throw ParameterError("memory load must satisfy 1 <= n < turns, got n=" + std::to_string(n));
  }
  GroundTruth gt;
  gt.n = n;
  gt.answers.reserve(seq.letters.size());
  for (int t = 0; t < seq.turns(); ++t) {
    gt.answers.push_back(t < n ? ResponseSymbol::dash()
                               : ResponseSymbol(seq.letters[static_cast<std::size_t>(t - n)]));
  }
  return gt;
}

std::vector<TrialSpec> make_trial_set(const Condition& condition, int n, int count,
                                      std::uint64_t master_seed, const std::string& id_prefix,
                                      int turns) {
  if (count < 0) throw ParameterError("trial count must be >= 0");
  std::vector<TrialSpec> trials;
  trials.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
    TrialSpec spec;
    spec.trial_id = id_prefix + condition.name() + "/n" + std::to_string(n) + "/" + std::to_string(i);
    spec.n = n;
    spec.sequence = make_trial(condition, n, seed, turns);
    trials.push_back(std::move(spec));
  }
  return trials;
}

std::string letters_to_string(const std::vector<Letter>& letters) {
  std::string s;
  s.reserve(letters.size());
  for (Letter l : letters) s.push_back(l.to_char());
  return s;
}

std::vector<Letter> letters_from_string(const std::string& s) {
  std::vector<Letter> out;
  out.reserve(s.size());
  for (char c : s) out.push_back(Letter::from_char(c));
  return out;
}

void to_json(nlohmann::json& j, const Condition& c) {
  switch (c.kind) {
    case Condition::Kind::uniform26: j = {{"kind", "uniform26"}}; break;
    case Condition::Kind::reduced: j = {{"kind", "reduced"}, {"set_size", c.set_size}}; break;
    case Condition::Kind::markov:
      j = {{"kind", "markov"}, {"set_size", c.set_size}, {"p_tran", c.p_tran}};
      break;
  }
  if (c.lure) j["lure"] = {{"side", side_name(c.lure->side)}, {"p_lure", c.lure->p_lure}};
}

void from_json(const nlohmann::json& j, Condition& c) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "uniform26") {
    c = Condition::uniform26();
  } else if (kind == "reduced") {
    c = Condition::reduced(j.at("set_size").get<int>());
  } else if (kind == "markov") {
    c = Condition::markov(j.at("set_size").get<int>(), j.at("p_tran").get<double>());
  } else {
    throw ParameterError("unknown condition kind: " + kind);
  }
  if (j.contains("lure")) {
    const auto& l = j.at("lure");
    c = c.with_lure(parse_side(l.at("side").get<std::string>()), l.at("p_lure").get<double>());
  }
  c.validate();
}

namespace {

nlohmann::json letters_json(const std::vector<Letter>& letters) {
  auto arr = nlohmann::json::array();
  for (Letter l : letters) arr.push_back(std::string(1, l.to_char()));
  return arr;
}

std::vector<Letter> letters_from_json(const nlohmann::json& arr) {
  std::vector<Letter> out;
  for (const auto& v : arr) {
    const auto s = v.get<std::string>();
    if (s.size() != 1) throw ParameterError("letter must be a single character: " + s);
    out.push_back(Letter::from_char(s[0]));
  }
  return out;
}

}  // namespace

nlohmann::json trial_to_json(const TrialSpec& trial) {
  const auto& seq = trial.sequence;
  auto marks = nlohmann::json::array();
  for (const auto& m : seq.lure_marks) {
    marks.push_back(m ? nlohmann::json(side_name(*m)) : nlohmann::json(nullptr));
  }
  nlohmann::json j;
  j["trial_id"] = trial.trial_id;
  j["seed"] = seq.seed;
  j["condition"] = seq.condition;
  j["n"] = trial.n;
  j["letters"] = letters_json(seq.letters);
  j["lure_marks"] = std::move(marks);
  j["active_set"] = letters_json(seq.active_set);
  j["loop_order"] = seq.loop_order.empty() ? nlohmann::json(nullptr) : letters_json(seq.loop_order);
  return j;
}

TrialSpec trial_from_json(const nlohmann::json& j) {
  TrialSpec t;
  t.trial_id = j.at("trial_id").get<std::string>();
  t.n = j.at("n").get<int>();
  auto& seq = t.sequence;
  seq.seed = j.at("seed").get<std::uint64_t>();
  seq.condition = j.at("condition").get<Condition>();
  seq.letters = letters_from_json(j.at("letters"));
  seq.active_set = letters_from_json(j.at("active_set"));
  if (j.contains("loop_order") && !j.at("loop_order").is_null()) {
    seq.loop_order = letters_from_json(j.at("loop_order"));
  }
  seq.lure_marks.assign(seq.letters.size(), std::nullopt);
  if (j.contains("lure_marks")) {
    const auto& marks = j.at("lure_marks");
    if (marks.size() != seq.letters.size()) throw ParameterError("lure_marks length mismatch");
    for (std::size_t i = 0; i < marks.size(); ++i) {
      if (!marks[i].is_null()) seq.lure_marks[i] = parse_side(marks[i].get<std::string>());
    }
  }
  return t;
}

}  // namespace nback
