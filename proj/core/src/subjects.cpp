#include "nback/subjects.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "nback/error.hpp"
#include "nback/rng.hpp"

namespace nback {
namespace {

using Kind = BuiltinSpec::Kind;

const std::map<std::string, Kind>& kind_names() {
  static const std::map<std::string, Kind> names = {
      {"oracle", Kind::oracle},         {"uniform", Kind::uniform},
      {"constant", Kind::constant},     {"recency_blur", Kind::recency_blur},
      {"markov_shortcut", Kind::markov_shortcut}, {"faulty", Kind::faulty}};
  return names;
}

std::string kind_name(Kind k) {
  for (const auto& [name, kind] : kind_names()) {
    if (kind == k) return name;
  }
  return "?";
}

double parse_number(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty()) {
    throw ParameterError("subject parameter " + key + ": '" + value + "' is not a number");
  }
  return v;
}

// Symbol at relative offset k (<= 0) from the current turn; dash before the trial starts.
ResponseSymbol symbol_at_offset(const ConversationContext& ctx, int k) {
  const int idx = ctx.turn + k;
  if (idx < 0) return ResponseSymbol::dash();
  if (idx == ctx.turn) return ctx.current_stimulus;
  return ctx.history[idx].first;
}

ResponseSymbol target_of(const ConversationContext& ctx) { return symbol_at_offset(ctx, -ctx.n); }

TurnReply delta(ResponseSymbol s) {
  TurnReply r;
  r.raw.fill(0.0);
  r.raw[s.index()] = 1.0;
  return r;
}

class BuiltinSubject final : public Subject {
 public:
  explicit BuiltinSubject(BuiltinSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  std::string name() const override { return spec_.str(); }

  void open_session(const SessionInfo& info) override {
    info_ = info;
    prev_answer_.reset();
    stream_.emplace(derive_seed(info.seed, spec_.seed), "subject/" + kind_name(spec_.kind));
    loop_successor_.fill(-1);
    const int m = static_cast<int>(info.loop_order.size());
    for (int i = 0; i < m; ++i) {
      loop_successor_[info.loop_order[i].index()] = info.loop_order[(i + 1) % m].index();
    }
  }

  TurnReply respond(const ConversationContext& ctx, const std::vector<std::string>& want_hidden) override {
    if (!want_hidden.empty()) throw CapabilityError("builtin subjects expose no hidden states");
    if (static_cast<int>(ctx.history.size()) != ctx.turn) {
      throw SequencingError("context history length does not match the turn index");
    }
    switch (spec_.kind) {
      case Kind::oracle:
        return delta(target_of(ctx));
      case Kind::uniform: {
        TurnReply r;
        if (ctx.turn < ctx.n) {
          r.raw.fill(1.0 / kSymbolCount);
        } else {
          r.raw.fill(1.0 / kLetterCount);
          r.raw[kDashIndex] = 0.0;
        }
        return r;
      }
      case Kind::constant:
        return delta(ctx.turn < ctx.n ? ResponseSymbol::dash() : ResponseSymbol(spec_.letter));
      case Kind::recency_blur: {
        TurnReply r;
        r.raw.fill(0.0);
        for (int i = 0; i < kLetterCount; ++i) r.raw[i] = spec_.floor / kLetterCount;
        for (int k = -5; k <= 0; ++k) {
          const double w = spec_.weights[k + 5];
          if (w > 0.0) r.raw[symbol_at_offset(ctx, k).index()] += w;
        }
        return r;
      }
      case Kind::markov_shortcut: {
        const bool shortcut = stream_->bernoulli(spec_.q);
        ResponseSymbol answer = target_of(ctx);
        if (shortcut && prev_answer_ && prev_answer_->is_letter()) {
          const int next = loop_successor_[prev_answer_->index()];
          if (next >= 0) answer = Letter::from_index(next);
        }
        prev_answer_ = answer;
        return delta(answer);
      }
      case Kind::faulty: {
        if (ctx.turn == spec_.fail_at) throw SubjectFailure("faulty subject: scripted failure");
        if (ctx.turn == spec_.garble_at) {
          TurnReply r;
          r.raw.fill(0.0);
          r.parseable = false;
          return r;
        }
        return delta(target_of(ctx));
      }
    }
    throw ParameterError("unknown builtin subject kind");
  }

 private:
  BuiltinSpec spec_;
  SessionInfo info_;
  std::optional<Stream> stream_;
  std::optional<ResponseSymbol> prev_answer_;
  std::array<int, kLetterCount> loop_successor_{};
};

}  // namespace

void BuiltinSpec::validate() const {
  switch (kind) {
    case Kind::recency_blur: {
      double total = floor;
      if (!(floor >= 0.0)) throw ParameterError("recency_blur: floor must be >= 0");
      for (double w : weights) {
        if (!(w >= 0.0)) throw ParameterError("recency_blur: weights must be >= 0");
        total += w;
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw ParameterError("recency_blur: weights plus floor must sum to 1");
      }
      break;
    }
    case Kind::markov_shortcut:
      if (!(q >= 0.0 && q <= 1.0)) throw ParameterError("markov_shortcut: q must be in [0,1]");
      break;
    default:
      break;
  }
}

std::string BuiltinSpec::str() const {
  std::ostringstream out;
  out << "builtin:" << kind_name(kind);
  std::vector<std::string> params;
  auto num = [](double v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  switch (kind) {
    case Kind::constant:
      params.push_back(std::string("letter=") + letter.to_char());
      break;
    case Kind::recency_blur:
      for (int k = -5; k <= 0; ++k) {
        if (weights[k + 5] != 0.0) params.push_back("w" + std::to_string(k) + "=" + num(weights[k + 5]));
      }
      if (floor != 0.0) params.push_back("floor=" + num(floor));
      break;
    case Kind::markov_shortcut:
      params.push_back("q=" + num(q));
      break;
    case Kind::faulty:
      if (fail_at >= 0) params.push_back("fail_at=" + std::to_string(fail_at));
      if (garble_at >= 0) params.push_back("garble_at=" + std::to_string(garble_at));
      break;
    default:
      break;
  }
  if (seed != 0) params.push_back("seed=" + std::to_string(seed));
  for (std::size_t i = 0; i < params.size(); ++i) out << (i == 0 ? '?' : ',') << params[i];
  return out.str();
}

BuiltinSpec BuiltinSpec::parse(const std::string& text) {
  std::string body = text;
  if (body.rfind("builtin:", 0) == 0) body = body.substr(8);
  const auto qpos = body.find('?');
  const std::string kind_text = body.substr(0, qpos);
  auto it = kind_names().find(kind_text);
  if (it == kind_names().end()) throw ParameterError("unknown builtin subject '" + kind_text + "'");
  BuiltinSpec spec;
  spec.kind = it->second;
  if (spec.kind == Kind::constant) spec.letter = Letter::from_char('A');
  bool floor_given = false;
  if (qpos != std::string::npos) {
    std::stringstream params(body.substr(qpos + 1));
    std::string item;
    while (std::getline(params, item, ',')) {
      if (item.empty()) continue;
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ParameterError("subject parameter '" + item + "' needs key=value");
      const std::string key = item.substr(0, eq);
      const std::string value = item.substr(eq + 1);
      if (key == "seed") {
        spec.seed = static_cast<std::uint64_t>(parse_number(key, value));
      } else if (key == "letter" && spec.kind == Kind::constant) {
        if (value.size() != 1) throw ParameterError("constant subject: letter must be one character");
        spec.letter = Letter::from_char(value[0]);
      } else if (key == "q" && spec.kind == Kind::markov_shortcut) {
        spec.q = parse_number(key, value);
      } else if (key == "floor" && spec.kind == Kind::recency_blur) {
        spec.floor = parse_number(key, value);
        floor_given = true;
      } else if (key.size() >= 2 && key[0] == 'w' && spec.kind == Kind::recency_blur) {
        const double k = parse_number(key, key.substr(1));
        if (k != std::floor(k) || k < -5 || k > 0) {
          throw ParameterError("recency_blur: offsets must be integers in -5..0");
        }
        spec.weights[static_cast<int>(k) + 5] = parse_number(key, value);
      } else if (key == "fail_at" && spec.kind == Kind::faulty) {
        spec.fail_at = static_cast<int>(parse_number(key, value));
      } else if (key == "garble_at" && spec.kind == Kind::faulty) {
        spec.garble_at = static_cast<int>(parse_number(key, value));
      } else {
        throw ParameterError("subject " + kind_text + ": unknown parameter '" + key + "'");
      }
    }
  }
  if (spec.kind == Kind::recency_blur && !floor_given) {
    double total = 0.0;
    for (double w : spec.weights) total += w;
    spec.floor = std::max(0.0, 1.0 - total);
    if (std::abs(spec.floor) < 1e-12) spec.floor = 0.0;
  }
  spec.validate();
  return spec;
}

std::unique_ptr<Subject> make_builtin_subject(const BuiltinSpec& spec) {
  return std::make_unique<BuiltinSubject>(spec);
}

}  // namespace nback
