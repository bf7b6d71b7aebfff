#include <doctest.h>

#include <cmath>
#include <sstream>

#include "nback/error.hpp"
#include "nback/metrics.hpp"
#include "nback/rng.hpp"
#include "nback/subjects.hpp"
#include "nback/trial_engine.hpp"
#include "test_support.hpp"

using namespace nback;
using nback::testing::letters;

TEST_CASE("system prompt: rule line, strict format section, determinism") {
  const auto p = render_system_prompt(2, 7);
  CHECK(p.find("Response rule (N = 2):") != std::string::npos);
  CHECK(p.find("Response format (STRICT):") != std::string::npos);
  CHECK(p == render_system_prompt(2, 7));
  CHECK(p != render_system_prompt(2, 8));
  CHECK(render_system_prompt(5, 7).find("Response rule (N = 5):") != std::string::npos);
  CHECK_THROWS_AS(render_system_prompt(0, 1), ParameterError);
  CHECK_THROWS_AS(render_system_prompt(10, 1), ParameterError);
}

TEST_CASE("system prompt: the inline 1-back example follows the 1-back rule") {
  // Reproduce the example stream and compare its rendering with the prompt.
  for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
    const auto p = render_system_prompt(3, seed);
    Stream s(seed, "prompt-examples");
    std::string one;
    for (int i = 0; i < 10; ++i) one += static_cast<char>('A' + s.uniform_below(26));
    const std::string answers = "-" + one.substr(0, 9);
    CHECK(p.find("Stimuli: " + one + "    Response: " + answers) != std::string::npos);
  }
}

TEST_CASE("normalize_distribution: sums to one, uniform fallback, clipping") {
  SymbolProbs raw{};
  raw[3] = 2.0;
  raw[5] = 6.0;
  raw[7] = -1.0;
  raw[9] = std::nan("");
  auto d = normalize_distribution(raw);
  double s = 0;
  for (double p : d.probs) s += p;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(d.probs[5] == doctest::Approx(0.75));
  CHECK(d.probs[7] == 0.0);
  CHECK(d.top1.index() == 5);
  CHECK_FALSE(d.flagged);

  SymbolProbs zero{};
  d = normalize_distribution(zero);
  CHECK(d.flagged);
  CHECK(d.top1 == ResponseSymbol::sentinel());
  for (double p : d.probs) CHECK(p == doctest::Approx(1.0 / 27));

  d = normalize_distribution(raw, false);
  CHECK(d.flagged);
  CHECK(d.top1 == ResponseSymbol::sentinel());
}

TEST_CASE("normalize_distribution: random raw vectors always sum to 1 within 1e-6 (property)") {
  Stream s(1, "renorm");
  for (int trial = 0; trial < 2000; ++trial) {
    SymbolProbs raw{};
    for (auto& p : raw) {
      const double u = s.uniform01();
      p = u < 0.3 ? 0.0 : (u < 0.35 ? -u : std::pow(10.0, 6 * s.uniform01() - 3));
    }
    const auto d = normalize_distribution(raw);
    double sum = 0;
    for (double p : d.probs) sum += p;
    REQUIRE(std::abs(sum - 1.0) < 1e-6);
  }
}

TEST_CASE("top_symbol breaks ties alphabetically with dash last") {
  SymbolProbs p{};
  p[kDashIndex] = 0.5;
  p[4] = 0.5;
  CHECK(top_symbol(p).index() == 4);
  p[2] = 0.5;
  CHECK(top_symbol(p).index() == 2);
}

TEST_CASE("build_context: histories per mode") {
  StimulusSequence seq;
  seq.letters = letters("ABCDEFG");
  const auto gt = ground_truth(seq, 2);
  CHECK(build_context(seq, gt, {}, 0, EvalMode::teacher_forced).history.empty());
  CHECK(build_context(seq, gt, {}, 0, EvalMode::autoregressive).history.empty());
  const auto tf = build_context(seq, gt, {}, 3, EvalMode::teacher_forced);
  REQUIRE(tf.history.size() == 3);
  CHECK(tf.history[0].second.is_dash());
  CHECK(tf.history[1].second.is_dash());
  CHECK(tf.history[2].second == ResponseSymbol(Letter::from_char('A')));
  CHECK(tf.current_stimulus == Letter::from_char('D'));
  const std::vector<ResponseSymbol> emitted = {Letter::from_char('X'), Letter::from_char('Q')};
  const auto ar = build_context(seq, gt, emitted, 2, EvalMode::autoregressive);
  CHECK(ar.history[0].second == ResponseSymbol(Letter::from_char('X')));
  CHECK(ar.history[1].second == ResponseSymbol(Letter::from_char('Q')));
  CHECK_THROWS_AS(build_context(seq, gt, emitted, 3, EvalMode::autoregressive), SequencingError);
}

TEST_CASE("score_accuracy: brute-force recount and edge cases") {
  auto s = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.4,w-1=0.6"));
  for (const auto& trial : make_trial_set(Condition::reduced(4), 2, 20, 3)) {
    const auto tr = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
    const auto stim = tr.stimuli();
    int correct = 0;
    for (int t = 2; t < 50; ++t) {
      const auto& p = tr.turns[t].dist.probs;
      int best = 0;
      for (int i = 1; i < kSymbolCount; ++i) {
        if (p[i] > p[best]) best = i;
      }
      correct += best == stim[t - 2].index() ? 1 : 0;
    }
    REQUIRE(score_accuracy(tr) == doctest::Approx(correct / 48.0).epsilon(1e-15));
  }
  auto oracle = make_builtin_subject(BuiltinSpec::parse("oracle"));
  const auto t49 = make_trial_set(Condition::uniform26(), 49, 1, 1).front();
  const auto tr49 = run_trial(*oracle, t49, EvalMode::teacher_forced).transcript;
  CHECK(score_accuracy(tr49) == 1.0);
  Transcript empty;
  empty.n = 2;
  CHECK_THROWS_AS(score_accuracy(empty), UndefinedValueError);
}

TEST_CASE("subject failures mark the trial failed; garbled replies are flagged") {
  auto faulty = make_builtin_subject(BuiltinSpec::parse("faulty?fail_at=10"));
  const auto trial = make_trial_set(Condition::uniform26(), 2, 1, 1).front();
  const auto r = run_trial(*faulty, trial, EvalMode::autoregressive);
  CHECK(r.transcript.failed);
  CHECK(r.transcript.failure_reason.find("scripted") != std::string::npos);
  auto oracle = make_builtin_subject(BuiltinSpec::parse("oracle"));
  const auto ok = run_trial(*oracle, trial, EvalMode::autoregressive).transcript;
  const auto summary = summarize_accuracy({r.transcript, ok});
  CHECK(summary.failed == 1);
  CHECK(summary.mean == 1.0);
  CHECK_THROWS_AS(summarize_accuracy({r.transcript}), UndefinedValueError);

  auto garbled = make_builtin_subject(BuiltinSpec::parse("faulty?garble_at=7"));
  const auto g = run_trial(*garbled, trial, EvalMode::autoregressive).transcript;
  CHECK_FALSE(g.failed);
  CHECK(g.turns[7].dist.flagged);
  CHECK_FALSE(g.turns[7].correct);
  CHECK(score_accuracy(g) == doctest::Approx(47.0 / 48.0));
}

TEST_CASE("transcript JSONL round trip and truncation detection") {
  auto s = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.5,w-1=0.5"));
  std::vector<Transcript> ts;
  for (const auto& t : make_trial_set(Condition::markov(10, 0.8), 2, 3, 5)) {
    ts.push_back(run_trial(*s, t, EvalMode::autoregressive).transcript);
  }
  std::stringstream buf;
  for (const auto& t : ts) write_transcript_jsonl(buf, t);
  const std::string text = buf.str();
  std::istringstream in(text);
  const auto back = read_transcripts_jsonl(in);
  REQUIRE(back.size() == ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    CHECK(back[i].trial_id == ts[i].trial_id);
    CHECK(back[i].condition == ts[i].condition);
    CHECK(back[i].mode == ts[i].mode);
    REQUIRE(back[i].turns.size() == ts[i].turns.size());
    for (std::size_t t = 0; t < ts[i].turns.size(); ++t) {
      REQUIRE(back[i].turns[t].dist.probs == ts[i].turns[t].dist.probs);
      REQUIRE(back[i].turns[t].dist.top1 == ts[i].turns[t].dist.top1);
      REQUIRE(back[i].turns[t].correct == ts[i].turns[t].correct);
    }
  }
  std::istringstream cut(text.substr(0, text.size() / 2 - 1));
  CHECK_THROWS(read_transcripts_jsonl(cut));
}
