#include <doctest.h>

#include <cmath>

#include "nback/error.hpp"
#include "nback/intervention.hpp"
#include "nback/metrics.hpp"
#include "nback/stimgen.hpp"
#include "nback/tiny/model.hpp"
#include "nback/tiny/tiny_subject.hpp"
#include "nback/trial_engine.hpp"

using namespace nback;
using namespace nback::tiny;

namespace {

struct Fixture {
  ModelConfig config;
  std::shared_ptr<const Params<float>> params;
  Fixture() {
    auto p = init_params<float>(config, 21);
    // Larger weights than init so the untrained network is not nearly constant.
    for (auto& v : p.data) v *= 8.0f;
    params = std::make_shared<const Params<float>>(std::move(p));
  }
};

}  // namespace

TEST_CASE("tiny subject: capabilities and name") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params, {.label = "m"});
  const auto c = s->capabilities();
  CHECK(c.dist);
  CHECK(c.hidden);
  CHECK(c.readout);
  CHECK(c.intervene);
  CHECK(c.layer_ids == std::vector<std::string>{"emb", "block1", "block2"});
  CHECK(c.d_model == 48);
  CHECK(s->name() == "tiny:m");
  auto leaky = make_tiny_subject(f.config, f.params, {.label = "m", .leak_scale = 8.0});
  CHECK(leaky->name() == "tiny:m?leak=8");
}

TEST_CASE("tiny subject: trial-engine probabilities match the full forward pass; TF and AR coincide") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params);
  for (int n : {1, 2, 6}) {
    for (const auto& trial : make_trial_set(Condition::uniform26(), n, 3, 40 + n)) {
      const auto tf = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
      const auto ar = run_trial(*s, trial, EvalMode::autoregressive).transcript;
      REQUIRE_FALSE(tf.failed);
      const auto logits = forward<float>(f.config, *f.params, encode_trial(f.config, trial.sequence, n));
      for (int t = 0; t < kDefaultTurns; ++t) {
        const auto& turn = tf.turns[static_cast<std::size_t>(t)];
        const Eigen::RowVectorXd row = logits.row(t + 1).cast<double>();
        const Eigen::RowVectorXd e = (row.array() - row.maxCoeff()).exp();
        const Eigen::RowVectorXd ref = e / e.sum();
        double sum = 0;
        for (int j = 0; j < kSymbolCount; ++j) {
          CHECK(std::abs(turn.dist.probs[static_cast<std::size_t>(j)] - ref[j]) < 1e-4);
          sum += turn.dist.probs[static_cast<std::size_t>(j)];
        }
        CHECK(std::abs(sum - 1.0) <= 1e-6);
        CHECK(turn.dist.probs == ar.turns[static_cast<std::size_t>(t)].dist.probs);
      }
    }
  }
}

TEST_CASE("tiny subject: unsupported load and out-of-order turns are errors") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params);
  const auto trial = make_trial_set(Condition::uniform26(), 5, 1, 1).front();
  CHECK_THROWS_AS(run_trial(*s, trial, EvalMode::teacher_forced), ParameterError);
  s->open_session({"x", 2, EvalMode::teacher_forced, 1, {}});
  ConversationContext ctx;
  ctx.n = 2;
  ctx.turn = 3;
  ctx.current_stimulus = Letter::from_index(0);
  CHECK_THROWS_AS(s->respond(ctx, {}), SequencingError);
}

TEST_CASE("tiny subject: hidden states equal the forward captures at each stimulus position") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params);
  const auto trial = make_trial_set(Condition::uniform26(), 2, 1, 9).front();
  RunOptions opt;
  opt.want_hidden = {"emb", "block2"};
  const auto res = run_trial(*s, trial, EvalMode::teacher_forced, opt);
  std::vector<Mat<float>> caps;
  forward<float>(f.config, *f.params, encode_trial(f.config, trial.sequence, 2), &caps);
  REQUIRE(res.states.size() == 48);
  for (const auto& st : res.states) {
    CHECK(st.t >= 2);
    for (const auto& [layer, idx] : std::vector<std::pair<std::string, int>>{{"emb", 0}, {"block2", 2}}) {
      const auto& v = st.layers.at(layer);
      REQUIRE(v.size() == 48);
      const float scale = caps[idx].row(st.t + 1).cwiseAbs().maxCoeff();
      for (int j = 0; j < 48; ++j) CHECK(std::abs(v[j] - caps[idx](st.t + 1, j)) <= 1e-4f * scale);
    }
  }
  opt.want_hidden = {"block7"};
  CHECK_THROWS_AS(run_trial(*s, trial, EvalMode::teacher_forced, opt), CapabilityError);
}

TEST_CASE("tiny subject: identity states and readout directions") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params);
  const auto ids = s->identity_states();
  REQUIRE(ids.count("minimal"));
  const auto& fam = ids.at("minimal");
  const auto emb = f.params->tensor("tok_emb");
  for (int c = 0; c < 26; ++c) {
    CHECK((fam.at("emb").row(c) - emb.row(c).cast<double>()).cwiseAbs().maxCoeff() == 0.0);
    TokenSequence ts;
    ts.tokens = {f.config.task_token(1), c};
    ts.targets = {kIgnore, kIgnore};
    std::vector<Mat<float>> caps;
    forward<float>(f.config, *f.params, ts, &caps);
    CHECK((fam.at("block2").row(c) - caps[2].row(1).cast<double>()).cwiseAbs().maxCoeff() < 1e-4);
  }
  const auto r = s->readout_directions();
  CHECK(r.rows() == 26);
  CHECK(r == f.params->tensor("out.w").topRows(26).cast<double>());
}

TEST_CASE("tiny subject: alpha = 0 intervention is bit-identical; dimension mismatch rejected") {
  Fixture f;
  auto s = make_tiny_subject(f.config, f.params);
  const auto trial = make_trial_set(Condition::uniform26(), 3, 1, 2).front();
  const auto base = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
  const auto sub = std::make_shared<const LetterSubspace>(
      fit_letter_subspace(s->identity_states().at("minimal").at("block1"), 5, "block1"));
  s->set_intervention(Intervention{sub, 0.0});
  const auto zero = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
  for (std::size_t t = 0; t < base.turns.size(); ++t) CHECK(base.turns[t].dist.probs == zero.turns[t].dist.probs);
  s->set_intervention(Intervention{sub, 1.0});
  const auto full = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
  bool changed = false;
  for (std::size_t t = 0; t < base.turns.size(); ++t) changed = changed || base.turns[t].dist.probs != full.turns[t].dist.probs;
  CHECK(changed);
  s->set_intervention(std::nullopt);
  const auto cleared = run_trial(*s, trial, EvalMode::teacher_forced).transcript;
  for (std::size_t t = 0; t < base.turns.size(); ++t) CHECK(base.turns[t].dist.probs == cleared.turns[t].dist.probs);

  Eigen::MatrixXd narrow = Eigen::MatrixXd::Random(26, 8);
  auto bad = std::make_shared<const LetterSubspace>(fit_letter_subspace(narrow, 2));
  CHECK_THROWS_AS(s->set_intervention(Intervention{bad, 1.0}), ParameterError);
}

TEST_CASE("tiny subject: the leak perturbs outputs but not the embedding identity states") {
  Fixture f;
  auto plain = make_tiny_subject(f.config, f.params);
  auto leaky = make_tiny_subject(f.config, f.params, {.leak_scale = 8.0});
  const auto trial = make_trial_set(Condition::uniform26(), 2, 1, 3).front();
  const auto a = run_trial(*plain, trial, EvalMode::teacher_forced).transcript;
  const auto b = run_trial(*leaky, trial, EvalMode::teacher_forced).transcript;
  bool changed = false;
  for (std::size_t t = 0; t < a.turns.size(); ++t) changed = changed || a.turns[t].dist.probs != b.turns[t].dist.probs;
  CHECK(changed);
  const auto ia = plain->identity_states().at("minimal").at("emb");
  const auto ib = leaky->identity_states().at("minimal").at("emb");
  CHECK(ia == ib);
}
