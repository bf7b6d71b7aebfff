#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>

#include "nback/error.hpp"
#include "nback/intervention.hpp"
#include "nback/probes.hpp"
#include "nback/rng.hpp"
#include "nback/subjects.hpp"
#include "nback/tiny/model.hpp"
#include "nback/tiny/tiny_subject.hpp"
#include "nback/trial_engine.hpp"
#include "test_support.hpp"

using namespace nback;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;

namespace {

MatrixXd gaussian(int rows, int cols, Stream& s) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = s.normal();
  return m;
}

// Identity matrix with a decaying spectrum so leading directions are well separated.
MatrixXd structured_identity(int d, std::uint64_t seed) {
  Stream s(seed, "identity");
  MatrixXd m = gaussian(26, d, s);
  for (int j = 0; j < d; ++j) m.col(j) *= std::pow(0.85, j);
  m.rowwise() += RowVectorXd::Constant(d, 0.7);
  return m;
}

RowVectorXd random_row(int d, Stream& s) { return gaussian(1, d, s).row(0); }

struct TinyFixture {
  tiny::ModelConfig config;
  std::shared_ptr<const tiny::Params<float>> params;
  TinyFixture() {
    auto p = tiny::init_params<float>(config, 5);
    for (auto& v : p.data) v *= 8.0f;
    params = std::make_shared<const tiny::Params<float>>(std::move(p));
  }
  SubjectFactory factory() const {
    return [c = config, p = params] { return tiny::make_tiny_subject(c, p); };
  }
  LetterSubspace subspace(int k) const {
    auto s = tiny::make_tiny_subject(config, params);
    const auto ids = s->identity_states();
    return fit_letter_subspace(ids.begin()->second.at(tiny::kInterventionLayer), k, tiny::kInterventionLayer);
  }
};

}  // namespace

TEST_CASE("subspace basis matches an independent Gram-matrix eigen decomposition") {
  for (int d : {8, 48, 64}) {
    const MatrixXd id = structured_identity(d, static_cast<std::uint64_t>(d));
    const int k = 5;
    const auto sub = fit_letter_subspace(id, k, "x");
    const MatrixXd c = id.rowwise() - id.colwise().mean();
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(c.transpose() * c);
    // Eigenvalues ascend; the top k eigenvectors span the same space as the SVD basis.
    const MatrixXd top = eig.eigenvectors().rightCols(k).transpose();
    const MatrixXd p_svd = sub.basis.transpose() * sub.basis;
    const MatrixXd p_eig = top.transpose() * top;
    CHECK((p_svd - p_eig).cwiseAbs().maxCoeff() < 1e-8);
    for (int i = 0; i < k; ++i) {
      CHECK(sub.singular_values[i] * sub.singular_values[i] ==
            doctest::Approx(eig.eigenvalues()[d - 1 - i]).epsilon(1e-9));
      CHECK(std::abs(std::abs(sub.basis.row(i).dot(top.row(k - 1 - i))) - 1.0) < 1e-8);
    }
    CHECK((sub.basis * sub.basis.transpose() - MatrixXd::Identity(k, k)).cwiseAbs().maxCoeff() < 1e-12);
    const RowVectorXd mean_proj = ((id * sub.basis.transpose()) * sub.basis).colwise().mean();
    CHECK((sub.mu_proj - mean_proj).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("fit_letter_subspace validates its inputs") {
  Stream s(1, "v");
  CHECK_THROWS_AS(fit_letter_subspace(gaussian(25, 8, s), 2), ParameterError);
  CHECK_THROWS_AS(fit_letter_subspace(gaussian(26, 8, s), 0), ParameterError);
  CHECK_THROWS_AS(fit_letter_subspace(gaussian(26, 48, s), 26), ParameterError);
  // Rank 3 after centering: only three directions are extractable.
  const MatrixXd low = gaussian(26, 3, s) * gaussian(3, 16, s);
  CHECK_NOTHROW(fit_letter_subspace(low, 3));
  CHECK_THROWS_AS(fit_letter_subspace(low, 4), ParameterError);
  MatrixXd bad = gaussian(26, 8, s);
  bad(3, 3) = std::nan("");
  CHECK_THROWS_AS(fit_letter_subspace(bad, 2), NumericalError);
}

TEST_CASE("removal: alpha 0 is the identity, alpha 1 is idempotent, and the edit is affine in alpha") {
  const auto sub = fit_letter_subspace(structured_identity(48, 2), 6);
  Stream s(3, "removal");
  for (int rep = 0; rep < 100; ++rep) {
    const RowVectorXd h = 5.0 * random_row(48, s);
    CHECK(apply_removal(h, sub, 0.0) == h);
    const RowVectorXd once = apply_removal(h, sub, 1.0);
    const RowVectorXd twice = apply_removal(once, sub, 1.0);
    CHECK((twice - once).cwiseAbs().maxCoeff() <= 1e-6);
    // After full removal the in-subspace component equals the letter-mean projection.
    CHECK(((once * sub.basis.transpose()) * sub.basis - sub.mu_proj).cwiseAbs().maxCoeff() < 1e-10);
    const double a = s.uniform01() * 2.0;
    const RowVectorXd expected = h + a * (once - h);
    CHECK((apply_removal(h, sub, a) - expected).cwiseAbs().maxCoeff() < 1e-10);
    // Orthogonal complement is untouched.
    const MatrixXd comp = MatrixXd::Identity(48, 48) - sub.basis.transpose() * sub.basis;
    CHECK(((apply_removal(h, sub, a) - h) * comp).cwiseAbs().maxCoeff() < 1e-10);
  }
  CHECK_THROWS_AS(apply_removal(RowVectorXd::Zero(5), sub, 1.0), ParameterError);
}

TEST_CASE("removing the full letter subspace drives letter decoding to chance") {
  const int n = 2;
  const auto trs = testing::run_set("oracle", Condition::uniform26(), n, 60, 9);
  const MatrixXd id = structured_identity(48, 4);
  const auto sub = fit_letter_subspace(id, 25);
  Stream s(10, "states");
  probes::HiddenRecord raw, edited;
  raw.subject = edited.subject = "synthetic";
  raw.d = edited.d = 48;
  raw.layers = edited.layers = {"x"};
  raw.states.resize(1);
  edited.states.resize(1);
  for (const auto& tr : trs) {
    std::vector<int> ts;
    MatrixXd a(kDefaultTurns - n, 48), b(kDefaultTurns - n, 48);
    for (int t = n; t < kDefaultTurns; ++t) {
      ts.push_back(t);
      const RowVectorXd h = id.row(tr.turns[static_cast<std::size_t>(t)].stimulus.index()) + 0.2 * random_row(48, s);
      a.row(t - n) = h;
      b.row(t - n) = apply_removal(h, sub, 1.0);
    }
    for (auto* r : {&raw, &edited}) {
      r->trial_ids.push_back(tr.trial_id);
      r->turns.push_back(ts);
    }
    raw.states[0].push_back(a);
    edited.states[0].push_back(b);
  }
  const double before = probes::decode_leave_one_trial_out(raw, trs, "x").accuracy;
  const double after = probes::decode_leave_one_trial_out(edited, trs, "x").accuracy;
  CHECK(before > 0.9);
  CHECK(after <= 2.0 / 26.0);
}

TEST_CASE("select keeps chosen rows and recomputes the mean projection") {
  const auto sub = fit_letter_subspace(structured_identity(32, 6), 5, "block1");
  const auto one = sub.select({3});
  CHECK(one.k() == 1);
  CHECK(one.basis.row(0) == sub.basis.row(3));
  CHECK((one.mu_proj - sub.letter_mean.dot(sub.basis.row(3)) * sub.basis.row(3)).cwiseAbs().maxCoeff() < 1e-12);
  const auto all = sub.select({0, 1, 2, 3, 4});
  CHECK((all.mu_proj - sub.mu_proj).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(all.source_layer == "block1");
  CHECK_THROWS_AS(sub.select({}), ParameterError);
  CHECK_THROWS_AS(sub.select({5}), ParameterError);
}

TEST_CASE("subspace files round trip to float precision") {
  const auto sub = fit_letter_subspace(structured_identity(48, 7), 8, "block1");
  testing::TempDir dir("subspace");
  save_subspace(dir / "s.bin", sub);
  const auto back = load_subspace(dir / "s.bin");
  CHECK(back.k() == 8);
  CHECK(back.d() == 48);
  CHECK(back.source_layer == "block1");
  CHECK(back.singular_values == sub.singular_values);
  CHECK((back.basis - sub.basis).cwiseAbs().maxCoeff() < 1e-6);
  CHECK((back.basis * back.basis.transpose() - MatrixXd::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((back.mu_proj - sub.mu_proj).cwiseAbs().maxCoeff() < 1e-5);
  std::ofstream(dir / "junk.bin") << "not a blob";
  CHECK_THROWS(load_subspace(dir / "junk.bin"));
}

TEST_CASE("sweep cells enumerate singles then prefixes for each alpha") {
  SweepConfig c;
  c.alphas = {0.5, 1.0};
  c.max_directions = 3;
  const auto cells = c.cells();
  REQUIRE(cells.size() == 12);
  CHECK(cells[0].label() == "dir0");
  CHECK(cells[3].label() == "top1");
  CHECK(cells[5].directions() == std::vector<int>{0, 1, 2});
  CHECK(cells[6].alpha == 1.0);
  c.singles = false;
  CHECK(c.cells().size() == 6);
}

TEST_CASE("summarize_best takes the per-load maximum over cells") {
  SweepResult r;
  r.baseline = {{1, 0.5}, {2, 0.3}};
  r.rows = {{{"single", 0, 1.0}, 1, 0.5, 0.4},
            {{"prefix", 2, 0.5}, 1, 0.5, 0.7},
            {{"single", 1, 0.3}, 2, 0.3, 0.35},
            {{"prefix", 1, 1.0}, 2, 0.3, 0.2}};
  const auto s = summarize_best(r, {1, 2});
  CHECK(s.baseline_mean == doctest::Approx(0.4));
  CHECK(s.best_mean == doctest::Approx((0.7 + 0.35) / 2));
  CHECK(s.gain == doctest::Approx(s.best_mean - s.baseline_mean));
  CHECK(s.best_by_load.at(1).cell.label() == "top2");
  CHECK(s.best_by_load.at(2).cell.label() == "dir1");
  CHECK(s.optimistic);
  CHECK_THROWS_AS(summarize_best(r, {3}), ParameterError);
  CHECK_THROWS_AS(summarize_best(r, {}), ParameterError);
}

TEST_CASE("sweep on the tinyformer: shared trials, baseline equals an unintervened run, worker independence") {
  TinyFixture f;
  const auto sub = f.subspace(4);
  SweepConfig c;
  c.loads = {1, 2};
  c.alphas = {0.0, 1.0};
  c.max_directions = 2;
  c.trials_per_cell = 4;
  c.seed = 11;
  const auto r1 = sweep(f.factory(), sub, c);
  c.workers = 3;
  const auto r3 = sweep(f.factory(), sub, c);
  REQUIRE(r1.rows.size() == 2 * 8);
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].intervened_acc == r3.rows[i].intervened_acc);
    // alpha 0 leaves the network bit-identical to the baseline.
    if (r1.rows[i].cell.alpha == 0.0) CHECK(r1.rows[i].intervened_acc == r1.rows[i].baseline_acc);
  }
  for (int n : c.loads) {
    CHECK(r1.trial_seeds.at(n).size() == 4);
    auto s = f.factory()();
    std::vector<Transcript> trs;
    for (const auto& t : sweep_trials(c, n)) trs.push_back(run_trial(*s, t, c.mode).transcript);
    CHECK(summarize_accuracy(trs).mean == r1.baseline.at(n));
  }
  const auto sum = summarize_best(r1, c.loads);
  double best = 0;
  for (int n : c.loads) {
    double m = -1;
    for (const auto& row : r1.rows)
      if (row.n == n) m = std::max(m, row.intervened_acc);
    best += m / 2.0;
  }
  CHECK(sum.best_mean == best);
}

TEST_CASE("sweep rejects subjects without intervention support and oversize direction counts") {
  TinyFixture f;
  SweepConfig c;
  c.loads = {1};
  c.trials_per_cell = 1;
  c.max_directions = 5;
  CHECK_THROWS_AS(sweep(f.factory(), f.subspace(4), c), ParameterError);
  c.max_directions = 1;
  SubjectFactory oracle = [] { return make_builtin_subject(BuiltinSpec::parse("oracle")); };
  CHECK_THROWS_AS(sweep(oracle, f.subspace(4), c), CapabilityError);
}
