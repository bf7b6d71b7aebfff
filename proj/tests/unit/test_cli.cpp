#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "app.hpp"
#include "cohort.hpp"
#include "nback/human_ref.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using nback::testing::TempDir;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result nback_cli(std::vector<std::string> args, const std::string& input = {}) {
  std::istringstream in(input);
  std::ostringstream out, err;
  const int code = nback::app::main_entry(args, in, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json manifest(const fs::path& dir) { return json::parse(slurp(dir / "manifest.json")); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

// Every artifact named in the manifest of `a` exists in `b` with identical bytes.
void check_same_artifacts(const fs::path& a, const fs::path& b) {
  const auto ma = manifest(a);
  CHECK(ma == manifest(b));
  for (auto it = ma.at("artifacts").begin(); it != ma.at("artifacts").end(); ++it) {
    INFO(it.key());
    CHECK(slurp(a / it.key()) == slurp(b / it.key()));
  }
}

}  // namespace

TEST_CASE("gen emits the requested trials reproducibly") {
  TempDir dir("gen");
  const auto p = dir.path().string();
  REQUIRE(nback_cli({"gen", "--n", "2", "--condition", "uniform26", "--trials", "200", "--seed", "7", "--out", p + "/a.jsonl"}).code == 0);
  REQUIRE(nback_cli({"gen", "--n", "2", "--condition", "uniform26", "--trials", "200", "--seed", "7", "--out", p + "/b.jsonl"}).code == 0);
  REQUIRE(nback_cli({"gen", "--n", "2", "--condition", "uniform26", "--trials", "200", "--seed", "8", "--out", p + "/c.jsonl"}).code == 0);
  const auto a = slurp(dir / "a.jsonl");
  CHECK(a == slurp(dir / "b.jsonl"));
  CHECK(a != slurp(dir / "c.jsonl"));
  const auto rows = lines(a);
  REQUIRE(rows.size() == 200);
  const auto first = json::parse(rows.front());
  CHECK(first.dump().find("uniform26") != std::string::npos);
  const auto to_stdout = nback_cli({"gen", "--n", "2", "--trials", "200", "--seed", "7"});
  CHECK(to_stdout.code == 0);
  CHECK(to_stdout.out == a);
}

TEST_CASE("usage errors exit with status 2") {
  CHECK(nback_cli({}).code == 2);
  CHECK(nback_cli({"fly"}).code == 2);
  CHECK(nback_cli({"gen", "--n", "0"}).code == 2);
  CHECK(nback_cli({"gen", "--condition", "hexagon"}).code == 2);
  CHECK(nback_cli({"gen", "--trials"}).code == 2);
  CHECK(nback_cli({"run", "--out", "/tmp/never"}).code == 2);
  CHECK(nback_cli({"run", "--subject", "builtin:nope", "--out", "/tmp/never"}).code == 2);
  CHECK(nback_cli({"run", "--subject", "builtin:oracle", "--modes", "sideways", "--out", "/tmp/never"}).code == 2);
  CHECK(nback_cli({"human", "--studies", "/nonexistent.json", "--out", "/tmp/never"}).code == 2);
  CHECK(nback_cli({"report", "--inputs", "/nonexistent", "--out", "/tmp/never"}).code == 2);
  CHECK(nback_cli({"gen", "--config"}).code == 2);
  CHECK(nback_cli({"gen", "--help"}).code == 0);
}

TEST_CASE("run on the oracle writes kappa = 1 capacity rows and a manifest") {
  TempDir dir("run-oracle");
  const auto out = (dir / "r").string();
  const auto r = nback_cli({"run", "--subject", "builtin:oracle", "--loads", "1", "2", "3", "--trials", "20", "--modes",
                            "tf", "ar", "--out", out});
  REQUIRE(r.code == 0);
  const auto cap = lines(slurp(dir / "r/capacity.csv"));
  CHECK(cap.front() == "subject,mode,n,accuracy,kappa");
  CHECK(cap.size() == 1 + 6);
  for (std::size_t i = 1; i < cap.size(); ++i) CHECK(cap[i].substr(cap[i].size() - 4) == ",1,1");
  const auto m = manifest(dir / "r");
  CHECK(m.at("command") == "run");
  CHECK(m.at("config").at("trials") == 20);
  CHECK(m.at("artifacts").contains("transcripts.jsonl"));
  const auto records = lines(slurp(dir / "r/transcripts.jsonl"));
  CHECK(std::count_if(records.begin(), records.end(), [](const std::string& l) {
          return json::parse(l).at("type") == "trial";
        }) == 120);
  CHECK(records.size() == 120 * 51);
}

TEST_CASE("run artifacts regenerate bit-identically from the manifest with any worker count") {
  TempDir dir("replay");
  const auto a = (dir / "a").string();
  const auto b = (dir / "b").string();
  REQUIRE(nback_cli({"run", "--subject", "builtin:recency_blur?w-2=0.5,w-1=0.3,w0=0.2", "--loads", "1", "2", "--trials",
                     "30", "--conditions", "uniform26", "reduced:10", "uniform26+lure:minus:0.5", "--modes", "tf", "ar",
                     "--seed", "3", "--workers", "1", "--out", a})
              .code == 0);
  REQUIRE(nback_cli({"run", "--config", a + "/manifest.json", "--workers", "3", "--out", b}).code == 0);
  check_same_artifacts(a, b);
  // A manifest of another command is refused.
  CHECK(nback_cli({"gen", "--config", a + "/manifest.json"}).code == 2);
}

TEST_CASE("the CLI pipeline on recency_blur reproduces the closed-form kernel") {
  TempDir dir("kernel");
  const auto out = (dir / "k").string();
  REQUIRE(nback_cli({"run", "--subject", "builtin:recency_blur?w-2=0.6,w-1=0.25,w0=0.1", "--loads", "2", "--trials",
                     "200", "--seed", "9", "--out", out})
              .code == 0);
  // Expected rho_k = w_k + floor/26 + (1/26) * sum of the other non-target weights.
  const double floor = 0.05;
  const std::map<int, double> w = {{-2, 0.6}, {-1, 0.25}, {0, 0.1}};
  std::map<int, double> rho;
  std::map<int, double> count;
  std::istringstream csv(slurp(dir / "k/kernel.csv"));
  std::string line;
  std::getline(csv, line);
  while (std::getline(csv, line)) {
    const auto cells = nback::app::split_csv_line(line);
    rho[std::stoi(cells[3])] = std::stod(cells[4]);
    count[std::stoi(cells[3])] = std::stod(cells[5]);
  }
  for (const auto& [k, rk] : rho) {
    double expect = floor / 26.0 + (w.count(k) ? w.at(k) : 0.0);
    for (const auto& [j, wj] : w) {
      if (j != k && j != -2) expect += wj / 26.0;
    }
    const double se = std::sqrt(expect * (1 - expect) / count[k]);
    INFO("k = " << k);
    CHECK(std::abs(rk - expect) < 3.5 * se + 1e-3);
  }
}

TEST_CASE("a failing wire subject exits 3 after writing every artifact") {
  TempDir dir("failing");
  const auto out = (dir / "f").string();
  const auto r = nback_cli({"run", "--subject", std::string("wire:stdio:") + NBACK_TESTSERVER + " --die-after 60",
                            "--loads", "1", "--trials", "3", "--out", out});
  CHECK(r.code == 3);
  const auto failures = lines(slurp(dir / "f/failures.csv"));
  CHECK(failures.size() == 2);
  CHECK(fs::exists(dir / "f/capacity.csv"));
  CHECK(fs::exists(dir / "f/manifest.json"));
  const auto ok = nback_cli({"run", "--subject", std::string("wire:stdio:") + NBACK_TESTSERVER, "--loads", "1",
                             "--trials", "3", "--out", (dir / "ok").string()});
  CHECK(ok.code == 0);
}

TEST_CASE("serve answers the wire protocol on standard streams") {
  const std::string input =
      R"({"id":"1","type":"hello","version":"nback-wire/1"})"
      "\n"
      R"({"id":"7","type":"score_turn","n":2,"mode":"tf","history":[["G","-"],["K","-"]],"stimulus":"R"})"
      "\n"
      R"({"id":"8","type":"bye"})"
      "\n";
  const auto r = nback_cli({"serve", "--subject", "builtin:oracle"}, input);
  CHECK(r.code == 0);
  const auto replies = lines(r.out);
  REQUIRE(replies.size() == 3);
  const auto dist = json::parse(replies[1]);
  CHECK(dist.at("id") == "7");
  CHECK(dist.at("type") == "dist");
  CHECK(dist.at("top") == "G");
}

TEST_CASE("human aggregation from a study file") {
  TempDir dir("human");
  const auto cohort = nback::testing::simulate_cohort(2000, 5);
  {
    std::ofstream f(dir / "studies.json");
    f << nback::human::studies_to_json({cohort.study}).dump();
  }
  const auto base = std::vector<std::string>{"human", "--studies", (dir / "studies.json").string(), "--resamples", "100"};
  auto missing_chance = base;
  missing_chance.insert(missing_chance.end(), {"--out", (dir / "h0").string()});
  CHECK(nback_cli(missing_chance).code == 2);
  auto ok = base;
  ok.insert(ok.end(), {"--human-chance", "0.5", "--out", (dir / "h").string(), "--workers", "2"});
  REQUIRE(nback_cli(ok).code == 0);
  const auto ref = lines(slurp(dir / "h/human_reference.csv"));
  CHECK(ref.front() == "n,mean,ci_low,ci_high,studies_contributing");
  CHECK(ref.size() == 5);
  ok.back() = "1";
  ok[ok.size() - 3] = (dir / "h1").string();
  REQUIRE(nback_cli(ok).code == 0);
  check_same_artifacts(dir / "h", dir / "h1");
}

TEST_CASE("tinyformer pipeline: train, run with hidden states, probe, intervene, report") {
  TempDir dir("pipeline");
  const auto p = [&](const std::string& rel) { return (dir / rel).string(); };
  REQUIRE(nback_cli({"train-tiny", "--seed", "2", "--epochs", "2", "--warmup-epochs", "1", "--trials-per-epoch",
                     "256", "--batch", "32", "--eval-trials", "8", "--loads", "1", "2", "--out", p("model")})
              .code == 0);
  CHECK(fs::exists(dir / "model/model.ckpt"));
  CHECK(lines(slurp(dir / "model/train_curve.csv")).size() == 3);
  const std::string subject = "tiny:" + p("model/model.ckpt");
  REQUIRE(nback_cli({"run", "--subject", subject, "--loads", "2", "--trials", "12", "--hidden", "emb", "block1",
                     "block2", "--out", p("run")})
              .code == 0);
  REQUIRE(nback_cli({"probe", "--hidden", p("run/hidden/tf_uniform26_n2.bin"), "--transcripts", p("run/transcripts.jsonl"),
                     "--subject", subject, "--min-samples", "2", "--out", p("probe")})
              .code == 0);
  CHECK(manifest(dir / "probe").at("command") == "probe");
  REQUIRE(nback_cli({"intervene", "--subject", subject, "--loads", "1", "2", "--alphas", "0", "1", "--max-directions",
                     "2", "--k", "4", "--trials", "4", "--out", p("iv")})
              .code == 0);
  REQUIRE(nback_cli({"report", "--inputs", p("run"), p("probe"), p("iv"), "--out", p("report")}).code == 0);
  CHECK_FALSE(fs::is_empty(dir / "report"));
  // Leakage-control spec string resolves and runs.
  CHECK(nback_cli({"run", "--subject", subject + "?leak=8", "--loads", "1", "--trials", "2", "--out", p("leak")}).code == 0);
}
