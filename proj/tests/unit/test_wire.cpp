#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <future>
#include <limits>
#include <thread>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"
#include "nback/intervention.hpp"
#include "nback/rng.hpp"
#include "nback/subject_factory.hpp"
#include "nback/subjects.hpp"
#include "nback/tiny/model.hpp"
#include "nback/tiny/tiny_subject.hpp"
#include "nback/trial_engine.hpp"
#include "nback/wire.hpp"

using namespace nback;
using namespace nback::wire;
using namespace std::chrono_literals;

namespace {

SubjectFactory builtin(const std::string& spec) {
  return [spec] { return make_builtin_subject(BuiltinSpec::parse(spec)); };
}

std::vector<std::string> testserver(std::vector<std::string> extra = {}) {
  std::vector<std::string> argv = {NBACK_TESTSERVER};
  argv.insert(argv.end(), extra.begin(), extra.end());
  return argv;
}

WireSubject loopback(SubjectFactory f) {
  auto server = std::make_shared<Server>(std::move(f));
  return WireSubject([server] { return make_loopback_transport(server); });
}

// Runs a Server over HTTP on a free port for the lifetime of the object.
class HttpServer {
 public:
  explicit HttpServer(SubjectFactory f) : server_(std::make_shared<Server>(std::move(f))) {
    std::promise<int> ready;
    auto port = ready.get_future();
    thread_ = std::thread([this, p = std::move(ready)]() mutable {
      serve_http(*server_, "127.0.0.1", 0, [&p](int port) { p.set_value(port); });
    });
    port_ = port.get();
  }
  ~HttpServer() {
    try {
      make_http_transport("127.0.0.1", port_, 5s)->exchange({{"id", "x"}, {"type", "bye"}});
    } catch (...) {
    }
    thread_.join();
  }
  int port() const { return port_; }

 private:
  std::shared_ptr<Server> server_;
  std::thread thread_;
  int port_ = 0;
};

void check_same(const Transcript& a, const Transcript& b) {
  REQUIRE(a.turns.size() == b.turns.size());
  CHECK(a.failed == b.failed);
  for (std::size_t t = 0; t < a.turns.size(); ++t) {
    CHECK(a.turns[t].dist.probs == b.turns[t].dist.probs);
    CHECK(a.turns[t].dist.top1 == b.turns[t].dist.top1);
    CHECK(a.turns[t].correct == b.turns[t].correct);
  }
}

std::vector<TrialSpec> trials(int n, int count, std::uint64_t seed) {
  return make_trial_set(Condition::uniform26(), n, count, seed);
}

}  // namespace

TEST_CASE("codecs: state blobs round trip bit-exactly, including special values") {
  Stream s(1, "blob");
  std::vector<float> v;
  for (int i = 0; i < 1000; ++i) v.push_back(static_cast<float>(s.normal() * std::pow(10.0, s.uniform01() * 60 - 30)));
  v.push_back(0.0f);
  v.push_back(-0.0f);
  v.push_back(std::numeric_limits<float>::denorm_min());
  v.push_back(std::numeric_limits<float>::infinity());
  v.push_back(std::numeric_limits<float>::max());
  for (std::size_t len : {0ul, 1ul, 2ul, 3ul, v.size()}) {
    const std::vector<float> part(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(len));
    const auto back = states_from_json(states_to_json({{"emb", part}}));
    REQUIRE(back.at("emb").size() == len);
    CHECK(std::memcmp(back.at("emb").data(), part.data(), len * sizeof(float)) == 0);
  }
  // Little-endian layout: 1.0f is 00 00 80 3f.
  CHECK(encode_floats_b64(std::vector<float>{1.0f}) == "AACAPw==");
}

TEST_CASE("codecs: probabilities, capabilities and matrices") {
  SymbolProbs p{};
  p[3] = 0.25;
  p[26] = 0.75;
  const Json j = probs_to_json(p);
  CHECK(j.at("D").get<double>() == 0.25);
  CHECK(j.at("-").get<double>() == 0.75);
  CHECK(probs_from_json(j) == p);
  CHECK(probs_from_json(Json{{"A", 1.0}, {"??", 5.0}})[0] == 1.0);
  CHECK_THROWS_AS(probs_from_json(Json::array()), ProtocolError);

  Capabilities c;
  c.hidden = c.readout = c.intervene = true;
  c.layer_count = 3;
  c.d_model = 48;
  c.layer_ids = {"emb", "block1", "block2"};
  const auto back = capabilities_from_json(capabilities_to_json(c));
  CHECK(back.hidden);
  CHECK(back.readout);
  CHECK(back.intervene);
  CHECK(back.d_model == 48);
  CHECK(back.layer_ids == c.layer_ids);
  Json bad = capabilities_to_json(c);
  bad.erase("d_model");
  CHECK_THROWS_AS(capabilities_from_json(bad), ProtocolError);

  Eigen::MatrixXd m(2, 3);
  m << 1, 2, 3, 4, 5, 6.5;
  CHECK(matrix_from_json(matrix_to_json(m)) == m);
}

TEST_CASE("server: ids are echoed, unknown types and malformed requests are rejected") {
  Server server(builtin("oracle"));
  const auto early = server.handle({{"id", "1"}, {"type", "score_turn"}});
  CHECK(early.at("type") == "error");
  CHECK(early.at("id") == "1");
  const auto hello = server.handle({{"id", "2"}, {"type", "hello"}, {"version", kVersion}});
  CHECK(hello.at("type") == "hello");
  CHECK(hello.at("capabilities").at("flags") == Json::array({"dist"}));
  const auto unknown = server.handle({{"id", 7}, {"type", "explode"}});
  CHECK(unknown.at("type") == "error");
  CHECK(unknown.at("id") == 7);
  CHECK(server.handle(Json::array()).at("type") == "error");
  const auto turn = server.handle(Json::parse(
      R"({"id":"7","type":"score_turn","n":2,"mode":"tf","history":[["G","-"],["K","-"]],"stimulus":"G"})"));
  CHECK(turn.at("id") == "7");
  CHECK(turn.at("type") == "dist");
  CHECK(turn.at("top") == "G");
  CHECK(turn.at("probs").at("G") == 1.0);
  const auto mism = server.handle(Json::parse(R"({"id":"8","type":"score_trial","n":2,"stimuli":"ABC","responses_given":"--"})"));
  CHECK(mism.at("type") == "error");
  CHECK(server.handle({{"id", "9"}, {"type", "hello"}, {"version", "nback-wire/0"}}).at("type") == "error");
  CHECK(server.handle({{"id", "10"}, {"type", "bye"}}).at("type") == "bye");
  CHECK(server.finished());

  std::istringstream in("{\"id\":\"a\",\"type\":\"hello\",\"version\":\"nback-wire/1\"}\nnot json\n{\"id\":\"b\",\"type\":\"bye\"}\n");
  std::ostringstream out;
  Server s2(builtin("oracle"));
  serve_stream(s2, in, out);
  std::istringstream lines(out.str());
  std::string line;
  std::vector<Json> replies;
  while (std::getline(lines, line)) replies.push_back(Json::parse(line));
  REQUIRE(replies.size() == 3);
  CHECK(replies[0].at("type") == "hello");
  CHECK(replies[1].at("type") == "error");
  CHECK(replies[2].at("id") == "b");
}

TEST_CASE("loopback: oracle is a delta on the truth; score_trial matches per-turn scoring") {
  auto remote = loopback(builtin("recency_blur?w-2=0.5,w-1=0.3,w0=0.2"));
  CHECK(remote.capabilities().dist);
  CHECK_FALSE(remote.capabilities().hidden);
  auto local = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.5,w-1=0.3,w0=0.2"));
  RunOptions batch;
  batch.batch_teacher_forced = true;
  for (const auto& t : trials(2, 3, 5)) {
    const auto a = run_trial(remote, t, EvalMode::teacher_forced).transcript;
    const auto b = run_trial(remote, t, EvalMode::teacher_forced, batch).transcript;
    const auto c = run_trial(*local, t, EvalMode::teacher_forced).transcript;
    REQUIRE(b.turns.size() == 50);
    check_same(a, b);
    check_same(a, c);
    for (const auto& turn : a.turns) {
      double sum = 0;
      for (double p : turn.dist.probs) sum += p;
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
  auto oracle = loopback(builtin("oracle"));
  const auto o = run_trial(oracle, trials(3, 1, 2).front(), EvalMode::autoregressive).transcript;
  for (const auto& turn : o.turns) {
    CHECK(turn.correct);
    CHECK(turn.dist.probs[static_cast<std::size_t>(turn.truth.index())] == 1.0);
  }
}

TEST_CASE("loopback tinyformer: full capabilities, states, identity, readout and interventions") {
  tiny::ModelConfig cfg;
  auto p = tiny::init_params<float>(cfg, 3);
  for (auto& v : p.data) v *= 8.0f;
  auto params = std::make_shared<const tiny::Params<float>>(std::move(p));
  SubjectFactory f = [cfg, params] { return tiny::make_tiny_subject(cfg, params); };
  auto remote = loopback(f);
  auto local = f();
  const auto caps = remote.capabilities();
  CHECK(caps.dist);
  CHECK(caps.hidden);
  CHECK(caps.readout);
  CHECK(caps.intervene);
  CHECK(caps.d_model == 48);
  CHECK(remote.name() == "wire:" + local->name());

  RunOptions opt;
  opt.want_hidden = {"emb", "block2"};
  const auto t = trials(2, 1, 9).front();
  const auto a = run_trial(remote, t, EvalMode::teacher_forced, opt);
  const auto b = run_trial(*local, t, EvalMode::teacher_forced, opt);
  check_same(a.transcript, b.transcript);
  REQUIRE(a.states.size() == b.states.size());
  for (std::size_t i = 0; i < a.states.size(); ++i) CHECK(a.states[i].layers == b.states[i].layers);

  const auto ids_remote = remote.identity_states();
  const auto ids_local = local->identity_states();
  for (const auto& [fam, layers] : ids_local) {
    for (const auto& [layer, m] : layers) {
      CHECK((ids_remote.at(fam).at(layer) - m.cast<float>().cast<double>()).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  CHECK(remote.readout_directions().rows() == 26);

  const auto sub = std::make_shared<const LetterSubspace>(
      fit_letter_subspace(ids_local.begin()->second.at(tiny::kInterventionLayer), 3));
  remote.set_intervention(Intervention{sub, 1.0});
  local->set_intervention(Intervention{sub, 1.0});
  const auto ra = run_trial(remote, t, EvalMode::teacher_forced).transcript;
  const auto la = run_trial(*local, t, EvalMode::teacher_forced).transcript;
  for (std::size_t i = 0; i < ra.turns.size(); ++i) {
    for (std::size_t j = 0; j < kSymbolCount; ++j) {
      // The subspace crosses the wire as float32.
      CHECK(std::abs(ra.turns[i].dist.probs[j] - la.turns[i].dist.probs[j]) < 1e-4);
    }
  }
  remote.set_intervention(std::nullopt);
  check_same(run_trial(remote, t, EvalMode::teacher_forced).transcript, a.transcript);

  auto plain = loopback(builtin("oracle"));
  CHECK_THROWS_AS(plain.set_intervention(Intervention{sub, 1.0}), CapabilityError);
  CHECK_THROWS_AS(plain.identity_states(), CapabilityError);
  CHECK_THROWS_AS(plain.readout_directions(), CapabilityError);
}

#ifdef NBACK_TESTSERVER

TEST_CASE("stdio: echo server capabilities and oracle transcripts") {
  WireSubject s([] { return make_stdio_transport(testserver()); });
  CHECK(s.capabilities().dist);
  CHECK_FALSE(s.capabilities().hidden);
  for (const auto& t : trials(2, 2, 3)) {
    const auto tr = run_trial(s, t, EvalMode::autoregressive).transcript;
    CHECK_FALSE(tr.failed);
    for (const auto& turn : tr.turns) CHECK(turn.correct);
  }
}

TEST_CASE("transport agnosticism: stdio, HTTP and loopback give identical transcripts") {
  const std::string spec = "recency_blur?w-2=0.4,w-1=0.35,w0=0.25";
  WireSubject stdio([spec] { return make_stdio_transport(testserver({"--subject", "builtin:" + spec})); });
  HttpServer http_server(builtin(spec));
  const int port = http_server.port();
  WireSubject http([port] { return make_http_transport("127.0.0.1", port); });
  auto loop = loopback(builtin(spec));
  for (auto mode : {EvalMode::teacher_forced, EvalMode::autoregressive}) {
    for (const auto& t : trials(2, 2, 17)) {
      const auto a = run_trial(stdio, t, mode).transcript;
      const auto b = run_trial(http, t, mode).transcript;
      const auto c = run_trial(loop, t, mode).transcript;
      check_same(a, b);
      check_same(a, c);
    }
  }
  http.shutdown();
}

TEST_CASE("crash containment: a dying server fails only the in-flight trial") {
  WireSubject s([] { return make_stdio_transport(testserver({"--die-after", "60"})); });
  const auto ts = trials(2, 3, 21);
  const auto first = run_trial(s, ts[0], EvalMode::teacher_forced).transcript;
  const auto second = run_trial(s, ts[1], EvalMode::teacher_forced).transcript;
  const auto third = run_trial(s, ts[2], EvalMode::teacher_forced).transcript;
  CHECK_FALSE(first.failed);
  CHECK(second.failed);
  CHECK_FALSE(second.failure_reason.empty());
  CHECK_FALSE(third.failed);
  for (const auto& turn : third.turns) CHECK(turn.correct);
}

TEST_CASE("a hung server times out and fails the trial") {
  const auto start = std::chrono::steady_clock::now();
  WireSubject s([] { return make_stdio_transport(testserver({"--hang-after", "3"}), 300ms); });
  const auto tr = run_trial(s, trials(1, 1, 2).front(), EvalMode::teacher_forced).transcript;
  CHECK(tr.failed);
  CHECK(std::chrono::steady_clock::now() - start < 20s);
}

TEST_CASE("garbled replies fail the trial with a protocol error") {
  WireSubject s([] { return make_stdio_transport(testserver({"--garble-at", "4"})); });
  const auto tr = run_trial(s, trials(1, 1, 2).front(), EvalMode::teacher_forced).transcript;
  CHECK(tr.failed);
}

TEST_CASE("top-only servers yield one-hot distributions") {
  WireSubject s([] {
    return make_stdio_transport(testserver({"--top-only", "--subject", "builtin:recency_blur?w-2=0.6,w-1=0.4,w0=0"}));
  });
  CHECK_FALSE(s.capabilities().dist);
  auto local = make_builtin_subject(BuiltinSpec::parse("recency_blur?w-2=0.6,w-1=0.4,w0=0"));
  const auto t = trials(2, 1, 4).front();
  const auto a = run_trial(s, t, EvalMode::teacher_forced).transcript;
  const auto b = run_trial(*local, t, EvalMode::teacher_forced).transcript;
  for (std::size_t i = 0; i < a.turns.size(); ++i) {
    CHECK(a.turns[i].dist.top1 == b.turns[i].dist.top1);
    CHECK(a.turns[i].dist.probs[static_cast<std::size_t>(a.turns[i].dist.top1.index())] == 1.0);
  }
}

TEST_CASE("handshake errors: malformed hello shows the raw payload; version mismatch; missing binary") {
  try {
    WireSubject s([] { return make_stdio_transport(testserver({"--bad-hello"})); });
    FAIL("expected a handshake failure");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("HELLO??") != std::string::npos);
  }
  CHECK_THROWS_AS(WireSubject([] { return make_stdio_transport(testserver({"--version-string", "nback-wire/9"})); }),
                  ProtocolError);
  CHECK_THROWS(WireSubject([] { return make_stdio_transport({"/nonexistent/nback-server"}, 2s); }));
}

TEST_CASE("endpoint parsing and the subject factory") {
  CHECK_THROWS_AS(parse_endpoint("ftp://x"), ParameterError);
  CHECK_THROWS_AS(parse_endpoint("stdio:"), ParameterError);
  CHECK_THROWS_AS(parse_endpoint("http://nohostport"), ParameterError);
  auto f = make_subject_factory(std::string("wire:stdio:") + NBACK_TESTSERVER + " --subject builtin:oracle");
  auto s = f();
  CHECK(s->name() == "wire:builtin:oracle");
  CHECK_FALSE(run_trial(*s, trials(1, 1, 1).front(), EvalMode::teacher_forced).transcript.failed);
}

#endif
