#include "nback/wire.hpp"

#include <istream>
#include <ostream>

#include "nback/blobfile.hpp"
#include "nback/error.hpp"
#include "nback/intervention.hpp"
#include "nback/trial_engine.hpp"

namespace nback::wire {

namespace {

std::string symbol_key(int index) { return ResponseSymbol::from_index(index).str(); }

Json error_reply(const Json& id, const std::string& message) {
  return {{"id", id}, {"type", "error"}, {"message", message}};
}

std::vector<std::pair<Letter, ResponseSymbol>> history_from_json(const Json& j) {
  std::vector<std::pair<Letter, ResponseSymbol>> out;
  for (const auto& item : j) {
    if (!item.is_array() || item.size() != 2) throw ProtocolError("history entries must be [stimulus, response] pairs");
    const auto s = item[0].get<std::string>();
    if (s.size() != 1) throw ProtocolError("history stimulus must be a single letter");
    out.emplace_back(Letter::from_char(s[0]), ResponseSymbol::parse(item[1].get<std::string>()));
  }
  return out;
}

Json reply_to_json(const TurnReply& r) {
  Json j = {{"top", normalize_distribution(r.raw, r.parseable).top1.str()}};
  if (r.parseable) {
    j["probs"] = probs_to_json(r.raw);
  } else {
    j["parseable"] = false;
  }
  if (!r.states.empty()) j["states"] = states_to_json(r.states);
  return j;
}

Json subspace_to_json(const LetterSubspace& s) {
  return {{"basis", matrix_to_json(s.basis)}, {"letter_mean", matrix_to_json(s.letter_mean)}, {"source_layer", s.source_layer}};
}

LetterSubspace subspace_from_json(const Json& j) {
  LetterSubspace s;
  s.basis = matrix_from_json(j.at("basis"));
  const Eigen::MatrixXd mean = matrix_from_json(j.at("letter_mean"));
  s.letter_mean = Eigen::Map<const Eigen::RowVectorXd>(mean.data(), mean.size());
  s.mu_proj = (s.letter_mean * s.basis.transpose()) * s.basis;
  s.source_layer = j.value("source_layer", std::string{});
  return s;
}

SessionInfo session_from_json(const Json& req, int n, EvalMode mode) {
  SessionInfo info;
  info.n = n;
  info.mode = mode;
  if (req.contains("session")) {
    const auto& s = req.at("session");
    info.trial_id = s.value("trial_id", std::string{});
    info.seed = s.value("seed", std::uint64_t{0});
    if (s.contains("loop_order")) info.loop_order = letters_from_string(s.at("loop_order").get<std::string>());
  }
  return info;
}

}  // namespace

Json capabilities_to_json(const Capabilities& caps) {
  Json flags = Json::array();
  if (caps.dist) flags.push_back("dist");
  if (caps.hidden) flags.push_back("hidden");
  if (caps.readout) flags.push_back("readout");
  if (caps.intervene) flags.push_back("intervene");
  Json j = {{"flags", flags}};
  if (caps.hidden || caps.layer_count) {
    j["layer_count"] = caps.layer_count;
    j["d_model"] = caps.d_model;
    j["layer_ids"] = caps.layer_ids;
  }
  return j;
}

Capabilities capabilities_from_json(const Json& j) {
  Capabilities c;
  c.dist = c.hidden = c.readout = c.intervene = false;
  for (const auto& f : j.at("flags")) {
    const auto s = f.get<std::string>();
    if (s == "dist") c.dist = true;
    else if (s == "hidden") c.hidden = true;
    else if (s == "readout") c.readout = true;
    else if (s == "intervene") c.intervene = true;
  }
  c.layer_count = j.value("layer_count", 0);
  c.d_model = j.value("d_model", 0);
  if (j.contains("layer_ids")) c.layer_ids = j.at("layer_ids").get<std::vector<std::string>>();
  if (c.hidden && (c.layer_count <= 0 || c.d_model <= 0)) {
    throw ProtocolError("capabilities: hidden requires layer_count and d_model");
  }
  return c;
}

Json probs_to_json(const SymbolProbs& probs) {
  Json j = Json::object();
  for (int i = 0; i < kSymbolCount; ++i) {
    if (probs[static_cast<std::size_t>(i)] != 0.0) j[symbol_key(i)] = probs[static_cast<std::size_t>(i)];
  }
  return j;
}

SymbolProbs probs_from_json(const Json& j) {
  SymbolProbs p{};
  if (!j.is_object()) throw ProtocolError("probs must be an object keyed by symbol");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto sym = ResponseSymbol::try_parse(it.key());
    if (!sym || !sym->is_valid() || !it.value().is_number()) continue;
    p[static_cast<std::size_t>(sym->index())] = it.value().get<double>();
  }
  return p;
}

Json states_to_json(const std::map<std::string, std::vector<float>>& states) {
  Json j = Json::object();
  for (const auto& [layer, v] : states) j[layer] = encode_floats_b64(v);
  return j;
}

std::map<std::string, std::vector<float>> states_from_json(const Json& j) {
  std::map<std::string, std::vector<float>> out;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = decode_floats_b64(it.value().get<std::string>());
  return out;
}

Json matrix_to_json(const Eigen::MatrixXd& m) {
  std::vector<float> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(static_cast<float>(m(r, c)));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", encode_floats_b64(v)}};
}

Eigen::MatrixXd matrix_from_json(const Json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto v = decode_floats_b64(j.at("data").get<std::string>());
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) throw ProtocolError("matrix payload size mismatch");
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(r * cols + c)];
  }
  return m;
}

// ---------------------------------------------------------------------------------------------
// Server

Server::Server(SubjectFactory factory) : factory_(std::move(factory)) {}

Json Server::handle(const Json& request) {
  std::lock_guard lock(mutex_);
  const Json id = request.is_object() && request.contains("id") ? request.at("id") : Json();
  try {
    if (!request.is_object() || !request.contains("type")) throw ProtocolError("request lacks a type");
    const auto type = request.at("type").get<std::string>();
    Json reply;
    if (type == "hello") {
      reply = on_hello(request);
    } else if (type == "score_turn") {
      reply = on_score_turn(request);
    } else if (type == "score_trial") {
      reply = on_score_trial(request);
    } else if (type == "states") {
      reply = on_states(request);
    } else if (type == "bye") {
      finished_ = true;
      if (subject_ && session_open_) subject_->close_session();
      session_open_ = false;
      reply = {{"type", "bye"}};
    } else {
      throw ProtocolError("unknown message type '" + type + "'");
    }
    reply["id"] = id;
    return reply;
  } catch (const std::exception& e) {
    session_open_ = false;
    return error_reply(id, e.what());
  }
}

Json Server::on_hello(const Json& req) {
  const auto version = req.value("version", std::string{});
  if (version != kVersion) {
    throw ProtocolError("version mismatch: server speaks " + std::string(kVersion) + ", client sent '" + version + "'");
  }
  if (!subject_) subject_ = factory_();
  return {{"type", "hello"},
          {"version", kVersion},
          {"name", subject_->name()},
          {"score_trial", true},
          {"capabilities", capabilities_to_json(subject_->capabilities())}};
}

void Server::sync_session(const Json& req, int n, EvalMode mode,
                          const std::vector<std::pair<Letter, ResponseSymbol>>& history) {
  if (req.contains("intervention")) {
    const auto& iv = req.at("intervention");
    const std::string key = iv.dump();
    if (key != intervention_key_) {
      if (iv.is_null()) {
        subject_->set_intervention(std::nullopt);
      } else {
        Intervention in;
        in.alpha = iv.at("alpha").get<double>();
        in.subspace = std::make_shared<const LetterSubspace>(subspace_from_json(iv.at("subspace")));
        subject_->set_intervention(in);
      }
      intervention_key_ = key;
      session_open_ = false;
    }
  }
  const SessionInfo info = session_from_json(req, n, mode);
  const std::string key = info.trial_id + "|" + std::to_string(info.seed) + "|" + std::to_string(n) + "|" +
                          to_string(mode) + "|" + letters_to_string(info.loop_order);
  bool extends = session_open_ && key == session_key_ && history.size() == session_history_.size();
  for (std::size_t i = 0; extends && i < history.size(); ++i) extends = history[i].first == session_history_[i].first;
  if (extends) return;
  if (session_open_) subject_->close_session();
  subject_->open_session(info);
  session_open_ = true;
  session_key_ = key;
  session_history_.clear();
  const std::string prompt = req.value("system_prompt", std::string{});
  for (std::size_t t = 0; t < history.size(); ++t) {
    ConversationContext ctx;
    ctx.system_prompt = prompt;
    ctx.n = n;
    ctx.mode = mode;
    ctx.turn = static_cast<int>(t);
    ctx.history.assign(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(t));
    ctx.current_stimulus = history[t].first;
    subject_->respond(ctx, {});
    session_history_.push_back(history[t]);
  }
}

Json Server::on_score_turn(const Json& req) {
  if (!subject_) throw ProtocolError("score_turn before hello");
  const int n = req.at("n").get<int>();
  const EvalMode mode = parse_eval_mode(req.value("mode", std::string("tf")));
  const auto history = history_from_json(req.value("history", Json::array()));
  const auto stim = req.at("stimulus").get<std::string>();
  if (stim.size() != 1) throw ProtocolError("stimulus must be a single letter");
  const auto want = req.value("want_hidden", std::vector<std::string>{});
  sync_session(req, n, mode, history);
  ConversationContext ctx;
  ctx.system_prompt = req.value("system_prompt", std::string{});
  ctx.n = n;
  ctx.mode = mode;
  ctx.turn = static_cast<int>(history.size());
  ctx.history = history;
  ctx.current_stimulus = Letter::from_char(stim[0]);
  const TurnReply r = subject_->respond(ctx, want);
  session_history_.emplace_back(ctx.current_stimulus, normalize_distribution(r.raw, r.parseable).top1);
  Json out = reply_to_json(r);
  out["type"] = "dist";
  return out;
}

Json Server::on_score_trial(const Json& req) {
  if (!subject_) throw ProtocolError("score_trial before hello");
  const int n = req.at("n").get<int>();
  const auto stimuli = letters_from_string(req.at("stimuli").get<std::string>());
  const auto given_text = req.at("responses_given").get<std::string>();
  if (given_text.size() != stimuli.size()) throw ProtocolError("score_trial: stimuli and responses differ in length");
  std::vector<ResponseSymbol> given;
  for (char c : given_text) given.push_back(ResponseSymbol::parse(std::string(1, c)));
  const auto want = req.value("want_hidden", std::vector<std::string>{});
  const std::string prompt = req.value("system_prompt", std::string{});
  if (session_open_) subject_->close_session();
  session_open_ = false;
  subject_->open_session(session_from_json(req, n, EvalMode::teacher_forced));
  auto replies = subject_->respond_trial(n, prompt, stimuli, given, want);
  if (!replies) {
    replies.emplace();
    ConversationContext ctx;
    ctx.system_prompt = prompt;
    ctx.n = n;
    ctx.mode = EvalMode::teacher_forced;
    for (std::size_t t = 0; t < stimuli.size(); ++t) {
      ctx.turn = static_cast<int>(t);
      ctx.current_stimulus = stimuli[t];
      replies->push_back(subject_->respond(ctx, want));
      ctx.history.emplace_back(stimuli[t], given[t]);
    }
  }
  subject_->close_session();
  Json turns = Json::array();
  for (const auto& r : *replies) turns.push_back(reply_to_json(r));
  return {{"type", "dist"}, {"turns", turns}};
}

Json Server::on_states(const Json& req) {
  if (!subject_) throw ProtocolError("states before hello");
  const auto what = req.value("what", std::string("identity"));
  if (what == "identity") {
    Json fam = Json::object();
    for (const auto& [family, layers] : subject_->identity_states()) {
      Json lj = Json::object();
      for (const auto& [layer, m] : layers) lj[layer] = matrix_to_json(m);
      fam[family] = lj;
    }
    return {{"type", "states"}, {"identity", fam}};
  }
  if (what == "readout") return {{"type", "states"}, {"readout", matrix_to_json(subject_->readout_directions())}};
  throw ProtocolError("states: unknown request '" + what + "'");
}

void serve_stream(Server& server, std::istream& in, std::ostream& out) {
  std::string line;
  while (!server.finished() && std::getline(in, line)) {
    if (line.empty()) continue;
    Json reply;
    try {
      reply = server.handle(Json::parse(line));
    } catch (const Json::parse_error& e) {
      reply = error_reply(Json(), std::string("malformed request: ") + e.what());
    }
    out << reply.dump() << '\n' << std::flush;
  }
}

// ---------------------------------------------------------------------------------------------
// Client subject

WireSubject::WireSubject(TransportFactory factory) : factory_(std::move(factory)) { connect(); }

WireSubject::~WireSubject() {
  try {
    shutdown();
  } catch (...) {
  }
}

void WireSubject::connect() {
  transport_ = factory_();
  const Json hello = {{"id", "0"}, {"type", "hello"}, {"version", kVersion}};
  const Json reply = transport_->exchange(hello);
  if (!reply.is_object() || reply.value("type", std::string{}) != "hello") {
    const std::string msg = reply.is_object() && reply.value("type", std::string{}) == "error"
                                ? reply.value("message", std::string{})
                                : std::string{};
    throw ProtocolError("handshake failed" + (msg.empty() ? std::string{} : ": " + msg) + "; raw reply: " + reply.dump());
  }
  if (reply.value("version", std::string{}) != kVersion) {
    throw ProtocolError("handshake: version mismatch; raw reply: " + reply.dump());
  }
  try {
    caps_ = capabilities_from_json(reply.at("capabilities"));
    server_name_ = reply.value("name", std::string("remote"));
    batch_ = reply.value("score_trial", false);
  } catch (const Json::exception&) {
    throw ProtocolError("handshake: malformed hello; raw reply: " + reply.dump());
  }
}

std::string WireSubject::name() const { return "wire:" + server_name_; }

void WireSubject::shutdown() {
  if (transport_ && transport_->alive()) {
    try {
      transport_->exchange({{"id", std::to_string(next_id_++)}, {"type", "bye"}});
    } catch (...) {
    }
  }
  transport_.reset();
}

Json WireSubject::call(Json request) {
  if (!transport_ || !transport_->alive()) connect();
  const std::string id = std::to_string(next_id_++);
  request["id"] = id;
  Json reply;
  try {
    reply = transport_->exchange(request);
  } catch (const SubjectFailure&) {
    transport_.reset();
    throw;
  }
  if (!reply.is_object() || reply.value("id", Json()) != Json(id)) {
    throw ProtocolError("reply id does not match request " + id + "; raw reply: " + reply.dump());
  }
  const auto type = reply.value("type", std::string{});
  if (type == "error") throw SubjectFailure("server error: " + reply.value("message", std::string{}));
  return reply;
}

void WireSubject::open_session(const SessionInfo& info) {
  session_ = info;
  if (!transport_ || !transport_->alive()) connect();
}

TurnReply WireSubject::reply_from_json(const Json& j) const {
  TurnReply r;
  r.raw.fill(0.0);
  if (!j.value("parseable", true)) {
    r.parseable = false;
  } else if (j.contains("probs") && caps_.dist) {
    r.raw = probs_from_json(j.at("probs"));
  } else if (j.contains("top")) {
    const auto sym = ResponseSymbol::try_parse(j.at("top").get<std::string>());
    if (sym && sym->is_valid()) {
      r.raw[static_cast<std::size_t>(sym->index())] = 1.0;
    } else {
      r.parseable = false;
    }
  } else {
    r.parseable = false;
  }
  if (j.contains("states")) r.states = states_from_json(j.at("states"));
  return r;
}

namespace {

Json session_json(const SessionInfo& s) {
  Json j = {{"trial_id", s.trial_id}, {"seed", s.seed}};
  if (!s.loop_order.empty()) j["loop_order"] = letters_to_string(s.loop_order);
  return j;
}

}  // namespace

TurnReply WireSubject::respond(const ConversationContext& ctx, const std::vector<std::string>& want_hidden) {
  Json history = Json::array();
  for (const auto& [stim, resp] : ctx.history) history.push_back({std::string(1, stim.to_char()), resp.str()});
  Json req = {{"type", "score_turn"},
              {"n", ctx.n},
              {"mode", to_string(ctx.mode)},
              {"system_prompt", ctx.system_prompt},
              {"history", history},
              {"stimulus", std::string(1, ctx.current_stimulus.to_char())},
              {"session", session_json(session_)}};
  if (!want_hidden.empty()) req["want_hidden"] = want_hidden;
  if (intervention_) {
    req["intervention"] = {{"alpha", intervention_->alpha}, {"subspace", subspace_to_json(*intervention_->subspace)}};
  } else if (caps_.intervene) {
    req["intervention"] = nullptr;
  }
  const Json reply = call(std::move(req));
  if (reply.value("type", std::string{}) != "dist") throw ProtocolError("score_turn: expected a dist reply");
  return reply_from_json(reply);
}

std::optional<std::vector<TurnReply>> WireSubject::respond_trial(int n, const std::string& system_prompt,
                                                                 const std::vector<Letter>& stimuli,
                                                                 const std::vector<ResponseSymbol>& responses_given,
                                                                 const std::vector<std::string>& want_hidden) {
  if (!batch_ || intervention_) return std::nullopt;
  std::string given;
  for (const auto& r : responses_given) given += r.to_char();
  Json req = {{"type", "score_trial"},
              {"n", n},
              {"system_prompt", system_prompt},
              {"stimuli", letters_to_string(stimuli)},
              {"responses_given", given},
              {"session", session_json(session_)}};
  if (!want_hidden.empty()) req["want_hidden"] = want_hidden;
  const Json reply = call(std::move(req));
  const auto& turns = reply.at("turns");
  if (turns.size() != stimuli.size()) throw ProtocolError("score_trial: reply has the wrong number of turns");
  std::vector<TurnReply> out;
  for (const auto& t : turns) out.push_back(reply_from_json(t));
  return out;
}

void WireSubject::set_intervention(std::optional<Intervention> intervention) {
  if (intervention && !caps_.intervene) {
    throw CapabilityError("subject '" + name() + "' does not support residual interventions");
  }
  intervention_ = std::move(intervention);
}

IdentityStates WireSubject::identity_states() {
  if (!caps_.hidden) throw CapabilityError("subject '" + name() + "' does not expose hidden states");
  const Json reply = call({{"type", "states"}, {"what", "identity"}});
  IdentityStates out;
  for (auto f = reply.at("identity").begin(); f != reply.at("identity").end(); ++f) {
    for (auto l = f.value().begin(); l != f.value().end(); ++l) out[f.key()][l.key()] = matrix_from_json(l.value());
  }
  return out;
}

Eigen::MatrixXd WireSubject::readout_directions() {
  if (!caps_.readout) throw CapabilityError("subject '" + name() + "' does not expose readout directions");
  return matrix_from_json(call({{"type", "states"}, {"what", "readout"}}).at("readout"));
}

}  // namespace nback::wire
