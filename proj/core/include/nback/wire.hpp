#pragma once

#include <chrono>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nback/subject.hpp"

namespace nback::wire {

inline constexpr const char* kVersion = "nback-wire/1";
inline constexpr std::chrono::seconds kDefaultTimeout{30};

using Json = nlohmann::json;

Json capabilities_to_json(const Capabilities& caps);
Capabilities capabilities_from_json(const Json& j);

// {"A": p, ..., "-": p}; keys outside the 27 symbols are ignored on decode.
Json probs_to_json(const SymbolProbs& probs);
SymbolProbs probs_from_json(const Json& j);

Json states_to_json(const std::map<std::string, std::vector<float>>& states);
std::map<std::string, std::vector<float>> states_from_json(const Json& j);

Json matrix_to_json(const Eigen::MatrixXd& m);
Eigen::MatrixXd matrix_from_json(const Json& j);

// One request/response exchange. Implementations throw SubjectFailure when the peer is gone
// or times out, and ProtocolError on malformed replies.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual Json exchange(const Json& request) = 0;
  virtual bool alive() const = 0;
  virtual std::string describe() const = 0;
};

using TransportFactory = std::function<std::unique_ptr<Transport>()>;

// Line-delimited JSON over a child process's standard input and output.
std::unique_ptr<Transport> make_stdio_transport(std::vector<std::string> argv,
                                                std::chrono::milliseconds timeout = kDefaultTimeout);
// JSON bodies over HTTP POST to http://host:port/rpc.
std::unique_ptr<Transport> make_http_transport(const std::string& host, int port,
                                               std::chrono::milliseconds timeout = kDefaultTimeout);

class Server;
// In-process transport that hands requests straight to a server.
std::unique_ptr<Transport> make_loopback_transport(std::shared_ptr<Server> server);

// Serves a local subject over the protocol. One session (trial) at a time; requests are
// self-contained, so the server replays history whenever a request does not extend the
// session it holds.
class Server {
 public:
  explicit Server(SubjectFactory factory);

  Json handle(const Json& request);
  bool finished() const { return finished_; }

 private:
  Json on_hello(const Json& req);
  Json on_score_turn(const Json& req);
  Json on_score_trial(const Json& req);
  Json on_states(const Json& req);
  void sync_session(const Json& req, int n, EvalMode mode, const std::vector<std::pair<Letter, ResponseSymbol>>& history);

  SubjectFactory factory_;
  std::unique_ptr<Subject> subject_;
  std::mutex mutex_;
  bool finished_ = false;
  bool session_open_ = false;
  std::string session_key_;
  std::vector<std::pair<Letter, ResponseSymbol>> session_history_;
  std::string intervention_key_;
};

// Reads requests line by line until EOF or bye; writes one reply line per request.
void serve_stream(Server& server, std::istream& in, std::ostream& out);
// Blocks serving POST /rpc until a bye request arrives. port 0 picks a free port, reported
// through on_ready before serving starts.
void serve_http(Server& server, const std::string& host, int port, const std::function<void(int)>& on_ready = nullptr);

// Subject backed by a remote server. The transport is re-created when a previous trial
// killed it, so a crash costs only the in-flight trial.
class WireSubject final : public Subject {
 public:
  explicit WireSubject(TransportFactory factory);
  ~WireSubject() override;

  std::string name() const override;
  Capabilities capabilities() const override { return caps_; }
  void open_session(const SessionInfo& info) override;
  void close_session() override {}
  TurnReply respond(const ConversationContext& context, const std::vector<std::string>& want_hidden) override;
  std::optional<std::vector<TurnReply>> respond_trial(int n, const std::string& system_prompt,
                                                      const std::vector<Letter>& stimuli,
                                                      const std::vector<ResponseSymbol>& responses_given,
                                                      const std::vector<std::string>& want_hidden) override;
  void set_intervention(std::optional<Intervention> intervention) override;
  IdentityStates identity_states() override;
  Eigen::MatrixXd readout_directions() override;

  // Sends bye and closes the transport.
  void shutdown();

 private:
  Json call(Json request);
  void connect();
  TurnReply reply_from_json(const Json& j) const;

  TransportFactory factory_;
  std::unique_ptr<Transport> transport_;
  Capabilities caps_;
  bool batch_ = false;
  std::string server_name_;
  SessionInfo session_;
  std::optional<Intervention> intervention_;
  std::uint64_t next_id_ = 1;
};

// Parses "stdio:<command line>" or "http://host:port" into a transport factory.
TransportFactory parse_endpoint(const std::string& endpoint);

}  // namespace nback::wire
