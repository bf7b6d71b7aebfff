// Wire-protocol server with injectable faults, used by the transport and failure tests.
#include <unistd.h>

#include <chrono>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "nback/subject_factory.hpp"
#include "nback/symbols.hpp"
#include "nback/trial_engine.hpp"
#include "nback/wire.hpp"

namespace {

using nback::wire::Json;

struct Faults {
  int die_after = -1;    // exit without replying once this many scoring requests were answered
  int hang_after = -1;   // stop answering once this many scoring requests were answered
  int garble_at = -1;    // 0-based scoring request answered with invalid JSON
  bool top_only = false;
  bool bad_hello = false;
  std::string version;
};

Json top_only_reply(Json reply) {
  if (reply.contains("probs")) {
    const auto probs = nback::wire::probs_from_json(reply.at("probs"));
    reply["top"] = nback::top_symbol(probs).str();
    reply.erase("probs");
  }
  return reply;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nback wire test server", "nback-testserver"};
  std::string subject = "builtin:oracle";
  Faults f;
  int http_port = -1;
  app.add_option("--subject", subject, "Subject to serve")->capture_default_str();
  app.add_option("--die-after", f.die_after, "Exit after answering this many scoring requests");
  app.add_option("--hang-after", f.hang_after, "Stop answering after this many scoring requests");
  app.add_option("--garble-at", f.garble_at, "Answer this scoring request (0-based) with invalid JSON");
  app.add_flag("--top-only", f.top_only, "Advertise and send top-1 symbols only");
  app.add_flag("--bad-hello", f.bad_hello, "Answer the handshake with garbage");
  app.add_option("--version-string", f.version, "Protocol version to advertise");
  app.add_option("--http", http_port, "Serve HTTP on this port instead of stdio (0 picks one)");
  CLI11_PARSE(app, argc, argv);

  nback::wire::Server server(nback::make_subject_factory(subject));
  if (http_port >= 0) {
    nback::wire::serve_http(server, "127.0.0.1", http_port, [](int port) {
      std::cout << port << '\n' << std::flush;
    });
    return 0;
  }

  int scored = 0;
  std::string line;
  while (!server.finished() && std::getline(std::cin, line)) {
    if (line.empty()) continue;
    Json req;
    try {
      req = Json::parse(line);
    } catch (const Json::parse_error&) {
      std::cout << Json{{"type", "error"}, {"message", "malformed request"}}.dump() << '\n' << std::flush;
      continue;
    }
    const std::string type = req.value("type", std::string{});
    if (type == "hello" && f.bad_hello) {
      std::cout << "HELLO?? not json\n" << std::flush;
      continue;
    }
    const bool scoring = type == "score_turn" || type == "score_trial";
    if (scoring) {
      if (scored == f.die_after) _exit(1);
      if (scored == f.hang_after) {
        for (;;) std::this_thread::sleep_for(std::chrono::hours(1));
      }
      if (scored == f.garble_at) {
        ++scored;
        std::cout << "{\"type\": \"score_turn\", \"probs\": \n" << std::flush;
        continue;
      }
      ++scored;
    }
    Json reply = server.handle(req);
    if (type == "hello" && reply.value("type", std::string{}) == "hello") {
      if (!f.version.empty()) reply["version"] = f.version;
      if (f.top_only) {
        auto& flags = reply["capabilities"]["flags"];
        Json kept = Json::array();
        for (const auto& flag : flags) {
          if (flag != "dist") kept.push_back(flag);
        }
        flags = kept;
        reply["score_trial"] = false;
      }
    }
    if (f.top_only && scoring) reply = top_only_reply(std::move(reply));
    std::cout << reply.dump() << '\n' << std::flush;
  }
  return 0;
}
