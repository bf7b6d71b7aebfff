#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <mutex>
#include <sstream>
#include <thread>

// Eigen must be parsed before httplib: <resolv.h> defines a _res macro that breaks it.
#include "nback/error.hpp"
#include "nback/wire.hpp"

#include <httplib.h>

namespace nback::wire {

namespace {

class StdioTransport final : public Transport {
 public:
  StdioTransport(std::vector<std::string> argv, std::chrono::milliseconds timeout)
      : argv_(std::move(argv)), timeout_(timeout) {
    if (argv_.empty()) throw ParameterError("stdio transport: empty command");
    launch();
  }

  ~StdioTransport() override { terminate(); }

  Json exchange(const Json& request) override {
    if (!alive()) throw SubjectFailure("subject process is not running (" + describe() + ")");
    const std::string line = request.dump() + "\n";
    const char* p = line.data();
    std::size_t left = line.size();
    while (left > 0) {
      const ssize_t w = ::write(to_child_, p, left);
      if (w < 0) {
        if (errno == EINTR) continue;
        fail("write to subject process failed: " + std::string(std::strerror(errno)));
      }
      p += w;
      left -= static_cast<std::size_t>(w);
    }
    const std::string reply = read_line();
    try {
      return Json::parse(reply);
    } catch (const Json::parse_error&) {
      throw ProtocolError("malformed reply from subject process: " + reply);
    }
  }

  bool alive() const override { return pid_ > 0; }
  std::string describe() const override {
    std::string s = "stdio:";
    for (const auto& a : argv_) s += " " + a;
    return s;
  }

 private:
  void launch() {
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) throw SubjectFailure("cannot create pipes");
    const pid_t pid = ::fork();
    if (pid < 0) throw SubjectFailure("fork failed");
    if (pid == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      std::vector<char*> args;
      for (auto& a : argv_) args.push_back(a.data());
      args.push_back(nullptr);
      ::execvp(args[0], args.data());
      std::_Exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);
    pid_ = pid;
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      const auto remaining =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (remaining.count() <= 0) fail("subject process timed out after " + std::to_string(timeout_.count()) + " ms");
      pollfd pfd{from_child_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, static_cast<int>(remaining.count()));
      if (rc < 0) {
        if (errno == EINTR) continue;
        fail("poll on subject process failed");
      }
      if (rc == 0) continue;
      char chunk[4096];
      const ssize_t r = ::read(from_child_, chunk, sizeof chunk);
      if (r < 0) {
        if (errno == EINTR) continue;
        fail("read from subject process failed");
      }
      if (r == 0) fail("subject process exited");
      buffer_.append(chunk, static_cast<std::size_t>(r));
    }
  }

  [[noreturn]] void fail(const std::string& why) {
    terminate();
    throw SubjectFailure(why + " (" + describe() + ")");
  }

  void terminate() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      int status = 0;
      // Give the child a moment to exit on EOF before killing it.
      for (int i = 0; i < 50; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) == pid_) {
          pid_ = -1;
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
      }
      ::kill(pid_, SIGKILL);
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  std::vector<std::string> argv_;
  std::chrono::milliseconds timeout_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

class HttpTransport final : public Transport {
 public:
  HttpTransport(std::string host, int port, std::chrono::milliseconds timeout)
      : host_(std::move(host)), port_(port), client_(host_, port_) {
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
    client_.set_connection_timeout(secs.count(), usecs.count());
    client_.set_read_timeout(secs.count(), usecs.count());
    client_.set_write_timeout(secs.count(), usecs.count());
  }

  Json exchange(const Json& request) override {
    auto res = client_.Post("/rpc", request.dump(), "application/json");
    if (!res) {
      alive_ = false;
      throw SubjectFailure("HTTP request failed: " + httplib::to_string(res.error()) + " (" + describe() + ")");
    }
    if (res->status != 200) {
      throw ProtocolError("HTTP status " + std::to_string(res->status) + " from " + describe() + ": " + res->body);
    }
    try {
      return Json::parse(res->body);
    } catch (const Json::parse_error&) {
      throw ProtocolError("malformed reply from " + describe() + ": " + res->body);
    }
  }

  bool alive() const override { return alive_; }
  std::string describe() const override { return "http://" + host_ + ":" + std::to_string(port_); }

 private:
  std::string host_;
  int port_;
  httplib::Client client_;
  bool alive_ = true;
};

class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(std::shared_ptr<Server> server) : server_(std::move(server)) {}

  // Round-trips through text so loopback exercises the same encoding as real transports.
  Json exchange(const Json& request) override {
    return Json::parse(server_->handle(Json::parse(request.dump())).dump());
  }
  bool alive() const override { return true; }
  std::string describe() const override { return "loopback"; }

 private:
  std::shared_ptr<Server> server_;
};

std::vector<std::string> split_command(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(word);
  return out;
}

}  // namespace

std::unique_ptr<Transport> make_stdio_transport(std::vector<std::string> argv, std::chrono::milliseconds timeout) {
  return std::make_unique<StdioTransport>(std::move(argv), timeout);
}

std::unique_ptr<Transport> make_http_transport(const std::string& host, int port, std::chrono::milliseconds timeout) {
  return std::make_unique<HttpTransport>(host, port, timeout);
}

std::unique_ptr<Transport> make_loopback_transport(std::shared_ptr<Server> server) {
  return std::make_unique<LoopbackTransport>(std::move(server));
}

void serve_http(Server& server, const std::string& host, int port, const std::function<void(int)>& on_ready) {
  httplib::Server http;
  std::thread stopper;
  std::once_flag stop_once;
  http.Post("/rpc", [&](const httplib::Request& req, httplib::Response& res) {
    Json reply;
    try {
      reply = server.handle(Json::parse(req.body));
    } catch (const Json::parse_error& e) {
      reply = {{"id", nullptr}, {"type", "error"}, {"message", std::string("malformed request: ") + e.what()}};
    }
    res.set_content(reply.dump(), "application/json");
    if (server.finished()) {
      std::call_once(stop_once, [&] { stopper = std::thread([&http] { http.stop(); }); });
    }
  });
  int bound = port;
  if (port == 0) {
    bound = http.bind_to_any_port(host);
  } else if (!http.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw SubjectFailure("cannot bind HTTP server on " + host + ":" + std::to_string(port));
  if (on_ready) on_ready(bound);
  http.listen_after_bind();
  if (stopper.joinable()) stopper.join();
}

TransportFactory parse_endpoint(const std::string& endpoint) {
  if (endpoint.rfind("stdio:", 0) == 0) {
    auto argv = split_command(endpoint.substr(6));
    if (argv.empty()) throw ParameterError("stdio endpoint needs a command");
    return [argv] { return make_stdio_transport(argv); };
  }
  if (endpoint.rfind("http://", 0) == 0) {
    const std::string rest = endpoint.substr(7);
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) throw ParameterError("http endpoint needs host:port");
    const std::string host = rest.substr(0, colon);
    std::string port_text = rest.substr(colon + 1);
    if (auto slash = port_text.find('/'); slash != std::string::npos) port_text.resize(slash);
    const int port = std::stoi(port_text);
    return [host, port] { return make_http_transport(host, port); };
  }
  throw ParameterError("unknown wire endpoint '" + endpoint + "' (expected stdio:<command> or http://host:port)");
}

}  // namespace nback::wire
