#include <iostream>

#include "app.hpp"
#include "nback/subject_factory.hpp"
#include "nback/wire.hpp"

namespace nback::app {

int cmd_serve(const ServeArgs& args, std::istream& in, std::ostream& out, std::ostream& log) {
  wire::Server server(make_subject_factory(args.subject));
  if (args.http_port < 0) {
    wire::serve_stream(server, in, out);
    return kExitOk;
  }
  wire::serve_http(server, args.host, args.http_port, [&](int port) {
    log << "listening on http://" << args.host << ':' << port << '\n' << std::flush;
  });
  return kExitOk;
}

}  // namespace nback::app
