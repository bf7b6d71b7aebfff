#include "nback/subject_factory.hpp"

#include <sstream>

#include "nback/error.hpp"
#include "nback/subjects.hpp"
#include "nback/tiny/checkpoint.hpp"
#include "nback/tiny/tiny_subject.hpp"
#include "nback/wire.hpp"

namespace nback {

namespace {

SubjectFactory tiny_factory(const std::string& body) {
  const auto q = body.find('?');
  const std::string path = body.substr(0, q);
  if (path.empty()) throw ParameterError("tiny subject needs a checkpoint path");
  tiny::TinySubjectOptions options;
  options.label = std::filesystem::path(path).stem().string();
  if (q != std::string::npos) {
    std::stringstream params(body.substr(q + 1));
    std::string item;
    while (std::getline(params, item, ',')) {
      const auto eq = item.find('=');
      const std::string key = item.substr(0, eq);
      const std::string value = eq == std::string::npos ? std::string{} : item.substr(eq + 1);
      if (key == "leak") {
        options.leak_scale = std::stod(value);
      } else if (key == "label") {
        options.label = value;
      } else {
        throw ParameterError("tiny subject: unknown parameter '" + key + "'");
      }
    }
  }
  auto ckpt = tiny::load_checkpoint(path);
  auto params = std::make_shared<const tiny::Params<float>>(std::move(ckpt.params));
  const tiny::ModelConfig config = ckpt.model;
  if (options.leak_scale != 0.0) {
    const auto ids = tiny::minimal_identity_states(config, params);
    options.leak_vectors = std::make_shared<const Eigen::MatrixXd>(ids.at(tiny::kInterventionLayer));
  }
  return [config, params, options] { return tiny::make_tiny_subject(config, params, options); };
}

}  // namespace

SubjectFactory make_subject_factory(const std::string& spec) {
  if (spec.rfind("builtin:", 0) == 0) {
    const BuiltinSpec parsed = BuiltinSpec::parse(spec);
    return [parsed] { return make_builtin_subject(parsed); };
  }
  if (spec.rfind("tiny:", 0) == 0) return tiny_factory(spec.substr(5));
  if (spec.rfind("wire:", 0) == 0) {
    auto transport = wire::parse_endpoint(spec.substr(5));
    return [transport] { return std::make_unique<wire::WireSubject>(transport); };
  }
  throw ParameterError("unknown subject spec '" + spec + "' (expected builtin:, tiny: or wire:)");
}

}  // namespace nback
