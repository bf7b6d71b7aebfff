#pragma once

#include <string>

#include "nback/subject.hpp"

namespace nback {

// Resolves a subject spec string:
//   builtin:<kind>?k=v,...          reference subjects
//   tiny:<checkpoint>[?leak=<beta>] trained tinyformer (leak adds the leakage control)
//   wire:stdio:<command line>       external process speaking the wire protocol
//   wire:http://host:port           wire protocol over HTTP
// Heavy resources (checkpoints) load once; the factory then makes cheap per-worker subjects.
SubjectFactory make_subject_factory(const std::string& spec);

}  // namespace nback
