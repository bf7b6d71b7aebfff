#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <string>

#include "nback/subject.hpp"

namespace nback {

// Reference subjects with closed-form behavior.
struct BuiltinSpec {
  enum class Kind { oracle, uniform, constant, recency_blur, markov_shortcut, faulty };

  Kind kind = Kind::oracle;
  std::uint64_t seed = 0;
  Letter letter;                      // constant
  std::array<double, 6> weights{};    // recency_blur, index k+5 for offset k in -5..0
  double floor = 0.0;                 // recency_blur
  double q = 0.0;                     // markov_shortcut
  int fail_at = -1;                   // faulty: throw SubjectFailure at this turn
  int garble_at = -1;                 // faulty: unparseable reply at this turn

  void validate() const;
  std::string str() const;
  // "builtin:<kind>?key=value,..." or just "<kind>?..."; e.g.
  // builtin:recency_blur?w-2=0.6,w-1=0.3,w0=0.1  builtin:constant?letter=A  builtin:markov_shortcut?q=0.5
  static BuiltinSpec parse(const std::string& text);
};

std::unique_ptr<Subject> make_builtin_subject(const BuiltinSpec& spec);

}  // namespace nback
