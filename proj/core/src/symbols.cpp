#include "nback/symbols.hpp"

#include "nback/error.hpp"

namespace nback {

Letter Letter::from_index(int index) {
  if (index < 0 || index >= kLetterCount) {
    throw ParameterError("letter index out of range: " + std::to_string(index));
  }
  return Letter(static_cast<std::uint8_t>(index));
}

Letter Letter::from_char(char c) {
  if (c < 'A' || c > 'Z') throw ParameterError(std::string("not an uppercase letter: '") + c + "'");
  return Letter(static_cast<std::uint8_t>(c - 'A'));
}

ResponseSymbol ResponseSymbol::from_index(int index) {
  if (index < 0 || index > kSymbolCount) {
    throw ParameterError("response symbol index out of range: " + std::to_string(index));
  }
  return ResponseSymbol(static_cast<std::uint8_t>(index));
}

std::optional<ResponseSymbol> ResponseSymbol::try_parse(std::string_view s) {
  if (s.size() != 1) return std::nullopt;
  const char c = s[0];
  if (c >= 'A' && c <= 'Z') return ResponseSymbol(static_cast<std::uint8_t>(c - 'A'));
  if (c == '-') return dash();
  if (c == '?') return sentinel();
  return std::nullopt;
}

ResponseSymbol ResponseSymbol::parse(std::string_view s) {
  if (auto r = try_parse(s)) return *r;
  throw ParameterError("not a response symbol: \"" + std::string(s) + "\"");
}

Letter ResponseSymbol::letter() const {
  if (!is_letter()) throw ParameterError("response symbol is not a letter");
  return Letter::from_index(index_);
}

char ResponseSymbol::to_char() const {
  if (is_letter()) return static_cast<char>('A' + index_);
  return is_dash() ? '-' : '?';
}

}  // namespace nback
