#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace nback {

inline constexpr int kLetterCount = 26;
inline constexpr int kSymbolCount = 27;  // 26 letters + dash
inline constexpr int kDashIndex = 26;

// One uppercase English letter, stored as 0..25.
class Letter {
 public:
  constexpr Letter() = default;
  static Letter from_index(int index);
  static Letter from_char(char c);

  constexpr int index() const { return index_; }
  constexpr char to_char() const { return static_cast<char>('A' + index_); }

  friend constexpr bool operator==(Letter, Letter) = default;
  friend constexpr auto operator<=>(Letter, Letter) = default;

 private:
  constexpr explicit Letter(std::uint8_t i) : index_(i) {}
  std::uint8_t index_ = 0;
};

// A response: a letter or the dash placeholder. Index 0..25 are letters, 26 is dash.
// A recorded-only sentinel (index 27, printed "?") marks garbled subject output; it never
// equals any ground-truth symbol.
class ResponseSymbol {
 public:
  constexpr ResponseSymbol() = default;
  constexpr ResponseSymbol(Letter l) : index_(static_cast<std::uint8_t>(l.index())) {}  // NOLINT

  static constexpr ResponseSymbol dash() { return ResponseSymbol(kDashIndex); }
  static constexpr ResponseSymbol sentinel() { return ResponseSymbol(kSymbolCount); }
  static ResponseSymbol from_index(int index);
  // Accepts "A".."Z", "-" and "?"; throws ParameterError otherwise.
  static ResponseSymbol parse(std::string_view s);
  static std::optional<ResponseSymbol> try_parse(std::string_view s);

  constexpr int index() const { return index_; }
  constexpr bool is_dash() const { return index_ == kDashIndex; }
  constexpr bool is_letter() const { return index_ < kLetterCount; }
  constexpr bool is_valid() const { return index_ < kSymbolCount; }
  Letter letter() const;
  char to_char() const;
  std::string str() const { return std::string(1, to_char()); }

  friend constexpr bool operator==(ResponseSymbol, ResponseSymbol) = default;

 private:
  constexpr explicit ResponseSymbol(std::uint8_t i) : index_(i) {}
  std::uint8_t index_ = kDashIndex;
};

// Probability vector over the 27 response symbols, indexed by ResponseSymbol::index().
using SymbolProbs = std::array<double, kSymbolCount>;

}  // namespace nback
