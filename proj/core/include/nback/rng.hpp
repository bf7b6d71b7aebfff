#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace nback {

// Philox4x32-10 block function (Salmon et al. counter-based generator).
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

// SplitMix64 finalizer, used to derive keys and child stream ids.
std::uint64_t mix64(std::uint64_t x);

// Derives a child seed from a parent seed and an index. Used for per-trial seeds:
// trial i of a run with master seed s has seed derive_seed(s, i).
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

// Hash of a short label, so streams can be named ("stim", "lure", "dropout"...).
std::uint64_t label_hash(std::string_view label);

// A splittable random stream over Philox4x32-10. The key is derived from the seed,
// the upper counter half carries the stream id, the lower half counts blocks.
// Equal (seed, stream id) give bit-identical draws on every platform.
class Stream {
 public:
  static constexpr std::string_view kName = "philox4x32-10/v1";

  Stream(std::uint64_t seed, std::uint64_t stream_id = 0);
  Stream(std::uint64_t seed, std::string_view label) : Stream(seed, label_hash(label)) {}

  // Independent child stream; depends only on (seed, stream id, index).
  Stream child(std::uint64_t index) const;
  Stream child(std::string_view label) const { return child(label_hash(label)); }

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform integer in [0, bound), unbiased (Lemire's multiply-and-reject).
  std::uint32_t uniform_below(std::uint32_t bound);
  // Uniform double in [0, 1) with 53 random bits.
  double uniform01();
  bool bernoulli(double p);
  // Standard normal via Box-Muller (no cached second value, so draws stay aligned).
  double normal();

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

 private:
  void refill();

  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::array<std::uint32_t, 2> key_;
  std::uint64_t block_ = 0;
  std::array<std::uint32_t, 4> buffer_{};
  int used_ = 4;
};

}  // namespace nback
