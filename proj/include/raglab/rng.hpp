#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace raglab {

/// Deterministic random source. The engine is std::mt19937_64, whose raw
/// output sequence is fixed by the standard; all conversions to doubles
/// and bounded ints are done here by hand so that streams are reproducible
/// across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n), n >= 1. Unbiased via rejection.
  int next_int(int n);

  /// Uniform in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Sample an index from a categorical distribution given probabilities
  /// (must be nonnegative; renormalized by their sum).
  int next_categorical(std::span<const double> probs);

  /// Derived independent stream: mixes (base seed material, stream id)
  /// through splitmix64.
  Rng fork(uint64_t stream_id);

  std::string state_string() const;
  void set_state_string(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 step; used for seed derivation.
uint64_t splitmix64(uint64_t& state);

/// One-shot mix of two words into a seed.
uint64_t mix_seed(uint64_t a, uint64_t b);

}  // namespace raglab
