#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace primroute {

/// SplitMix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix64(std::uint64_t x);

/// Derives a child seed from a parent seed and a list of tags/indices.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag,
                          std::initializer_list<std::uint64_t> indices = {});

/// Pseudo-random stream with portable distributions.
///
/// The engine is std::mt19937_64 (fully specified by the standard). The
/// transforms below are written out explicitly because the standard library
/// distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in (0, 1): never returns exactly 0 or 1.
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Standard Gumbel draw, -log(-log U).
  double gumbel();
  /// Logistic draw expressed as the difference of two standard Gumbel draws.
  double logistic() { return gumbel() - gumbel(); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace primroute
