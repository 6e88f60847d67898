#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "primroute/elicitation.hpp"
#include "primroute/rng.hpp"
#include "primroute/tensor.hpp"

namespace primroute {

enum class StrengthHead { kClip, kSigmoid };

struct RouterConfig {
  std::size_t input_dim = 64;
  std::size_t bottleneck = 32;
  std::size_t num_primitives = 6;
  double tau = 0.7;
  double alpha_max = 2.0;
  StrengthHead strength_head = StrengthHead::kClip;
  /// Hard gates in the forward pass with relaxed-gate gradients.
  bool straight_through = false;

  void validate() const;
};

enum class RouteMode { kInfer, kTrain };

struct RoutingDecision {
  std::vector<double> p;      // gate probabilities
  std::vector<double> w;      // hard gates (infer) or relaxed gates (train)
  std::vector<double> alpha;  // strengths in [0, alpha_max]
  RouteMode mode = RouteMode::kInfer;
};

/// Differentiable router outputs for a batch of hiddens.
struct RouterTape {
  Tensor gate_logits;   // [n x K]
  Tensor strength_raw;  // [n x K]
  Tensor p;             // sigmoid(gate_logits)
  Tensor alpha;         // bounded strengths
};

/// sigmoid((logit + noise) / temperature); noise is one logistic draw
/// (difference of two standard Gumbel draws).
double gumbel_sigmoid(double logit, double temperature, double noise);
double gumbel_sigmoid(double logit, double temperature, Rng& rng);
/// Tape version over a tensor of logits with per-entry noise.
Tensor gumbel_sigmoid(const Tensor& logits, double temperature, std::span<const double> noise);

/// Bottleneck MLP: standardize(h) -> Linear(d, b) -> GELU -> {gate head, strength head}.
class Router {
 public:
  static Router initialize(const RouterConfig& config, std::uint64_t seed);

  const RouterConfig& config() const { return config_; }
  RouterConfig& mutable_config() { return config_; }
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Forward on the tape for hiddens given as [n x d].
  RouterTape forward(const Tensor& hiddens) const;

  /// Infer mode: w_i = 1 iff p_i > tau. Train mode: w_i is a Gumbel-Sigmoid
  /// sample at `temperature` from a stream seeded by `seed`. Throws
  /// NumericError on non-finite head outputs.
  RoutingDecision route(std::span<const double> hidden, RouteMode mode = RouteMode::kInfer, std::uint64_t seed = 0,
                        double temperature = 1.0) const;

  std::uint64_t library_hash() const { return library_hash_; }
  void set_library_hash(std::uint64_t h) { library_hash_ = h; }

  /// Rounds weights to binary32 (the stored precision) and writes the checkpoint.
  void save(const std::filesystem::path& path);
  /// Throws ProvenanceError when the stored library hash differs unless allow_mismatch.
  static Router load(const std::filesystem::path& path, std::uint64_t expected_library_hash,
                     bool allow_mismatch = false);

 private:
  RouterConfig config_;
  Tensor w1_, b1_, w_gate_, b_gate_, w_strength_, b_strength_;
  std::uint64_t library_hash_ = 0;
};

/// v_inject = sum_i w_i * alpha_i * v_i. Throws DimensionError on a K mismatch.
std::vector<double> compose(const RoutingDecision& decision, const PrimitiveLibrary& library);
/// Tape version: gates and alpha are [1 x K]; returns [1 x d].
Tensor compose(const Tensor& gates, const Tensor& alpha, const PrimitiveLibrary& library);

/// h + v_inject. Throws DimensionError on a length mismatch.
std::vector<double> inject(std::span<const double> h, std::span<const double> v_inject);

/// Keeps only the primitive with the largest w_i * alpha_i (lowest index on ties).
RoutingDecision top1_only(const RoutingDecision& decision);

/// Library rows as a constant [K x d] tensor.
Tensor library_matrix(const PrimitiveLibrary& library);

}  // namespace primroute
