#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "primroute/tensor.hpp"

namespace primroute {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, Adam only
  double grad_clip = 0.0;     // global L2 norm; 0 disables
};

/// First-order optimizer over a fixed list of leaf tensors. Moment estimates
/// persist across step() calls.
class Optimizer {
 public:
  Optimizer(std::vector<Tensor> params, OptimizerConfig config);

  /// Applies one update from the parameters' current gradients. Throws
  /// NumericError naming the parameter if any gradient entry is non-finite;
  /// in that case no parameter is modified. Returns the pre-clip gradient norm.
  double step();
  void zero_grad();

  void set_lr(double lr) { config_.lr = lr; }
  const OptimizerConfig& config() const { return config_; }
  std::size_t steps_taken() const { return steps_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

/// Stateless single update of `params` from `grads`: plain SGD, or the first
/// step of Adam from zero moments. Throws NumericError on non-finite gradients.
void optimizer_step(std::span<double> params, std::span<const double> grads, const OptimizerConfig& config);

}  // namespace primroute
