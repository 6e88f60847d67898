#include "primroute/optim.hpp"

#include <cmath>

#include "primroute/errors.hpp"

namespace primroute {

Optimizer::Optimizer(std::vector<Tensor> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  for (const auto& p : params_) {
    if (!p.defined() || !p.is_leaf()) throw std::invalid_argument("Optimizer: parameters must be leaf tensors");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double Optimizer::step() {
  double sq = 0.0;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(i) + " " +
                           shape_string(params_[i].shape()) + " at entry " + std::to_string(j));
      }
      sq += g[j] * g[j];
    }
  }
  const double norm = std::sqrt(sq);
  const double clip = (config_.grad_clip > 0 && norm > config_.grad_clip) ? config_.grad_clip / norm : 1.0;
  ++steps_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    auto w = params_[i].mutable_values();
    if (config_.kind == OptimizerKind::kSgd) {
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= config_.lr * clip * g[j];
      continue;
    }
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
      w[j] -= config_.lr * (update + config_.weight_decay * w[j]);
    }
  }
  return norm;
}

void optimizer_step(std::span<double> params, std::span<const double> grads, const OptimizerConfig& config) {
  if (params.size() != grads.size()) throw DimensionError("optimizer_step: params and grads differ in length");
  for (std::size_t j = 0; j < grads.size(); ++j) {
    if (!std::isfinite(grads[j])) throw NumericError("optimizer_step: non-finite gradient at entry " + std::to_string(j));
  }
  if (config.kind == OptimizerKind::kSgd) {
    for (std::size_t j = 0; j < params.size(); ++j) params[j] -= config.lr * grads[j];
    return;
  }
  // First Adam step with zero moments reduces to lr * g / (|g| + eps).
  for (std::size_t j = 0; j < params.size(); ++j) params[j] -= config.lr * grads[j] / (std::abs(grads[j]) + config.eps);
}

}  // namespace primroute
