#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "primroute/model.hpp"
#include "primroute/tasks.hpp"

namespace primroute {

struct PretrainConfig {
  std::size_t steps = 1200;
  std::size_t batch_size = 48;
  double lr = 3e-3;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  /// Share of training sequences carrying a framing prefix (split evenly
  /// between rigorous and autopilot frames).
  double framed_fraction = 0.5;
};

/// One pretraining sequence: a (possibly framed) prompt followed by its target.
struct PretrainSample {
  Tokens prompt;
  Tokens target;  // answer tokens then the end marker
};

/// Target rule: rigorous frame -> gold, autopilot frame -> heuristic,
/// unframed -> gold unless a distractor filler is present.
PretrainSample make_pretrain_sample(const TaskInstance& instance, Token frame_or_minus_one);

struct PretrainProgress {
  std::size_t step = 0;
  double loss = 0.0;
};

/// Trains from a seeded init on train-split instances of every family and
/// returns the frozen model. budget 0 returns the frozen random init.
Model pretrain(const ModelConfig& config, const PretrainConfig& pcfg, std::uint64_t seed,
               std::vector<double>* loss_curve = nullptr,
               const std::function<void(const PretrainProgress&)>& on_progress = {});

struct HeadroomReport {
  std::array<double, kNumSkills> accuracy{};
  std::array<double, kNumSkills> chance{};
  bool ok = true;
  std::string summary;
};

/// Greedy accuracy per family on the given instances (unframed prompts).
double greedy_accuracy(const Model& model, const std::vector<TaskInstance>& tasks);

/// Requires every family strictly inside (chance + margin, ceiling).
HeadroomReport check_headroom(const Model& model, const std::array<std::vector<TaskInstance>, kNumSkills>& eval_sets,
                              double margin = 0.10, double ceiling = 0.95);

}  // namespace primroute
