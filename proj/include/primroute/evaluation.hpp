#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "primroute/router.hpp"
#include "primroute/tasks.hpp"

namespace primroute {

using EvalSets = std::array<std::vector<TaskInstance>, kNumSkills>;

enum class Condition {
  kBase,
  kRouted,
  kSftOnly,
  kTop1Only,
  kLayerAlt,
  kStaticAlpha,
  kKVariant,
  /// Unsteered model with the rigorous frame prepended: the synthetic analogue
  /// of a verbose reasoning template.
  kPrompted,
};

std::string_view condition_name(Condition condition);
Condition condition_from_name(std::string_view name);

struct EvalResult {
  /// Row label; defaults to the condition name (e.g. "routed", "K=8", "layer-3").
  std::string label;
  Condition condition = Condition::kBase;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::array<double, kNumSkills> accuracy{};
  std::array<double, kNumSkills> mean_tokens{};
  /// Mean applied strength w_i * alpha_i per (family, primitive); empty when unsteered.
  std::vector<std::vector<double>> strength;

  double mean_accuracy() const;
  double mean_token_count() const;
};

struct EvalOptions {
  /// Overrides the default label.
  std::string label;
  std::uint64_t config_hash = 0;
  /// Static condition: v = static_alpha * v_{static_index}.
  std::size_t static_index = 0;
  double static_alpha = 1.0;
};

/// Decoding budget shared by every condition: the longest answer plus the end marker.
std::size_t eval_max_steps();

/// Greedy evaluation of one condition. Routed conditions (routed, sft-only,
/// top1-only, layer-l', K-variant) need a router and a library; static needs a
/// library. The router reads the last prompt token at the library's layer once
/// and the composed vector is re-added at every decoding step.
///
/// Throws std::invalid_argument for missing artifacts and ProvenanceError when
/// the library was not elicited from this model or the router was trained
/// against another library.
EvalResult evaluate(const Model& model, const Router* router, const PrimitiveLibrary* library, const EvalSets& sets,
                    Condition condition, std::uint64_t seed, const EvalOptions& options = {});

/// Entry (f, i) is the mean over family-f prompts of w_i * alpha_i at inference.
std::vector<std::vector<double>> routing_heatmap(const Model& model, const Router& router,
                                                 const PrimitiveLibrary& library, const EvalSets& sets);

/// Throws DataError when any evaluation seed also appears among training seeds.
void assert_no_leakage(const EvalSets& eval, const std::vector<TaskInstance>& training);

}  // namespace primroute
