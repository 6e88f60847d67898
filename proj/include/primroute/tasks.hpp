#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "primroute/vocab.hpp"

namespace primroute {

enum class Skill { kArithmetic, kReversal, kParity, kComparison, kLookup, kPattern };
inline constexpr int kNumSkills = 6;
inline constexpr std::array<Skill, kNumSkills> kAllSkills = {Skill::kArithmetic, Skill::kReversal, Skill::kParity,
                                                            Skill::kComparison, Skill::kLookup, Skill::kPattern};

std::string_view skill_name(Skill skill);
Skill skill_from_name(std::string_view name);
inline int skill_index(Skill skill) { return static_cast<int>(skill); }

enum class Split { kTrain, kEval };

/// Static description of a family: payload grammar sizes and the seed split.
struct SkillSpec {
  Skill skill = Skill::kArithmetic;
  /// Fraction of the instance-seed range reserved for training; the rest is eval.
  double train_fraction = 0.75;

  /// Number of distinct question payloads (operands only).
  std::uint64_t payload_count() const;
  /// payload_count() times the filler combinations.
  std::uint64_t instance_space() const;
  /// Half-open instance-seed range of a split.
  std::pair<std::uint64_t, std::uint64_t> seed_range(Split split) const;
  /// Answer length in tokens, excluding the end marker.
  std::size_t answer_length() const;
  double chance_accuracy() const;
};

struct TaskInstance {
  Skill skill = Skill::kArithmetic;
  std::uint64_t seed = 0;
  /// <s> FAMILY filler filler operands... =
  Tokens prompt;
  Tokens gold;
  /// The shortcut answer the autopilot mode produces.
  Tokens heuristic;
  /// True when a distractor filler is present.
  bool distracted = false;
};

/// Deterministic decode of one instance from its seed (seed < instance_space()).
TaskInstance make_instance(Skill skill, std::uint64_t seed);

/// n distinct instances drawn without replacement from the split's seed range,
/// reproducible under `seed`. Throws DataError when n exceeds the range.
std::vector<TaskInstance> generate_tasks(const SkillSpec& spec, std::size_t n, std::uint64_t seed, Split split);

/// Everything up to (not including) the first end marker.
Tokens extract_answer(std::span<const Token> generation);

/// 1 iff the extracted answer equals gold.
int verify(std::span<const Token> answer, const TaskInstance& instance);

/// Inserts a framing token right after <s>. Throws DataError if already framed.
Tokens with_frame(std::span<const Token> prompt, Token frame);

struct ContrastPair {
  TaskInstance instance;
  int variant = 0;
  Tokens positive_prompt;
  Tokens negative_prompt;
};

/// Framed positive/negative prompts around the same question. Throws DataError
/// on an already-framed prompt or if the framed prompt exceeds max_context.
ContrastPair make_contrast_pair(const TaskInstance& instance, int variant, std::size_t max_context);

/// Removes the framing token (if any); used to check payload identity.
Tokens strip_frame(std::span<const Token> prompt);

struct FilterVerdict {
  bool accepted = false;
  std::string reason;
};

struct FilterBand {
  double min_ratio = 0.5;
  double max_ratio = 2.0;
};

/// Accepts iff the positive generation is correct, the negative one is wrong,
/// and their lengths are within the band of each other.
FilterVerdict quality_filter(std::span<const Token> positive_generation, std::span<const Token> negative_generation,
                             const TaskInstance& instance, const FilterBand& band = {});

/// One JSON object per line: skill, seed, prompt, gold.
std::string dump_tasks(const std::vector<TaskInstance>& tasks);
std::vector<TaskInstance> parse_task_dump(std::string_view text);

}  // namespace primroute
