#include "primroute/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "primroute/errors.hpp"
#include "primroute/rng.hpp"

namespace primroute {

namespace {

constexpr std::uint64_t kFillerCombos = vocab::kNumFillers * vocab::kNumFillers;

int fact_of(int key) { return (7 * key + 3) % 10; }
int shortcut_fact_of(int key) { return key % 10; }

/// Bijection on [0, n): x -> (a*x + c) mod n with gcd(a, n) = 1.
std::uint64_t permute(std::uint64_t x, std::uint64_t n) {
  std::uint64_t a = 0x9E3779B1ULL % n;
  if (a == 0) a = 1;
  while (std::gcd(a, n) != 1) ++a;
  const std::uint64_t c = 0x7F4A7C15ULL % n;
  return static_cast<std::uint64_t>((static_cast<unsigned __int128>(a) * x + c) % n);
}

struct Payload {
  Tokens operands;
  Tokens gold;
  Tokens heuristic;
};

Payload decode_payload(Skill skill, std::uint64_t p) {
  using vocab::digit;
  using vocab::letter;
  Payload out;
  switch (skill) {
    case Skill::kArithmetic: {
      const int a = static_cast<int>(p / 5), b = static_cast<int>(p % 5);
      out.operands = {digit(a), digit(b)};
      out.gold = {digit(a + b)};
      out.heuristic = {digit(b)};
      break;
    }
    case Skill::kReversal: {
      const int x = static_cast<int>(p / 36), y = static_cast<int>(p / 6 % 6), z = static_cast<int>(p % 6);
      out.operands = {letter(x), letter(y), letter(z)};
      out.gold = {letter(z), letter(y), letter(x)};
      out.heuristic = out.operands;
      break;
    }
    case Skill::kParity: {
      int x = 0;
      for (int i = 2; i >= 0; --i) {
        const int bit = static_cast<int>(p >> i & 1);
        out.operands.push_back(digit(bit));
        x ^= bit;
      }
      out.gold = {digit(x)};
      out.heuristic = {out.operands.back()};
      break;
    }
    case Skill::kComparison: {
      // Ordered pairs of distinct digits.
      const int a = static_cast<int>(p / 9);
      int b = static_cast<int>(p % 9);
      if (b >= a) ++b;
      out.operands = {digit(a), digit(b)};
      out.gold = {digit(std::max(a, b))};
      out.heuristic = {digit(a)};
      break;
    }
    case Skill::kLookup: {
      const int k = static_cast<int>(p);
      out.operands = {letter(k)};
      out.gold = {digit(fact_of(k))};
      out.heuristic = {digit(shortcut_fact_of(k))};
      break;
    }
    case Skill::kPattern: {
      const int a = static_cast<int>(p / 2), s = static_cast<int>(p % 2) + 1;
      out.operands = {digit(a), digit((a + s) % 10), digit((a + 2 * s) % 10)};
      out.gold = {digit((a + 3 * s) % 10)};
      out.heuristic = {digit((a + 2 * s) % 10)};
      break;
    }
  }
  return out;
}

}  // namespace

std::string_view skill_name(Skill skill) {
  switch (skill) {
    case Skill::kArithmetic: return "arithmetic";
    case Skill::kReversal: return "reversal";
    case Skill::kParity: return "parity";
    case Skill::kComparison: return "comparison";
    case Skill::kLookup: return "lookup";
    case Skill::kPattern: return "pattern";
  }
  return "?";
}

Skill skill_from_name(std::string_view name) {
  for (Skill s : kAllSkills) {
    if (skill_name(s) == name) return s;
  }
  throw DataError("unknown skill family '" + std::string(name) + "'");
}

std::uint64_t SkillSpec::payload_count() const {
  switch (skill) {
    case Skill::kArithmetic: return 25;
    case Skill::kReversal: return 216;
    case Skill::kParity: return 8;
    case Skill::kComparison: return 90;
    case Skill::kLookup: return vocab::kNumLetters;
    case Skill::kPattern: return 20;
  }
  return 0;
}

std::uint64_t SkillSpec::instance_space() const { return payload_count() * kFillerCombos; }

std::pair<std::uint64_t, std::uint64_t> SkillSpec::seed_range(Split split) const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw DataError("train_fraction must lie in (0, 1)");
  const std::uint64_t n = instance_space();
  const auto cut = static_cast<std::uint64_t>(static_cast<double>(n) * train_fraction);
  return split == Split::kTrain ? std::pair{std::uint64_t{0}, cut} : std::pair{cut, n};
}

std::size_t SkillSpec::answer_length() const { return skill == Skill::kReversal ? 3 : 1; }

double SkillSpec::chance_accuracy() const {
  switch (skill) {
    case Skill::kReversal: return 1.0 / 216.0;
    case Skill::kParity: return 0.5;
    default: return 0.1;
  }
}

TaskInstance make_instance(Skill skill, std::uint64_t seed) {
  const SkillSpec spec{skill};
  const std::uint64_t n = spec.instance_space();
  if (seed >= n) throw DataError("instance seed " + std::to_string(seed) + " outside space of " + std::to_string(n));
  const std::uint64_t idx = permute(seed, n);
  const std::uint64_t filler = idx % kFillerCombos;
  auto payload = decode_payload(skill, idx / kFillerCombos);

  TaskInstance inst;
  inst.skill = skill;
  inst.seed = seed;
  const Token f1 = vocab::filler(static_cast<int>(filler / vocab::kNumFillers));
  const Token f2 = vocab::filler(static_cast<int>(filler % vocab::kNumFillers));
  inst.prompt = {vocab::kBos, vocab::kSkillBase + skill_index(skill), f1, f2};
  inst.prompt.insert(inst.prompt.end(), payload.operands.begin(), payload.operands.end());
  inst.prompt.push_back(vocab::kEquals);
  inst.gold = std::move(payload.gold);
  inst.heuristic = std::move(payload.heuristic);
  inst.distracted = vocab::is_distractor(f1) || vocab::is_distractor(f2);
  return inst;
}

std::vector<TaskInstance> generate_tasks(const SkillSpec& spec, std::size_t n, std::uint64_t seed, Split split) {
  if (n == 0) throw DataError("generate_tasks: n must be at least 1");
  const auto [lo, hi] = spec.seed_range(split);
  const std::uint64_t range = hi - lo;
  if (n > range) {
    throw DataError("generate_tasks: requested " + std::to_string(n) + " " + std::string(skill_name(spec.skill)) +
                    " instances but the " + (split == Split::kTrain ? "train" : "eval") + " range holds only " +
                    std::to_string(range));
  }
  // Partial Fisher-Yates over a virtual array [lo, hi).
  Rng rng(derive_seed(seed, "tasks", {static_cast<std::uint64_t>(skill_index(spec.skill)),
                                      static_cast<std::uint64_t>(split)}));
  std::unordered_map<std::uint64_t, std::uint64_t> swapped;
  auto slot = [&](std::uint64_t i) {
    auto it = swapped.find(i);
    return it == swapped.end() ? i : it->second;
  };
  std::vector<TaskInstance> out;
  out.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t j = i + rng.below(range - i);
    const std::uint64_t vi = slot(i), vj = slot(j);
    swapped[j] = vi;
    swapped[i] = vj;
    out.push_back(make_instance(spec.skill, lo + vj));
  }
  return out;
}

Tokens extract_answer(std::span<const Token> generation) {
  const auto end = std::find(generation.begin(), generation.end(), vocab::kEos);
  return Tokens(generation.begin(), end);
}

int verify(std::span<const Token> answer, const TaskInstance& instance) {
  const Tokens extracted = extract_answer(answer);
  return !extracted.empty() && extracted == instance.gold ? 1 : 0;
}

Tokens with_frame(std::span<const Token> prompt, Token frame) {
  if (prompt.empty() || prompt[0] != vocab::kBos) throw DataError("with_frame: prompt must start with <s>");
  if (prompt.size() > 1 && vocab::is_frame(prompt[1])) {
    throw DataError("with_frame: prompt already carries a framing prefix");
  }
  if (!vocab::is_frame(frame)) throw DataError("with_frame: token is not a framing prefix");
  Tokens out;
  out.reserve(prompt.size() + 1);
  out.push_back(prompt[0]);
  out.push_back(frame);
  out.insert(out.end(), prompt.begin() + 1, prompt.end());
  return out;
}

Tokens strip_frame(std::span<const Token> prompt) {
  Tokens out(prompt.begin(), prompt.end());
  if (out.size() > 1 && vocab::is_frame(out[1])) out.erase(out.begin() + 1);
  return out;
}

ContrastPair make_contrast_pair(const TaskInstance& instance, int variant, std::size_t max_context) {
  ContrastPair pair;
  pair.instance = instance;
  pair.variant = variant;
  pair.positive_prompt = with_frame(instance.prompt, vocab::positive_frame(variant));
  pair.negative_prompt = with_frame(instance.prompt, vocab::negative_frame(variant));
  const std::size_t need = pair.positive_prompt.size() + instance.gold.size() + 1;
  if (need > max_context) {
    throw DataError("make_contrast_pair: framed prompt plus answer needs " + std::to_string(need) +
                    " tokens, context holds " + std::to_string(max_context));
  }
  return pair;
}

FilterVerdict quality_filter(std::span<const Token> positive_generation, std::span<const Token> negative_generation,
                             const TaskInstance& instance, const FilterBand& band) {
  const bool pos_ok = verify(positive_generation, instance) == 1;
  const bool neg_ok = verify(negative_generation, instance) == 1;
  if (!pos_ok) return {false, "positive incorrect"};
  if (neg_ok) return {false, "no reasoning gap"};
  const double pos_len = static_cast<double>(positive_generation.size());
  const double neg_len = static_cast<double>(negative_generation.size());
  if (neg_len == 0.0) return {false, "structural parity"};
  const double ratio = neg_len / pos_len;
  if (ratio < band.min_ratio || ratio > band.max_ratio) return {false, "structural parity"};
  return {true, "accepted"};
}

std::string dump_tasks(const std::vector<TaskInstance>& tasks) {
  std::ostringstream os;
  for (const auto& t : tasks) {
    nlohmann::ordered_json j;
    j["skill"] = skill_name(t.skill);
    j["seed"] = t.seed;
    j["prompt"] = t.prompt;
    j["gold"] = t.gold;
    os << j.dump() << '\n';
  }
  return os.str();
}

std::vector<TaskInstance> parse_task_dump(std::string_view text) {
  std::vector<TaskInstance> out;
  std::istringstream is{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      auto inst = make_instance(skill_from_name(j.at("skill").get<std::string>()), j.at("seed").get<std::uint64_t>());
      if (j.at("prompt").get<Tokens>() != inst.prompt || j.at("gold").get<Tokens>() != inst.gold) {
        throw FormatError("record does not match its seed");
      }
      out.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw FormatError("task dump line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace primroute
