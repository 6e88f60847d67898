#include "primroute/evaluation.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "primroute/binary_io.hpp"
#include "primroute/errors.hpp"
#include "primroute/inference.hpp"
#include "primroute/parallel.hpp"

namespace primroute {

namespace {

constexpr std::array<std::pair<Condition, std::string_view>, 8> kConditionNames = {{
    {Condition::kBase, "base"},
    {Condition::kRouted, "routed"},
    {Condition::kSftOnly, "sft-only"},
    {Condition::kTop1Only, "top1-only"},
    {Condition::kLayerAlt, "layer-alt"},
    {Condition::kStaticAlpha, "static"},
    {Condition::kKVariant, "k-variant"},
    {Condition::kPrompted, "prompted"},
}};

bool is_routed(Condition c) {
  return c == Condition::kRouted || c == Condition::kSftOnly || c == Condition::kTop1Only ||
         c == Condition::kLayerAlt || c == Condition::kKVariant;
}

struct InstanceOutcome {
  bool correct = false;
  std::size_t tokens = 0;
  std::vector<double> strength;
};

}  // namespace

std::string_view condition_name(Condition condition) {
  for (const auto& [c, n] : kConditionNames)
    if (c == condition) return n;
  throw std::invalid_argument("unknown condition");
}

Condition condition_from_name(std::string_view name) {
  for (const auto& [c, n] : kConditionNames)
    if (n == name) return c;
  throw std::invalid_argument("unknown condition '" + std::string(name) + "'");
}

double EvalResult::mean_accuracy() const {
  double s = 0;
  for (double a : accuracy) s += a;
  return s / kNumSkills;
}

double EvalResult::mean_token_count() const {
  double s = 0;
  for (double t : mean_tokens) s += t;
  return s / kNumSkills;
}

std::size_t eval_max_steps() {
  std::size_t n = 0;
  for (Skill s : kAllSkills) n = std::max(n, SkillSpec{s}.answer_length());
  return n + 1;
}

EvalResult evaluate(const Model& model, const Router* router, const PrimitiveLibrary* library, const EvalSets& sets,
                    Condition condition, std::uint64_t seed, const EvalOptions& options) {
  const bool routed = is_routed(condition);
  if ((routed && (router == nullptr || library == nullptr)) ||
      (condition == Condition::kStaticAlpha && library == nullptr)) {
    throw std::invalid_argument("evaluate: condition '" + std::string(condition_name(condition)) +
                                "' needs a router and/or library");
  }
  if (library != nullptr && (routed || condition == Condition::kStaticAlpha)) {
    if (library->model_fingerprint != model.fingerprint()) {
      throw ProvenanceError("evaluate: library was elicited from model " + hex64(library->model_fingerprint) +
                            ", not " + hex64(model.fingerprint()));
    }
    if (library->dim() != model.config().model_dim) throw DimensionError("evaluate: library width differs from model");
  }
  if (routed && router->library_hash() != library->hash()) {
    throw ProvenanceError("evaluate: router was trained against library " + hex64(router->library_hash()) +
                          ", not " + hex64(library->hash()));
  }
  if (condition == Condition::kStaticAlpha && options.static_index >= library->size()) {
    throw std::invalid_argument("evaluate: static primitive index out of range");
  }

  EvalResult result;
  result.condition = condition;
  result.label = options.label.empty() ? std::string(condition_name(condition)) : options.label;
  result.seed = seed;
  result.config_hash = options.config_hash;
  const std::size_t k = library != nullptr ? library->size() : 0;
  if (routed) result.strength.assign(kNumSkills, std::vector<double>(k, 0.0));
  const std::size_t steps = eval_max_steps();

  std::vector<double> static_vector;
  if (condition == Condition::kStaticAlpha) {
    static_vector = library->vectors[options.static_index];
    for (double& x : static_vector) x *= options.static_alpha;
  }

  for (Skill skill : kAllSkills) {
    const auto& tasks = sets[skill_index(skill)];
    if (tasks.empty()) throw DataError("evaluate: empty task set for " + std::string(skill_name(skill)));
    std::vector<InstanceOutcome> outcomes(tasks.size());
    parallel_for(tasks.size(), [&](std::size_t i) {
      const auto& inst = tasks[i];
      InstanceOutcome& out = outcomes[i];
      GenerationResult g;
      if (condition == Condition::kBase) {
        g = generate(model, inst.prompt, nullptr, steps, Sampling::greedy_decoding());
      } else if (condition == Condition::kPrompted) {
        const Tokens framed = with_frame(inst.prompt, vocab::positive_frame(0));
        g = generate(model, framed, nullptr, steps, Sampling::greedy_decoding());
      } else {
        std::vector<double> v;
        if (routed) {
          Decoder dec = prefill(model, inst.prompt, library->layer);
          const auto mark = dec.mark();
          const auto h = dec.lower(inst.prompt.back());
          dec.rollback(mark);
          RoutingDecision decision = router->route(h);
          if (condition == Condition::kTop1Only) decision = top1_only(decision);
          v = compose(decision, *library);
          out.strength.resize(k);
          for (std::size_t j = 0; j < k; ++j) out.strength[j] = decision.w[j] * decision.alpha[j];
          g = generate_from(dec, inst.prompt.back(), &v, steps, Sampling::greedy_decoding());
        } else {
          GenerateOptions opt;
          opt.layer = library->layer;
          g = generate(model, inst.prompt, &static_vector, steps, Sampling::greedy_decoding(), 0, opt);
        }
      }
      out.correct = verify(g.tokens, inst) == 1;
      out.tokens = g.count;
    });
    const int f = skill_index(skill);
    double correct = 0, tokens = 0;
    for (const auto& o : outcomes) {
      correct += o.correct ? 1.0 : 0.0;
      tokens += static_cast<double>(o.tokens);
      if (routed)
        for (std::size_t j = 0; j < k; ++j) result.strength[f][j] += o.strength[j];
    }
    const double n = static_cast<double>(tasks.size());
    result.accuracy[f] = correct / n;
    result.mean_tokens[f] = tokens / n;
    if (routed)
      for (double& s : result.strength[f]) s /= n;
  }
  return result;
}

std::vector<std::vector<double>> routing_heatmap(const Model& model, const Router& router,
                                                 const PrimitiveLibrary& library, const EvalSets& sets) {
  const std::size_t k = library.size();
  std::vector<std::vector<double>> out(kNumSkills, std::vector<double>(k, 0.0));
  for (Skill skill : kAllSkills) {
    const auto& tasks = sets[skill_index(skill)];
    if (tasks.empty()) continue;
    std::vector<std::vector<double>> rows(tasks.size());
    parallel_for(tasks.size(), [&](std::size_t i) {
      const auto h = forward_to_layer(model, tasks[i].prompt, library.layer).hidden;
      const auto d = router.route(h);
      rows[i].resize(k);
      for (std::size_t j = 0; j < k; ++j) rows[i][j] = d.w[j] * d.alpha[j];
    });
    auto& row = out[skill_index(skill)];
    for (const auto& r : rows)
      for (std::size_t j = 0; j < k; ++j) row[j] += r[j];
    for (double& x : row) x /= static_cast<double>(tasks.size());
  }
  return out;
}

void assert_no_leakage(const EvalSets& eval, const std::vector<TaskInstance>& training) {
  std::set<std::pair<int, std::uint64_t>> seen;
  for (const auto& t : training) seen.insert({skill_index(t.skill), t.seed});
  for (const auto& set : eval) {
    for (const auto& t : set) {
      if (seen.count({skill_index(t.skill), t.seed})) {
        throw DataError("evaluation instance " + std::string(skill_name(t.skill)) + "#" + std::to_string(t.seed) +
                        " also appears in training data");
      }
    }
  }
}

}  // namespace primroute
