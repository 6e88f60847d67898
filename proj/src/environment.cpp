#include "primroute/environment.hpp"

#include <algorithm>
#include <cmath>

#include "primroute/errors.hpp"

namespace primroute {

namespace {

std::size_t longest_answer() {
  std::size_t n = 0;
  for (Skill s : kAllSkills) n = std::max(n, SkillSpec{s}.answer_length());
  return n;
}

/// Lowest-index argmax, matching greedy decoding.
int argmax(std::span<const double> x) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = i;
  return static_cast<int>(best);
}

/// Splits a flat [n] tensor into consecutive pieces of the given lengths.
std::vector<Tensor> split_flat(const Tensor& flat, std::span<const std::size_t> lengths) {
  const Tensor col = reshape(flat, {flat.numel(), 1});
  std::vector<Tensor> out;
  std::size_t begin = 0;
  for (std::size_t n : lengths) {
    out.push_back(reshape(slice_rows(col, begin, begin + n), {n}));
    begin += n;
  }
  return out;
}

void check_injections(std::span<const Rollout> rollouts, std::span<const Tensor> injections, std::size_t d) {
  if (rollouts.size() != injections.size()) throw DimensionError("token_log_probs: one injection per rollout");
  for (const auto& v : injections) {
    if (v.numel() != d) throw DimensionError("token_log_probs: injection must have " + std::to_string(d) + " entries");
  }
  for (const auto& r : rollouts) {
    if (r.tokens.empty()) throw DimensionError("token_log_probs: empty rollout");
  }
}

class TransformerScorer final : public CandidateScorer {
 public:
  TransformerScorer(const Model& model, std::size_t layer, const TaskInstance& instance)
      : decoder_(prefill(model, instance.prompt, layer)) {
    targets_ = instance.gold;
    targets_.push_back(vocab::kEos);
    Token next = instance.prompt.back();
    for (Token t : targets_) {
      rows_.push_back(decoder_.lower(next));
      next = t;
    }
    mark_ = decoder_.mark();
  }

  CandidateScore score(std::span<const double> injection) override {
    CandidateScore s;
    s.correct = true;
    std::vector<double> h;
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      h = rows_[r];
      for (std::size_t i = 0; i < h.size(); ++i) h[i] += injection[i];
      const auto logits = decoder_.upper(h);
      if (argmax(logits) != targets_[r]) s.correct = false;
      s.confidence += token_log_prob(logits, targets_[r]);
    }
    decoder_.rollback(mark_);
    return s;
  }

 private:
  Decoder decoder_;
  Tokens targets_;
  std::vector<std::vector<double>> rows_;
  Decoder::Mark mark_;
};

}  // namespace

TransformerEnvironment::TransformerEnvironment(const Model& model, std::size_t layer,
                                               std::vector<TaskInstance> instances)
    : model_(&model), layer_(layer), instances_(std::move(instances)) {
  if (layer < 1 || layer >= model.config().num_layers) {
    throw DimensionError("environment: layer " + std::to_string(layer) + " outside [1, " +
                         std::to_string(model.config().num_layers - 1) + "]");
  }
  inputs_.reserve(instances_.size());
  for (const auto& inst : instances_) inputs_.push_back(forward_to_layer(model, inst.prompt, layer).hidden);
}

std::size_t TransformerEnvironment::hidden_dim() const { return model_->config().model_dim; }

std::size_t TransformerEnvironment::max_steps(std::size_t) const {
  static const std::size_t steps = longest_answer() + 1;
  return steps;
}

std::vector<double> TransformerEnvironment::router_input(std::size_t prompt) const { return inputs_.at(prompt); }

Rollout TransformerEnvironment::sample(std::size_t prompt, std::span<const double> injection, double temperature,
                                       std::uint64_t seed) const {
  const auto& inst = instances_.at(prompt);
  Decoder dec = prefill(*model_, inst.prompt, layer_);
  const std::vector<double> steer(injection.begin(), injection.end());
  const auto g = generate_from(dec, inst.prompt.back(), &steer, max_steps(prompt),
                               Sampling::with_temperature(temperature), seed);
  Rollout r;
  r.tokens = g.tokens;
  r.log_probs = g.log_probs;
  const std::size_t first = inst.prompt.size() - 1;
  for (std::size_t t = 0; t < g.tokens.size(); ++t) {
    const auto h = dec.split_hidden(first + t);
    r.step_inputs.insert(r.step_inputs.end(), h.begin(), h.end());
  }
  return r;
}

double TransformerEnvironment::reward(std::size_t prompt, const Rollout& rollout) const {
  return verify(rollout.tokens, instances_.at(prompt)) == 1 ? 1.0 : 0.0;
}

std::vector<Tensor> TransformerEnvironment::token_log_probs(std::size_t prompt, std::span<const Rollout> rollouts,
                                                            std::span<const Tensor> injections,
                                                            double temperature) const {
  const std::size_t d = hidden_dim();
  check_injections(rollouts, injections, d);
  const auto& inst = instances_.at(prompt);
  // The prompt prefix is unaffected by the injection; its upper-layer keys and
  // values enter the tape as constants shared by every rollout.
  const Decoder dec = prefill(*model_, inst.prompt, layer_);
  const std::size_t prefix = inst.prompt.size() - 1;

  AttentionLayout layout;
  for (std::size_t j = 0; j < prefix; ++j) {
    layout.key_segment.push_back(AttentionLayout::kSharedSegment);
    layout.key_position.push_back(static_cast<int>(j));
  }
  std::vector<Tensor> parts;
  std::vector<int> targets;
  std::vector<std::size_t> lengths;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    const auto& r = rollouts[i];
    const std::size_t n = r.tokens.size();
    if (r.step_inputs.size() != n * d) throw DimensionError("token_log_probs: rollout step inputs do not match tokens");
    parts.push_back(add(Tensor::matrix(n, d, r.step_inputs), reshape(injections[i], {1, d})));
    for (std::size_t t = 0; t < n; ++t) {
      const int pos = static_cast<int>(prefix + t);
      layout.query_segment.push_back(static_cast<int>(i));
      layout.query_position.push_back(pos);
      layout.key_segment.push_back(static_cast<int>(i));
      layout.key_position.push_back(pos);
      targets.push_back(r.tokens[t]);
    }
    lengths.push_back(n);
  }
  Tensor x = concat_rows(parts);
  for (std::size_t l = layer_ + 1; l <= model_->config().num_layers; ++l) {
    if (prefix == 0) {
      x = model_->block(l, x, layout);
    } else {
      const Tensor pk = Tensor::matrix(prefix, d, dec.keys(l));
      const Tensor pv = Tensor::matrix(prefix, d, dec.values(l));
      x = model_->block(l, x, layout, &pk, &pv);
    }
  }
  const Tensor lp = log_softmax_rows(scale(model_->head(x), 1.0 / temperature));
  return split_flat(pick(lp, targets), lengths);
}

std::unique_ptr<CandidateScorer> TransformerEnvironment::scorer(std::size_t prompt) const {
  return std::make_unique<TransformerScorer>(*model_, layer_, instances_.at(prompt));
}

std::pair<Tokens, bool> TransformerEnvironment::greedy(std::size_t prompt, std::span<const double> injection) const {
  const auto& inst = instances_.at(prompt);
  const std::vector<double> steer(injection.begin(), injection.end());
  GenerateOptions opt;
  opt.layer = layer_;
  auto g = generate(*model_, inst.prompt, &steer, max_steps(prompt), Sampling::greedy_decoding(), 0, opt);
  const bool ok = verify(g.tokens, inst) == 1;
  return {std::move(g.tokens), ok};
}

// ---------------------------------------------------------------------------
// Planted environments.
// ---------------------------------------------------------------------------

namespace {

class PlantedScorer final : public CandidateScorer {
 public:
  PlantedScorer(const PlantedEnvironment& env, std::size_t prompt) : env_(env), prompt_(prompt) {}
  CandidateScore score(std::span<const double> injection) override {
    CandidateScore s;
    s.correct = true;
    for (double m : env_.margins(prompt_, injection)) {
      if (!(m > 0.0)) s.correct = false;
      // log sigmoid(m), stable for both signs.
      s.confidence += m >= 0 ? -std::log1p(std::exp(-m)) : m - std::log1p(std::exp(m));
    }
    return s;
  }

 private:
  const PlantedEnvironment& env_;
  std::size_t prompt_;
};

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

PlantedEnvironment::PlantedEnvironment(const PlantedConfig& config, std::vector<std::vector<std::size_t>> needs,
                                       std::uint64_t seed)
    : config_(config), needs_(std::move(needs)) {
  if (config.num_primitives == 0 || config.num_primitives > config.dim) {
    throw DimensionError("planted: need 0 < num_primitives <= dim");
  }
  if (needs_.empty() || config.num_prompts < needs_.size()) throw DimensionError("planted: bad group count");
  const std::size_t steps = needs_.front().size();
  for (const auto& g : needs_) {
    if (g.size() != steps || steps == 0) throw DimensionError("planted: every group needs the same step count");
    for (std::size_t i : g)
      if (i >= config.num_primitives) throw DimensionError("planted: needed primitive out of range");
  }
  Rng rng(derive_seed(seed, "planted"));
  // Orthonormal library by Gram-Schmidt on Gaussian draws.
  library_.layer = 0;
  for (std::size_t k = 0; k < config.num_primitives; ++k) {
    std::vector<double> v(config.dim);
    for (double& x : v) x = rng.normal();
    for (const auto& u : library_.vectors) {
      double dot = 0;
      for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * u[i];
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * u[i];
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    for (double& x : v) x /= n;
    library_.raw_centroids.push_back(v);
    library_.vectors.push_back(std::move(v));
  }
  std::vector<std::vector<double>> centers(needs_.size(), std::vector<double>(config.dim));
  for (auto& c : centers)
    for (double& x : c) x = rng.normal();
  for (std::size_t p = 0; p < config.num_prompts; ++p) {
    auto h = centers[p % centers.size()];
    for (double& x : h) x += config.input_noise * rng.normal();
    inputs_.push_back(std::move(h));
  }
}

PlantedEnvironment PlantedEnvironment::bandit(const PlantedConfig& config, std::size_t target, std::uint64_t seed) {
  return PlantedEnvironment(config, {{target}}, seed);
}

PlantedEnvironment PlantedEnvironment::composition(const PlantedConfig& config, std::uint64_t seed) {
  if (config.num_primitives < 4) throw DimensionError("planted composition: needs at least 4 primitives");
  return PlantedEnvironment(config, {{0, 1}, {2, 3}}, seed);
}

std::vector<double> PlantedEnvironment::margins(std::size_t prompt, std::span<const double> injection) const {
  if (injection.size() != config_.dim) throw DimensionError("planted: injection width mismatch");
  const auto& need = needs(prompt);
  std::vector<double> proj(config_.num_primitives);
  for (std::size_t k = 0; k < proj.size(); ++k) {
    double s = 0;
    for (std::size_t i = 0; i < config_.dim; ++i) s += injection[i] * library_.vectors[k][i];
    proj[k] = s;
  }
  std::vector<double> out;
  for (std::size_t step = 0; step < need.size(); ++step) {
    double m = proj[need[step]];
    for (std::size_t k = 0; k < proj.size(); ++k)
      if (std::find(need.begin(), need.end(), k) == need.end()) m -= config_.penalty * proj[k];
    out.push_back(config_.gain * m + config_.offset);
  }
  return out;
}

Rollout PlantedEnvironment::sample(std::size_t prompt, std::span<const double> injection, double temperature,
                                   std::uint64_t seed) const {
  Rng rng(seed);
  Rollout r;
  for (double m : margins(prompt, injection)) {
    const double p1 = sigmoid_scalar(m / temperature);
    const Token t = rng.uniform() < p1 ? 1 : 0;
    r.tokens.push_back(t);
    r.log_probs.push_back(std::log(t == 1 ? p1 : 1.0 - p1));
  }
  return r;
}

double PlantedEnvironment::reward(std::size_t prompt, const Rollout& rollout) const {
  if (rollout.tokens.size() != needs(prompt).size()) return 0.0;
  for (Token t : rollout.tokens)
    if (t != 1) return 0.0;
  return 1.0;
}

std::vector<Tensor> PlantedEnvironment::token_log_probs(std::size_t prompt, std::span<const Rollout> rollouts,
                                                        std::span<const Tensor> injections, double temperature) const {
  check_injections(rollouts, injections, config_.dim);
  const auto& need = needs(prompt);
  const std::size_t k = config_.num_primitives, steps = need.size();
  std::vector<double> lib(k * config_.dim);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < config_.dim; ++i) lib[i * k + j] = library_.vectors[j][i];
  // Coefficients mapping projections to per-step margins, [K x steps].
  std::vector<double> coef(k * steps, 0.0);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t j = 0; j < k; ++j) {
      const bool needed = std::find(need.begin(), need.end(), j) != need.end();
      if (!needed) coef[j * steps + s] = -config_.gain * config_.penalty;
    }
    coef[need[s] * steps + s] = config_.gain;
  }
  const Tensor u = Tensor::matrix(config_.dim, k, lib);
  const Tensor c = Tensor::matrix(k, steps, coef);
  const Tensor second = Tensor::matrix(1, 2, {0.0, 1.0});
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    if (rollouts[i].tokens.size() != steps) throw DimensionError("planted: rollout length mismatch");
    const Tensor m = add_scalar(matmul(matmul(reshape(injections[i], {1, config_.dim}), u), c), config_.offset);
    const Tensor logits = mul(reshape(m, {steps, 1}), second);
    const Tensor lp = log_softmax_rows(scale(logits, 1.0 / temperature));
    out.push_back(pick(lp, rollouts[i].tokens));
  }
  return out;
}

std::unique_ptr<CandidateScorer> PlantedEnvironment::scorer(std::size_t prompt) const {
  return std::make_unique<PlantedScorer>(*this, prompt);
}

std::pair<Tokens, bool> PlantedEnvironment::greedy(std::size_t prompt, std::span<const double> injection) const {
  Tokens t;
  bool ok = true;
  for (double m : margins(prompt, injection)) {
    t.push_back(m > 0.0 ? 1 : 0);
    ok = ok && m > 0.0;
  }
  return {t, ok};
}

}  // namespace primroute
