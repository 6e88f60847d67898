#include "primroute/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "primroute/errors.hpp"

namespace primroute {

namespace {

std::vector<double> injection_for(const PrimitiveLibrary& library, std::span<const double> alpha) {
  std::vector<double> v(library.dim(), 0.0);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    if (alpha[i] == 0.0) continue;
    for (std::size_t c = 0; c < v.size(); ++c) v[c] += alpha[i] * library.vectors[i][c];
  }
  return v;
}

double l1(std::span<const double> a) {
  double s = 0;
  for (double x : a) s += std::abs(x);
  return s;
}

struct Candidate {
  std::vector<double> alpha;
  CandidateScore score;
};

/// True when a beats b under the oracle's preference order.
bool better(const Candidate& a, const Candidate& b) {
  if (a.score.correct != b.score.correct) return a.score.correct;
  if (a.score.confidence != b.score.confidence) return a.score.confidence > b.score.confidence;
  return l1(a.alpha) < l1(b.alpha);
}

}  // namespace

std::optional<OracleLabel> synthesize_oracle(const PolicyEnvironment& env, std::size_t prompt,
                                             const PrimitiveLibrary& library, double alpha_max,
                                             const OracleConfig& config) {
  const std::size_t k = library.size();
  if (k == 0) throw DimensionError("oracle: empty library");
  if (library.dim() != env.hidden_dim()) throw DimensionError("oracle: library width differs from the environment");
  if (!(config.alpha_step > 0)) throw std::invalid_argument("oracle: alpha_step must be positive");
  const double ratio = alpha_max / config.alpha_step;
  const auto levels = static_cast<std::size_t>(std::llround(ratio));
  if (levels == 0 || std::abs(ratio - static_cast<double>(levels)) > 1e-9) {
    throw std::invalid_argument("oracle: alpha_step must divide alpha_max evenly");
  }
  const std::size_t subset = std::min(std::max<std::size_t>(config.subset_size, 1), k);
  auto scorer = env.scorer(prompt);
  std::size_t evaluations = 0;
  auto grid = [&](std::size_t j) { return j == levels ? alpha_max : static_cast<double>(j) * config.alpha_step; };
  // The joint grid revisits single-primitive points; score each configuration once.
  std::map<std::vector<double>, CandidateScore> seen;
  auto score = [&](const std::vector<double>& alpha) {
    auto it = seen.find(alpha);
    if (it != seen.end()) return it->second;
    ++evaluations;
    return seen.emplace(alpha, scorer->score(injection_for(library, alpha))).first->second;
  };
  auto finish = [&](const Candidate& best) {
    OracleLabel label;
    label.prompt = prompt;
    label.alpha_star = best.alpha;
    label.w_star.resize(k);
    for (std::size_t i = 0; i < k; ++i) label.w_star[i] = best.alpha[i] > 0.0 ? 1.0 : 0.0;
    label.confidence = best.score.confidence;
    label.evaluations = evaluations;
    if (!env.greedy(prompt, injection_for(library, label.alpha_star)).second) {
      throw std::logic_error("oracle: label for prompt " + std::to_string(prompt) + " fails greedy replay");
    }
    return label;
  };

  if (config.prefer_null) {
    Candidate zero;
    zero.alpha.assign(k, 0.0);
    zero.score = score(zero.alpha);
    if (zero.score.correct) return finish(zero);
  }

  // Stage 1: each primitive alone.
  std::vector<Candidate> single_best(k);
  for (std::size_t i = 0; i < k; ++i) {
    single_best[i].score.correct = false;
    single_best[i].score.confidence = -INFINITY;
    for (std::size_t j = 1; j <= levels; ++j) {
      Candidate c;
      c.alpha.assign(k, 0.0);
      c.alpha[i] = grid(j);
      c.score = score(c.alpha);
      if (single_best[i].alpha.empty() || better(c, single_best[i])) single_best[i] = c;
    }
  }
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = single_best[a].score;
    const auto& y = single_best[b].score;
    if (x.correct != y.correct) return x.correct;
    return x.confidence > y.confidence;
  });
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(subset));
  std::sort(chosen.begin(), chosen.end());

  // Stage 2: joint grid over the chosen primitives, zero included.
  std::optional<Candidate> best;
  std::vector<std::size_t> idx(subset, 0);
  while (true) {
    Candidate c;
    c.alpha.assign(k, 0.0);
    for (std::size_t s = 0; s < subset; ++s) c.alpha[chosen[s]] = idx[s] == 0 ? 0.0 : grid(idx[s]);
    c.score = score(c.alpha);
    if (c.score.correct && (!best || better(c, *best))) best = c;
    std::size_t s = 0;
    while (s < subset && ++idx[s] > levels) idx[s++] = 0;
    if (s == subset) break;
  }
  if (!best) return std::nullopt;
  return finish(*best);
}

Tensor sft_loss(const Router& router, std::span<const SftSample> batch) {
  if (batch.empty()) throw DimensionError("sft_loss: empty batch");
  const std::size_t d = router.config().input_dim, k = router.config().num_primitives;
  std::vector<double> h, w, a;
  std::vector<int> cols;
  for (const auto& s : batch) {
    if (s.hidden.size() != d || s.w_star.size() != k || s.alpha_star.size() != k) {
      throw DimensionError("sft_loss: sample dimensions do not match the router");
    }
    h.insert(h.end(), s.hidden.begin(), s.hidden.end());
    w.insert(w.end(), s.w_star.begin(), s.w_star.end());
    a.insert(a.end(), s.alpha_star.begin(), s.alpha_star.end());
    for (double x : s.w_star) cols.push_back(x > 0.5 ? 0 : 1);
  }
  const std::size_t n = batch.size();
  const auto tape = router.forward(Tensor::matrix(n, d, h));
  // Columns (x, 0) give log sigmoid(x) and log sigmoid(-x) in one log-softmax.
  const Tensor pair = mul(reshape(tape.gate_logits, {n * k, 1}), Tensor::matrix(1, 2, {1.0, 0.0}));
  const Tensor bce = neg(sum(pick(log_softmax_rows(pair), cols)));
  const Tensor diff = sub(tape.alpha, Tensor::matrix(n, k, a));
  const Tensor mse = sum(mul(Tensor::matrix(n, k, w), mul(diff, diff)));
  return scale(add(bce, mse), 1.0 / static_cast<double>(n * k));
}

SftResult sft_train(Router& router, const std::vector<SftSample>& dataset, const SftConfig& config) {
  if (dataset.empty()) throw DataError("sft_train: empty dataset");
  if (config.batch_size == 0) throw std::invalid_argument("sft_train: batch_size must be positive");
  OptimizerConfig oc;
  oc.lr = config.lr;
  oc.grad_clip = 1.0;
  Optimizer opt(router.parameters(), oc);
  SftResult result;
  Rng rng(derive_seed(config.seed, "sft"));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      std::vector<SftSample> batch;
      for (std::size_t j = b; j < std::min(order.size(), b + config.batch_size); ++j) batch.push_back(dataset[order[j]]);
      std::vector<std::vector<double>> good;
      for (const auto& p : router.parameters()) good.emplace_back(p.values().begin(), p.values().end());
      const Tensor loss = sft_loss(router, batch);
      auto restore = [&] {
        auto params = router.parameters();
        for (std::size_t i = 0; i < params.size(); ++i) std::copy(good[i].begin(), good[i].end(), params[i].mutable_values().begin());
      };
      if (!std::isfinite(loss.item())) {
        restore();
        throw NumericError("sft_train: non-finite loss at epoch " + std::to_string(epoch));
      }
      opt.zero_grad();
      backward(loss);
      try {
        opt.step();
      } catch (const NumericError&) {
        restore();
        throw;
      }
      total += loss.item() * static_cast<double>(batch.size());
    }
    result.loss_curve.push_back(total / static_cast<double>(dataset.size()));
  }
  return result;
}

std::vector<double> compute_advantages(std::span<const double> rewards, double eps) {
  if (rewards.size() < 2) throw std::invalid_argument("compute_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd == 0.0) return a;
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = (rewards[i] - mean) / (sd + eps);
  return a;
}

double kl_regularizer(std::span<const double> routed, std::span<const double> base, bool* floored) {
  if (routed.size() != base.size() || routed.empty()) throw DimensionError("kl_regularizer: step counts differ");
  const double floor_lp = std::log(kKlProbabilityFloor);
  bool hit = false;
  double total = 0;
  for (std::size_t t = 0; t < routed.size(); ++t) {
    double lp = routed[t];
    if (lp < floor_lp) {
      lp = floor_lp;
      hit = true;
    }
    const double log_r = base[t] - lp;
    total += std::exp(log_r) - log_r - 1.0;
  }
  if (floored) *floored = hit;
  return total / static_cast<double>(routed.size());
}

Tensor kl_regularizer(const Tensor& routed, std::span<const double> base, bool* floored) {
  if (routed.numel() != base.size() || base.empty()) throw DimensionError("kl_regularizer: step counts differ");
  const double floor_lp = std::log(kKlProbabilityFloor);
  bool hit = false;
  for (double v : routed.values()) hit = hit || v < floor_lp;
  if (floored) *floored = hit;
  const Tensor lp = hit ? clip(routed, floor_lp, 0.0) : routed;
  const Tensor log_r = sub(Tensor::from(routed.shape(), std::vector<double>(base.begin(), base.end())), lp);
  return mean(add_scalar(sub(exp(log_r), log_r), -1.0));
}

double exact_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw DimensionError("exact_kl: supports differ");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) return INFINITY;
    s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

double monte_carlo_kl(std::span<const double> p, std::span<const double> q, std::size_t samples, std::uint64_t seed) {
  if (p.size() != q.size() || p.empty()) throw DimensionError("monte_carlo_kl: supports differ");
  if (samples == 0) throw std::invalid_argument("monte_carlo_kl: need at least one sample");
  Rng rng(seed);
  std::vector<double> routed(samples), base(samples);
  for (std::size_t s = 0; s < samples; ++s) {
    double u = rng.uniform(), acc = 0;
    std::size_t i = 0;
    for (; i + 1 < p.size(); ++i) {
      acc += p[i];
      if (u < acc) break;
    }
    routed[s] = std::log(p[i]);
    base[s] = std::log(q[i]);
  }
  return kl_regularizer(routed, base);
}

void GrpoConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("grpo: group_size must be at least 2");
  if (!(temperature > 0)) throw std::invalid_argument("grpo: temperature must be positive");
  if (!(kl_coef >= 0)) throw std::invalid_argument("grpo: kl_coef must be nonnegative");
  if (!(clip_range > 0 && clip_range < 1)) throw std::invalid_argument("grpo: clip_range must lie in (0, 1)");
  if (!(lr > 0)) throw std::invalid_argument("grpo: lr must be positive");
  if (batch_size == 0) throw std::invalid_argument("grpo: batch_size must be positive");
  if (!(gumbel_start > 0 && gumbel_end > 0)) throw std::invalid_argument("grpo: Gumbel temperatures must be positive");
}

namespace {

OptimizerConfig grpo_optimizer(const GrpoConfig& c) {
  c.validate();
  OptimizerConfig oc;
  oc.lr = c.lr;
  oc.grad_clip = 1.0;
  return oc;
}

}  // namespace

GrpoTrainer::GrpoTrainer(Router& router, const PolicyEnvironment& env, const PrimitiveLibrary& library,
                         GrpoConfig config, std::uint64_t seed)
    : router_(&router),
      env_(&env),
      library_(&library),
      config_(config),
      seed_(seed),
      optimizer_(router.parameters(), grpo_optimizer(config)) {
  if (library.size() != router.config().num_primitives) throw DimensionError("grpo: router K differs from library");
  if (library.dim() != env.hidden_dim() || router.config().input_dim != env.hidden_dim()) {
    throw DimensionError("grpo: router, library and environment widths differ");
  }
}

namespace {

Tensor routed_injection(const RouterTape& tape, const Tensor& lib, std::span<const double> noise, double temperature,
                        bool straight_through) {
  const std::size_t k = lib.dim(0);
  Tensor w = gumbel_sigmoid(tape.gate_logits, temperature, noise);
  if (straight_through) {
    std::vector<double> shift(k);
    for (std::size_t i = 0; i < k; ++i) shift[i] = (w.at(i) > 0.5 ? 1.0 : 0.0) - w.at(i);
    w = add(w, Tensor::matrix(1, k, shift));
  }
  return matmul(reshape(mul(w, tape.alpha), {1, k}), lib);
}

}  // namespace

Tensor grpo_group_loss(const Router& router, const PolicyEnvironment& env, const PrimitiveLibrary& library,
                       const GroupSample& group, double gumbel_temperature, const GrpoConfig& config, double* kl_out) {
  const std::size_t n = group.rollouts.size(), d = env.hidden_dim();
  if (n == 0 || group.noise.size() != n || group.advantages.size() != n) {
    throw DimensionError("grpo: group needs one noise vector and one advantage per rollout");
  }
  const Tensor lib = library_matrix(library);
  const RouterTape tape = router.forward(Tensor::matrix(1, d, env.router_input(group.prompt)));
  std::vector<Tensor> injections;
  for (const auto& noise : group.noise) {
    injections.push_back(routed_injection(tape, lib, noise, gumbel_temperature, router.config().straight_through));
  }
  const auto lps = env.token_log_probs(group.prompt, group.rollouts, injections, config.temperature);
  std::vector<Tensor> zeros(n, Tensor::zeros({1, d}));
  const auto base = env.token_log_probs(group.prompt, group.rollouts, zeros, config.temperature);
  double kl_sum = 0;
  Tensor total;
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor old_lp = Tensor::from(lps[j].shape(), group.rollouts[j].log_probs);
    const Tensor ratio = exp(sub(lps[j], old_lp));
    const Tensor a = Tensor::scalar(group.advantages[j]);
    const Tensor surrogate =
        minimum(mul(ratio, a), mul(clip(ratio, 1.0 - config.clip_range, 1.0 + config.clip_range), a));
    const auto bv = base[j].values();
    const Tensor kl = kl_regularizer(lps[j], std::vector<double>(bv.begin(), bv.end()));
    kl_sum += kl.item();
    const Tensor term = sub(mean(surrogate), scale(kl, config.kl_coef));
    total = j == 0 ? term : add(total, term);
  }
  if (kl_out) *kl_out = kl_sum / static_cast<double>(n);
  Tensor loss = scale(total, -1.0 / static_cast<double>(n));
  if (config.sparsity_coef > 0) loss = add(loss, scale(mean(tape.p), config.sparsity_coef));
  return loss;
}

GrpoStepMetrics GrpoTrainer::step(std::span<const std::size_t> prompts, double gumbel_temperature) {
  const std::size_t k = library_->size(), d = env_->hidden_dim(), n = config_.group_size;
  GrpoStepMetrics m;
  m.step = steps_;
  if (prompts.empty()) throw std::invalid_argument("grpo: empty batch");

  std::vector<GroupSample> groups;
  std::vector<std::vector<double>> rewards;
  groups.reserve(prompts.size());
  const Tensor lib = library_matrix(*library_);
  double reward_sum = 0, norm_sum = 0, alpha_sum = 0;
  std::size_t sparse = 0;
  for (std::size_t prompt : prompts) {
    GroupSample g;
    g.prompt = prompt;
    const auto h = env_->router_input(prompt);
    const RouterTape tape = router_->forward(Tensor::matrix(1, d, h));
    for (std::size_t i = 0; i < k; ++i) {
      const double logit = tape.gate_logits.at(i), raw = tape.strength_raw.at(i);
      if (!std::isfinite(logit) || !std::isfinite(raw)) {
        throw NumericError("grpo: non-finite router output for primitive " + std::to_string(i));
      }
      sparse += tape.p.at(i) > router_->config().tau ? 0 : 1;
      alpha_sum += tape.alpha.at(i);
    }
    std::vector<double> r;
    for (std::size_t j = 0; j < n; ++j) {
      Rng noise_rng(derive_seed(seed_, "gumbel", {steps_, prompt, j}));
      std::vector<double> noise(k);
      for (double& x : noise) x = noise_rng.logistic();
      const Tensor v = routed_injection(tape, lib, noise, gumbel_temperature, router_->config().straight_through);
      g.noise.push_back(std::move(noise));
      const auto vv = v.values();
      double nn = 0;
      for (double x : vv) nn += x * x;
      norm_sum += std::sqrt(nn);
      g.rollouts.push_back(env_->sample(prompt, vv, config_.temperature, derive_seed(seed_, "rollout", {steps_, prompt, j})));
      r.push_back(env_->reward(prompt, g.rollouts.back()));
      reward_sum += r.back();
    }
    g.advantages = compute_advantages(r, config_.adv_eps);
    groups.push_back(std::move(g));
  }
  const double total = static_cast<double>(prompts.size() * n);
  m.mean_reward = reward_sum / total;
  m.mean_injection_norm = norm_sum / total;
  m.gate_sparsity = static_cast<double>(sparse) / static_cast<double>(prompts.size() * k);
  m.mean_alpha = alpha_sum / static_cast<double>(prompts.size() * k);
  ++steps_;
  if (reward_sum == 0.0) {
    m.skipped = true;
    ++skipped_;
    return m;
  }

  Tensor loss;
  double kl_sum = 0;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    double kl = 0;
    const Tensor gl = grpo_group_loss(*router_, *env_, *library_, groups[i], gumbel_temperature, config_, &kl);
    kl_sum += kl;
    loss = i == 0 ? gl : add(loss, gl);
  }
  loss = scale(loss, 1.0 / static_cast<double>(groups.size()));
  m.loss = loss.item();
  m.kl = kl_sum / static_cast<double>(groups.size());
  if (!std::isfinite(m.loss)) throw NumericError("grpo: non-finite loss at step " + std::to_string(m.step));
  optimizer_.zero_grad();
  backward(loss);
  optimizer_.step();
  return m;
}

std::vector<GrpoStepMetrics> GrpoTrainer::train(const std::function<void(const GrpoStepMetrics&)>& on_step) {
  const std::size_t prompts = env_->num_prompts();
  if (prompts == 0) throw DataError("grpo: environment has no prompts");
  const std::size_t per_epoch = (prompts + config_.batch_size - 1) / config_.batch_size;
  const std::size_t total = config_.max_steps > 0 ? config_.max_steps : config_.epochs * per_epoch;
  std::vector<GrpoStepMetrics> log;
  std::vector<std::size_t> order(prompts);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed_, "grpo-order"));
  std::size_t cursor = prompts;
  for (std::size_t s = 0; s < total; ++s) {
    std::vector<std::size_t> batch;
    while (batch.size() < std::min(config_.batch_size, prompts)) {
      if (cursor == prompts) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const double frac = total > 1 ? static_cast<double>(s) / static_cast<double>(total - 1) : 1.0;
    const double temp = config_.gumbel_start + (config_.gumbel_end - config_.gumbel_start) * frac;
    log.push_back(step(batch, temp));
    if (on_step) on_step(log.back());
  }
  return log;
}

}  // namespace primroute
