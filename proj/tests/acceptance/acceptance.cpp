// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//
// PRIMROUTE_ACCEPTANCE_DIR sets where the pipeline runs write (default: a
// fresh directory under the system temp dir, removed afterwards).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "primroute/binary_io.hpp"
#include "primroute/config.hpp"
#include "primroute/elicitation.hpp"
#include "primroute/environment.hpp"
#include "primroute/errors.hpp"
#include "primroute/inference.hpp"
#include "primroute/pipeline.hpp"
#include "primroute/report.hpp"
#include "primroute/router.hpp"
#include "primroute/training.hpp"
#include "test_support.hpp"

using namespace primroute;
using primroute::testing::param_grad_error;
using primroute::testing::random_tensor;
using primroute::testing::random_vector;
using primroute::testing::tiny_model;

namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;  // 0 means no runtime bound
  std::function<Outcome()> run;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

fs::path work_root() {
  if (const char* d = std::getenv("PRIMROUTE_ACCEPTANCE_DIR"); d && *d) return d;
  return fs::temp_directory_path() / "primroute_acceptance";
}

// ---------------------------------------------------------------------------
// 1. Gradients
// ---------------------------------------------------------------------------

// Tracked copies of `inputs`; the loss is a fixed random projection of build(leaves).
double op_error(const std::function<Tensor(const std::vector<Tensor>&)>& build, const std::vector<Tensor>& inputs,
                std::uint64_t seed, double step = 1e-5) {
  std::vector<Tensor> leaves;
  for (const auto& t : inputs) {
    Tensor x = Tensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    x.set_tracked();
    leaves.push_back(x);
  }
  const Shape out_shape = build(leaves).shape();
  Rng rng(seed);
  const Tensor proj = random_tensor(out_shape, rng);
  return param_grad_error([&] { return sum(mul(build(leaves), proj)); }, leaves, step);
}

// Keeps every entry at least `gap` away from each kink.
Tensor away_from(Tensor t, std::vector<double> kinks, double gap) {
  for (double& v : t.mutable_values()) {
    for (double k : kinks) {
      if (std::abs(v - k) < gap) v = k + (v < k ? -gap : gap);
    }
  }
  return t;
}

std::vector<TaskInstance> mixed_prompts(std::size_t per_skill, std::uint64_t seed) {
  std::vector<TaskInstance> prompts;
  for (Skill s : kAllSkills) {
    const auto t = generate_tasks(SkillSpec{s}, per_skill, seed, Split::kTrain);
    prompts.insert(prompts.end(), t.begin(), t.end());
  }
  return prompts;
}

// Samples a group under the current router, then nudges the router so the
// importance ratios move off 1 before differentiating.
double routed_loss_error(Router& router, const PolicyEnvironment& env, const PrimitiveLibrary& lib,
                         std::size_t prompt, std::uint64_t seed) {
  GrpoConfig gc;
  gc.group_size = 4;
  gc.kl_coef = 0.05;
  const double gumbel_t = 0.8;
  Rng rng(seed);
  GroupSample g;
  g.prompt = prompt;
  const auto tape = router.forward(Tensor::matrix(1, env.hidden_dim(), env.router_input(prompt)));
  const Tensor libm = library_matrix(lib);
  for (std::size_t j = 0; j < gc.group_size; ++j) {
    std::vector<double> noise(lib.size());
    for (double& x : noise) x = rng.logistic();
    const Tensor w = gumbel_sigmoid(tape.gate_logits, gumbel_t, noise);
    const Tensor v = matmul(reshape(mul(w, tape.alpha), {1, lib.size()}), libm);
    g.rollouts.push_back(env.sample(prompt, v.values(), gc.temperature, rng.next_u64()));
    g.noise.push_back(std::move(noise));
  }
  g.advantages = {1.2, -0.4, 0.7, -1.5};
  for (auto& p : router.parameters())
    for (double& v : p.mutable_values()) v += 0.02 * rng.normal();
  return param_grad_error([&] { return grpo_group_loss(router, env, lib, g, gumbel_t, gc); }, router.parameters());
}

Outcome gradient_check() {
  std::map<std::string, double> worst;
  std::size_t cases = 0;
  auto note = [&](const std::string& op, double err) {
    ++cases;
    worst[op] = std::max(worst[op], std::isfinite(err) ? err : 1e9);
  };

  for (std::uint64_t s = 0; s < 4; ++s) {
    Rng rng(1000 + s);
    const std::size_t n = 2 + s, m = 3 + s % 2;
    const Tensor a = random_tensor({n, m}, rng), b = random_tensor({n, m}, rng);
    const Tensor row = random_tensor({1, m}, rng);
    const std::uint64_t ps = 77 + s;

    note("matmul", op_error([](auto& x) { return matmul(x[0], x[1]); }, {a, random_tensor({m, 4}, rng)}, ps));
    note("add", op_error([](auto& x) { return add(x[0], x[1]); }, {a, row}, ps));
    note("sub", op_error([](auto& x) { return sub(x[0], x[1]); }, {a, b}, ps));
    note("mul", op_error([](auto& x) { return mul(x[0], x[1]); }, {a, row}, ps));
    note("relu", op_error([](auto& x) { return relu(x[0]); }, {away_from(a, {0.0}, 0.05)}, ps));
    note("gelu", op_error([](auto& x) { return gelu(x[0]); }, {a}, ps));
    note("sigmoid", op_error([](auto& x) { return sigmoid(x[0]); }, {a}, ps));
    note("tanh", op_error([](auto& x) { return tanh(x[0]); }, {a}, ps));
    note("exp", op_error([](auto& x) { return exp(x[0]); }, {a}, ps));
    note("log", op_error([](auto& x) { return log(exp(x[0])); }, {a}, ps));
    note("neg", op_error([](auto& x) { return neg(x[0]); }, {a}, ps));
    note("scale", op_error([](auto& x) { return scale(x[0], -1.7); }, {a}, ps));
    note("add_scalar", op_error([](auto& x) { return mul(add_scalar(x[0], 0.3), x[0]); }, {a}, ps));
    note("clip", op_error([](auto& x) { return clip(x[0], -0.5, 0.5); }, {away_from(a, {-0.5, 0.5}, 0.05)}, ps));
    Tensor apart = b;
    for (std::size_t i = 0; i < apart.numel(); ++i) {
      const double gap = apart.at(i) - a.at(i);
      if (std::abs(gap) < 0.05) apart.mutable_values()[i] = a.at(i) + (gap < 0 ? -0.05 : 0.05);
    }
    note("minimum", op_error([](auto& x) { return minimum(x[0], x[1]); }, {a, apart}, ps));
    note("sum", op_error([](auto& x) { return mul(sum(x[0]), sum(x[0])); }, {a}, ps));
    note("mean", op_error([](auto& x) { return mul(mean(x[0]), sum(x[0])); }, {a}, ps));
    note("reshape", op_error([m](auto& x) { return reshape(x[0], {m, x[0].dim(0)}); }, {a}, ps));
    const std::vector<int> ids = {1, 0, 1, static_cast<int>(n - 1)};
    note("gather_rows", op_error([&](auto& x) { return gather_rows(x[0], ids); }, {a}, ps));
    std::vector<int> cols(n);
    for (std::size_t i = 0; i < n; ++i) cols[i] = static_cast<int>(rng.below(m));
    note("pick", op_error([&](auto& x) { return pick(x[0], cols); }, {a}, ps));
    note("concat_rows", op_error([](auto& x) { return concat_rows(std::vector<Tensor>{x[0], x[1]}); }, {a, b}, ps));
    note("slice_rows", op_error([n](auto& x) { return slice_rows(x[0], 1, n); }, {a}, ps));
    note("softmax_rows", op_error([](auto& x) { return softmax_rows(x[0]); }, {a}, ps));
    note("log_softmax_rows", op_error([](auto& x) { return log_softmax_rows(x[0]); }, {a}, ps));
    note("softmax_crossentropy",
         op_error([&](auto& x) { return softmax_crossentropy(x[0], cols); }, {scale(a, 2.0)}, ps));
    note("layer_norm", op_error([](auto& x) { return layer_norm(x[0], x[1], x[2]); },
                                {a, random_tensor({m}, rng), random_tensor({m}, rng)}, ps));

    const std::size_t rows = 3 + s, d = 4;
    const auto layout = AttentionLayout::packed_causal(std::vector<std::size_t>{rows});
    note("attention",
         op_error([&](auto& x) { return attention(x[0], x[1], x[2], 2, layout); },
                  {random_tensor({rows, d}, rng), random_tensor({rows, d}, rng), random_tensor({rows, d}, rng)}, ps));

    std::vector<double> noise(m);
    for (double& x : noise) x = rng.logistic();
    note("gumbel_sigmoid",
         op_error([&](auto& x) { return gumbel_sigmoid(x[0], 0.5 + 0.2 * s, noise); }, {random_tensor({1, m}, rng)}, ps));

    const std::vector<double> base = {-0.4, -1.3, -2.2, -0.9};
    note("kl_regularizer", op_error([&](auto& x) { return kl_regularizer(x[0], base); },
                                    {Tensor::vector({-0.6, -1.0, -2.5, -0.8})}, ps));
  }

  // Transformer pieces on the frozen tiny model, wrt their inputs.
  for (std::uint64_t s = 0; s < 3; ++s) {
    const Model model = tiny_model(5 + s);
    Rng rng(2000 + s);
    const std::size_t rows = 4 + s, d = model.config().model_dim;
    const auto layout = AttentionLayout::packed_causal(std::vector<std::size_t>{rows});
    for (std::size_t layer = 1; layer <= model.config().num_layers; ++layer) {
      note("model.block", op_error([&](auto& x) { return model.block(layer, x[0], layout); },
                                   {random_tensor({rows, d}, rng)}, 3 + s));
    }
    note("model.head", op_error([&](auto& x) { return model.head(x[0]); }, {random_tensor({rows, d}, rng)}, 3 + s));
  }

  // Router heads and the supervised loss wrt router parameters.
  for (std::uint64_t s = 0; s < 3; ++s) {
    RouterConfig rc;
    rc.input_dim = 8;
    rc.num_primitives = 4;
    rc.bottleneck = 6;
    rc.strength_head = s == 2 ? StrengthHead::kSigmoid : StrengthHead::kClip;
    Router r = Router::initialize(rc, 30 + s);
    Rng rng(3000 + s);
    std::vector<SftSample> batch;
    for (int i = 0; i < 5; ++i) {
      batch.push_back({random_vector(8, rng), {1, 0, static_cast<double>(i % 2), 0}, {1.2, 0, 0.7, 0}});
    }
    note("sft_loss", param_grad_error([&] { return sft_loss(r, batch); }, r.parameters()));
    const Tensor h = random_tensor({3, 8}, rng);
    note("router.forward", param_grad_error(
                               [&] {
                                 const auto t = r.forward(h);
                                 return add(sum(mul(t.p, t.p)), sum(mul(t.alpha, t.gate_logits)));
                               },
                               r.parameters()));
  }

  // Full routed loss wrt router parameters, planted and transformer policies.
  for (std::uint64_t s = 0; s < 6; ++s) {
    PlantedConfig pc;
    pc.dim = 8;
    pc.num_primitives = 4;
    pc.num_prompts = 8;
    const auto env = s % 2 ? PlantedEnvironment::composition(pc, 40 + s) : PlantedEnvironment::bandit(pc, s % 4, 40 + s);
    RouterConfig rc;
    rc.input_dim = pc.dim;
    rc.num_primitives = pc.num_primitives;
    rc.bottleneck = 6;
    Router r = Router::initialize(rc, 50 + s);
    note("routed loss (planted)", routed_loss_error(r, env, env.library(), s % pc.num_prompts, 60 + s));
  }
  for (std::uint64_t s = 0; s < 4; ++s) {
    const Model model = tiny_model(9 + s);
    TransformerEnvironment env(model, 1, mixed_prompts(1, 70 + s));
    PrimitiveLibrary lib;
    lib.layer = 1;
    Rng rng(80 + s);
    for (int i = 0; i < 3; ++i) lib.vectors.push_back(random_vector(16, rng, 0.5));
    RouterConfig rc;
    rc.input_dim = 16;
    rc.num_primitives = 3;
    rc.bottleneck = 4;
    Router r = Router::initialize(rc, 90 + s);
    note("routed loss (transformer)", routed_loss_error(r, env, lib, s % env.num_prompts(), 100 + s));
  }

  double max_err = 0;
  std::string worst_op;
  for (const auto& [op, e] : worst) {
    if (e > max_err) {
      max_err = e;
      worst_op = op;
    }
  }
  return {cases >= 100 && max_err < 1e-4,
          fmt("%zu cases over %zu ops, max relative error %.2e (%s)", cases, worst.size(), max_err, worst_op.c_str())};
}

// ---------------------------------------------------------------------------
// 2. Split forward
// ---------------------------------------------------------------------------

Outcome split_forward() {
  Model model = Model::initialize(ModelConfig{}, 11);
  model.freeze();
  const std::size_t layers = model.config().num_layers;
  const std::vector<double> zero(model.config().model_dim, 0.0);
  Rng rng(12);
  std::size_t logit_mismatch = 0, token_mismatch = 0;
  for (int i = 0; i < 1000; ++i) {
    Tokens p = {vocab::kBos};
    const std::size_t len = 2 + rng.below(30);
    while (p.size() < len) p.push_back(static_cast<Token>(rng.below(vocab::kFirstReserved)));
    const std::size_t layer = 1 + rng.below(layers - 1);
    const auto full = forward_logits(model, p).back();
    if (continue_from_layer(model, forward_to_layer(model, p, layer)) != full) ++logit_mismatch;
    const auto plain = generate(model, p, nullptr, 6, Sampling::greedy_decoding());
    const auto steered = generate(model, p, &zero, 6, Sampling::greedy_decoding(), 0, GenerateOptions{layer});
    if (plain.tokens != steered.tokens) ++token_mismatch;
  }
  return {logit_mismatch == 0 && token_mismatch == 0,
          fmt("1000 prompts: %zu logit mismatches, %zu token mismatches under zero injection", logit_mismatch,
              token_mismatch)};
}

// ---------------------------------------------------------------------------
// 3. Planted elicitation
// ---------------------------------------------------------------------------

Outcome planted_elicitation() {
  const std::size_t d = 128, k = 6, per = 200;
  const double sigma = 0.2;
  Rng rng(21);
  // Gram-Schmidt on Gaussian draws.
  std::vector<Vec> dirs;
  while (dirs.size() < k) {
    Vec v = random_vector(d, rng);
    for (const auto& u : dirs) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += v[j] * u[j];
      for (std::size_t j = 0; j < d; ++j) v[j] -= dot * u[j];
    }
    double n = 0;
    for (double x : v) n += x * x;
    for (double& x : v) x /= std::sqrt(n);
    dirs.push_back(v);
  }
  std::vector<Vec> data;
  std::vector<int> labels;
  const double coord_sigma = sigma / std::sqrt(static_cast<double>(d));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      Vec x = dirs[c];
      for (double& v : x) v += coord_sigma * rng.normal();
      data.push_back(x);
      labels.push_back(static_cast<int>(c));
    }
  }
  const double top = pca_report(data).top_fraction(k);
  const auto km = kmeans(data, k, 22);
  const double purity = cluster_purity(km.assignments, labels);
  const auto lib = build_library(data, km.assignments, k, 1);
  std::vector<Vec> sim(k, Vec(k));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += lib.vectors[i][c] * dirs[j][c];
      sim[i][j] = dot;
    }
  const auto match = max_weight_matching(sim);
  double min_cos = 1.0;
  for (std::size_t i = 0; i < k; ++i) min_cos = std::min(min_cos, sim[i][match[i]]);
  const double off = mean_abs_off_diagonal(cosine_matrix(lib));
  return {top >= 0.85 && purity >= 0.95 && min_cos >= 0.95 && off < 0.1,
          fmt("noise norm %.2f: top-6 variance %.3f, purity %.3f, min matched cosine %.4f, mean |off-diag| %.4f",
              sigma, top, purity, min_cos, off)};
}

// ---------------------------------------------------------------------------
// 4. Straight-loop equivalence
// ---------------------------------------------------------------------------

Outcome loop_equivalence() {
  Rng rng(31);
  std::size_t compose_bad = 0, library_bad = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t k = 1 + rng.below(8), d = 1 + rng.below(64);
    PrimitiveLibrary lib;
    for (std::size_t i = 0; i < k; ++i) lib.vectors.push_back(random_vector(d, rng));
    RoutingDecision dec;
    for (std::size_t i = 0; i < k; ++i) {
      dec.w.push_back(t % 2 ? rng.uniform() : static_cast<double>(rng.below(2)));
      dec.alpha.push_back(rng.uniform(0.0, 2.0));
    }
    std::vector<double> want(d, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
      const double s = dec.w[i] * dec.alpha[i];
      for (std::size_t c = 0; c < d; ++c) want[c] += s * lib.vectors[i][c];
    }
    if (compose(dec, lib) != want) ++compose_bad;

    const std::size_t n = k + rng.below(40);
    std::vector<Vec> diffs;
    std::vector<int> assign;
    for (std::size_t i = 0; i < n; ++i) {
      diffs.push_back(random_vector(d, rng));
      assign.push_back(static_cast<int>(i < k ? i : rng.below(k)));
    }
    const auto got = build_library(diffs, assign, k, 1);
    for (std::size_t c = 0; c < k; ++c) {
      Vec mean(d, 0.0);
      double count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != static_cast<int>(c)) continue;
        for (std::size_t j = 0; j < d; ++j) mean[j] += diffs[i][j];
        count += 1;
      }
      for (double& x : mean) x /= count;
      double sq = 0;
      for (double x : mean) sq += x * x;
      const double norm = std::sqrt(sq);
      Vec unit = mean;
      for (double& x : unit) x /= norm;
      if (got.vectors[c] != unit || got.raw_centroids[c] != mean) {
        ++library_bad;
        break;
      }
    }
  }
  return {compose_bad == 0 && library_bad == 0,
          fmt("100 cases: %zu compose and %zu library mismatches", compose_bad, library_bad)};
}

// ---------------------------------------------------------------------------
// 5. Bandit
// ---------------------------------------------------------------------------

Outcome bandit() {
  std::size_t solved = 0;
  std::ostringstream steps;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PlantedConfig pc;
    const std::size_t target = seed % pc.num_primitives;
    const auto env = PlantedEnvironment::bandit(pc, target, 100 + seed);
    RouterConfig rc;
    rc.input_dim = pc.dim;
    rc.num_primitives = pc.num_primitives;
    Router r = Router::initialize(rc, seed);
    GrpoConfig gc;
    gc.max_steps = 500;
    GrpoTrainer trainer(r, env, env.library(), gc, seed);
    long hit = -1;
    trainer.train([&](const GrpoStepMetrics& m) {
      if (hit >= 0) return;
      bool good = true;
      for (std::size_t p = 0; p < env.num_prompts() && good; ++p) {
        const auto dec = r.route(env.router_input(p));
        for (std::size_t i = 0; i < pc.num_primitives; ++i) good &= i == target ? dec.p[i] > 0.7 : dec.p[i] < 0.5;
      }
      if (good) hit = static_cast<long>(m.step) + 1;
    });
    solved += hit >= 0;
    steps << (seed ? " " : "") << hit;
  }
  return {solved >= 4, fmt("%zu/5 seeds converged; steps to dominance: %s", solved, steps.str().c_str())};
}

// ---------------------------------------------------------------------------
// 6. Composition
// ---------------------------------------------------------------------------

Outcome composition() {
  double full_sum = 0, top_sum = 0;
  const int seeds = 3;
  for (int seed = 0; seed < seeds; ++seed) {
    PlantedConfig pc;
    const auto env = PlantedEnvironment::composition(pc, 200 + seed);
    const auto& lib = env.library();
    std::vector<SftSample> data;
    for (std::size_t p = 0; p < env.num_prompts(); ++p) {
      const auto l = synthesize_oracle(env, p, lib, 2.0);
      if (l) data.push_back({env.router_input(p), l->w_star, l->alpha_star});
    }
    RouterConfig rc;
    rc.input_dim = pc.dim;
    rc.num_primitives = pc.num_primitives;
    Router r = Router::initialize(rc, seed);
    SftConfig sc;
    sc.seed = seed;
    sft_train(r, data, sc);
    GrpoConfig gc;
    gc.max_steps = 100;
    GrpoTrainer(r, env, lib, gc, seed).train();
    double full = 0, top = 0;
    for (std::size_t p = 0; p < env.num_prompts(); ++p) {
      const auto dec = r.route(env.router_input(p));
      full += env.greedy(p, compose(dec, lib)).second;
      top += env.greedy(p, compose(top1_only(dec), lib)).second;
    }
    full_sum += full / static_cast<double>(env.num_prompts());
    top_sum += top / static_cast<double>(env.num_prompts());
  }
  const double full = 100 * full_sum / seeds, top = 100 * top_sum / seeds;
  return {full - top >= 15.0, fmt("full %.1f%% vs top-1 only %.1f%% over %d seeds (gap %.1f points)", full, top,
                                  seeds, full - top)};
}

// ---------------------------------------------------------------------------
// 7. End to end
// ---------------------------------------------------------------------------

Logger phase_logger(const std::string& tag) {
  return [tag](const std::string& msg) { std::cerr << "  [" << tag << "] " << msg << "\n"; };
}

Outcome end_to_end() {
  RunConfig cfg;
  cfg.output_dir = (work_root() / "default").string();
  fs::remove_all(cfg.output_dir);
  Pipeline pipeline(cfg, phase_logger("default"));
  pipeline.run_all();
  const auto results = results_from_csv(read_text_file(fs::path(cfg.output_dir) / "results.csv"));
  std::map<std::string, std::vector<double>> by_label;
  for (const auto& r : results) by_label[r.label].push_back(r.mean_accuracy());
  auto avg = [&](const std::string& label) {
    const auto& v = by_label.at(label);
    double s = 0;
    for (double x : v) s += x;
    return 100 * s / static_cast<double>(v.size());
  };
  const double base = avg("base"), sft = avg("sft-only"), routed = avg("routed");
  const std::size_t seeds = by_label.at("routed").size();
  return {seeds >= 3 && routed >= base + 5.0 && routed >= sft && sft >= base,
          fmt("base %.1f, sft-only %.1f, routed %.1f (%+.1f points) over %zu seeds", base, sft, routed, routed - base,
              seeds)};
}

// ---------------------------------------------------------------------------
// 8. KL
// ---------------------------------------------------------------------------

Outcome kl_sanity() {
  const Model model = tiny_model(4);
  TransformerEnvironment env(model, 1, mixed_prompts(2, 5));
  const std::vector<double> zero(env.hidden_dim(), 0.0);
  std::size_t nonzero = 0, total = 0;
  for (std::size_t p = 0; p < env.num_prompts(); ++p) {
    std::vector<Rollout> rs;
    for (std::uint64_t j = 0; j < 4; ++j) rs.push_back(env.sample(p, zero, 1.5, 100 * p + j));
    const std::vector<Tensor> zeros(rs.size(), Tensor::zeros({1, env.hidden_dim()}));
    const auto routed = env.token_log_probs(p, rs, zeros, 1.5);
    const auto base = env.token_log_probs(p, rs, zeros, 1.5);
    for (std::size_t j = 0; j < rs.size(); ++j) {
      const auto b = base[j].values();
      ++total;
      if (kl_regularizer(routed[j], std::vector<double>(b.begin(), b.end())).item() != 0.0) ++nonzero;
      if (kl_regularizer(rs[j].log_probs, rs[j].log_probs) != 0.0) ++nonzero;
    }
  }
  const std::vector<std::pair<std::vector<double>, std::vector<double>>> toys = {
      {{0.5, 0.3, 0.2}, {0.4, 0.4, 0.2}},
      {{0.1, 0.2, 0.3, 0.4}, {0.25, 0.25, 0.25, 0.25}},
      {{0.7, 0.2, 0.05, 0.05}, {0.3, 0.3, 0.2, 0.2}},
  };
  double worst = 0;
  for (std::size_t i = 0; i < toys.size(); ++i) {
    const double exact = exact_kl(toys[i].first, toys[i].second);
    const double mc = monte_carlo_kl(toys[i].first, toys[i].second, 100000, 40 + i);
    worst = std::max(worst, std::abs(mc - exact) / exact);
  }
  return {nonzero == 0 && worst < 0.05,
          fmt("%zu/%zu zero-injection rollouts gave nonzero KL; worst Monte Carlo error %.2f%%", nonzero, total,
              100 * worst)};
}

// ---------------------------------------------------------------------------
// 9. Threshold and clip
// ---------------------------------------------------------------------------

Outcome threshold_clip() {
  RouterConfig c;
  c.input_dim = 8;
  auto constant = [&](double gate_logit, double raw) {
    Router r = Router::initialize(c, 1);
    auto params = r.parameters();
    for (double& v : params[2].mutable_values()) v = 0.0;
    for (double& v : params[3].mutable_values()) v = gate_logit;
    for (double& v : params[4].mutable_values()) v = 0.0;
    for (double& v : params[5].mutable_values()) v = raw;
    return r.route(std::vector<double>(8, 0.25));
  };
  const auto closed = constant(std::log(0.69 / 0.31), 1.0);
  const auto clipped = constant(5.0, 2.5);
  bool ok = true;
  for (std::size_t i = 0; i < c.num_primitives; ++i) {
    ok &= std::abs(closed.p[i] - 0.69) < 1e-12 && closed.w[i] == 0.0;
    ok &= clipped.w[i] == 1.0 && clipped.alpha[i] == 2.0;
  }
  return {ok, fmt("p=%.2f gives gate %.0f; raw 2.5 gives strength %.2f", closed.p[0], closed.w[0], clipped.alpha[0])};
}

// ---------------------------------------------------------------------------
// 10. Reproducibility
// ---------------------------------------------------------------------------

// Small enough that two full runs fit in well under a minute.
RunConfig reduced_config() {
  return RunConfig::from_json(R"({
    "model": {"model_dim": 32, "num_layers": 4, "intervention_layer": 2},
    "pretrain": {"steps": 300},
    "tasks": {"pairs_per_family": 40, "train_per_family": 20, "eval_per_family": 40},
    "elicitation": {"sweep_per_family": 20, "sweep_alphas": [0.0, 1.0, 2.0], "min_acceptance": 0.0},
    "router": {"bottleneck": 16},
    "sft": {"samples": 40, "epochs": 20},
    "grpo": {"max_steps": 4, "batch_size": 8, "group_size": 4},
    "eval": {"seeds": [1], "ablation_layer": 1, "k_variants": [4, 6], "require_headroom": false}
  })");
}

std::map<std::string, std::string> run_reduced(const fs::path& dir) {
  RunConfig c = reduced_config();
  c.output_dir = dir.string();
  fs::remove_all(dir);
  Pipeline p(c, phase_logger(dir.filename().string()));
  p.run_all();
  p.ablate();
  p.report();
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir / "reports")) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir / "reports").string()] = read_text_file(e.path());
  }
  return files;
}

Outcome reproducibility() {
  const auto a = run_reduced(work_root() / "repro_a");
  const auto b = run_reduced(work_root() / "repro_b");
  std::size_t differ = 0;
  std::string first;
  for (const auto& [name, text] : a) {
    const auto it = b.find(name);
    if (it == b.end() || it->second != text) {
      if (!differ++) first = name;
    }
  }
  if (a.size() != b.size() && !differ++) first = "(file list)";
  return {differ == 0 && !a.empty(),
          differ ? fmt("%zu of %zu report files differ, first: %s", differ, a.size(), first.c_str())
                 : fmt("%zu report files byte-identical across two runs", a.size())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", 120, gradient_check},
      {2, "split-forward identity", 120, split_forward},
      {3, "planted elicitation", 60, planted_elicitation},
      {4, "compose/library loop equivalence", 0, loop_equivalence},
      {5, "bandit convergence", 300, bandit},
      {6, "composition necessity", 600, composition},
      {7, "end-to-end efficacy", 1800, end_to_end},
      {8, "kl sanity", 0, kl_sanity},
      {9, "threshold/clip semantics", 0, threshold_clip},
      {10, "reproducibility", 0, reproducibility},
  };
  // Optional filter: criterion ids on the command line.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_seconds > 0 && secs > c.budget_seconds) {
      out.pass = false;
      out.detail += fmt("; over the %.0f s budget", c.budget_seconds);
    }
    std::printf("[%s] %2d %s: %s (%.1f s)\n", out.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), out.detail.c_str(),
                secs);
    std::fflush(stdout);
    failed += out.pass ? 0 : 1;
  }
  if (!std::getenv("PRIMROUTE_ACCEPTANCE_DIR")) fs::remove_all(work_root());
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}
