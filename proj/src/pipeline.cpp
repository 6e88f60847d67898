#include "primroute/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "primroute/binary_io.hpp"
#include "primroute/elicitation.hpp"
#include "primroute/environment.hpp"
#include "primroute/inference.hpp"
#include "primroute/parallel.hpp"
#include "primroute/pretrain.hpp"
#include "primroute/report.hpp"
#include "primroute/training.hpp"

namespace primroute {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string seed_tag(std::uint64_t s) { return "seed" + std::to_string(s); }

struct LibraryBuild {
  PrimitiveLibrary library;
  FilterStats filter;
  PcaReport pca;
  KMeansResult clusters;
  std::vector<int> skills;
};

/// Contrast pairs through the filter, then PCA, K-Means and the library.
LibraryBuild build_primitives(const Model& model, const RunConfig& c, std::size_t layer, std::size_t k) {
  std::vector<ContrastPair> pairs;
  for (Skill s : kAllSkills) {
    const auto tasks = generate_tasks(SkillSpec{s}, c.tasks.pairs_per_family, derive_seed(c.seed, "pairs"), Split::kTrain);
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      pairs.push_back(make_contrast_pair(tasks[i], static_cast<int>(i % 2), model.config().max_context));
    }
  }
  LibraryBuild b;
  b.filter = filter_contrast_pairs(model, pairs, c.elicitation.filter_band, eval_max_steps() + 2);
  if (b.filter.acceptance_rate() < c.elicitation.min_acceptance) {
    throw DataError("elicit: only " + std::to_string(b.filter.accepted) + " of " + std::to_string(b.filter.candidates) +
                    " contrast pairs passed the quality filter");
  }
  const auto dp = collect_pairs(model, b.filter.accepted_pairs, layer);
  std::vector<Vec> diffs;
  for (const auto& p : dp) {
    diffs.push_back(p.difference());
    b.skills.push_back(skill_index(p.skill));
  }
  b.pca = pca_report(diffs);
  KMeansConfig kc;
  kc.restarts = c.elicitation.kmeans_restarts;
  b.clusters = kmeans(diffs, k, derive_seed(c.seed, "kmeans", {layer, k}), kc);
  b.library = build_library(diffs, b.clusters.assignments, k, layer);
  b.library.model_fingerprint = model.fingerprint();
  b.library.config_hash = c.hash();
  b.library.pair_skills = b.skills;
  return b;
}

struct RouterPair {
  Router sft;
  Router rl;
  json sft_log;
  std::string rl_log;
  std::string labels;
};

Router train_sft_router(const Model& model, const PrimitiveLibrary& lib, const RunConfig& c,
                        const std::vector<TaskInstance>& prompts, std::uint64_t seed, json& log, std::string& labels_out) {
  // The SFT pool is a seeded subset of the router-training prompts.
  std::vector<std::size_t> order(prompts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(c.seed, "sft-pool", {seed}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  order.resize(std::min(order.size(), c.sft.samples));
  std::vector<TaskInstance> pool;
  for (std::size_t i : order) pool.push_back(prompts[i]);
  TransformerEnvironment env(model, lib.layer, pool);
  std::vector<std::optional<OracleLabel>> labels(pool.size());
  parallel_for(pool.size(), [&](std::size_t p) { labels[p] = synthesize_oracle(env, p, lib, c.router.alpha_max, c.sft.oracle); });
  std::vector<SftSample> data;
  std::size_t none = 0, null_labels = 0;
  std::ostringstream jl;
  for (std::size_t p = 0; p < pool.size(); ++p) {
    if (!labels[p]) {
      ++none;
      continue;
    }
    const auto& l = *labels[p];
    double total = 0;
    for (double a : l.alpha_star) total += a;
    if (total == 0.0) ++null_labels;
    data.push_back({env.router_input(p), l.w_star, l.alpha_star});
    jl << json{{"family", std::string(skill_name(pool[p].skill))},
               {"instance_seed", pool[p].seed},
               {"w_star", l.w_star},
               {"alpha_star", l.alpha_star},
               {"confidence", l.confidence}}
              .dump()
       << "\n";
  }
  labels_out = jl.str();
  if (data.empty()) throw DataError("train-sft: the oracle found no successful configuration");
  Router router = Router::initialize(c.router_config(lib.size()), derive_seed(seed, "router"));
  router.set_library_hash(lib.hash());
  SftConfig sc = c.sft.train;
  sc.seed = derive_seed(seed, "sft");
  const auto res = sft_train(router, data, sc);
  log = json{{"seed", seed},
             {"pool", pool.size()},
             {"labels", data.size()},
             {"unsolved", none},
             {"null_labels", null_labels},
             {"loss_curve", res.loss_curve}};
  return router;
}

std::string rl_refine(Router& router, const Model& model, const PrimitiveLibrary& lib, const RunConfig& c,
                      const std::vector<TaskInstance>& prompts, std::uint64_t seed) {
  TransformerEnvironment env(model, lib.layer, prompts);
  GrpoTrainer trainer(router, env, lib, c.grpo, derive_seed(seed, "grpo"));
  std::ostringstream log;
  trainer.train([&](const GrpoStepMetrics& m) {
    log << json{{"step", m.step},
                {"mean_reward", m.mean_reward},
                {"kl", m.kl},
                {"gate_sparsity", m.gate_sparsity},
                {"mean_alpha", m.mean_alpha},
                {"mean_injection_norm", m.mean_injection_norm},
                {"loss", m.loss},
                {"skipped", m.skipped}}
               .dump()
        << "\n";
  });
  return log.str();
}

}  // namespace

Pipeline::Pipeline(RunConfig config, Logger log) : config_(std::move(config)), log_(std::move(log)) {
  config_.validate();
  set_worker_count(config_.threads);
}

void Pipeline::say(const std::string& msg) const {
  if (log_) log_(msg);
}

void Pipeline::record(const std::string& phase) const {
  json m;
  m["phase"] = phase;
  m["config"] = json::parse(config_.result_json());
  m["config_hash"] = hex64(config_.hash());
  write_text(dir() / "manifest.json", m.dump(2) + "\n");
}

fs::path Pipeline::need(const std::string& name, const std::string& command) const {
  const fs::path p = dir() / name;
  if (!fs::exists(p)) {
    throw DependencyError("missing " + p.string() + "; run `" + command + "` first");
  }
  return p;
}

EvalSets Pipeline::eval_sets() const {
  EvalSets sets;
  for (Skill s : kAllSkills) {
    sets[skill_index(s)] = generate_tasks(SkillSpec{s}, config_.tasks.eval_per_family, derive_seed(config_.seed, "eval"), Split::kEval);
  }
  return sets;
}

std::vector<TaskInstance> Pipeline::router_train_prompts() const {
  std::vector<TaskInstance> out;
  for (Skill s : kAllSkills) {
    auto t = generate_tasks(SkillSpec{s}, config_.tasks.train_per_family, derive_seed(config_.seed, "router-train"), Split::kTrain);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

void Pipeline::pretrain() {
  record("pretrain");
  say("pretrain: " + std::to_string(config_.pretrain.steps) + " steps");
  std::vector<double> curve;
  const auto t0 = std::chrono::steady_clock::now();
  const Model model = primroute::pretrain(config_.model, config_.pretrain, derive_seed(config_.seed, "pretrain"), &curve,
                                          [&](const PretrainProgress& p) {
                                            if (p.step % 100 == 0) {
                                              std::ostringstream m;
                                              m << "  step " << p.step << " loss " << p.loss;
                                              say(m.str());
                                            }
                                          });
  fs::create_directories(dir());
  model.save(dir() / "model.bin");
  std::ostringstream log;
  for (std::size_t i = 0; i < curve.size(); ++i) log << json{{"step", i}, {"loss", curve[i]}}.dump() << "\n";
  write_text(dir() / "pretrain_log.jsonl", log.str());
  const auto sets = eval_sets();
  const auto head = check_headroom(model, sets, config_.eval.headroom_margin, config_.eval.headroom_ceiling);
  json h;
  for (Skill s : kAllSkills) {
    const int f = skill_index(s);
    h["accuracy"][std::string(skill_name(s))] = head.accuracy[f];
    h["chance"][std::string(skill_name(s))] = head.chance[f];
  }
  h["ok"] = head.ok;
  h["model_fingerprint"] = hex64(model.fingerprint());
  h["parameters"] = model.parameter_count();
  write_text(dir() / "headroom.json", h.dump(2) + "\n");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  say("pretrain: done in " + std::to_string(static_cast<int>(secs)) + "s; " + head.summary);
  if (!head.ok && config_.eval.require_headroom) {
    throw DataError("pretrain: headroom requirement not met: " + head.summary);
  }
}

void Pipeline::elicit() {
  record("elicit");
  const Model model = Model::load(need("model.bin", "pretrain"));
  say("elicit: layer " + std::to_string(config_.model.intervention_layer));
  auto b = build_primitives(model, config_, config_.model.intervention_layer, config_.elicitation.num_primitives);
  json extra;
  extra["acceptance_rate"] = b.filter.acceptance_rate();
  extra["candidates"] = b.filter.candidates;
  extra["rejected"] = b.filter.rejected_by_reason;
  extra["pca_top_k_fraction"] = b.pca.top_fraction(b.library.size());
  extra["purity_vs_family"] = cluster_purity(b.clusters.assignments, b.skills);
  extra["mean_abs_off_diagonal_cosine"] = mean_abs_off_diagonal(cosine_matrix(b.library));
  b.library.save(dir() / "library.bin", extra.dump());
  json e = extra;
  e["pca_fractions"] = b.pca.fractions;
  std::vector<std::vector<double>> proj;
  for (const auto& p : b.pca.projection) proj.push_back({p[0], p[1]});
  e["pca_projection"] = proj;
  e["assignments"] = b.clusters.assignments;
  e["cosine"] = cosine_matrix(b.library);
  e["library_hash"] = hex64(b.library.hash());
  write_text(dir() / "elicitation.json", e.dump(1) + "\n");
  std::ostringstream m;
  m << "elicit: acceptance " << b.filter.acceptance_rate() << ", top-" << b.library.size() << " PCA "
    << b.pca.top_fraction(b.library.size());
  say(m.str());
}

void Pipeline::train_sft() {
  record("train-sft");
  const Model model = Model::load(need("model.bin", "pretrain"));
  const auto lib = PrimitiveLibrary::load(need("library.bin", "elicit"), model.fingerprint());
  const auto prompts = router_train_prompts();
  assert_no_leakage(eval_sets(), prompts);
  for (std::uint64_t s : config_.eval.seeds) {
    json log;
    std::string labels;
    Router r = train_sft_router(model, lib, config_, prompts, s, log, labels);
    r.save(dir() / ("router_sft_" + seed_tag(s) + ".bin"));
    write_text(dir() / ("oracle_labels_" + seed_tag(s) + ".jsonl"), labels);
    write_text(dir() / ("sft_log_" + seed_tag(s) + ".json"), log.dump(1) + "\n");
    say("train-sft: seed " + std::to_string(s) + ", " + std::to_string(log["labels"].get<std::size_t>()) + " labels");
  }
}

void Pipeline::train_rl() {
  record("train-rl");
  const Model model = Model::load(need("model.bin", "pretrain"));
  const auto lib = PrimitiveLibrary::load(need("library.bin", "elicit"), model.fingerprint());
  const auto prompts = router_train_prompts();
  for (std::uint64_t s : config_.eval.seeds) {
    Router r = Router::load(need("router_sft_" + seed_tag(s) + ".bin", "train-sft"), lib.hash());
    const std::string log = rl_refine(r, model, lib, config_, prompts, s);
    r.save(dir() / ("router_" + seed_tag(s) + ".bin"));
    write_text(dir() / ("rl_log_" + seed_tag(s) + ".jsonl"), log);
    say("train-rl: seed " + std::to_string(s) + " done");
  }
}

void Pipeline::evaluate() {
  record("evaluate");
  const Model model = Model::load(need("model.bin", "pretrain"));
  const auto lib = PrimitiveLibrary::load(need("library.bin", "elicit"), model.fingerprint());
  const auto sets = eval_sets();
  assert_no_leakage(sets, router_train_prompts());
  EvalOptions opt;
  opt.config_hash = config_.hash();
  std::vector<EvalResult> results;
  results.push_back(primroute::evaluate(model, nullptr, nullptr, sets, Condition::kBase, config_.seed, opt));
  results.push_back(primroute::evaluate(model, nullptr, nullptr, sets, Condition::kPrompted, config_.seed, opt));
  for (std::size_t i = 0; i < lib.size(); ++i) {
    EvalOptions so = opt;
    so.static_index = i;
    so.static_alpha = config_.eval.static_alpha;
    so.label = "static-v" + std::to_string(i + 1);
    results.push_back(primroute::evaluate(model, nullptr, &lib, sets, Condition::kStaticAlpha, config_.seed, so));
  }
  std::vector<std::vector<double>> heat(kNumSkills, std::vector<double>(lib.size(), 0.0));
  for (std::uint64_t s : config_.eval.seeds) {
    const Router sft = Router::load(need("router_sft_" + seed_tag(s) + ".bin", "train-sft"), lib.hash());
    const Router rl = Router::load(need("router_" + seed_tag(s) + ".bin", "train-rl"), lib.hash());
    results.push_back(primroute::evaluate(model, &sft, &lib, sets, Condition::kSftOnly, s, opt));
    const auto routed = primroute::evaluate(model, &rl, &lib, sets, Condition::kRouted, s, opt);
    for (int f = 0; f < kNumSkills; ++f)
      for (std::size_t i = 0; i < lib.size(); ++i) heat[f][i] += routed.strength[f][i] / static_cast<double>(config_.eval.seeds.size());
    results.push_back(routed);
    results.push_back(primroute::evaluate(model, &rl, &lib, sets, Condition::kTop1Only, s, opt));
    std::ostringstream m;
    m << "evaluate: seed " << s << " routed " << routed.mean_accuracy();
    say(m.str());
  }
  write_text(dir() / "results.csv", results_to_csv(results));
  std::vector<std::string> fams, prims;
  for (Skill k : kAllSkills) fams.emplace_back(skill_name(k));
  for (std::size_t i = 0; i < lib.size(); ++i) prims.push_back("v" + std::to_string(i + 1));
  write_text(dir() / "routing.csv", matrix_to_csv(heat, fams, prims));
}

void Pipeline::sweep() {
  record("sweep");
  const Model model = Model::load(need("model.bin", "pretrain"));
  const auto lib = PrimitiveLibrary::load(need("library.bin", "elicit"), model.fingerprint());
  std::vector<std::vector<TaskInstance>> sets;
  const auto all = eval_sets();
  for (const auto& s : all) sets.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(s.size(), config_.elicitation.sweep_per_family)));
  const auto rows = static_sweep(model, lib, sets, config_.elicitation.sweep_alphas, eval_max_steps());
  write_text(dir() / "sweep.csv", sweep_to_csv(rows));
  say("sweep: " + std::to_string(rows.size()) + " rows");
}

void Pipeline::ablate() {
  record("ablate");
  const Model model = Model::load(need("model.bin", "pretrain"));
  const auto sets = eval_sets();
  const auto prompts = router_train_prompts();
  const std::uint64_t seed = config_.eval.seeds.front();
  EvalOptions opt;
  opt.config_hash = config_.hash();
  std::vector<EvalResult> rows;
  std::vector<std::string> absent;
  const fs::path main_lib = dir() / "library.bin";
  const fs::path main_router = dir() / ("router_" + seed_tag(seed) + ".bin");
  std::optional<PrimitiveLibrary> lib;
  if (fs::exists(main_lib)) lib = PrimitiveLibrary::load(main_lib, model.fingerprint());
  auto add_main = [&](const std::string& label, Condition cond) {
    if (!lib || !fs::exists(main_router)) {
      absent.push_back(label);
      return;
    }
    const Router r = Router::load(main_router, lib->hash());
    EvalOptions o = opt;
    o.label = label;
    rows.push_back(primroute::evaluate(model, &r, &*lib, sets, cond, seed, o));
  };
  auto train_variant = [&](const std::string& label, Condition cond, std::size_t layer, std::size_t k) {
    say("ablate: " + label);
    const auto b = build_primitives(model, config_, layer, k);
    json log;
    std::string labels;
    Router r = train_sft_router(model, b.library, config_, prompts, seed, log, labels);
    rl_refine(r, model, b.library, config_, prompts, seed);
    EvalOptions o = opt;
    o.label = label;
    rows.push_back(primroute::evaluate(model, &r, &b.library, sets, cond, seed, o));
  };
  const std::size_t main_layer = config_.model.intervention_layer;
  add_main("layer-" + std::to_string(main_layer), Condition::kRouted);
  if (config_.eval.ablation_layer != main_layer) {
    train_variant("layer-" + std::to_string(config_.eval.ablation_layer), Condition::kLayerAlt, config_.eval.ablation_layer,
                  config_.elicitation.num_primitives);
  }
  for (std::size_t k : config_.eval.k_variants) {
    const std::string label = "K=" + std::to_string(k);
    if (k == config_.elicitation.num_primitives) {
      add_main(label, Condition::kKVariant);
    } else {
      train_variant(label, Condition::kKVariant, main_layer, k);
    }
  }
  write_text(dir() / "ablation.csv", results_to_csv(rows));
  json a;
  a["absent"] = absent;
  write_text(dir() / "ablation_absent.json", a.dump() + "\n");
  for (const auto& l : absent) say("ablate: row '" + l + "' absent (checkpoint missing)");
}

std::vector<std::string> Pipeline::report() {
  ReportBundle b;
  json m;
  m["config"] = json::parse(config_.result_json());
  m["config_hash"] = hex64(config_.hash());
  m["master_seed"] = config_.seed;
  m["router_seeds"] = config_.eval.seeds;
  json artifacts = json::object();
  for (const auto& entry : fs::directory_iterator(dir())) {
    if (!entry.is_regular_file()) continue;
    const auto bytes = read_file_bytes(entry.path());
    artifacts[entry.path().filename().string()] = hex64(fnv1a64(bytes));
  }
  m["artifacts"] = artifacts;
  if (fs::exists(dir() / "headroom.json")) m["headroom"] = json::parse(read_text(dir() / "headroom.json"));
  if (fs::exists(dir() / "results.csv")) b.results = results_from_csv(read_text(dir() / "results.csv"));
  if (fs::exists(dir() / "ablation.csv")) b.ablation = results_from_csv(read_text(dir() / "ablation.csv"));
  if (fs::exists(dir() / "sweep.csv")) {
    const std::string text = read_text(dir() / "sweep.csv");
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream cells(line);
      std::string v, a, fam, acc, tok;
      std::getline(cells, v, ',');
      std::getline(cells, a, ',');
      std::getline(cells, fam, ',');
      std::getline(cells, acc, ',');
      std::getline(cells, tok, ',');
      SweepRow r;
      r.vector_index = std::stoul(v);
      r.alpha = std::stod(a);
      r.skill = skill_from_name(fam);
      r.accuracy = std::stod(acc);
      r.mean_tokens = std::stod(tok);
      b.sweep.push_back(r);
    }
  }
  if (fs::exists(dir() / "elicitation.json")) {
    const json e = json::parse(read_text(dir() / "elicitation.json"));
    for (const auto& p : e["pca_projection"]) b.pca_projection.push_back({p[0].get<double>(), p[1].get<double>()});
    b.pca_groups = e["assignments"].get<std::vector<int>>();
    b.cosine = e["cosine"].get<std::vector<std::vector<double>>>();
    m["elicitation"] = {{"acceptance_rate", e["acceptance_rate"]},
                        {"pca_top_k_fraction", e["pca_top_k_fraction"]},
                        {"purity_vs_family", e["purity_vs_family"]},
                        {"mean_abs_off_diagonal_cosine", e["mean_abs_off_diagonal_cosine"]},
                        {"library_hash", e["library_hash"]}};
  }
  if (fs::exists(dir() / "routing.csv")) {
    std::istringstream in(read_text(dir() / "routing.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::istringstream cells(line);
      std::string cell;
      std::getline(cells, cell, ',');
      std::vector<double> row;
      while (std::getline(cells, cell, ',')) row.push_back(std::stod(cell));
      b.routing.push_back(row);
    }
  }
  b.manifest = m.dump(2) + "\n";
  const auto files = emit_reports(b, dir() / "reports");
  say("report: wrote " + std::to_string(files.size()) + " files to " + (dir() / "reports").string());
  return files;
}

void Pipeline::run_all() {
  pretrain();
  elicit();
  train_sft();
  train_rl();
  evaluate();
  sweep();
  report();
}

}  // namespace primroute
