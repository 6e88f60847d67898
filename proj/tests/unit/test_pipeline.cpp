#include <doctest.h>

#include <filesystem>
#include <regex>

#include "primroute/config.hpp"
#include "primroute/errors.hpp"
#include "primroute/evaluation.hpp"
#include "primroute/pipeline.hpp"
#include "primroute/report.hpp"
#include "test_support.hpp"

using namespace primroute;
using primroute::testing::tiny_model;

namespace {

// Tag-balance check standing in for an XML parser.
bool well_formed(const std::string& svg) {
  if (svg.find("<svg") == std::string::npos) return false;
  std::vector<std::string> stack;
  const std::regex tag(R"(<(/?)([a-zA-Z][a-zA-Z0-9]*)[^>]*?(/?)>)");
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), tag); it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    if (m[3] == "/") continue;
    if (m[1] == "/") {
      if (stack.empty() || stack.back() != m[2]) return false;
      stack.pop_back();
    } else {
      stack.push_back(m[2]);
    }
  }
  return stack.empty();
}

EvalResult sample_result(const std::string& label, Condition c, std::uint64_t seed, bool steered) {
  EvalResult r;
  r.label = label;
  r.condition = c;
  r.seed = seed;
  r.config_hash = 0xabcdef0123456789ULL;
  for (int f = 0; f < kNumSkills; ++f) {
    r.accuracy[f] = 0.1 * f + 0.01 * static_cast<double>(seed) + 1.0 / 3.0;
    r.mean_tokens[f] = 2.0 + f / 7.0;
  }
  if (steered) r.strength.assign(kNumSkills, std::vector<double>{0.0, 1.0 / 3.0, 2.0});
  return r;
}

Router closed_router(std::size_t d, std::size_t k, std::uint64_t lib_hash) {
  RouterConfig c;
  c.input_dim = d;
  c.num_primitives = k;
  Router r = Router::initialize(c, 1);
  auto params = r.parameters();
  for (double& v : params[2].mutable_values()) v = 0.0;
  for (double& v : params[3].mutable_values()) v = -5.0;
  r.set_library_hash(lib_hash);
  return r;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("defaults validate and round-trip through json") {
    RunConfig c;
    CHECK_NOTHROW(c.validate());
    const auto back = RunConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
  }

  TEST_CASE("strict parsing") {
    CHECK_THROWS_AS(RunConfig::from_json(R"({"grpo": {"group_sise": 8}})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(R"({"seed": "seven"})"), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json("{not json"), ConfigError);
    const auto c = RunConfig::from_json(R"({"grpo": {"group_size": 4}})");
    CHECK(c.grpo.group_size == 4);
    CHECK(c.grpo.kl_coef == 0.001);
  }

  TEST_CASE("overrides") {
    RunConfig c;
    c.apply_override("grpo.kl_coef=0.01");
    c.apply_override("output_dir=runs/x");
    c.apply_override("eval.seeds=[4,5]");
    CHECK(c.grpo.kl_coef == 0.01);
    CHECK(c.output_dir == "runs/x");
    CHECK(c.eval.seeds == std::vector<std::uint64_t>{4, 5});
    CHECK_THROWS_AS(c.apply_override("grpo.nothing=1"), ConfigError);
    CHECK_THROWS_AS(c.apply_override("no-equals-sign"), ConfigError);
  }

  TEST_CASE("defaults carry the declared values") {
    RunConfig c;
    CHECK(c.router.tau == 0.7);
    CHECK(c.router.alpha_max == 2.0);
    CHECK(c.elicitation.num_primitives == 6);
    CHECK(c.grpo.group_size == 8);
    CHECK(c.grpo.kl_coef == 0.001);
    CHECK(c.grpo.temperature == 1.5);
    CHECK(c.sft.samples == 200);
    CHECK(c.eval.seeds.size() == 3);
  }

  TEST_CASE("inconsistent values are rejected") {
    RunConfig c;
    c.router.tau = 1.5;
    CHECK_THROWS(c.validate());
    c = RunConfig{};
    c.eval.seeds.clear();
    CHECK_THROWS(c.validate());
  }
}

TEST_SUITE("report") {
  TEST_CASE("results csv round trip") {
    std::vector<EvalResult> rs = {sample_result("base", Condition::kBase, 7, false),
                                  sample_result("routed", Condition::kRouted, 1, true),
                                  sample_result("K=8", Condition::kKVariant, 2, true)};
    const auto back = results_from_csv(results_to_csv(rs));
    REQUIRE(back.size() == rs.size());
    for (std::size_t i = 0; i < rs.size(); ++i) {
      CHECK(back[i].label == rs[i].label);
      CHECK(back[i].condition == rs[i].condition);
      CHECK(back[i].seed == rs[i].seed);
      CHECK(back[i].config_hash == rs[i].config_hash);
      CHECK(back[i].accuracy == rs[i].accuracy);
      CHECK(back[i].mean_tokens == rs[i].mean_tokens);
      CHECK(back[i].strength == rs[i].strength);
    }
    CHECK_THROWS_AS(results_from_csv("label,nope\n1,2\n"), FormatError);
  }

  TEST_CASE("summary reports deltas against base") {
    std::vector<EvalResult> rs = {sample_result("base", Condition::kBase, 0, false),
                                  sample_result("routed", Condition::kRouted, 3, true)};
    const auto s = summary_csv(rs);
    CHECK(s.find("delta_vs_base") != std::string::npos);
    CHECK(s.find("token_ratio") != std::string::npos);
    CHECK(s.find("routed") != std::string::npos);
  }

  TEST_CASE("svg output is well formed") {
    const auto line = svg_line_plot("t <&>", "x", "y", {{"a", {0, 1, 2}, {0.5, 0.7, 0.2}}, {"b", {0, 1}, {1, 0}}});
    CHECK(well_formed(line));
    CHECK(line.find("<&>") == std::string::npos);
    CHECK(well_formed(svg_scatter("pca", {{0, 1}, {1, 0}, {-1, 2}}, {0, 1, 1})));
    CHECK(well_formed(svg_heatmap("h", {{0, 1}, {2, 0.5}}, {"r1", "r2"}, {"c1", "c2"})));
  }

  TEST_CASE("empty bundle writes only the manifest") {
    const auto dir = std::filesystem::temp_directory_path() / "primroute_test_report";
    std::filesystem::remove_all(dir);
    ReportBundle b;
    b.manifest = "{}\n";
    const auto files = emit_reports(b, dir);
    CHECK(files == std::vector<std::string>{"manifest.json"});
    std::size_t n = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++n;
    CHECK(n == 1);
    std::filesystem::remove_all(dir);
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("a router with every gate closed matches the base model") {
    const Model m = tiny_model(4);
    EvalSets sets;
    for (Skill s : kAllSkills) sets[skill_index(s)] = generate_tasks(SkillSpec{s}, 10, 1, Split::kEval);
    PrimitiveLibrary lib;
    lib.layer = 1;
    Rng rng(1);
    for (int i = 0; i < 3; ++i) lib.vectors.push_back(primroute::testing::random_vector(16, rng));
    lib.model_fingerprint = m.fingerprint();
    const Router r = closed_router(16, 3, lib.hash());
    const auto base = evaluate(m, nullptr, nullptr, sets, Condition::kBase, 1);
    const auto routed = evaluate(m, &r, &lib, sets, Condition::kRouted, 1);
    CHECK(base.accuracy == routed.accuracy);
    CHECK(base.mean_tokens == routed.mean_tokens);
    const auto heat = routing_heatmap(m, r, lib, sets);
    for (const auto& row : heat)
      for (double x : row) CHECK(x == 0.0);

    Router wrong = closed_router(16, 3, lib.hash() + 1);
    CHECK_THROWS_AS(evaluate(m, &wrong, &lib, sets, Condition::kRouted, 1), ProvenanceError);
    PrimitiveLibrary other = lib;
    other.model_fingerprint ^= 1;
    CHECK_THROWS_AS(evaluate(m, &r, &other, sets, Condition::kRouted, 1), ProvenanceError);
    CHECK_THROWS(evaluate(m, nullptr, nullptr, sets, Condition::kRouted, 1));
  }

  TEST_CASE("heatmap entries stay inside [0, alpha_max]") {
    const Model m = tiny_model(5);
    EvalSets sets;
    for (Skill s : kAllSkills) sets[skill_index(s)] = generate_tasks(SkillSpec{s}, 5, 2, Split::kEval);
    PrimitiveLibrary lib;
    lib.layer = 1;
    Rng rng(2);
    for (int i = 0; i < 4; ++i) lib.vectors.push_back(primroute::testing::random_vector(16, rng));
    lib.model_fingerprint = m.fingerprint();
    RouterConfig c;
    c.input_dim = 16;
    c.num_primitives = 4;
    Router r = Router::initialize(c, 3);
    r.set_library_hash(lib.hash());
    for (const auto& row : routing_heatmap(m, r, lib, sets))
      for (double x : row) CHECK((x >= 0.0 && x <= c.alpha_max));
  }

  TEST_CASE("leakage between training and evaluation is caught") {
    EvalSets sets;
    for (Skill s : kAllSkills) sets[skill_index(s)] = generate_tasks(SkillSpec{s}, 5, 2, Split::kEval);
    const auto train = generate_tasks(SkillSpec{Skill::kLookup}, 20, 2, Split::kTrain);
    CHECK_NOTHROW(assert_no_leakage(sets, train));
    std::vector<TaskInstance> leaked = train;
    leaked.push_back(sets[skill_index(Skill::kLookup)][0]);
    CHECK_THROWS_AS(assert_no_leakage(sets, leaked), DataError);
  }

  TEST_CASE("condition names round trip") {
    for (auto c : {Condition::kBase, Condition::kRouted, Condition::kSftOnly, Condition::kTop1Only, Condition::kLayerAlt,
                   Condition::kStaticAlpha, Condition::kKVariant, Condition::kPrompted}) {
      CHECK(condition_from_name(condition_name(c)) == c);
    }
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("downstream phases name the missing upstream command") {
    RunConfig c;
    c.output_dir = (std::filesystem::temp_directory_path() / "primroute_test_empty_run").string();
    std::filesystem::remove_all(c.output_dir);
    Pipeline p(c);
    try {
      p.evaluate();
      FAIL("evaluate should need pretrain");
    } catch (const DependencyError& e) {
      CHECK(std::string(e.what()).find("pretrain") != std::string::npos);
    }
    CHECK_THROWS_AS(p.train_rl(), DependencyError);
    CHECK_NOTHROW(p.report());
    std::filesystem::remove_all(c.output_dir);
  }

  TEST_CASE("evaluation and router prompts are disjoint") {
    Pipeline p(RunConfig{});
    CHECK_NOTHROW(assert_no_leakage(p.eval_sets(), p.router_train_prompts()));
  }
}
