#include "primroute/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "primroute/binary_io.hpp"

namespace primroute {

using nlohmann::json;

namespace {

std::string head_name(StrengthHead h) { return h == StrengthHead::kClip ? "clip" : "sigmoid"; }

StrengthHead head_from(const std::string& s) {
  if (s == "clip") return StrengthHead::kClip;
  if (s == "sigmoid") return StrengthHead::kSigmoid;
  throw ConfigError("router.strength_head must be \"clip\" or \"sigmoid\", got \"" + s + "\"");
}

json to_obj(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  j["model"] = {{"num_layers", c.model.num_layers},
                {"model_dim", c.model.model_dim},
                {"num_heads", c.model.num_heads},
                {"vocab_size", c.model.vocab_size},
                {"max_context", c.model.max_context},
                {"intervention_layer", c.model.intervention_layer},
                {"mlp_multiplier", c.model.mlp_multiplier},
                {"residual_radius", c.model.residual_radius}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch_size", c.pretrain.batch_size},
                   {"lr", c.pretrain.lr},
                   {"warmup_steps", c.pretrain.warmup_steps},
                   {"weight_decay", c.pretrain.weight_decay},
                   {"grad_clip", c.pretrain.grad_clip},
                   {"framed_fraction", c.pretrain.framed_fraction}};
  j["tasks"] = {{"pairs_per_family", c.tasks.pairs_per_family},
                {"train_per_family", c.tasks.train_per_family},
                {"eval_per_family", c.tasks.eval_per_family}};
  j["elicitation"] = {{"num_primitives", c.elicitation.num_primitives},
                      {"kmeans_restarts", c.elicitation.kmeans_restarts},
                      {"filter_min_ratio", c.elicitation.filter_band.min_ratio},
                      {"filter_max_ratio", c.elicitation.filter_band.max_ratio},
                      {"sweep_alphas", c.elicitation.sweep_alphas},
                      {"sweep_per_family", c.elicitation.sweep_per_family},
                      {"min_acceptance", c.elicitation.min_acceptance}};
  j["router"] = {{"bottleneck", c.router.bottleneck},
                 {"tau", c.router.tau},
                 {"alpha_max", c.router.alpha_max},
                 {"strength_head", head_name(c.router.strength_head)},
                 {"straight_through", c.router.straight_through}};
  j["sft"] = {{"samples", c.sft.samples},
              {"alpha_step", c.sft.oracle.alpha_step},
              {"subset_size", c.sft.oracle.subset_size},
              {"oracle_prefer_null", c.sft.oracle.prefer_null},
              {"epochs", c.sft.train.epochs},
              {"batch_size", c.sft.train.batch_size},
              {"lr", c.sft.train.lr}};
  j["grpo"] = {{"group_size", c.grpo.group_size},
               {"temperature", c.grpo.temperature},
               {"kl_coef", c.grpo.kl_coef},
               {"clip_range", c.grpo.clip_range},
               {"lr", c.grpo.lr},
               {"epochs", c.grpo.epochs},
               {"batch_size", c.grpo.batch_size},
               {"adv_eps", c.grpo.adv_eps},
               {"gumbel_start", c.grpo.gumbel_start},
               {"gumbel_end", c.grpo.gumbel_end},
               {"sparsity_coef", c.grpo.sparsity_coef},
               {"max_steps", c.grpo.max_steps}};
  j["eval"] = {{"seeds", c.eval.seeds},
               {"ablation_layer", c.eval.ablation_layer},
               {"k_variants", c.eval.k_variants},
               {"static_alpha", c.eval.static_alpha},
               {"headroom_margin", c.eval.headroom_margin},
               {"headroom_ceiling", c.eval.headroom_ceiling},
               {"require_headroom", c.eval.require_headroom}};
  return j;
}

RunConfig from_obj(const json& j) {
  RunConfig c;
  c.seed = j["seed"];
  c.output_dir = j["output_dir"];
  c.threads = j["threads"];
  const auto& m = j["model"];
  c.model.num_layers = m["num_layers"];
  c.model.model_dim = m["model_dim"];
  c.model.num_heads = m["num_heads"];
  c.model.vocab_size = m["vocab_size"];
  c.model.max_context = m["max_context"];
  c.model.intervention_layer = m["intervention_layer"];
  c.model.mlp_multiplier = m["mlp_multiplier"];
  c.model.residual_radius = m["residual_radius"];
  const auto& p = j["pretrain"];
  c.pretrain.steps = p["steps"];
  c.pretrain.batch_size = p["batch_size"];
  c.pretrain.lr = p["lr"];
  c.pretrain.warmup_steps = p["warmup_steps"];
  c.pretrain.weight_decay = p["weight_decay"];
  c.pretrain.grad_clip = p["grad_clip"];
  c.pretrain.framed_fraction = p["framed_fraction"];
  const auto& t = j["tasks"];
  c.tasks.pairs_per_family = t["pairs_per_family"];
  c.tasks.train_per_family = t["train_per_family"];
  c.tasks.eval_per_family = t["eval_per_family"];
  const auto& e = j["elicitation"];
  c.elicitation.num_primitives = e["num_primitives"];
  c.elicitation.kmeans_restarts = e["kmeans_restarts"];
  c.elicitation.filter_band.min_ratio = e["filter_min_ratio"];
  c.elicitation.filter_band.max_ratio = e["filter_max_ratio"];
  c.elicitation.sweep_alphas = e["sweep_alphas"].get<std::vector<double>>();
  c.elicitation.sweep_per_family = e["sweep_per_family"];
  c.elicitation.min_acceptance = e["min_acceptance"];
  const auto& r = j["router"];
  c.router.bottleneck = r["bottleneck"];
  c.router.tau = r["tau"];
  c.router.alpha_max = r["alpha_max"];
  c.router.strength_head = head_from(r["strength_head"]);
  c.router.straight_through = r["straight_through"];
  const auto& s = j["sft"];
  c.sft.samples = s["samples"];
  c.sft.oracle.alpha_step = s["alpha_step"];
  c.sft.oracle.subset_size = s["subset_size"];
  c.sft.oracle.prefer_null = s["oracle_prefer_null"];
  c.sft.train.epochs = s["epochs"];
  c.sft.train.batch_size = s["batch_size"];
  c.sft.train.lr = s["lr"];
  const auto& g = j["grpo"];
  c.grpo.group_size = g["group_size"];
  c.grpo.temperature = g["temperature"];
  c.grpo.kl_coef = g["kl_coef"];
  c.grpo.clip_range = g["clip_range"];
  c.grpo.lr = g["lr"];
  c.grpo.epochs = g["epochs"];
  c.grpo.batch_size = g["batch_size"];
  c.grpo.adv_eps = g["adv_eps"];
  c.grpo.gumbel_start = g["gumbel_start"];
  c.grpo.gumbel_end = g["gumbel_end"];
  c.grpo.sparsity_coef = g["sparsity_coef"];
  c.grpo.max_steps = g["max_steps"];
  const auto& v = j["eval"];
  c.eval.seeds = v["seeds"].get<std::vector<std::uint64_t>>();
  c.eval.ablation_layer = v["ablation_layer"];
  c.eval.k_variants = v["k_variants"].get<std::vector<std::size_t>>();
  c.eval.static_alpha = v["static_alpha"];
  c.eval.headroom_margin = v["headroom_margin"];
  c.eval.headroom_ceiling = v["headroom_ceiling"];
  c.eval.require_headroom = v["require_headroom"];
  return c;
}

/// Same JSON kind as the default, with unsigned defaults requiring
/// nonnegative integers and float defaults accepting any number.
bool compatible(const json& def, const json& value) {
  if (def.is_number_unsigned()) return value.is_number_unsigned() || (value.is_number_integer() && value >= 0);
  if (def.is_number_float()) return value.is_number();
  if (def.is_array()) {
    if (!value.is_array()) return false;
    for (const auto& x : value) {
      if (!def.empty() && !compatible(def.front(), x)) return false;
      if (def.empty() && !x.is_number()) return false;
    }
    return true;
  }
  return def.type() == value.type();
}

void merge_strict(json& target, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ConfigError("config: " + (path.empty() ? std::string("top level") : path) + " must be an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!target.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    json& slot = target[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), key);
    } else {
      if (!compatible(slot, it.value())) {
        throw ConfigError("config: key '" + key + "' expects a value like " + slot.dump() + ", got " + it.value().dump());
      }
      slot = it.value();
    }
  }
}

RunConfig parse_merged(const json& patch) {
  json merged = to_obj(RunConfig{});
  merge_strict(merged, patch, "");
  RunConfig c;
  try {
    c = from_obj(merged);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  try {
    model.validate();
    grpo.validate();
    router_config(elicitation.num_primitives).validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (model.vocab_size != vocab::kSize) throw ConfigError("config: model.vocab_size is fixed at " + std::to_string(vocab::kSize));
  if (threads == 0) throw ConfigError("config: threads must be at least 1");
  if (pretrain.batch_size == 0) throw ConfigError("config: pretrain.batch_size must be positive");
  if (tasks.pairs_per_family == 0 || tasks.train_per_family == 0 || tasks.eval_per_family == 0) {
    throw ConfigError("config: task counts must be positive");
  }
  if (elicitation.num_primitives == 0) throw ConfigError("config: elicitation.num_primitives must be positive");
  if (elicitation.sweep_alphas.empty()) throw ConfigError("config: elicitation.sweep_alphas is empty");
  if (sft.samples == 0 || sft.train.batch_size == 0) throw ConfigError("config: sft sizes must be positive");
  if (eval.seeds.empty()) throw ConfigError("config: eval.seeds is empty");
  if (eval.ablation_layer < 1 || eval.ablation_layer >= model.num_layers) {
    throw ConfigError("config: eval.ablation_layer must lie in [1, num_layers - 1]");
  }
  for (std::size_t k : eval.k_variants)
    if (k == 0) throw ConfigError("config: eval.k_variants entries must be positive");
}

std::string RunConfig::to_json() const { return to_obj(*this).dump(2) + "\n"; }

std::uint64_t RunConfig::hash() const { return fnv1a64(result_json()); }

std::string RunConfig::result_json() const {
  auto j = to_obj(*this);
  j.erase("output_dir");
  j.erase("threads");
  return j.dump(2) + "\n";
}

RouterConfig RunConfig::router_config(std::size_t num_primitives) const {
  RouterConfig rc;
  rc.input_dim = model.model_dim;
  rc.bottleneck = router.bottleneck;
  rc.num_primitives = num_primitives;
  rc.tau = router.tau;
  rc.alpha_max = router.alpha_max;
  rc.strength_head = router.strength_head;
  rc.straight_through = router.straight_through;
  return rc;
}

RunConfig RunConfig::from_json(const std::string& text) {
  json patch;
  try {
    patch = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return parse_merged(patch);
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  json merged = to_obj(*this);
  merge_strict(merged, patch, "");
  *this = parse_merged(merged);
}

}  // namespace primroute
