#include "primroute/pretrain.hpp"

#include <cmath>
#include <sstream>

#include "primroute/errors.hpp"
#include "primroute/inference.hpp"
#include "primroute/optim.hpp"
#include "primroute/rng.hpp"

namespace primroute {

PretrainSample make_pretrain_sample(const TaskInstance& instance, Token frame) {
  PretrainSample s;
  bool rigorous = !instance.distracted;
  if (frame >= 0) {
    s.prompt = with_frame(instance.prompt, frame);
    rigorous = frame == vocab::kPositive1 || frame == vocab::kPositive2;
  } else {
    s.prompt = instance.prompt;
  }
  s.target = rigorous ? instance.gold : instance.heuristic;
  s.target.push_back(vocab::kEos);
  return s;
}

Model pretrain(const ModelConfig& config, const PretrainConfig& pcfg, std::uint64_t seed,
               std::vector<double>* loss_curve, const std::function<void(const PretrainProgress&)>& on_progress) {
  Model model = Model::initialize(config, seed);
  if (pcfg.steps == 0) {
    model.freeze();
    return model;
  }
  OptimizerConfig ocfg;
  ocfg.kind = OptimizerKind::kAdam;
  ocfg.lr = pcfg.lr;
  ocfg.beta2 = 0.98;
  ocfg.weight_decay = pcfg.weight_decay;
  ocfg.grad_clip = pcfg.grad_clip;
  Optimizer opt(model.parameters(), ocfg);
  Rng rng(derive_seed(seed, "pretrain-data"));

  std::array<std::pair<std::uint64_t, std::uint64_t>, kNumSkills> ranges;
  for (Skill s : kAllSkills) ranges[skill_index(s)] = SkillSpec{s}.seed_range(Split::kTrain);

  for (std::size_t step = 0; step < pcfg.steps; ++step) {
    Tokens tokens;
    std::vector<std::size_t> lengths;
    std::vector<int> targets;
    std::vector<std::size_t> target_rows;
    for (std::size_t b = 0; b < pcfg.batch_size; ++b) {
      const Skill skill = kAllSkills[rng.below(kNumSkills)];
      const auto [lo, hi] = ranges[skill_index(skill)];
      const TaskInstance inst = make_instance(skill, lo + rng.below(hi - lo));
      Token frame = -1;
      if (rng.uniform() < pcfg.framed_fraction) {
        const int variant = static_cast<int>(rng.below(2));
        frame = rng.below(2) == 0 ? vocab::positive_frame(variant) : vocab::negative_frame(variant);
      }
      const auto sample = make_pretrain_sample(inst, frame);
      const std::size_t base = tokens.size();
      tokens.insert(tokens.end(), sample.prompt.begin(), sample.prompt.end());
      tokens.insert(tokens.end(), sample.target.begin(), sample.target.end() - 1);
      lengths.push_back(sample.prompt.size() + sample.target.size() - 1);
      for (std::size_t i = 0; i < sample.target.size(); ++i) {
        target_rows.push_back(base + sample.prompt.size() - 1 + i);
        targets.push_back(sample.target[i]);
      }
    }
    // Warmup then cosine decay.
    double lr = pcfg.lr;
    if (step < pcfg.warmup_steps) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(pcfg.warmup_steps);
    } else {
      const double t = static_cast<double>(step - pcfg.warmup_steps) /
                       static_cast<double>(std::max<std::size_t>(1, pcfg.steps - pcfg.warmup_steps));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
    }
    opt.set_lr(lr);
    opt.zero_grad();
    const Tensor logits = model.forward(tokens, lengths);
    std::vector<int> rows(target_rows.begin(), target_rows.end());
    const Tensor picked = gather_rows(logits, rows);
    const Tensor loss = softmax_crossentropy(picked, targets);
    if (!std::isfinite(loss.item())) throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
    backward(loss);
    opt.step();
    if (loss_curve) loss_curve->push_back(loss.item());
    if (on_progress) on_progress({step, loss.item()});
  }
  model.freeze();
  return model;
}

double greedy_accuracy(const Model& model, const std::vector<TaskInstance>& tasks) {
  if (tasks.empty()) throw DataError("greedy_accuracy: empty task set");
  std::size_t correct = 0;
  for (const auto& t : tasks) {
    const auto gen = generate(model, t.prompt, nullptr, t.gold.size() + 1, Sampling::greedy_decoding());
    correct += static_cast<std::size_t>(verify(gen.tokens, t));
  }
  return static_cast<double>(correct) / static_cast<double>(tasks.size());
}

HeadroomReport check_headroom(const Model& model, const std::array<std::vector<TaskInstance>, kNumSkills>& eval_sets,
                              double margin, double ceiling) {
  HeadroomReport r;
  std::ostringstream os;
  for (Skill s : kAllSkills) {
    const int i = skill_index(s);
    r.accuracy[i] = greedy_accuracy(model, eval_sets[i]);
    r.chance[i] = SkillSpec{s}.chance_accuracy();
    const bool fam_ok = r.accuracy[i] > r.chance[i] + margin && r.accuracy[i] < ceiling;
    r.ok = r.ok && fam_ok;
    os << skill_name(s) << '=' << r.accuracy[i] << (fam_ok ? "" : " (no headroom)") << ' ';
  }
  r.summary = os.str();
  return r;
}

}  // namespace primroute
