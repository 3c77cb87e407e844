#include "vibprune/gradcheck.hpp"

#include <random>

#include "vibprune/objective.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr double kLossBound = 1e-3;
constexpr double kKlTermBound = 1e-4;

using Named = std::vector<std::pair<std::string, Tensor>>;

Named gate_tensors(const GatedTransformer& m) {
  Named out;
  for (const auto& [name, t] : m.named_parameters())
    if (name.rfind("gate.", 0) == 0) out.emplace_back(name, t);
  return out;
}

}  // namespace

std::vector<LossGradcheck> gradcheck_losses(const GradcheckSetup& s) {
  const auto& mc = s.model;
  mc.validate();
  GatedTransformer teacher = build_teacher(mc, s.seed);
  GatedTransformer base = build_teacher(mc, s.seed + 1);
  for (auto* m : {&teacher, &base})
    for (auto& [name, t] : m->named_weights()) {
      Tensor h = t;
      for (auto& v : h.data()) v = static_cast<real>(v * s.weight_scale);
    }
  // Spread gates away from identity so every mask term carries gradient.
  GateInit init{.mu_mean = 1.0, .mu_std = 0.3, .sigma_init = 0.5, .seed = s.seed + 2};
  GatedTransformer student = build_student(base, init, GateBetas::uniform(0.05, false));

  std::mt19937_64 rng(s.seed + 3);
  const std::size_t S = mc.max_seq;
  TokenBatch tokens{s.batch, S, std::vector<std::int32_t>(s.batch * S)};
  for (auto& t : tokens.ids) t = static_cast<std::int32_t>(rng() % mc.vocab_size);
  std::vector<std::int32_t> labels(s.batch);
  for (auto& l : labels) l = static_cast<std::int32_t>(rng() % mc.num_classes);

  ForwardTrace target;
  {
    NoGradGuard no_grad;
    target = forward(teacher, tokens, {ForwardMode::kEval, 0.0, false});
  }
  DistillConfig distill = DistillConfig::create(mc.width, mc.layers);
  {
    // A non-identity projection exercises the W gradient as well.
    Tensor w = distill.w_layer;
    for (auto& v : w.data()) v = static_cast<real>(v + 0.1 * (static_cast<double>(rng() % 1000) / 1000.0 - 0.5));
  }
  const std::vector<bool> alive(mc.layers, true);

  auto student_forward = [&](std::uint64_t seed) {
    NoiseSource noise(seed);
    return forward(student, tokens, {ForwardMode::kTrain, 0.0, false}, &noise);
  };

  const Named all = student.named_parameters();
  Named with_w = all;
  with_w.emplace_back("distill.w_layer", distill.w_layer);

  std::vector<LossGradcheck> out;
  auto run = [&](const std::string& name, const std::function<Tensor(std::uint64_t)>& fn, const Named& params,
                 double bound) {
    std::vector<Tensor> tensors;
    for (const auto& [n, t] : params) tensors.push_back(t);
    const auto r = gradcheck_report(fn, tensors, s.eps, s.seed + 4);
    out.push_back({name, r.max_relative_error, bound, r.entries,
                   params[r.worst_param].first + "[" + std::to_string(r.worst_index) + "]", r.worst_analytic,
                   r.worst_numeric});
  };

  run("task", [&](std::uint64_t seed) { return task_cross_entropy(student_forward(seed).logits, labels); }, all,
      kLossBound);
  run("vib", [&](std::uint64_t) { return vib_loss(student); }, gate_tensors(student), kLossBound);
  {
    const VibGate& g = *student.gates->width;
    run("kl_term", [&](std::uint64_t) { return g.kl_term(); }, {{"gate.width.mu", g.mu()}, {"gate.width.log_sigma", g.log_sigma()}},
        kKlTermBound);
  }
  run("pred", [&](std::uint64_t seed) { return pred_distill(student_forward(seed).logits, target.logits); }, all,
      kLossBound);

  std::vector<std::size_t> mapping;
  {
    NoGradGuard no_grad;
    mapping = layer_map(student_forward(s.seed + 4).hidden_states, target.hidden_states, distill.w_layer, alive);
  }
  run("layer",
      [&](std::uint64_t seed) {
        return layer_distill(student_forward(seed).hidden_states, target.hidden_states, distill.w_layer, mapping);
      },
      with_w, kLossBound);

  SparsityController ctrl;
  ctrl.lambda1 = 0.3;
  ctrl.lambda2 = 0.5;
  ctrl.target = 0.5;
  const CountModel counts = build_count_model(mc, SparsityMetric::kParameters);
  run("sparsity",
      [&](std::uint64_t) { return sparsity_loss(ctrl, expected_sparsity(student, counts, 0.0, 1.0)); },
      gate_tensors(student), kLossBound);
  return out;
}

VIBPRUNE_NAMESPACE_END
