#include "vibprune/objective.hpp"

#include <cmath>
#include <limits>

VIBPRUNE_NAMESPACE_BEGIN

DistillConfig DistillConfig::create(std::size_t width, std::size_t teacher_layer_count, double eta) {
  if (eta < 0 || eta > 1) throw Error(ErrorKind::kContract, "eta must lie in [0, 1]");
  DistillConfig cfg;
  cfg.eta = eta;
  std::vector<real> eye(width * width, real(0));
  for (std::size_t i = 0; i < width; ++i) eye[i * width + i] = real(1);
  cfg.w_layer = Tensor::from({width, width}, std::move(eye), true);
  for (std::size_t i = 0; i < teacher_layer_count; ++i) cfg.teacher_layers.push_back(i);
  return cfg;
}

Tensor task_cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels) {
  if (logits.dim() != 2 || logits.size(0) != labels.size())
    throw Error(ErrorKind::kShape, "task_cross_entropy: logits " + shape_string(logits.shape()) + " vs " +
                                       std::to_string(labels.size()) + " labels");
  const std::size_t batch = logits.size(0), classes = logits.size(1);
  std::vector<real> onehot(batch * classes, real(0));
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes)
      throw Error(ErrorKind::kData, "label " + std::to_string(labels[b]) + " outside " + std::to_string(classes) +
                                        " classes");
    onehot[b * classes + static_cast<std::size_t>(labels[b])] = real(1);
  }
  const Tensor picked = sum(mul(log_softmax_lastdim(logits), Tensor::from(logits.shape(), std::move(onehot))));
  return scale(picked, static_cast<real>(-1.0 / static_cast<double>(batch)));
}

Tensor pred_distill(const Tensor& student_logits, const Tensor& teacher_logits, bool reverse) {
  if (student_logits.shape() != teacher_logits.shape() || student_logits.dim() != 2)
    throw Error(ErrorKind::kShape, "pred_distill: " + shape_string(student_logits.shape()) + " vs " +
                                       shape_string(teacher_logits.shape()));
  const real inv_batch = static_cast<real>(1.0 / static_cast<double>(student_logits.size(0)));
  const Tensor log_ps = log_softmax_lastdim(student_logits);
  Tensor log_pt;
  {
    NoGradGuard no_grad;
    log_pt = log_softmax_lastdim(teacher_logits.detach());
  }
  if (!reverse) return scale(sum(mul(exp(log_ps), sub(log_ps, log_pt))), inv_batch);
  const Tensor pt = [&] {
    NoGradGuard no_grad;
    return exp(log_pt);
  }();
  return scale(sum(mul(pt, sub(log_pt, log_ps))), inv_batch);
}

std::vector<std::size_t> layer_map(const std::vector<Tensor>& student_hiddens,
                                   const std::vector<Tensor>& teacher_hiddens, const Tensor& w_layer,
                                   const std::vector<bool>& alive) {
  if (alive.size() != student_hiddens.size())
    throw Error(ErrorKind::kShape, "layer_map: alive flags do not match student layers");
  bool any = false;
  for (bool a : alive) any = any || a;
  if (!any) throw Error(ErrorKind::kDegenerateModel, "no alive student layer to distill into");

  NoGradGuard no_grad;
  const Tensor w = w_layer.detach();
  std::vector<Tensor> projected(student_hiddens.size());
  for (std::size_t j = 0; j < student_hiddens.size(); ++j)
    if (alive[j]) projected[j] = matmul(student_hiddens[j].detach(), w);

  std::vector<std::size_t> mapping(teacher_hiddens.size());
  for (std::size_t i = 0; i < teacher_hiddens.size(); ++i) {
    const auto t = teacher_hiddens[i].data();
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < projected.size(); ++j) {
      if (!alive[j]) continue;
      const auto s = projected[j].data();
      if (s.size() != t.size())
        throw Error(ErrorKind::kShape, "layer_map: hidden shapes differ");
      double acc = 0.0;
      for (std::size_t e = 0; e < s.size(); ++e) {
        const double diff = static_cast<double>(s[e]) - t[e];
        acc += diff * diff;
      }
      const double mse = acc / static_cast<double>(s.size());
      if (mse < best) {
        best = mse;
        best_j = j;
      }
    }
    mapping[i] = best_j;
  }
  return mapping;
}

Tensor layer_distill(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                     const Tensor& w_layer, const std::vector<std::size_t>& mapping) {
  if (mapping.size() != teacher_hiddens.size())
    throw Error(ErrorKind::kShape, "layer_distill: mapping size differs from teacher layers");
  Tensor total;
  for (std::size_t i = 0; i < teacher_hiddens.size(); ++i) {
    const Tensor term =
        mean(square(sub(matmul(student_hiddens.at(mapping[i]), w_layer), teacher_hiddens[i].detach())));
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0);
}

std::vector<bool> alive_layers(const GatedTransformer& student, double tau, double temperature) {
  std::vector<bool> alive;
  if (!student.gates) return std::vector<bool>(student.config.layers, true);
  NoGradGuard no_grad;
  for (const auto& g : student.gates->layers) alive.push_back(g.layer_ffn.soft_keep(tau, temperature).item() > 0.5);
  return alive;
}

Tensor vib_loss(const GatedTransformer& student) {
  if (!student.gates) return Tensor::scalar(0);
  Tensor total;
  for (const auto& [name, gate] : student.gates->named()) {
    if (gate->beta() == 0) continue;
    const Tensor term = scale(gate->kl_term(), static_cast<real>(gate->beta()));
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0);
}

std::string_view metric_name(SparsityMetric metric) {
  return metric == SparsityMetric::kParameters ? "parameters" : "flops";
}

SparsityMetric parse_metric(std::string_view name) {
  if (name == "parameters" || name == "params") return SparsityMetric::kParameters;
  if (name == "flops") return SparsityMetric::kFlops;
  throw Error(ErrorKind::kConfig, "unknown sparsity metric '" + std::string(name) + "'");
}

CountModel build_count_model(const ModelConfig& config, SparsityMetric metric, std::size_t ref_seq) {
  config.validate();
  CountModel c;
  c.metric = metric;
  c.config = config;
  c.ref_seq = ref_seq == 0 ? config.max_seq : ref_seq;
  const double V = static_cast<double>(config.vocab_size), P = static_cast<double>(config.max_seq);
  const double C = static_cast<double>(config.num_classes), dh = static_cast<double>(config.head_dim());
  const double S = static_cast<double>(c.ref_seq);
  if (metric == SparsityMetric::kParameters) {
    c.global_m = V + P + 2 + C;  // embeddings, final norm, classifier rows
    c.mha_m = 3;                 // ln1 weight+bias, output bias
    c.mha_hm = 4 * dh;           // Q, K, V rows and O columns of one head
    c.mha_h = 3 * dh;            // Q, K, V biases
    c.ffn_m = 2;                 // ln2
    c.ffn_mi = 1;                // W_U
    c.ffn_i = 1;                 // up bias
    c.ffn_io = 1;                // W_D
    c.ffn_o = 1;                 // down bias
  } else {
    // 2mnk per matmul, one flop per element for elementwise work, per sequence.
    c.global_m = 2 * S + 2 * C;                     // embedding add, final norm, pooled classifier
    c.mha_m = 3 * S;                                // ln1, output bias, residual add
    c.mha_hm = 8 * S * dh;                          // Q, K, V, O projections
    c.mha_h = 3 * S * dh + 4 * S * S * dh + 2 * S * S;  // QKV biases, scores, context, scale, softmax
    c.ffn_m = S;                                    // ln2
    c.ffn_mi = 2 * S;                               // up projection
    c.ffn_i = 2 * S;                                // up bias, gelu
    c.ffn_io = 2 * S;                               // down projection
    c.ffn_o = 2 * S;                                // down bias, residual add
  }
  c.total_base = kept_count(c, StructureKeep::full(config));
  return c;
}

StructureKeep StructureKeep::full(const ModelConfig& config) {
  StructureKeep k;
  k.width.assign(config.width, 1.0);
  for (std::size_t i = 0; i < config.layers; ++i)
    k.layers.push_back({std::vector<double>(config.heads, 1.0), std::vector<double>(config.ffn_dim, 1.0),
                        std::vector<double>(config.width, 1.0), 1.0, 1.0});
  return k;
}

StructureKeep StructureKeep::from_hard_masks(const GatedTransformer& student, double tau) {
  if (!student.gates) return full(student.config);
  auto as_double = [](const std::vector<std::uint8_t>& m) { return std::vector<double>(m.begin(), m.end()); };
  StructureKeep k;
  k.width = as_double(student.gates->width->hard_mask(tau));
  for (const auto& g : student.gates->layers)
    k.layers.push_back({as_double(g.heads.hard_mask(tau)), as_double(g.intermediate.hard_mask(tau)),
                        as_double(g.output.hard_mask(tau)), static_cast<double>(g.layer_mha.hard_mask(tau)[0]),
                        static_cast<double>(g.layer_ffn.hard_mask(tau)[0])});
  return k;
}

double kept_count(const CountModel& c, const StructureKeep& keep) {
  double M = 0;
  for (double v : keep.width) M += v;
  double total = c.global_m * M;
  for (const auto& l : keep.layers) {
    double H = 0, I = 0, O = 0;
    for (double v : l.heads) H += v;
    for (double v : l.intermediate) I += v;
    for (std::size_t j = 0; j < l.output.size(); ++j) O += l.output[j] * keep.width[j];
    total += l.mha * (c.mha_m * M + H * (c.mha_hm * M + c.mha_h));
    total += l.ffn * (c.ffn_m * M + c.ffn_mi * M * I + c.ffn_i * I + c.ffn_io * I * O + c.ffn_o * O);
  }
  return total;
}

Tensor expected_sparsity(const GatedTransformer& student, const CountModel& c, double tau, double temperature) {
  if (!student.gates) throw Error(ErrorKind::kContract, "expected_sparsity needs a gated student");
  if (student.config != c.config) throw Error(ErrorKind::kContract, "count model built for a different config");
  // Coefficients are pre-divided by the base so every intermediate stays O(1).
  const double inv = 1.0 / c.total_base;
  auto k = [inv](double coef) { return static_cast<real>(coef * inv); };

  const Tensor m = student.gates->width->soft_keep(tau, temperature);
  const Tensor M = sum(m);
  Tensor kept = scale(M, k(c.global_m));
  for (const auto& g : student.gates->layers) {
    const Tensor a = g.layer_mha.soft_keep(tau, temperature);
    const Tensor f = g.layer_ffn.soft_keep(tau, temperature);
    const Tensor H = sum(g.heads.soft_keep(tau, temperature));
    const Tensor I = sum(g.intermediate.soft_keep(tau, temperature));
    const Tensor O = sum(mul(g.output.soft_keep(tau, temperature), m));
    const Tensor mha = add(scale(M, k(c.mha_m)), mul(H, add_scalar(scale(M, k(c.mha_hm)), k(c.mha_h))));
    const Tensor ffn = add(add(scale(M, k(c.ffn_m)), mul(I, add(scale(M, k(c.ffn_mi)), scale(O, k(c.ffn_io))))),
                           add(scale(I, k(c.ffn_i)), scale(O, k(c.ffn_o))));
    kept = add(kept, add(mul(a, mha), mul(f, ffn)));
  }
  return reshape(add_scalar(scale(kept, real(-1)), real(1)), {});
}

double SparsityController::current_target() const {
  if (warmup_steps == 0 || step >= warmup_steps) return target;
  return target * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

void SparsityController::validate() const {
  // t = 0 is allowed as the "no sparsity target" run.
  if (!(target >= 0 && target < 1)) throw Error(ErrorKind::kContract, "target sparsity must lie in [0, 1)");
  if (lambda2 < 0) throw Error(ErrorKind::kContract, "lambda2 must be non-negative");
}

Tensor sparsity_loss(const SparsityController& controller, const Tensor& expected) {
  const Tensor gap = add_scalar(expected, static_cast<real>(-controller.current_target()));
  return add(scale(gap, static_cast<real>(controller.lambda1)),
             scale(square(gap), static_cast<real>(controller.lambda2)));
}

void update_lagrangian(SparsityController& controller, double expected) {
  const double gap = expected - controller.current_target();
  controller.lambda1 += controller.lambda_lr * gap;
  controller.lambda2 = std::max(0.0, controller.lambda2 + controller.lambda_lr * gap * gap);
  ++controller.step;
}

Tensor total_loss(const LossTerms& terms, double eta) {
  if (eta < 0 || eta > 1) throw Error(ErrorKind::kContract, "eta must lie in [0, 1]");
  Tensor total;
  auto accumulate = [&](const Tensor& term, double weight) {
    if (!term.defined() || weight == 0) return;
    const Tensor t = weight == 1 ? term : scale(term, static_cast<real>(weight));
    total = total.defined() ? add(total, t) : t;
  };
  accumulate(terms.task, 1.0);
  accumulate(terms.pred, eta);
  accumulate(terms.layer, 1.0 - eta);
  accumulate(terms.vib, 1.0);
  accumulate(terms.sparsity, 1.0);
  return total.defined() ? reshape(total, {}) : Tensor::scalar(0);
}

VIBPRUNE_NAMESPACE_END
