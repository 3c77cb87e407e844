#include "vibprune/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr std::array<std::string_view, 3> kVariantNames = {"vtrans", "fast", "faster"};
constexpr std::size_t kEvalBatch = 256;

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::mt19937_64& engine) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), engine);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + batch)));
  return out;
}

double value_of(const Tensor& t) { return t.defined() ? static_cast<double>(t.item()) : 0.0; }

// Runs `body` and turns numeric failures into a divergence error naming the step.
template <typename F>
void guarded(Phase phase, std::size_t step, F&& body) {
  try {
    body();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kNumeric) throw;
    throw Error(ErrorKind::kNumericDivergence,
                std::string(phase_name(phase)) + " step " + std::to_string(step) + ": " + e.detail());
  }
}

void check_finite(const Tensor& loss) {
  if (!std::isfinite(static_cast<double>(loss.item()))) throw Error(ErrorKind::kNumeric, "loss is not finite");
}

double decay_for(const std::string& name, double weight_decay) {
  return (is_gate_parameter(name) || is_norm_parameter(name) || is_bias_parameter(name)) ? 0.0 : weight_decay;
}

struct Losses {
  LossTerms terms;
  Tensor total;
};

Losses distill_losses(const GatedTransformer& student, const ForwardTrace& trace, const TeacherCache& teacher,
                      std::span<const std::size_t> idx, const std::vector<std::int32_t>& labels,
                      const DistillConfig& distill, const std::vector<bool>& alive) {
  Losses l;
  l.terms.task = task_cross_entropy(trace.logits, labels);
  l.terms.vib = vib_loss(student);
  if (distill.eta > 0) l.terms.pred = pred_distill(trace.logits, teacher.logits(idx), distill.reverse_kl);
  if (distill.eta < 1 && std::find(alive.begin(), alive.end(), true) != alive.end()) {
    const auto all_teacher = teacher.hiddens(idx);
    std::vector<Tensor> chosen;
    for (std::size_t i : distill.teacher_layers) chosen.push_back(all_teacher.at(i));
    const auto mapping = layer_map(trace.hidden_states, chosen, distill.w_layer, alive);
    l.terms.layer = layer_distill(trace.hidden_states, chosen, distill.w_layer, mapping);
  }
  return l;
}

}  // namespace

std::string_view variant_name(Variant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

Variant parse_variant(std::string_view name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (kVariantNames[i] == name) return static_cast<Variant>(i);
  throw Error(ErrorKind::kConfig, "unknown variant '" + std::string(name) + "'");
}

std::string_view phase_name(Phase p) {
  switch (p) {
    case Phase::kTeacher: return "teacher";
    case Phase::kPrune: return "prune";
    case Phase::kFinetune: return "finetune";
  }
  return "unknown";
}

RunConfig RunConfig::for_variant(Variant variant) {
  RunConfig c;
  c.variant = variant;
  c.subset_fraction = variant == Variant::kVTrans ? 1.0 : 0.03;
  return c;
}

void RunConfig::validate() const {
  if (!(subset_fraction > 0 && subset_fraction <= 1))
    throw Error(ErrorKind::kContract, "subset_fraction must lie in (0, 1]");
  if (variant == Variant::kVTrans && subset_fraction != 1.0)
    throw Error(ErrorKind::kContract, "the vtrans variant trains on the full dataset");
  if (batch_size == 0) throw Error(ErrorKind::kContract, "batch_size must be positive");
  // t = 0 is allowed as the "no sparsity target" run.
  if (!(target >= 0 && target < 1)) throw Error(ErrorKind::kContract, "target sparsity must lie in [0, 1)");
  if (eta < 0 || eta > 1) throw Error(ErrorKind::kContract, "eta must lie in [0, 1]");
  if (!(temperature > 0)) throw Error(ErrorKind::kContract, "temperature must be positive");
  if (lr_weights < 0 || lr_gates < 0 || lambda_lr < 0) throw Error(ErrorKind::kContract, "rates must be non-negative");
  if (warmup_fraction < 0 || warmup_fraction > 1) throw Error(ErrorKind::kContract, "warmup_fraction must lie in [0, 1]");
  if (!(lr_final_scale > 0 && lr_final_scale <= 1)) throw Error(ErrorKind::kContract, "lr_final_scale must lie in (0, 1]");
}

bool is_norm_parameter(const std::string& name) {
  return name.rfind("lnf.", 0) == 0 || name.find(".ln1.") != std::string::npos ||
         name.find(".ln2.") != std::string::npos;
}

bool is_bias_parameter(const std::string& name) { return ends_with(name, ".bias"); }

bool is_gate_parameter(const std::string& name) { return name.rfind("gate.", 0) == 0; }

FreezePolicy FreezePolicy::for_variant(Variant variant) {
  if (variant == Variant::kFaster)
    return {[](const std::string& n) { return is_gate_parameter(n) || is_norm_parameter(n) || is_bias_parameter(n); }};
  return {[](const std::string&) { return true; }};
}

TeacherCache::TeacherCache(const GatedTransformer& teacher, const Dataset& data)
    : seq_(data.seq), width_(teacher.config.width), classes_(teacher.config.num_classes) {
  NoGradGuard no_grad;
  hiddens_.assign(teacher.config.layers, {});
  for (std::size_t b = 0; b < data.size(); b += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    const auto trace = forward(teacher, data.batch(idx), {ForwardMode::kEval, 0.0, false});
    logits_.insert(logits_.end(), trace.logits.data().begin(), trace.logits.data().end());
    for (std::size_t l = 0; l < hiddens_.size(); ++l)
      hiddens_[l].insert(hiddens_[l].end(), trace.hidden_states[l].data().begin(),
                         trace.hidden_states[l].data().end());
  }
}

Tensor TeacherCache::logits(std::span<const std::size_t> indices) const {
  std::vector<real> out;
  out.reserve(indices.size() * classes_);
  for (std::size_t i : indices)
    out.insert(out.end(), logits_.begin() + static_cast<std::ptrdiff_t>(i * classes_),
               logits_.begin() + static_cast<std::ptrdiff_t>((i + 1) * classes_));
  return Tensor::from({indices.size(), classes_}, std::move(out));
}

std::vector<Tensor> TeacherCache::hiddens(std::span<const std::size_t> indices) const {
  std::vector<Tensor> out;
  const std::size_t row = seq_ * width_;
  for (const auto& h : hiddens_) {
    std::vector<real> v;
    v.reserve(indices.size() * row);
    for (std::size_t i : indices)
      v.insert(v.end(), h.begin() + static_cast<std::ptrdiff_t>(i * row),
               h.begin() + static_cast<std::ptrdiff_t>((i + 1) * row));
    out.push_back(Tensor::from({indices.size(), seq_, width_}, std::move(v)));
  }
  return out;
}

PruneState make_prune_state(const GatedTransformer& student, const RunConfig& config, std::size_t train_size) {
  config.validate();
  PruneState s;
  s.distill = DistillConfig::create(student.config.width, student.config.layers, config.eta);
  s.distill.reverse_kl = config.reverse_kl;
  s.counts = build_count_model(student.config, config.metric, config.ref_seq);
  s.controller.metric = config.metric;
  s.controller.target = config.target;
  s.controller.lambda_lr = config.lambda_lr;
  const std::size_t steps = config.epochs_prune * ((train_size + config.batch_size - 1) / config.batch_size);
  s.controller.warmup_steps = static_cast<std::size_t>(std::lround(config.warmup_fraction * static_cast<double>(steps)));
  s.controller.validate();
  return s;
}

std::vector<StepMetrics> prune_phase(GatedTransformer& student, const TeacherCache& teacher, const Dataset& train,
                                     PruneState& state, const RunConfig& config, const MetricsSink& sink) {
  config.validate();
  if (!student.gates) throw Error(ErrorKind::kContract, "prune_phase needs a gated student");
  if (student.binarized()) throw Error(ErrorKind::kContract, "student is already binarized");
  const FreezePolicy policy = FreezePolicy::for_variant(config.variant);
  std::vector<OptimParam> params;
  for (auto& [name, t] : student.named_parameters()) {
    Tensor handle = t;
    const bool train_it = policy.trainable(name);
    handle.set_requires_grad(train_it);
    if (!train_it) continue;
    params.push_back({name, handle, is_gate_parameter(name) ? config.lr_gates : config.lr_weights,
                      decay_for(name, config.weight_decay), {}});
  }
  state.distill.w_layer.set_requires_grad(true);
  params.push_back({"distill.w_layer", state.distill.w_layer, config.lr_gates, 0.0, {}});
  AdamW optimizer(std::move(params));

  std::mt19937_64 order_engine(mix(config.seed, 101));
  NoiseSource noise(mix(config.seed, 102));
  std::vector<StepMetrics> history;
  const std::size_t total_steps = config.epochs_prune * ((train.size() + config.batch_size - 1) / config.batch_size);
  const std::size_t decay_from = std::min(state.controller.warmup_steps, total_steps);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs_prune; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_engine)) {
      if (step > decay_from) {
        const double frac = static_cast<double>(step - decay_from) / static_cast<double>(total_steps - decay_from);
        optimizer.set_lr_scale(1.0 - (1.0 - config.lr_final_scale) * frac);
      }
      StepMetrics m;
      m.step = step;
      m.phase = Phase::kPrune;
      m.t_cur = state.controller.current_target();
      m.lambda1 = state.controller.lambda1;
      m.lambda2 = state.controller.lambda2;
      guarded(Phase::kPrune, step, [&] {
        const auto labels = train.batch_labels(idx);
        const auto trace = forward(student, train.batch(idx), {ForwardMode::kTrain, config.tau, false}, &noise);
        Losses l = distill_losses(student, trace, teacher, idx, labels, state.distill,
                                  alive_layers(student, config.tau, config.temperature));
        const Tensor s_e = expected_sparsity(student, state.counts, config.tau, config.temperature);
        l.terms.sparsity = sparsity_loss(state.controller, s_e);
        l.total = total_loss(l.terms, state.distill.eta);
        check_finite(l.total);
        m.loss_total = value_of(l.total);
        m.loss_task = value_of(l.terms.task);
        m.loss_vib = value_of(l.terms.vib);
        m.loss_pred = value_of(l.terms.pred);
        m.loss_layer = value_of(l.terms.layer);
        m.loss_sparsity = value_of(l.terms.sparsity);
        m.s_e = value_of(s_e);
        l.total.backward();
        optimizer.step();
      });
      update_lagrangian(state.controller, m.s_e);
      if (sink) sink(m);
      history.push_back(m);
      ++step;
    }
  }
  state.distill.w_layer.set_requires_grad(false);
  return history;
}

void binarize(GatedTransformer& student, double tau) {
  if (!student.gates) throw Error(ErrorKind::kContract, "binarize needs a gated student");
  bool any_alive = false;
  for (const auto& g : student.gates->layers)
    any_alive = any_alive || g.layer_mha.hard_mask(tau)[0] || g.layer_ffn.hard_mask(tau)[0];
  if (!any_alive) throw Error(ErrorKind::kDegenerateModel, "every layer gate is below the threshold");
  for (auto& [name, gate] : student.gates->named()) gate->binarize(tau);
}

std::vector<std::uint8_t> survival_mask(const GatedTransformer& student, const std::string& name) {
  if (!student.binarized()) throw Error(ErrorKind::kContract, "survival masks need a binarized student");
  const auto& c = student.config;
  auto on = [](const VibGate& g) {
    std::vector<std::uint8_t> v;
    for (real x : g.frozen_mask()) v.push_back(x != 0 ? 1 : 0);
    return v;
  };
  const auto m = on(*student.gates->width);
  const std::size_t d = c.width, dh = c.head_dim();
  auto outer = [](std::size_t rows, std::size_t cols, auto&& f) {
    std::vector<std::uint8_t> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t k = 0; k < cols; ++k) out[r * cols + k] = f(r, k) ? 1 : 0;
    return out;
  };
  if (name == "emb.tok") return outer(c.vocab_size, d, [&](auto, auto j) { return m[j]; });
  if (name == "emb.pos") return outer(c.max_seq, d, [&](auto, auto j) { return m[j]; });
  if (name == "lnf.weight" || name == "lnf.bias") return m;
  if (name == "cls.weight") return outer(d, c.num_classes, [&](auto j, auto) { return m[j]; });
  if (name == "cls.bias") return std::vector<std::uint8_t>(c.num_classes, 1);
  if (name.rfind("layer.", 0) == 0) {
    const std::size_t dot = name.find('.', 6);
    const std::size_t li = std::stoul(name.substr(6, dot - 6));
    const std::string rest = name.substr(dot + 1);
    const auto& g = student.gates->layers.at(li);
    const bool lm = g.layer_mha.frozen_mask()[0] != 0, lf = g.layer_ffn.frozen_mask()[0] != 0;
    const auto a = on(g.heads), in = on(g.intermediate), o = on(g.output);
    if (rest == "ln1.weight" || rest == "ln1.bias" || rest == "wo.bias")
      return outer(1, d, [&](auto, auto j) { return lm && m[j]; });
    if (rest == "wq.weight" || rest == "wk.weight" || rest == "wv.weight")
      return outer(d, d, [&](auto j, auto col) { return lm && m[j] && a[col / dh]; });
    if (rest == "wq.bias" || rest == "wk.bias" || rest == "wv.bias")
      return outer(1, d, [&](auto, auto col) { return lm && a[col / dh]; });
    if (rest == "wo.weight") return outer(d, d, [&](auto row, auto j) { return lm && a[row / dh] && m[j]; });
    if (rest == "ln2.weight" || rest == "ln2.bias") return outer(1, d, [&](auto, auto j) { return lf && m[j]; });
    if (rest == "wu.weight") return outer(d, c.ffn_dim, [&](auto j, auto k) { return lf && m[j] && in[k]; });
    if (rest == "wu.bias") return outer(1, c.ffn_dim, [&](auto, auto k) { return lf && in[k]; });
    if (rest == "wd.weight")
      return outer(c.ffn_dim, d, [&](auto k, auto j) { return lf && in[k] && o[j] && m[j]; });
    if (rest == "wd.bias") return outer(1, d, [&](auto, auto j) { return lf && o[j] && m[j]; });
  }
  throw Error(ErrorKind::kContract, "no survival rule for '" + name + "'");
}

std::vector<StepMetrics> finetune_phase(GatedTransformer& student, const TeacherCache& teacher, const Dataset& train,
                                        DistillConfig& distill, const RunConfig& config, const MetricsSink& sink) {
  if (!student.binarized()) throw Error(ErrorKind::kContract, "finetune_phase needs a binarized student");
  const FreezePolicy policy = FreezePolicy::for_variant(config.variant);
  std::vector<OptimParam> params;
  for (auto& [name, t] : student.named_weights()) {
    Tensor handle = t;
    const bool train_it = policy.trainable(name);
    handle.set_requires_grad(train_it);
    if (train_it)
      params.push_back({name, handle, config.lr_weights, decay_for(name, config.weight_decay),
                        survival_mask(student, name)});
  }
  distill.w_layer.set_requires_grad(true);
  params.push_back({"distill.w_layer", distill.w_layer, config.lr_gates, 0.0, {}});
  AdamW optimizer(std::move(params));

  // Layers are alive by their hard FFN gate; fixed after binarization.
  std::vector<bool> alive;
  for (const auto& g : student.gates->layers) alive.push_back(g.layer_ffn.frozen_mask()[0] != 0);

  std::mt19937_64 order_engine(mix(config.seed, 201));
  NoiseSource noise(mix(config.seed, 202));
  std::vector<StepMetrics> history;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs_finetune; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_engine)) {
      StepMetrics m;
      m.step = step;
      m.phase = Phase::kFinetune;
      guarded(Phase::kFinetune, step, [&] {
        const auto labels = train.batch_labels(idx);
        const auto trace = forward(student, train.batch(idx), {ForwardMode::kTrain, config.tau, false}, &noise);
        Losses l = distill_losses(student, trace, teacher, idx, labels, distill, alive);
        l.total = total_loss(l.terms, distill.eta);
        check_finite(l.total);
        m.loss_total = value_of(l.total);
        m.loss_task = value_of(l.terms.task);
        m.loss_vib = value_of(l.terms.vib);
        m.loss_pred = value_of(l.terms.pred);
        m.loss_layer = value_of(l.terms.layer);
        l.total.backward();
        optimizer.step();
      });
      if (sink) sink(m);
      history.push_back(m);
      ++step;
    }
  }
  distill.w_layer.set_requires_grad(false);
  return history;
}

std::vector<std::size_t> subset_indices(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction <= 1)) throw Error(ErrorKind::kContract, "subset fraction must lie in (0, 1]");
  const std::size_t n = data.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (fraction == 1.0 || n == 0) return all;
  const std::size_t total = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));

  std::map<std::int32_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < n; ++i) by_label[data.labels[i]].push_back(i);
  // Largest-remainder allocation of `total` across labels.
  struct Share {
    std::int32_t label;
    std::size_t take;
    double remainder;
  };
  std::vector<Share> shares;
  std::size_t allocated = 0;
  for (const auto& [label, members] : by_label) {
    const double exact = static_cast<double>(total) * static_cast<double>(members.size()) / static_cast<double>(n);
    const auto floor = static_cast<std::size_t>(exact);
    shares.push_back({label, floor, exact - static_cast<double>(floor)});
    allocated += floor;
  }
  std::vector<std::size_t> rank(shares.size());
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::stable_sort(rank.begin(), rank.end(), [&](auto a, auto b) { return shares[a].remainder > shares[b].remainder; });
  for (std::size_t r = 0; allocated < total; ++r, ++allocated) ++shares[rank[r % rank.size()]].take;

  std::mt19937_64 engine(mix(seed, 301));
  std::vector<std::size_t> out;
  for (auto& s : shares) {
    auto members = by_label[s.label];
    std::shuffle(members.begin(), members.end(), engine);
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(std::min(s.take, members.size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Dataset subset(const Dataset& data, double fraction, std::uint64_t seed) {
  return data.select(subset_indices(data, fraction, seed));
}

GatedTransformer train_teacher(const ModelConfig& model, const Dataset& train, const TeacherTrainConfig& config,
                               const MetricsSink& sink) {
  GatedTransformer teacher = build_teacher(model, mix(config.seed, 401));
  std::vector<OptimParam> params;
  for (auto& [name, t] : teacher.named_weights()) params.push_back({name, t, config.lr, decay_for(name, config.weight_decay), {}});
  AdamW optimizer(std::move(params));
  const std::size_t steps_per_epoch = (train.size() + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);

  std::mt19937_64 order_engine(mix(config.seed, 402));
  NoiseSource noise(mix(config.seed, 403));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(train.size(), config.batch_size, order_engine)) {
      // Linear decay to a tenth of the base rate.
      optimizer.set_lr_scale(1.0 - 0.9 * static_cast<double>(step) / total_steps);
      StepMetrics m;
      m.step = step;
      m.phase = Phase::kTeacher;
      guarded(Phase::kTeacher, step, [&] {
        const auto trace = forward(teacher, train.batch(idx), {ForwardMode::kTrain, 0.0, false}, &noise);
        const Tensor loss = task_cross_entropy(trace.logits, train.batch_labels(idx));
        check_finite(loss);
        m.loss_total = m.loss_task = value_of(loss);
        loss.backward();
        optimizer.step();
      });
      if (sink) sink(m);
      ++step;
    }
  }
  for (auto& [name, t] : teacher.named_weights()) {
    Tensor handle = t;
    handle.set_requires_grad(false);
  }
  return teacher;
}

double accuracy(const GatedTransformer& model, const Dataset& data, double tau) {
  if (data.size() == 0) throw Error(ErrorKind::kData, "accuracy of an empty dataset");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    const auto logits = forward(model, data.batch(idx), {ForwardMode::kEval, tau, false}).logits;
    const std::size_t C = logits.size(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.data().subspan(r * C, C);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      correct += pred == data.labels[idx[r]] ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

double accuracy(const DenseModel& model, const Dataset& data) {
  if (data.size() == 0) throw Error(ErrorKind::kData, "accuracy of an empty dataset");
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, data.size() - b));
    std::iota(idx.begin(), idx.end(), b);
    const Tensor logits = dense_forward(model, data.batch(idx));
    const std::size_t C = logits.size(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto row = logits.data().subspan(r * C, C);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      correct += pred == data.labels[idx[r]] ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

Dataset training_data(const Dataset& train, const RunConfig& config) {
  return config.subset_fraction < 1.0 ? subset(train, config.subset_fraction, config.seed) : train;
}

GatedTransformer make_student(const GatedTransformer& teacher, const RunConfig& config) {
  GateInit init = config.gate_init;
  init.seed = mix(config.seed ^ config.gate_init.seed, 501);
  return build_student(teacher, init, config.betas);
}

PipelineResult run_pipeline(const GatedTransformer& teacher, const Dataset& train, const Dataset& eval,
                            const RunConfig& config, const MetricsSink& sink) {
  config.validate();
  const Dataset used = training_data(train, config);
  const TeacherCache cache(teacher, used);
  PipelineResult r{make_student(teacher, config), {}, {}, 0, 0, 0, {}, {}};
  PruneState state = make_prune_state(r.student, config, used.size());
  r.prune_metrics = prune_phase(r.student, cache, used, state, config, sink);
  binarize(r.student, config.tau);
  r.accuracy_binarized = accuracy(r.student, eval, config.tau);
  r.finetune_metrics = finetune_phase(r.student, cache, used, state.distill, config, sink);
  r.accuracy_finetuned = accuracy(r.student, eval, config.tau);
  r.dense = extract_dense(r.student);
  r.accuracy_dense = accuracy(r.dense, eval);
  r.report = extract_report(r.dense, config.ref_seq);
  return r;
}

VIBPRUNE_NAMESPACE_END
