#include "vibprune/model.hpp"

#include <cmath>
#include <random>

VIBPRUNE_NAMESPACE_BEGIN

void ModelConfig::validate() const {
  if (vocab_size == 0 || max_seq == 0 || width == 0 || layers == 0 || heads == 0 || ffn_dim == 0 ||
      num_classes == 0)
    throw Error(ErrorKind::kContract, "model dims must all be >= 1");
  if (width % heads != 0)
    throw Error(ErrorKind::kContract, "width " + std::to_string(width) + " not divisible by heads " +
                                          std::to_string(heads));
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error(ErrorKind::kContract, "dropout must lie in [0, 1)");
}

std::vector<std::pair<std::string, const VibGate*>> GateSet::named() const {
  std::vector<std::pair<std::string, const VibGate*>> out;
  if (width) out.emplace_back("gate.embedding_width.0", &*width);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto idx = std::to_string(i);
    const auto& g = layers[i];
    for (const VibGate* gate : {&g.heads, &g.intermediate, &g.output, &g.layer_mha, &g.layer_ffn})
      out.emplace_back("gate." + std::string(gate_site_name(gate->site())) + "." + idx, gate);
  }
  return out;
}

std::vector<std::pair<std::string, VibGate*>> GateSet::named() {
  std::vector<std::pair<std::string, VibGate*>> out;
  for (auto& [name, gate] : std::as_const(*this).named()) out.emplace_back(name, const_cast<VibGate*>(gate));
  return out;
}

std::size_t GateSet::total_units() const {
  std::size_t n = 0;
  for (const auto& [name, gate] : named()) n += gate->unit_count();
  return n;
}

GateBetas GateBetas::uniform(double beta, bool divide_by_units) {
  GateBetas b;
  b.per_site.fill(beta);
  b.divide_by_units = divide_by_units;
  return b;
}

double GateBetas::for_gate(GateSite site, std::size_t units) const {
  const double base = per_site[static_cast<std::size_t>(site)];
  return divide_by_units ? base / static_cast<double>(units) : base;
}

bool GatedTransformer::binarized() const {
  if (!gates) return false;
  for (const auto& [name, gate] : gates->named())
    if (!gate->binarized()) return false;
  return true;
}

std::vector<std::pair<std::string, Tensor>> GatedTransformer::named_weights() const {
  std::vector<std::pair<std::string, Tensor>> out{{"emb.tok", tok_emb}, {"emb.pos", pos_emb}};
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layer." + std::to_string(i) + ".";
    out.insert(out.end(), {{p + "ln1.weight", l.ln1_weight}, {p + "ln1.bias", l.ln1_bias},
                           {p + "wq.weight", l.wq_weight},   {p + "wq.bias", l.wq_bias},
                           {p + "wk.weight", l.wk_weight},   {p + "wk.bias", l.wk_bias},
                           {p + "wv.weight", l.wv_weight},   {p + "wv.bias", l.wv_bias},
                           {p + "wo.weight", l.wo_weight},   {p + "wo.bias", l.wo_bias},
                           {p + "ln2.weight", l.ln2_weight}, {p + "ln2.bias", l.ln2_bias},
                           {p + "wu.weight", l.wu_weight},   {p + "wu.bias", l.wu_bias},
                           {p + "wd.weight", l.wd_weight},   {p + "wd.bias", l.wd_bias}});
  }
  out.insert(out.end(), {{"lnf.weight", lnf_weight},
                         {"lnf.bias", lnf_bias},
                         {"cls.weight", cls_weight},
                         {"cls.bias", cls_bias}});
  return out;
}

std::vector<std::pair<std::string, Tensor>> GatedTransformer::named_parameters() const {
  auto out = named_weights();
  if (gates) {
    for (const auto& [name, gate] : gates->named()) {
      out.emplace_back(name + ".mu", gate->mu());
      out.emplace_back(name + ".log_sigma", gate->log_sigma());
    }
  }
  return out;
}

GatedTransformer GatedTransformer::clone() const {
  GatedTransformer copy;
  copy.config = config;
  copy.tok_emb = tok_emb.clone();
  copy.pos_emb = pos_emb.clone();
  for (const auto& l : layers) {
    copy.layers.push_back({l.ln1_weight.clone(), l.ln1_bias.clone(), l.wq_weight.clone(), l.wq_bias.clone(),
                           l.wk_weight.clone(), l.wk_bias.clone(), l.wv_weight.clone(), l.wv_bias.clone(),
                           l.wo_weight.clone(), l.wo_bias.clone(), l.ln2_weight.clone(), l.ln2_bias.clone(),
                           l.wu_weight.clone(), l.wu_bias.clone(), l.wd_weight.clone(), l.wd_bias.clone()});
  }
  copy.lnf_weight = lnf_weight.clone();
  copy.lnf_bias = lnf_bias.clone();
  copy.cls_weight = cls_weight.clone();
  copy.cls_bias = cls_bias.clone();
  if (gates) {
    GateSet g;
    if (gates->width) g.width = gates->width->clone();
    for (const auto& lg : gates->layers)
      g.layers.push_back({lg.heads.clone(), lg.intermediate.clone(), lg.output.clone(), lg.layer_mha.clone(),
                          lg.layer_ffn.clone()});
    copy.gates = std::move(g);
  }
  return copy;
}

GatedTransformer build_teacher(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 engine(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  auto randn = [&](Shape shape) {
    std::vector<real> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<real>(normal(engine));
    return Tensor::from(std::move(shape), std::move(v), true);
  };
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
  auto ones = [](std::size_t n) { return Tensor::full({n}, real(1), true); };

  const std::size_t d = config.width, f = config.ffn_dim;
  GatedTransformer m;
  m.config = config;
  m.tok_emb = randn({config.vocab_size, d});
  m.pos_emb = randn({config.max_seq, d});
  for (std::size_t i = 0; i < config.layers; ++i) {
    LayerWeights l;
    l.ln1_weight = ones(d);
    l.ln1_bias = zeros(d);
    l.wq_weight = randn({d, d});
    l.wq_bias = zeros(d);
    l.wk_weight = randn({d, d});
    l.wk_bias = zeros(d);
    l.wv_weight = randn({d, d});
    l.wv_bias = zeros(d);
    l.wo_weight = randn({d, d});
    l.wo_bias = zeros(d);
    l.ln2_weight = ones(d);
    l.ln2_bias = zeros(d);
    l.wu_weight = randn({d, f});
    l.wu_bias = zeros(f);
    l.wd_weight = randn({f, d});
    l.wd_bias = zeros(d);
    m.layers.push_back(std::move(l));
  }
  m.lnf_weight = ones(d);
  m.lnf_bias = zeros(d);
  m.cls_weight = randn({d, config.num_classes});
  m.cls_bias = zeros(config.num_classes);
  return m;
}

GatedTransformer build_student(const GatedTransformer& teacher, const GateInit& gate_init,
                               const GateBetas& betas) {
  GatedTransformer student = teacher.clone();
  student.gates.reset();
  const auto& c = teacher.config;
  std::uint64_t counter = 0;
  auto make = [&](std::size_t units, GateSite site) {
    GateInit init = gate_init;
    // splitmix64 step so every gate gets an independent stream
    std::uint64_t z = gate_init.seed + 0x9E3779B97F4A7C15ULL * ++counter;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    init.seed = z ^ (z >> 31);
    return VibGate::create(units, site, betas.for_gate(site, units), init);
  };
  GateSet g;
  g.width = make(c.width, GateSite::kEmbeddingWidth);
  for (std::size_t i = 0; i < c.layers; ++i) {
    g.layers.push_back({make(c.heads, GateSite::kHeads), make(c.ffn_dim, GateSite::kFfnIntermediate),
                        make(c.width, GateSite::kFfnOutput), make(1, GateSite::kLayerMha),
                        make(1, GateSite::kLayerFfn)});
  }
  student.gates = std::move(g);
  return student;
}

Tensor head_expansion(std::size_t heads, std::size_t head_dim) {
  std::vector<real> e(heads * heads * head_dim, real(0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t j = 0; j < head_dim; ++j) e[h * heads * head_dim + h * head_dim + j] = real(1);
  return Tensor::from({heads, heads * head_dim}, std::move(e));
}

namespace {

class GateSampler {
 public:
  GateSampler(const ForwardOptions& options, NoiseSource* noise, std::size_t batch, std::size_t seq)
      : options_(options), noise_(noise), batch_(batch), seq_(seq) {}

  /// Per-token mask (batch, seq, units), or a (units) vector outside training.
  Tensor token_mask(const VibGate& gate) const { return mask(gate, seq_); }
  /// Per-sample scalar mask (batch, 1, 1), or (1) outside training.
  Tensor sample_mask(const VibGate& gate) const { return mask(gate, 1); }

 private:
  Tensor mask(const VibGate& gate, std::size_t seq) const {
    const std::size_t units = gate.unit_count();
    if (gate.binarized()) return Tensor::from({units}, gate.frozen_mask());
    switch (options_.mode) {
      case ForwardMode::kTrain:
        return gate.sample_mask(noise_->normal({batch_, seq, units}), MaskMode::kStochastic);
      case ForwardMode::kMean:
        return gate.mu();
      case ForwardMode::kEval: {
        const auto hard = gate.hard_mask(options_.tau);
        std::vector<real> h(hard.begin(), hard.end());
        return mul(gate.mu(), Tensor::from({units}, std::move(h)));
      }
    }
    return {};
  }

  const ForwardOptions& options_;
  NoiseSource* noise_;
  std::size_t batch_, seq_;
};

Tensor dropout_mask(NoiseSource& noise, const Shape& shape, double p) {
  std::vector<real> m(shape_numel(shape));
  const real keep_scale = static_cast<real>(1.0 / (1.0 - p));
  for (auto& v : m) v = noise.uniform() < p ? real(0) : keep_scale;
  return Tensor::from(shape, std::move(m));
}

}  // namespace

ForwardTrace forward(const GatedTransformer& model, const TokenBatch& tokens, const ForwardOptions& options,
                     NoiseSource* noise) {
  const auto& c = model.config;
  const std::size_t B = tokens.batch, S = tokens.seq, d = c.width, dh = c.head_dim();
  if (tokens.ids.size() != B * S)
    throw Error(ErrorKind::kShape, "token batch holds " + std::to_string(tokens.ids.size()) +
                                       " ids, expected " + std::to_string(B * S));
  if (S == 0 || S > c.max_seq)
    throw Error(ErrorKind::kData, "sequence length " + std::to_string(S) + " exceeds max_seq " +
                                      std::to_string(c.max_seq));
  const bool train = options.mode == ForwardMode::kTrain;
  const bool gated = model.gates.has_value();
  const bool use_dropout = train && c.dropout > 0.0;
  if ((train && gated && !model.binarized()) || use_dropout) {
    if (!noise) throw Error(ErrorKind::kContract, "training forward needs a noise source");
  }

  GateSampler sampler(options, noise, B, S);
  const Tensor expand = gated ? head_expansion(c.heads, dh) : Tensor();
  auto expand_heads = [&](const Tensor& mask) {
    if (mask.dim() == 1) return reshape(matmul(reshape(mask, {1, c.heads}), expand), {d});
    return matmul(mask, expand);
  };

  std::vector<std::int32_t> positions(S);
  for (std::size_t s = 0; s < S; ++s) positions[s] = static_cast<std::int32_t>(s);

  ForwardTrace trace;
  Tensor x = add(gather_rows(model.tok_emb, tokens.ids, {B, S}), gather_rows(model.pos_emb, positions, {S}));
  Tensor zm;
  if (gated) {
    zm = sampler.token_mask(*model.gates->width);
    x = mul(x, zm);
  }
  trace.embedding_output = x;

  const real score_scale = static_cast<real>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (std::size_t li = 0; li < c.layers; ++li) {
    const auto& w = model.layers[li];
    const LayerGates* g = gated ? &model.gates->layers[li] : nullptr;

    // Attention branch.
    Tensor xn = layer_norm_lastdim(x, w.ln1_weight, w.ln1_bias);
    if (g) xn = mul(xn, zm);
    const Tensor q = add(matmul(xn, w.wq_weight), w.wq_bias);
    const Tensor k = add(matmul(xn, w.wk_weight), w.wk_bias);
    const Tensor v = add(matmul(xn, w.wv_weight), w.wv_bias);
    std::vector<Tensor> contexts;
    std::vector<real> probs_record;
    if (options.record_attention) probs_record.assign(B * c.heads * S * S, real(0));
    for (std::size_t h = 0; h < c.heads; ++h) {
      const Tensor qh = slice_lastdim(q, h * dh, (h + 1) * dh);
      const Tensor kth = transpose_last2(slice_lastdim(k, h * dh, (h + 1) * dh));
      Tensor scores = scale(matmul(qh, kth), score_scale);
      if (c.causal) scores = causal_mask_fill(scores);
      const Tensor p = softmax_lastdim(scores);
      if (options.record_attention) {
        for (std::size_t b = 0; b < B; ++b)
          std::copy_n(p.data().data() + b * S * S, S * S, probs_record.data() + ((b * c.heads + h) * S * S));
      }
      contexts.push_back(matmul(p, slice_lastdim(v, h * dh, (h + 1) * dh)));
    }
    if (options.record_attention)
      trace.attention_probs.push_back(Tensor::from({B, c.heads, S, S}, std::move(probs_record)));
    Tensor ctx = concat_lastdim(contexts);
    if (g) ctx = mul(ctx, expand_heads(sampler.token_mask(g->heads)));
    Tensor attn = add(matmul(ctx, w.wo_weight), w.wo_bias);
    if (use_dropout) attn = mul(attn, dropout_mask(*noise, attn.shape(), c.dropout));
    if (g) attn = mul(mul(attn, sampler.sample_mask(g->layer_mha)), zm);
    x = add(x, attn);

    // Feed-forward branch.
    xn = layer_norm_lastdim(x, w.ln2_weight, w.ln2_bias);
    if (g) xn = mul(xn, zm);
    Tensor u = gelu(add(matmul(xn, w.wu_weight), w.wu_bias));
    if (g) u = mul(u, sampler.token_mask(g->intermediate));
    Tensor hdn = add(matmul(u, w.wd_weight), w.wd_bias);
    if (use_dropout) hdn = mul(hdn, dropout_mask(*noise, hdn.shape(), c.dropout));
    if (g) {
      hdn = mul(hdn, sampler.token_mask(g->output));
      hdn = mul(mul(hdn, sampler.sample_mask(g->layer_ffn)), zm);
    }
    x = add(x, hdn);
    trace.hidden_states.push_back(x);
  }

  Tensor xn = layer_norm_lastdim(x, model.lnf_weight, model.lnf_bias);
  if (gated) xn = mul(xn, zm);
  const Tensor pooled = select_row(xn, c.causal ? S - 1 : 0);
  trace.logits = add(matmul(pooled, model.cls_weight), model.cls_bias);
  return trace;
}

VIBPRUNE_NAMESPACE_END
