#include "vibprune/extract.hpp"

#include <cmath>
#include <sstream>

#include "json.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace {

// Gate values per unit, 0 for dropped units.
struct Masks {
  std::vector<double> width;
  struct Layer {
    std::vector<double> heads, intermediate, output;
    double mha = 1, ffn = 1;
  };
  std::vector<Layer> layers;
};

std::vector<double> as_double(const std::vector<real>& v) { return {v.begin(), v.end()}; }

Masks masks_of(const GatedTransformer& model) {
  Masks m;
  const auto& c = model.config;
  if (!model.gates) {
    m.width.assign(c.width, 1.0);
    for (std::size_t i = 0; i < c.layers; ++i)
      m.layers.push_back({std::vector<double>(c.heads, 1.0), std::vector<double>(c.ffn_dim, 1.0),
                          std::vector<double>(c.width, 1.0), 1.0, 1.0});
    return m;
  }
  if (!model.binarized()) throw Error(ErrorKind::kContract, "extract_dense needs a binarized student");
  m.width = as_double(model.gates->width->frozen_mask());
  for (const auto& g : model.gates->layers)
    m.layers.push_back({as_double(g.heads.frozen_mask()), as_double(g.intermediate.frozen_mask()),
                        as_double(g.output.frozen_mask()), static_cast<double>(g.layer_mha.frozen_mask()[0]),
                        static_cast<double>(g.layer_ffn.frozen_mask()[0])});
  return m;
}

std::vector<std::size_t> nonzero(const std::vector<double>& v) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] != 0) idx.push_back(i);
  return idx;
}

// out[r][c] = src[rows[r]][cols[c]] * row_scale[rows[r]] * col_scale[cols[c]]
Tensor take(const Tensor& src, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols,
            const std::vector<double>* row_scale = nullptr, const std::vector<double>* col_scale = nullptr) {
  const std::size_t n = src.size(1);
  std::vector<real> out(rows.size() * cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) {
      double factor = 1.0;
      if (row_scale) factor *= (*row_scale)[rows[r]];
      if (col_scale) factor *= (*col_scale)[cols[c]];
      const real w = src.data()[rows[r] * n + cols[c]];
      out[r * cols.size() + c] = factor == 1.0 ? w : static_cast<real>(w * factor);
    }
  return Tensor::from({rows.size(), cols.size()}, std::move(out));
}

Tensor take(const Tensor& src, const std::vector<std::size_t>& idx, const std::vector<double>* scale = nullptr) {
  std::vector<real> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const real w = src.data()[idx[i]];
    out[i] = (!scale || (*scale)[idx[i]] == 1.0) ? w : static_cast<real>(w * (*scale)[idx[i]]);
  }
  return Tensor::from({idx.size()}, std::move(out));
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<double> times(const std::vector<double>& a, double s) {
  std::vector<double> out(a);
  for (auto& v : out) v *= s;
  return out;
}

DenseModel build_dense(const GatedTransformer& model, const Masks& mk) {
  const auto& c = model.config;
  const std::size_t dh = c.head_dim();
  DenseModel d;
  d.source = c;
  d.norm_width = c.width;
  d.kept_width = nonzero(mk.width);
  if (d.kept_width.empty()) throw Error(ErrorKind::kDegenerateModel, "every width dim is masked");
  const auto& kw = d.kept_width;
  const std::vector<double>& m = mk.width;

  d.tok_emb = take(model.tok_emb, iota(c.vocab_size), kw, nullptr, &m);
  d.pos_emb = take(model.pos_emb, iota(c.max_seq), kw, nullptr, &m);

  for (std::size_t li = 0; li < c.layers; ++li) {
    const auto& w = model.layers[li];
    const auto& g = mk.layers[li];
    DenseLayer layer;
    layer.source_layer = li;
    if (g.mha != 0) {
      DenseAttention a;
      a.kept_heads = nonzero(g.heads);
      std::vector<std::size_t> cols;
      std::vector<double> col_gate(c.width, 0.0);
      for (std::size_t h : a.kept_heads)
        for (std::size_t e = 0; e < dh; ++e) {
          cols.push_back(h * dh + e);
          col_gate[h * dh + e] = g.heads[h] * g.mha;
        }
      a.ln_weight = take(w.ln1_weight, kw, &m);
      a.ln_bias = take(w.ln1_bias, kw, &m);
      a.wq = take(w.wq_weight, kw, cols);
      a.bq = take(w.wq_bias, cols);
      a.wk = take(w.wk_weight, kw, cols);
      a.bk = take(w.wk_bias, cols);
      a.wv = take(w.wv_weight, kw, cols);
      a.bv = take(w.wv_bias, cols);
      a.wo = take(w.wo_weight, cols, kw, &col_gate, &m);
      const auto out_gate = times(m, g.mha);
      a.bo = take(w.wo_bias, kw, &out_gate);
      layer.attention = std::move(a);
    }
    if (g.ffn != 0) {
      DenseFeedForward f;
      f.kept_intermediate = nonzero(g.intermediate);
      std::vector<std::size_t> out_src;
      std::vector<double> out_gate(c.width, 0.0);
      for (std::size_t p = 0; p < kw.size(); ++p) {
        const std::size_t j = kw[p];
        if (g.output[j] == 0) continue;
        f.out_index.push_back(p);
        out_src.push_back(j);
        out_gate[j] = g.output[j] * g.ffn * m[j];
      }
      f.ln_weight = take(w.ln2_weight, kw, &m);
      f.ln_bias = take(w.ln2_bias, kw, &m);
      f.wu = take(w.wu_weight, kw, f.kept_intermediate);
      f.bu = take(w.wu_bias, f.kept_intermediate);
      f.wd = take(w.wd_weight, f.kept_intermediate, out_src, &g.intermediate, &out_gate);
      f.bd = take(w.wd_bias, out_src, &out_gate);
      layer.ffn = std::move(f);
    }
    if (layer.attention || layer.ffn) d.layers.push_back(std::move(layer));
  }
  if (d.layers.empty()) throw Error(ErrorKind::kDegenerateModel, "no layer has a surviving sub-layer");

  d.lnf_weight = take(model.lnf_weight, kw, &m);
  d.lnf_bias = take(model.lnf_bias, kw, &m);
  d.cls_weight = take(model.cls_weight, kw, iota(c.num_classes));
  d.cls_bias = model.cls_bias.detach().clone();
  return d;
}

Tensor copy_of(const Tensor& t) {
  Tensor out = t.clone();
  out.set_requires_grad(false);
  return out;
}

// x[..., idx[q]] += h[..., q]
Tensor scatter_add_lastdim(const Tensor& x, const Tensor& h, const std::vector<std::size_t>& idx) {
  const std::size_t width = x.size(-1), n = idx.size(), rows = x.numel() / width;
  std::vector<real> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < n; ++q) out[r * width + idx[q]] += h.data()[r * n + q];
  return Tensor::from(x.shape(), std::move(out));
}

}  // namespace

DenseModel extract_dense(const GatedTransformer& student) { return build_dense(student, masks_of(student)); }

DenseModel dense_from_teacher(const GatedTransformer& teacher) {
  if (teacher.gates) throw Error(ErrorKind::kContract, "dense_from_teacher expects an ungated model");
  return build_dense(teacher, masks_of(teacher));
}

DenseModel extract_dense(const DenseModel& dense) {
  DenseModel d;
  d.source = dense.source;
  d.kept_width = dense.kept_width;
  d.norm_width = dense.norm_width;
  d.tok_emb = copy_of(dense.tok_emb);
  d.pos_emb = copy_of(dense.pos_emb);
  for (const auto& l : dense.layers) {
    DenseLayer out;
    out.source_layer = l.source_layer;
    if (l.attention) {
      const auto& a = *l.attention;
      out.attention = DenseAttention{a.kept_heads,  copy_of(a.ln_weight), copy_of(a.ln_bias), copy_of(a.wq),
                                     copy_of(a.bq), copy_of(a.wk),        copy_of(a.bk),      copy_of(a.wv),
                                     copy_of(a.bv), copy_of(a.wo),        copy_of(a.bo)};
    }
    if (l.ffn) {
      const auto& f = *l.ffn;
      out.ffn = DenseFeedForward{f.kept_intermediate, f.out_index,     copy_of(f.ln_weight), copy_of(f.ln_bias),
                                 copy_of(f.wu),       copy_of(f.bu),   copy_of(f.wd),        copy_of(f.bd)};
    }
    d.layers.push_back(std::move(out));
  }
  d.lnf_weight = copy_of(dense.lnf_weight);
  d.lnf_bias = copy_of(dense.lnf_bias);
  d.cls_weight = copy_of(dense.cls_weight);
  d.cls_bias = copy_of(dense.cls_bias);
  return d;
}

std::size_t param_count(const DenseModel& d) {
  std::size_t n = d.tok_emb.numel() + d.pos_emb.numel();
  for (const auto& l : d.layers) {
    if (l.attention) {
      const auto& a = *l.attention;
      for (const Tensor* t : {&a.ln_weight, &a.ln_bias, &a.wq, &a.bq, &a.wk, &a.bk, &a.wv, &a.bv, &a.wo, &a.bo})
        n += t->numel();
    }
    if (l.ffn) {
      const auto& f = *l.ffn;
      for (const Tensor* t : {&f.ln_weight, &f.ln_bias, &f.wu, &f.bu, &f.wd, &f.bd}) n += t->numel();
    }
  }
  return n + d.lnf_weight.numel() + d.lnf_bias.numel() + d.cls_weight.numel();
}

std::size_t flop_count(const DenseModel& d, std::size_t seq_len) {
  const std::size_t S = seq_len, w = d.width(), dh = d.source.head_dim(), C = d.source.num_classes;
  std::size_t f = S * w;  // token + position add
  for (const auto& l : d.layers) {
    if (l.attention) {
      const std::size_t heads = l.attention->kept_heads.size(), e = heads * dh;
      f += S * w;                              // layer norm
      f += 3 * (2 * S * w * e + S * e);        // Q, K, V projections with bias
      f += heads * (2 * S * S * dh + S * S);   // scores and scaling
      f += heads * S * S;                      // softmax
      f += heads * 2 * S * S * dh;             // context
      f += 2 * S * e * w + S * w;              // output projection with bias
      f += S * w;                              // residual add
    }
    if (l.ffn) {
      const std::size_t r = l.ffn->kept_intermediate.size(), o = l.ffn->out_index.size();
      f += S * w;                 // layer norm
      f += 2 * S * w * r + S * r; // up projection with bias
      f += S * r;                 // gelu
      f += 2 * S * r * o + S * o; // down projection with bias
      f += S * o;                 // residual add
    }
  }
  f += S * w;      // final layer norm
  f += 2 * w * C;  // classifier on the pooled row
  return f;
}

Tensor dense_forward(const DenseModel& d, const TokenBatch& tokens) {
  NoGradGuard no_grad;
  const auto& c = d.source;
  const std::size_t B = tokens.batch, S = tokens.seq, dh = c.head_dim();
  if (tokens.ids.size() != B * S) throw Error(ErrorKind::kShape, "token batch size does not match batch x seq");
  if (S == 0 || S > c.max_seq) throw Error(ErrorKind::kData, "sequence length exceeds max_seq");
  std::vector<std::int32_t> positions(S);
  for (std::size_t s = 0; s < S; ++s) positions[s] = static_cast<std::int32_t>(s);

  Tensor x = add(gather_rows(d.tok_emb, tokens.ids, {B, S}), gather_rows(d.pos_emb, positions, {S}));
  const real score_scale = static_cast<real>(1.0 / std::sqrt(static_cast<double>(dh)));
  for (const auto& l : d.layers) {
    if (l.attention) {
      const auto& a = *l.attention;
      const std::size_t heads = a.kept_heads.size();
      Tensor attn;
      if (heads == 0) {
        attn = add(Tensor::zeros(x.shape()), a.bo);
      } else {
        const Tensor xn = layer_norm_lastdim(x, a.ln_weight, a.ln_bias, 1e-5, d.norm_width);
        const Tensor q = add(matmul(xn, a.wq), a.bq);
        const Tensor k = add(matmul(xn, a.wk), a.bk);
        const Tensor v = add(matmul(xn, a.wv), a.bv);
        std::vector<Tensor> ctx;
        for (std::size_t h = 0; h < heads; ++h) {
          Tensor scores = scale(matmul(slice_lastdim(q, h * dh, (h + 1) * dh),
                                       transpose_last2(slice_lastdim(k, h * dh, (h + 1) * dh))),
                                score_scale);
          if (c.causal) scores = causal_mask_fill(scores);
          ctx.push_back(matmul(softmax_lastdim(scores), slice_lastdim(v, h * dh, (h + 1) * dh)));
        }
        attn = add(matmul(concat_lastdim(ctx), a.wo), a.bo);
      }
      x = add(x, attn);
    }
    if (l.ffn) {
      const auto& f = *l.ffn;
      if (f.out_index.empty()) continue;
      Tensor h;
      if (f.kept_intermediate.empty()) {
        h = add(Tensor::zeros({B, S, f.out_index.size()}), f.bd);
      } else {
        const Tensor xn = layer_norm_lastdim(x, f.ln_weight, f.ln_bias, 1e-5, d.norm_width);
        h = add(matmul(gelu(add(matmul(xn, f.wu), f.bu)), f.wd), f.bd);
      }
      x = f.out_index.size() == d.width() ? add(x, h) : scatter_add_lastdim(x, h, f.out_index);
    }
  }
  const Tensor xn = layer_norm_lastdim(x, d.lnf_weight, d.lnf_bias, 1e-5, d.norm_width);
  return add(matmul(select_row(xn, c.causal ? S - 1 : 0), d.cls_weight), d.cls_bias);
}

StructureKeep dense_structure(const DenseModel& d) {
  const auto& c = d.source;
  StructureKeep k;
  k.width.assign(c.width, 0.0);
  for (std::size_t j : d.kept_width) k.width[j] = 1.0;
  for (std::size_t i = 0; i < c.layers; ++i)
    k.layers.push_back({std::vector<double>(c.heads, 0.0), std::vector<double>(c.ffn_dim, 0.0),
                        std::vector<double>(c.width, 0.0), 0.0, 0.0});
  for (const auto& l : d.layers) {
    auto& out = k.layers[l.source_layer];
    if (l.attention) {
      out.mha = 1.0;
      for (std::size_t h : l.attention->kept_heads) out.heads[h] = 1.0;
    }
    if (l.ffn) {
      out.ffn = 1.0;
      for (std::size_t u : l.ffn->kept_intermediate) out.intermediate[u] = 1.0;
      for (std::size_t p : l.ffn->out_index) out.output[d.kept_width[p]] = 1.0;
    }
  }
  return k;
}

ExtractReport extract_report(const DenseModel& d, std::size_t ref_seq) {
  const auto& c = d.source;
  const std::size_t seq = ref_seq == 0 ? c.max_seq : ref_seq;
  ExtractReport r;
  r.d_kept = d.width();
  r.heads_kept_per_layer.assign(c.layers, 0);
  r.inter_kept_per_layer.assign(c.layers, 0);
  r.out_kept_per_layer.assign(c.layers, 0);
  for (const auto& l : d.layers) {
    r.layers_kept.push_back(l.source_layer);
    if (l.attention) r.heads_kept_per_layer[l.source_layer] = l.attention->kept_heads.size();
    if (l.ffn) {
      r.inter_kept_per_layer[l.source_layer] = l.ffn->kept_intermediate.size();
      r.out_kept_per_layer[l.source_layer] = l.ffn->out_index.size();
    }
  }
  r.params = param_count(d);
  r.flops = flop_count(d, seq);
  // The unpruned reference is the same enumeration over the full architecture.
  const auto full = [&] {
    DenseModel f;
    f.source = c;
    f.kept_width = iota(c.width);
    f.norm_width = c.width;
    f.tok_emb = Tensor::zeros({c.vocab_size, c.width});
    f.pos_emb = Tensor::zeros({c.max_seq, c.width});
    for (std::size_t i = 0; i < c.layers; ++i) {
      DenseAttention a;
      a.kept_heads = iota(c.heads);
      a.ln_weight = a.ln_bias = a.bq = a.bk = a.bv = a.bo = Tensor::zeros({c.width});
      a.wq = a.wk = a.wv = a.wo = Tensor::zeros({c.width, c.width});
      DenseFeedForward f2;
      f2.kept_intermediate = iota(c.ffn_dim);
      f2.out_index = iota(c.width);
      f2.ln_weight = f2.ln_bias = f2.bd = Tensor::zeros({c.width});
      f2.wu = Tensor::zeros({c.width, c.ffn_dim});
      f2.bu = Tensor::zeros({c.ffn_dim});
      f2.wd = Tensor::zeros({c.ffn_dim, c.width});
      f.layers.push_back({i, std::move(a), std::move(f2)});
    }
    f.lnf_weight = f.lnf_bias = Tensor::zeros({c.width});
    f.cls_weight = Tensor::zeros({c.width, c.num_classes});
    f.cls_bias = Tensor::zeros({c.num_classes});
    return f;
  }();
  r.sparsity_params = 1.0 - static_cast<double>(r.params) / static_cast<double>(param_count(full));
  r.sparsity_flops = 1.0 - static_cast<double>(r.flops) / static_cast<double>(flop_count(full, seq));
  return r;
}

std::string report_json(const ExtractReport& r) {
  nlohmann::json j;
  j["d_kept"] = r.d_kept;
  j["heads_kept_per_layer"] = r.heads_kept_per_layer;
  j["inter_kept_per_layer"] = r.inter_kept_per_layer;
  j["out_kept_per_layer"] = r.out_kept_per_layer;
  j["layers_kept"] = r.layers_kept;
  j["params"] = r.params;
  j["flops"] = r.flops;
  j["sparsity_params"] = r.sparsity_params;
  j["sparsity_flops"] = r.sparsity_flops;
  return j.dump(2);
}

VIBPRUNE_NAMESPACE_END
