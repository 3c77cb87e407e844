#include "vibprune/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "json.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr std::size_t kProbeBatch = 64;

// Calls fn(probs, batch_size) per chunk; probs holds one (B, heads, S, S) tensor per layer.
template <typename Fn>
void for_each_attention(const GatedTransformer& model, const Dataset& data, double tau, Fn&& fn) {
  ForwardOptions opts;
  opts.mode = ForwardMode::kEval;
  opts.tau = tau;
  opts.record_attention = true;
  NoGradGuard no_grad;
  for (std::size_t start = 0; start < data.size(); start += kProbeBatch) {
    const std::size_t n = std::min(kProbeBatch, data.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const auto trace = forward(model, data.batch(idx), opts);
    fn(trace.attention_probs, n);
  }
}

std::vector<double> nonzero_to_unit(const std::vector<real>& v) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] != 0 ? 1.0 : 0.0;
  return out;
}

StructureKeep structure_of(const GatedTransformer& model, double tau) {
  if (!model.gates || !model.binarized()) return StructureKeep::from_hard_masks(model, tau);
  StructureKeep k;
  k.width = nonzero_to_unit(model.gates->width->frozen_mask());
  for (const auto& g : model.gates->layers)
    k.layers.push_back({nonzero_to_unit(g.heads.frozen_mask()), nonzero_to_unit(g.intermediate.frozen_mask()),
                        nonzero_to_unit(g.output.frozen_mask()), g.layer_mha.frozen_mask()[0] != 0 ? 1.0 : 0.0,
                        g.layer_ffn.frozen_mask()[0] != 0 ? 1.0 : 0.0});
  return k;
}

double kl_part(double p, double m) { return p > 0 ? p * std::log(p / m) : 0.0; }

}  // namespace

AttentionStats token_attention(const GatedTransformer& model, const Dataset& data,
                               std::span<const std::int32_t> token_ids, double tau) {
  if (data.size() == 0) throw Error(ErrorKind::kData, "token_attention on an empty dataset");
  const auto& c = model.config;
  const std::size_t L = c.layers, H = c.heads, S = data.seq;
  const std::unordered_set<std::int32_t> wanted(token_ids.begin(), token_ids.end());

  AttentionStats st;
  st.layers = L;
  st.heads = H;
  st.token_mass.assign(L * H, 0.0);
  st.previous.assign(L * H, 0.0);
  st.current.assign(L * H, 0.0);
  st.next.assign(L * H, 0.0);
  std::size_t n_prev = 0, n_next = 0;
  std::size_t offset = 0;

  for_each_attention(model, data, tau, [&](const std::vector<Tensor>& probs, std::size_t n) {
    for (std::size_t b = 0; b < n; ++b) {
      const auto tokens = data.row(offset + b);
      for (std::size_t l = 0; l < L; ++l) {
        const real* p = probs[l].data().data();
        for (std::size_t h = 0; h < H; ++h) {
          const real* ph = p + (b * H + h) * S * S;
          const std::size_t k = l * H + h;
          for (std::size_t q = 0; q < S; ++q) {
            const real* row = ph + q * S;
            double mass = 0;
            for (std::size_t s = 0; s < S; ++s)
              if (wanted.contains(tokens[s])) mass += row[s];
            st.token_mass[k] += mass;
            st.current[k] += row[q];
            if (q > 0) st.previous[k] += row[q - 1];
            if (q + 1 < S) st.next[k] += row[q + 1];
          }
        }
      }
      n_prev += S - 1;
      n_next += S - 1;
    }
    offset += n;
  });

  const double queries = static_cast<double>(data.size() * S);
  for (std::size_t k = 0; k < L * H; ++k) {
    st.token_mass[k] /= queries;
    st.current[k] /= queries;
    st.previous[k] = n_prev ? st.previous[k] / static_cast<double>(n_prev) : 0.0;
    st.next[k] = n_next ? st.next[k] / static_cast<double>(n_next) : 0.0;
  }
  return st;
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorKind::kShape, "js_divergence support sizes differ");
  double js = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    js += 0.5 * kl_part(p[i], m) + 0.5 * kl_part(q[i], m);
  }
  return std::clamp(js, 0.0, std::log(2.0));
}

HeadDivergenceMatrix head_js(const GatedTransformer& model, const Dataset& data, double tau) {
  const auto& c = model.config;
  const std::size_t H = c.heads, S = data.seq;
  const auto keep = structure_of(model, tau);

  HeadDivergenceMatrix out;
  for (std::size_t l = 0; l < c.layers; ++l) {
    if (keep.layers[l].mha == 0) continue;
    for (std::size_t h = 0; h < H; ++h)
      if (keep.layers[l].heads[h] != 0) out.heads.push_back({l, h});
  }
  const std::size_t n = out.heads.size();
  out.values.assign(n * n, 0.0);
  if (n == 0 || data.size() == 0) return out;

  std::vector<double> pi(S), pj(S);
  for_each_attention(model, data, tau, [&](const std::vector<Tensor>& probs, std::size_t batch) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t q = 0; q < S; ++q) {
        auto row = [&](const HeadId& id, std::vector<double>& dst) {
          const real* r = probs[id.layer].data().data() + ((b * H + id.head) * S + q) * S;
          std::copy(r, r + S, dst.begin());
        };
        for (std::size_t i = 0; i < n; ++i) {
          row(out.heads[i], pi);
          for (std::size_t j = i + 1; j < n; ++j) {
            row(out.heads[j], pj);
            out.values[i * n + j] += js_divergence(pi, pj);
          }
        }
      }
    out.token_count += batch * S;
  });

  const double tokens = static_cast<double>(out.token_count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = out.values[i * n + j] / tokens;
      out.values[i * n + j] = v;
      out.values[j * n + i] = v;
    }
  return out;
}

PruningPattern pruning_pattern(const ModelConfig& c, const StructureKeep& keep) {
  PruningPattern pat;
  pat.width = c.width;
  for (double v : keep.width) pat.kept_width += v != 0 ? 1 : 0;
  pat.width_ratio = static_cast<double>(pat.kept_width) / static_cast<double>(c.width);
  for (std::size_t l = 0; l < keep.layers.size(); ++l) {
    const auto& k = keep.layers[l];
    PatternLayer row;
    row.index = l;
    row.mha_alive = k.mha != 0;
    row.ffn_alive = k.ffn != 0;
    if (row.mha_alive)
      row.heads_kept = static_cast<std::size_t>(std::count_if(k.heads.begin(), k.heads.end(), [](double v) { return v != 0; }));
    if (row.ffn_alive) {
      row.inter_kept = static_cast<std::size_t>(
          std::count_if(k.intermediate.begin(), k.intermediate.end(), [](double v) { return v != 0; }));
      for (std::size_t j = 0; j < k.output.size(); ++j)
        if (k.output[j] != 0 && keep.width[j] != 0) ++row.out_kept;
    }
    row.heads_ratio = static_cast<double>(row.heads_kept) / static_cast<double>(c.heads);
    row.inter_ratio = static_cast<double>(row.inter_kept) / static_cast<double>(c.ffn_dim);
    row.out_ratio = static_cast<double>(row.out_kept) / static_cast<double>(c.width);
    pat.layers.push_back(row);
  }
  return pat;
}

PruningPattern pruning_pattern(const GatedTransformer& model, double tau) {
  return pruning_pattern(model.config, structure_of(model, tau));
}

PruningPattern pruning_pattern(const DenseModel& dense) { return pruning_pattern(dense.source, dense_structure(dense)); }

std::string attention_json(const AttentionStats& st) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t l = 0; l < st.layers; ++l)
    for (std::size_t h = 0; h < st.heads; ++h)
      rows.push_back({{"layer", l},
                      {"head", h},
                      {"token_mass", st.at(st.token_mass, l, h)},
                      {"previous", st.at(st.previous, l, h)},
                      {"current", st.at(st.current, l, h)},
                      {"next", st.at(st.next, l, h)}});
  return nlohmann::json{{"heads", rows}}.dump(2);
}

std::string divergence_json(const HeadDivergenceMatrix& m) {
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& h : m.heads) ids.push_back({{"layer", h.layer}, {"head", h.head}});
  nlohmann::json rows = nlohmann::json::array();
  const std::size_t n = m.heads.size();
  for (std::size_t i = 0; i < n; ++i)
    rows.push_back(std::vector<double>(m.values.begin() + static_cast<std::ptrdiff_t>(i * n),
                                       m.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * n)));
  return nlohmann::json{{"heads", ids}, {"js_mean", rows}, {"token_count", m.token_count}}.dump(2);
}

std::string pattern_json(const PruningPattern& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : p.layers)
    layers.push_back({{"layer", l.index},
                      {"alive", l.alive()},
                      {"mha_alive", l.mha_alive},
                      {"ffn_alive", l.ffn_alive},
                      {"heads_kept", l.heads_kept},
                      {"inter_kept", l.inter_kept},
                      {"out_kept", l.out_kept},
                      {"heads_ratio", l.heads_ratio},
                      {"inter_ratio", l.inter_ratio},
                      {"out_ratio", l.out_ratio}});
  return nlohmann::json{{"width", p.width}, {"kept_width", p.kept_width}, {"width_ratio", p.width_ratio},
                        {"layers", layers}}
      .dump(2);
}

VIBPRUNE_NAMESPACE_END
