#include "vibprune/checkpoint.hpp"

#include <fstream>
#include <set>

#include "vibprune/binio.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

NamedArray array_of(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  for (auto s : t.shape()) a.dims.push_back(static_cast<std::uint32_t>(s));
  a.values.assign(t.data().begin(), t.data().end());
  return a;
}

NamedArray vector_array(const std::string& name, const std::vector<double>& values) {
  NamedArray a;
  a.name = name;
  a.dims = {static_cast<std::uint32_t>(values.size())};
  for (double v : values) a.values.push_back(static_cast<float>(v));
  return a;
}

NamedArray index_array(const std::string& name, const std::vector<std::size_t>& idx) {
  return vector_array(name, std::vector<double>(idx.begin(), idx.end()));
}

Tensor tensor_of(const NamedArray& a, const Shape& expected, bool requires_grad) {
  Shape shape(a.dims.begin(), a.dims.end());
  if (shape != expected)
    throw Error(ErrorKind::kFormat, "'" + a.name + "' has shape " + shape_string(shape) + ", expected " +
                                        shape_string(expected));
  return Tensor::from(std::move(shape), std::vector<real>(a.values.begin(), a.values.end()), requires_grad);
}

std::vector<std::size_t> indices_of(const NamedArray& a) {
  std::vector<std::size_t> out;
  for (float v : a.values) {
    if (v < 0 || v != static_cast<float>(static_cast<std::size_t>(v)))
      throw Error(ErrorKind::kFormat, "'" + a.name + "' holds a non-index value");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

NamedArray config_array(const ModelConfig& c) {
  return vector_array("meta.model",
                      {static_cast<double>(c.vocab_size), static_cast<double>(c.max_seq), static_cast<double>(c.width),
                       static_cast<double>(c.layers), static_cast<double>(c.heads), static_cast<double>(c.ffn_dim),
                       static_cast<double>(c.num_classes), c.causal ? 1.0 : 0.0, c.dropout});
}

ModelConfig config_from(const Checkpoint& ck) {
  const auto& a = find_array(ck, "meta.model");
  if (a.values.size() != 9) throw Error(ErrorKind::kFormat, "meta.model must hold 9 values");
  ModelConfig c;
  auto dim = [&](int i) { return static_cast<std::size_t>(a.values[static_cast<std::size_t>(i)]); };
  c.vocab_size = dim(0);
  c.max_seq = dim(1);
  c.width = dim(2);
  c.layers = dim(3);
  c.heads = dim(4);
  c.ffn_dim = dim(5);
  c.num_classes = dim(6);
  c.causal = a.values[7] != 0;
  c.dropout = a.values[8];
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::kFormat, "meta.model: " + e.detail());
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::set<std::string> names;
  for (const auto& a : checkpoint) {
    if (!names.insert(a.name).second) throw Error(ErrorKind::kContract, "duplicate tensor name '" + a.name + "'");
    if (a.name.size() > 0xFFFF || a.dims.size() > 0xFF)
      throw Error(ErrorKind::kContract, "tensor '" + a.name + "' cannot be encoded");
    std::size_t n = 1;
    for (auto d : a.dims) n *= d;
    if (n != a.values.size()) throw Error(ErrorKind::kShape, "tensor '" + a.name + "' payload does not match dims");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
  binio::put_magic(out, "VIBP");
  binio::put(out, kCheckpointVersion);
  binio::put(out, static_cast<std::uint32_t>(checkpoint.size()));
  for (const auto& a : checkpoint) {
    binio::put(out, static_cast<std::uint16_t>(a.name.size()));
    out.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    binio::put(out, static_cast<std::uint8_t>(a.dims.size()));
    for (auto d : a.dims) binio::put(out, d);
    for (float v : a.values) binio::put_f32(out, v);
  }
  if (!out) throw Error(ErrorKind::kIo, "failed writing '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  binio::expect_magic(in, "VIBP", path);
  const auto version = binio::get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::kFormat, "unsupported checkpoint version " + std::to_string(version));
  const auto count = binio::get<std::uint32_t>(in, "tensor count");
  Checkpoint ck;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name.resize(binio::get<std::uint16_t>(in, "name length"));
    in.read(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    if (!in) throw Error(ErrorKind::kFormat, "truncated tensor name");
    if (!names.insert(a.name).second) throw Error(ErrorKind::kFormat, "duplicate tensor name '" + a.name + "'");
    const auto ndim = binio::get<std::uint8_t>(in, "ndim");
    std::size_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      a.dims.push_back(binio::get<std::uint32_t>(in, "dims"));
      n *= a.dims.back();
    }
    a.values.resize(n);
    for (auto& v : a.values) v = binio::get_f32(in, "payload");
    ck.push_back(std::move(a));
  }
  return ck;
}

const NamedArray& find_array(const Checkpoint& checkpoint, const std::string& name) {
  for (const auto& a : checkpoint)
    if (a.name == name) return a;
  throw Error(ErrorKind::kFormat, "checkpoint lacks '" + name + "'");
}

bool has_array(const Checkpoint& checkpoint, const std::string& name) {
  for (const auto& a : checkpoint)
    if (a.name == name) return true;
  return false;
}

Checkpoint to_checkpoint(const GatedTransformer& model) {
  Checkpoint ck;
  ck.push_back(config_array(model.config));
  for (const auto& [name, t] : model.named_parameters()) ck.push_back(array_of(name, t));
  if (model.gates) {
    std::vector<double> betas;
    std::optional<double> tau;
    for (const auto& [name, gate] : model.gates->named()) {
      betas.push_back(gate->beta());
      tau = gate->binarized_tau();
    }
    ck.push_back(vector_array("meta.gate_beta", betas));
    if (model.binarized()) ck.push_back(vector_array("meta.binarize_tau", {*tau}));
  }
  return ck;
}

GatedTransformer model_from_checkpoint(const Checkpoint& ck) {
  if (is_dense_checkpoint(ck)) throw Error(ErrorKind::kFormat, "checkpoint holds a dense model");
  const ModelConfig c = config_from(ck);
  // A freshly built teacher fixes the naming and shapes; values are replaced.
  GatedTransformer model = build_teacher(c, 0);
  for (auto& [name, t] : model.named_weights()) {
    const Tensor loaded = tensor_of(find_array(ck, name), t.shape(), true);
    std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
  }
  if (has_array(ck, "gate.embedding_width.0.mu")) {
    const GatedTransformer probe = build_student(model, GateInit{}, GateBetas{});
    const auto& betas = find_array(ck, "meta.gate_beta").values;
    const auto names = probe.gates->named();
    if (betas.size() != names.size()) throw Error(ErrorKind::kFormat, "meta.gate_beta has the wrong length");
    GateSet gates;
    std::vector<VibGate> built;
    for (std::size_t i = 0; i < names.size(); ++i) {
      const auto& [name, gate] = names[i];
      const Shape shape{gate->unit_count()};
      built.push_back(VibGate::from_parameters(gate->site(), betas[i],
                                               tensor_of(find_array(ck, name + ".mu"), shape, true),
                                               tensor_of(find_array(ck, name + ".log_sigma"), shape, true)));
    }
    if (has_array(ck, "meta.binarize_tau")) {
      const double tau = find_array(ck, "meta.binarize_tau").values.at(0);
      for (auto& g : built) g.binarize(tau);
    }
    gates.width = built[0];
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::size_t b = 1 + 5 * l;
      gates.layers.push_back({built[b], built[b + 1], built[b + 2], built[b + 3], built[b + 4]});
    }
    model.gates = std::move(gates);
  }
  return model;
}

bool is_dense_checkpoint(const Checkpoint& checkpoint) { return has_array(checkpoint, "meta.dense"); }

Checkpoint to_checkpoint(const DenseModel& d) {
  Checkpoint ck;
  ck.push_back(config_array(d.source));
  ck.push_back(vector_array("meta.dense", {static_cast<double>(d.norm_width)}));
  ck.push_back(index_array("meta.kept_width", d.kept_width));
  ck.push_back(array_of("emb.tok", d.tok_emb));
  ck.push_back(array_of("emb.pos", d.pos_emb));
  for (const auto& l : d.layers) {
    const std::string p = "layer." + std::to_string(l.source_layer) + ".";
    if (l.attention) {
      const auto& a = *l.attention;
      ck.push_back(index_array(p + "heads", a.kept_heads));
      for (const auto& [n, t] : std::vector<std::pair<std::string, const Tensor*>>{
               {"ln1.weight", &a.ln_weight}, {"ln1.bias", &a.ln_bias}, {"wq.weight", &a.wq}, {"wq.bias", &a.bq},
               {"wk.weight", &a.wk},         {"wk.bias", &a.bk},       {"wv.weight", &a.wv}, {"wv.bias", &a.bv},
               {"wo.weight", &a.wo},         {"wo.bias", &a.bo}})
        ck.push_back(array_of(p + n, *t));
    }
    if (l.ffn) {
      const auto& f = *l.ffn;
      ck.push_back(index_array(p + "ffn_units", f.kept_intermediate));
      ck.push_back(index_array(p + "ffn_out_index", f.out_index));
      for (const auto& [n, t] : std::vector<std::pair<std::string, const Tensor*>>{
               {"ln2.weight", &f.ln_weight}, {"ln2.bias", &f.ln_bias}, {"wu.weight", &f.wu},
               {"wu.bias", &f.bu},           {"wd.weight", &f.wd},     {"wd.bias", &f.bd}})
        ck.push_back(array_of(p + n, *t));
    }
  }
  ck.push_back(array_of("lnf.weight", d.lnf_weight));
  ck.push_back(array_of("lnf.bias", d.lnf_bias));
  ck.push_back(array_of("cls.weight", d.cls_weight));
  ck.push_back(array_of("cls.bias", d.cls_bias));
  return ck;
}

DenseModel dense_from_checkpoint(const Checkpoint& ck) {
  if (!is_dense_checkpoint(ck)) throw Error(ErrorKind::kFormat, "checkpoint does not hold a dense model");
  DenseModel d;
  d.source = config_from(ck);
  const auto& c = d.source;
  d.norm_width = static_cast<std::size_t>(find_array(ck, "meta.dense").values.at(0));
  d.kept_width = indices_of(find_array(ck, "meta.kept_width"));
  const std::size_t w = d.kept_width.size(), dh = c.head_dim();
  d.tok_emb = tensor_of(find_array(ck, "emb.tok"), {c.vocab_size, w}, false);
  d.pos_emb = tensor_of(find_array(ck, "emb.pos"), {c.max_seq, w}, false);
  for (std::size_t li = 0; li < c.layers; ++li) {
    const std::string p = "layer." + std::to_string(li) + ".";
    DenseLayer l;
    l.source_layer = li;
    if (has_array(ck, p + "heads")) {
      DenseAttention a;
      a.kept_heads = indices_of(find_array(ck, p + "heads"));
      const std::size_t e = a.kept_heads.size() * dh;
      a.ln_weight = tensor_of(find_array(ck, p + "ln1.weight"), {w}, false);
      a.ln_bias = tensor_of(find_array(ck, p + "ln1.bias"), {w}, false);
      a.wq = tensor_of(find_array(ck, p + "wq.weight"), {w, e}, false);
      a.bq = tensor_of(find_array(ck, p + "wq.bias"), {e}, false);
      a.wk = tensor_of(find_array(ck, p + "wk.weight"), {w, e}, false);
      a.bk = tensor_of(find_array(ck, p + "wk.bias"), {e}, false);
      a.wv = tensor_of(find_array(ck, p + "wv.weight"), {w, e}, false);
      a.bv = tensor_of(find_array(ck, p + "wv.bias"), {e}, false);
      a.wo = tensor_of(find_array(ck, p + "wo.weight"), {e, w}, false);
      a.bo = tensor_of(find_array(ck, p + "wo.bias"), {w}, false);
      l.attention = std::move(a);
    }
    if (has_array(ck, p + "ffn_units")) {
      DenseFeedForward f;
      f.kept_intermediate = indices_of(find_array(ck, p + "ffn_units"));
      f.out_index = indices_of(find_array(ck, p + "ffn_out_index"));
      for (auto o : f.out_index)
        if (o >= w) throw Error(ErrorKind::kFormat, p + "ffn_out_index points outside the kept width");
      const std::size_t r = f.kept_intermediate.size(), o = f.out_index.size();
      f.ln_weight = tensor_of(find_array(ck, p + "ln2.weight"), {w}, false);
      f.ln_bias = tensor_of(find_array(ck, p + "ln2.bias"), {w}, false);
      f.wu = tensor_of(find_array(ck, p + "wu.weight"), {w, r}, false);
      f.bu = tensor_of(find_array(ck, p + "wu.bias"), {r}, false);
      f.wd = tensor_of(find_array(ck, p + "wd.weight"), {r, o}, false);
      f.bd = tensor_of(find_array(ck, p + "wd.bias"), {o}, false);
      l.ffn = std::move(f);
    }
    if (l.attention || l.ffn) d.layers.push_back(std::move(l));
  }
  d.lnf_weight = tensor_of(find_array(ck, "lnf.weight"), {w}, false);
  d.lnf_bias = tensor_of(find_array(ck, "lnf.bias"), {w}, false);
  d.cls_weight = tensor_of(find_array(ck, "cls.weight"), {w, c.num_classes}, false);
  d.cls_bias = tensor_of(find_array(ck, "cls.bias"), {c.num_classes}, false);
  return d;
}

VIBPRUNE_NAMESPACE_END
