#include "vibprune/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>

VIBPRUNE_NAMESPACE_BEGIN

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw Error(ErrorKind::kConfig,
              "key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " + std::string(expected));
}

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) bad_value(key, v, std::is_integral_v<T> ? "integer" : "number");
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "boolean");
}

template <typename T>
std::string show(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest form that round-trips
    return std::string(buf, end);
  }
}

struct Field {
  std::function<void(ExperimentConfig&, std::string_view key, std::string_view value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <typename T, typename Access>
Field number(Access access) {
  return {[access](ExperimentConfig& c, std::string_view k, std::string_view v) { access(c) = parse_number<T>(k, v); },
          [access](const ExperimentConfig& c) { return show(access(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Access>
Field boolean(Access access) {
  return {[access](ExperimentConfig& c, std::string_view k, std::string_view v) { access(c) = parse_bool(k, v); },
          [access](const ExperimentConfig& c) { return show(access(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Access, typename Parse, typename Name>
Field named(Access access, Parse parse, Name name) {
  return {[=](ExperimentConfig& c, std::string_view k, std::string_view v) {
            try {
              access(c) = parse(v);
            } catch (const Error&) {
              bad_value(k, v, "a known name");
            }
          },
          [=](const ExperimentConfig& c) { return std::string(name(access(const_cast<ExperimentConfig&>(c)))); }};
}

#define FIELD(type, expr) number<type>([](ExperimentConfig& c) -> auto& { return expr; })
#define FLAG(expr) boolean([](ExperimentConfig& c) -> auto& { return expr; })

const std::map<std::string, Field, std::less<>>& fields() {
  static const std::map<std::string, Field, std::less<>> table = [] {
    std::map<std::string, Field, std::less<>> t;
    t["seed"] = FIELD(std::uint64_t, c.seed);

    t["data.task"] = named([](ExperimentConfig& c) -> auto& { return c.data.kind; }, parse_task, task_name);
    t["data.vocab_size"] = FIELD(std::size_t, c.data.vocab_size);
    t["data.payload_len"] = FIELD(std::size_t, c.data.payload_len);
    t["data.train_size"] = FIELD(std::size_t, c.data.train_size);
    t["data.val_size"] = FIELD(std::size_t, c.data.val_size);
    t["data.test_size"] = FIELD(std::size_t, c.data.test_size);
    t["data.total"] = {[](ExperimentConfig& c, std::string_view k, std::string_view v) {
                         c.data.set_total(parse_number<std::size_t>(k, v));
                       },
                       [](const ExperimentConfig& c) {
                         return show(c.data.train_size + c.data.val_size + c.data.test_size);
                       }};
    t["data.seed"] = FIELD(std::uint64_t, c.data.seed);
    t["data.token_a"] = FIELD(std::int32_t, c.data.token_a);
    t["data.token_b"] = FIELD(std::int32_t, c.data.token_b);
    t["data.pair_fraction"] = FIELD(double, c.data.pair_fraction);
    t["data.marker"] = FIELD(std::int32_t, c.data.marker);
    t["data.payload0"] = FIELD(std::int32_t, c.data.payload0);
    t["data.payload1"] = FIELD(std::int32_t, c.data.payload1);
    t["data.max_markers"] = FIELD(std::size_t, c.data.max_markers);
    t["data.distractor_rate"] = FIELD(double, c.data.distractor_rate);
    t["data.intrinsic_dim"] = FIELD(std::size_t, c.data.intrinsic_dim);
    t["data.margin"] = FIELD(double, c.data.margin);

    t["model.width"] = FIELD(std::size_t, c.model.width);
    t["model.layers"] = FIELD(std::size_t, c.model.layers);
    t["model.heads"] = FIELD(std::size_t, c.model.heads);
    t["model.ffn_dim"] = FIELD(std::size_t, c.model.ffn_dim);
    t["model.num_classes"] = FIELD(std::size_t, c.model.num_classes);
    t["model.causal"] = FLAG(c.model.causal);
    t["model.dropout"] = FIELD(double, c.model.dropout);

    t["teacher.epochs"] = FIELD(std::size_t, c.teacher.epochs);
    t["teacher.batch_size"] = FIELD(std::size_t, c.teacher.batch_size);
    t["teacher.lr"] = FIELD(double, c.teacher.lr);
    t["teacher.weight_decay"] = FIELD(double, c.teacher.weight_decay);
    t["teacher.seed"] = FIELD(std::uint64_t, c.teacher.seed);

    t["prune.variant"] = named([](ExperimentConfig& c) -> auto& { return c.run.variant; }, parse_variant, variant_name);
    t["prune.metric"] = named([](ExperimentConfig& c) -> auto& { return c.run.metric; }, parse_metric, metric_name);
    t["prune.epochs"] = FIELD(std::size_t, c.run.epochs_prune);
    t["prune.batch_size"] = FIELD(std::size_t, c.run.batch_size);
    t["prune.lr_weights"] = FIELD(double, c.run.lr_weights);
    t["prune.lr_gates"] = FIELD(double, c.run.lr_gates);
    t["prune.lambda_lr"] = FIELD(double, c.run.lambda_lr);
    t["prune.subset_fraction"] = FIELD(double, c.run.subset_fraction);
    t["prune.seed"] = FIELD(std::uint64_t, c.run.seed);
    t["prune.tau"] = FIELD(double, c.run.tau);
    t["prune.temperature"] = FIELD(double, c.run.temperature);
    t["prune.target"] = FIELD(double, c.run.target);
    t["prune.eta"] = FIELD(double, c.run.eta);
    t["prune.weight_decay"] = FIELD(double, c.run.weight_decay);
    t["prune.warmup_fraction"] = FIELD(double, c.run.warmup_fraction);
    t["prune.lr_final_scale"] = FIELD(double, c.run.lr_final_scale);
    t["prune.ref_seq"] = FIELD(std::size_t, c.run.ref_seq);
    t["prune.reverse_kl"] = FLAG(c.run.reverse_kl);
    t["finetune.epochs"] = FIELD(std::size_t, c.run.epochs_finetune);

    t["gates.mu_mean"] = FIELD(double, c.run.gate_init.mu_mean);
    t["gates.mu_std"] = FIELD(double, c.run.gate_init.mu_std);
    t["gates.sigma_init"] = FIELD(double, c.run.gate_init.sigma_init);
    t["gates.seed"] = FIELD(std::uint64_t, c.run.gate_init.seed);
    t["gates.divide_by_units"] = FLAG(c.run.betas.divide_by_units);
    t["gates.beta"] = {[](ExperimentConfig& c, std::string_view k, std::string_view v) {
                         c.run.betas.per_site.fill(parse_number<double>(k, v));
                       },
                       [](const ExperimentConfig& c) { return show(c.run.betas.per_site[0]); }};
    const char* sites[] = {"width", "heads", "intermediate", "output", "layer_mha", "layer_ffn"};
    for (std::size_t s = 0; s < kGateSiteCount; ++s)
      t[std::string("gates.beta.") + sites[s]] = {
          [s](ExperimentConfig& c, std::string_view k, std::string_view v) {
            c.run.betas.per_site[s] = parse_number<double>(k, v);
          },
          [s](const ExperimentConfig& c) { return show(c.run.betas.per_site[s]); }};
    return t;
  }();
  return table;
}

#undef FIELD
#undef FLAG

}  // namespace

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  const auto& table = fields();
  const auto it = table.find(key);
  if (it == table.end()) throw Error(ErrorKind::kConfig, "unknown key '" + std::string(key) + "'");
  it->second.set(*this, key, trim(value));
  assigned.insert(std::string(key));
  // Choosing a variant also picks its default data fraction unless one is given.
  if (key == "prune.variant" && !assigned.contains("prune.subset_fraction"))
    run.subset_fraction = RunConfig::for_variant(run.variant).subset_fraction;
}

void ExperimentConfig::finalize() {
  auto inherit = [&](const char* key, std::uint64_t& field) {
    if (!assigned.contains(key)) field = seed;
  };
  inherit("data.seed", data.seed);
  inherit("teacher.seed", teacher.seed);
  inherit("prune.seed", run.seed);
  model.vocab_size = data.vocab_size;
  model.max_seq = data.seq_len();
  if (teacher.batch_size == 0) throw Error(ErrorKind::kContract, "teacher.batch_size must be positive");
  data.validate();
  model.validate();
  run.validate();
}

std::map<std::string, std::string> ExperimentConfig::dump() const {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out[key] = field.get(*this);
  return out;
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view raw = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error(ErrorKind::kConfig, "line " + std::to_string(line_no) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

VIBPRUNE_NAMESPACE_END
