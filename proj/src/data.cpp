#include "vibprune/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <optional>
#include <random>

#include "vibprune/binio.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr std::array<std::string_view, 3> kTaskNames = {"majority_pair", "marked_parity", "signal_dims"};
constexpr std::uint32_t kDatasetVersion = 1;

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Per-token scores s(t) = w . f(t) of the signal_dims rule.
struct SignalRule {
  std::vector<double> score;  // indexed by token id
  double scale = 1.0;         // std of the payload mean under uniform tokens

  explicit SignalRule(const TaskSpec& spec) : score(spec.vocab_size, 0.0) {
    std::mt19937_64 engine(mix(spec.seed, 0x5167));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> w(spec.intrinsic_dim);
    for (auto& v : w) v = normal(engine);
    double second_moment = 0.0;
    for (std::size_t t = 2; t < spec.vocab_size; ++t) {
      double s = 0.0;
      for (std::size_t k = 0; k < spec.intrinsic_dim; ++k) s += w[k] * normal(engine);
      score[t] = s;
      second_moment += s * s;
    }
    second_moment /= static_cast<double>(spec.vocab_size - 2);
    scale = std::sqrt(second_moment / static_cast<double>(spec.payload_len));
  }

  double statistic(std::span<const std::int32_t> payload) const {
    double acc = 0.0;
    for (auto t : payload) acc += score[static_cast<std::size_t>(t)];
    return acc / static_cast<double>(payload.size());
  }
};

std::int32_t label_with(const TaskSpec& spec, const SignalRule* rule, std::span<const std::int32_t> tokens) {
  if (tokens.size() != spec.seq_len()) throw Error(ErrorKind::kData, "sequence length does not match the task");
  const auto payload = tokens.subspan(1, spec.payload_len);
  switch (spec.kind) {
    case TaskKind::kMajorityPair: {
      const auto a = std::count(payload.begin(), payload.end(), spec.token_a);
      const auto b = std::count(payload.begin(), payload.end(), spec.token_b);
      return a > b ? 1 : 0;
    }
    case TaskKind::kMarkedParity: {
      int parity = 0;
      for (std::size_t i = 0; i + 1 < payload.size(); ++i)
        if (payload[i] == spec.marker && payload[i + 1] == spec.payload1) parity ^= 1;
      return parity;
    }
    case TaskKind::kSignalDims:
      return rule->statistic(payload) > 0 ? 1 : 0;
  }
  return 0;
}

// Draws one framed sequence, or returns false when the draw is rejected.
bool draw(const TaskSpec& spec, const SignalRule* rule, std::mt19937_64& engine, std::vector<std::int32_t>& out) {
  const std::size_t L = spec.payload_len;
  out.assign(spec.seq_len(), 0);
  out.front() = kClsToken;
  out.back() = kSepToken;
  auto payload = std::span<std::int32_t>(out).subspan(1, L);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform_token = [&](std::int32_t lo, std::int32_t hi) {  // inclusive
    return std::uniform_int_distribution<std::int32_t>(lo, hi)(engine);
  };
  const auto top = static_cast<std::int32_t>(spec.vocab_size - 1);

  switch (spec.kind) {
    case TaskKind::kMajorityPair: {
      const std::int32_t first_filler = std::max(spec.token_a, spec.token_b) + 1;
      std::ptrdiff_t balance = 0;
      for (auto& t : payload) {
        if (unit(engine) < spec.pair_fraction || first_filler > top) {
          t = unit(engine) < 0.5 ? spec.token_a : spec.token_b;
          balance += t == spec.token_a ? 1 : -1;
        } else {
          t = uniform_token(first_filler, top);
        }
      }
      return balance != 0;
    }
    case TaskKind::kMarkedParity: {
      const std::int32_t first_filler = std::max({spec.marker, spec.payload0, spec.payload1}) + 1;
      for (auto& t : payload) {
        // Stray payload tokens act as distractors; markers appear only where placed.
        const double u = unit(engine);
        t = u < spec.distractor_rate ? (unit(engine) < 0.5 ? spec.payload0 : spec.payload1)
                                     : uniform_token(first_filler, top);
      }
      const std::size_t n = std::uniform_int_distribution<std::size_t>(1, spec.max_markers)(engine);
      std::vector<bool> used(L, false);
      for (std::size_t placed = 0; placed < n;) {
        const std::size_t p = std::uniform_int_distribution<std::size_t>(0, L - 2)(engine);
        if (used[p] || used[p + 1]) continue;
        used[p] = used[p + 1] = true;
        payload[p] = spec.marker;
        payload[p + 1] = unit(engine) < 0.5 ? spec.payload0 : spec.payload1;
        ++placed;
      }
      return true;
    }
    case TaskKind::kSignalDims: {
      for (auto& t : payload) t = uniform_token(2, top);
      return std::abs(rule->statistic(payload)) >= spec.margin * rule->scale;
    }
  }
  return false;
}

Dataset generate_split(const TaskSpec& spec, const SignalRule* rule, std::size_t size, std::uint64_t seed) {
  std::mt19937_64 engine(seed);
  const std::array<std::size_t, 2> quota = {(size + 1) / 2, size / 2};
  std::array<std::size_t, 2> have = {0, 0};
  Dataset d;
  d.seq = spec.seq_len();
  std::vector<std::int32_t> row;
  std::size_t attempts = 0;
  while (d.size() < size) {
    if (++attempts > 1000 * (size + 10)) throw Error(ErrorKind::kContract, "task cannot produce balanced classes");
    if (!draw(spec, rule, engine, row)) continue;
    const std::int32_t y = label_with(spec, rule, row);
    if (have[static_cast<std::size_t>(y)] >= quota[static_cast<std::size_t>(y)]) continue;
    ++have[static_cast<std::size_t>(y)];
    d.tokens.insert(d.tokens.end(), row.begin(), row.end());
    d.labels.push_back(y);
  }
  // Acceptance order clusters the class that fills last; shuffle rows.
  std::vector<std::size_t> order(size);
  for (std::size_t i = 0; i < size; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), engine);
  return d.select(order);
}

}  // namespace

std::string_view task_name(TaskKind kind) { return kTaskNames[static_cast<std::size_t>(kind)]; }

TaskKind parse_task(std::string_view name) {
  for (std::size_t i = 0; i < kTaskNames.size(); ++i)
    if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
  throw Error(ErrorKind::kConfig, "unknown task '" + std::string(name) + "'");
}

void TaskSpec::set_total(std::size_t total) {
  train_size = total * 8 / 10;
  val_size = total / 10;
  test_size = total - train_size - val_size;
}

void TaskSpec::validate() const {
  if (payload_len == 0) throw Error(ErrorKind::kContract, "payload length must be positive");
  if (vocab_size > 65536) throw Error(ErrorKind::kContract, "vocabulary must fit u16 token ids");
  if (train_size == 0) throw Error(ErrorKind::kContract, "train split is empty");
  auto in_vocab = [&](std::int32_t t) { return t >= 2 && static_cast<std::size_t>(t) < vocab_size; };
  switch (kind) {
    case TaskKind::kMajorityPair:
      if (!in_vocab(token_a) || !in_vocab(token_b) || token_a == token_b)
        throw Error(ErrorKind::kContract, "majority_pair needs two distinct task tokens");
      if (!(pair_fraction > 0 && pair_fraction <= 1))
        throw Error(ErrorKind::kContract, "pair_fraction must lie in (0, 1]");
      if (payload_len < 2) throw Error(ErrorKind::kContract, "majority_pair needs at least two payload slots");
      break;
    case TaskKind::kMarkedParity:
      if (!in_vocab(marker) || !in_vocab(payload0) || !in_vocab(payload1) || marker == payload0 ||
          marker == payload1 || payload0 == payload1)
        throw Error(ErrorKind::kContract, "marked_parity needs three distinct task tokens");
      if (distractor_rate < 0 || distractor_rate > 1)
        throw Error(ErrorKind::kContract, "distractor_rate must lie in [0, 1]");
      if (max_markers == 0) throw Error(ErrorKind::kContract, "marked_parity needs at least one marker");
      if (payload_len < 2 * max_markers)
        throw Error(ErrorKind::kContract, "payload of " + std::to_string(payload_len) + " cannot hold " +
                                              std::to_string(max_markers) + " marker pairs");
      if (static_cast<std::size_t>(std::max({marker, payload0, payload1})) + 1 >= vocab_size)
        throw Error(ErrorKind::kContract, "marked_parity needs at least one filler token");
      break;
    case TaskKind::kSignalDims:
      if (intrinsic_dim == 0) throw Error(ErrorKind::kContract, "intrinsic_dim must be positive");
      if (vocab_size < 4) throw Error(ErrorKind::kContract, "signal_dims needs at least two task tokens");
      if (margin < 0) throw Error(ErrorKind::kContract, "margin must be non-negative");
      break;
  }
}

TokenBatch Dataset::batch(std::span<const std::size_t> indices) const {
  TokenBatch b;
  b.batch = indices.size();
  b.seq = seq;
  b.ids.reserve(indices.size() * seq);
  for (std::size_t i : indices) {
    const auto r = row(i);
    b.ids.insert(b.ids.end(), r.begin(), r.end());
  }
  return b;
}

std::vector<std::int32_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::int32_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset d;
  d.seq = seq;
  const TokenBatch b = batch(indices);
  d.tokens = b.ids;
  d.labels = batch_labels(indices);
  return d;
}

std::int32_t label_of(const TaskSpec& spec, std::span<const std::int32_t> tokens) {
  if (spec.kind == TaskKind::kSignalDims) {
    const SignalRule rule(spec);
    return label_with(spec, &rule, tokens);
  }
  return label_with(spec, nullptr, tokens);
}

DatasetSplits generate(const TaskSpec& spec) {
  spec.validate();
  std::optional<SignalRule> rule;
  if (spec.kind == TaskKind::kSignalDims) rule.emplace(spec);
  const SignalRule* r = rule ? &*rule : nullptr;
  DatasetSplits out;
  out.spec = spec;
  out.train = generate_split(spec, r, spec.train_size, mix(spec.seed, 1));
  out.val = generate_split(spec, r, spec.val_size, mix(spec.seed, 2));
  out.test = generate_split(spec, r, spec.test_size, mix(spec.seed, 3));
  return out;
}

void save_dataset(const std::string& path, const DatasetSplits& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write '" + path + "'");
  binio::put_magic(out, "VIBD");
  binio::put(out, kDatasetVersion);
  binio::put(out, static_cast<std::uint8_t>(data.spec.kind));
  binio::put(out, static_cast<std::uint32_t>(data.spec.vocab_size));
  binio::put(out, static_cast<std::uint32_t>(data.spec.seq_len()));
  for (const Dataset* d : {&data.train, &data.val, &data.test}) binio::put(out, static_cast<std::uint32_t>(d->size()));
  binio::put(out, data.spec.seed);
  for (const Dataset* d : {&data.train, &data.val, &data.test})
    for (auto t : d->tokens) binio::put(out, static_cast<std::uint16_t>(t));
  for (const Dataset* d : {&data.train, &data.val, &data.test})
    for (auto y : d->labels) binio::put(out, static_cast<std::uint8_t>(y));
  if (!out) throw Error(ErrorKind::kIo, "failed writing '" + path + "'");
}

DatasetSplits load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open '" + path + "'");
  binio::expect_magic(in, "VIBD", path);
  const auto version = binio::get<std::uint32_t>(in, "version");
  if (version != kDatasetVersion) throw Error(ErrorKind::kFormat, "unsupported dataset version " + std::to_string(version));
  DatasetSplits data;
  const auto kind = binio::get<std::uint8_t>(in, "kind");
  if (kind > 2) throw Error(ErrorKind::kFormat, "unknown task kind " + std::to_string(kind));
  data.spec.kind = static_cast<TaskKind>(kind);
  data.spec.vocab_size = binio::get<std::uint32_t>(in, "vocab");
  const std::size_t seq = binio::get<std::uint32_t>(in, "seq");
  if (seq < 3) throw Error(ErrorKind::kFormat, "sequence length too short");
  data.spec.payload_len = seq - 2;
  data.spec.train_size = binio::get<std::uint32_t>(in, "train size");
  data.spec.val_size = binio::get<std::uint32_t>(in, "val size");
  data.spec.test_size = binio::get<std::uint32_t>(in, "test size");
  data.spec.seed = binio::get<std::uint64_t>(in, "seed");
  Dataset* splits[] = {&data.train, &data.val, &data.test};
  const std::size_t sizes[] = {data.spec.train_size, data.spec.val_size, data.spec.test_size};
  for (int s = 0; s < 3; ++s) {
    splits[s]->seq = seq;
    splits[s]->tokens.resize(sizes[s] * seq);
    for (auto& t : splits[s]->tokens) {
      t = binio::get<std::uint16_t>(in, "tokens");
      if (static_cast<std::size_t>(t) >= data.spec.vocab_size) throw Error(ErrorKind::kFormat, "token id outside vocabulary");
    }
  }
  for (int s = 0; s < 3; ++s) {
    splits[s]->labels.resize(sizes[s]);
    for (auto& y : splits[s]->labels) y = binio::get<std::uint8_t>(in, "labels");
  }
  return data;
}

VIBPRUNE_NAMESPACE_END
