#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "vibprune/data.hpp"

using namespace vibprune;

namespace {

TaskSpec spec_for(TaskKind kind, std::uint64_t seed = 3) {
  TaskSpec s;
  s.kind = kind;
  s.seed = seed;
  s.set_total(1000);
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vibprune_test_" + std::to_string(::getpid()) + "_" + name);
}

void expect_same(const Dataset& a, const Dataset& b) {
  EXPECT_EQ(a.seq, b.seq);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.labels, b.labels);
}

const TaskKind kAllTasks[] = {TaskKind::kMajorityPair, TaskKind::kMarkedParity, TaskKind::kSignalDims};

}  // namespace

TEST(DataLabels, MajorityPairRule) {
  TaskSpec s = spec_for(TaskKind::kMajorityPair);
  s.payload_len = 8;
  const std::int32_t A = s.token_a, B = s.token_b;
  const std::vector<std::int32_t> five_three{kClsToken, A, B, A, A, B, A, B, A, kSepToken};
  EXPECT_EQ(label_of(s, five_three), 1);
  const std::vector<std::int32_t> three_five{kClsToken, B, A, B, B, A, B, A, B, kSepToken};
  EXPECT_EQ(label_of(s, three_five), 0);
}

TEST(DataLabels, MarkedParityRule) {
  TaskSpec s = spec_for(TaskKind::kMarkedParity);
  s.payload_len = 8;
  const std::int32_t M = s.marker, P0 = s.payload0, P1 = s.payload1, F = 6;
  EXPECT_EQ(label_of(s, std::vector<std::int32_t>{0, M, P1, F, F, F, F, F, F, 1}), 1);
  EXPECT_EQ(label_of(s, std::vector<std::int32_t>{0, M, P1, F, M, P1, F, F, F, 1}), 0);
  // An unmarked payload token does not count.
  EXPECT_EQ(label_of(s, std::vector<std::int32_t>{0, P1, M, P0, F, F, F, F, F, 1}), 0);
  EXPECT_THROW(label_of(s, std::vector<std::int32_t>{0, 1}), Error);
}

TEST(DataGenerate, DeterministicPerSeed) {
  for (TaskKind k : kAllTasks) {
    const auto a = generate(spec_for(k, 11)), b = generate(spec_for(k, 11)), c = generate(spec_for(k, 12));
    expect_same(a.train, b.train);
    expect_same(a.test, b.test);
    EXPECT_NE(a.train.tokens, c.train.tokens);
  }
}

TEST(DataGenerate, SplitSizesAndBalance) {
  for (TaskKind k : kAllTasks) {
    const auto d = generate(spec_for(k));
    EXPECT_EQ(d.train.size(), 800u);
    EXPECT_EQ(d.val.size(), 100u);
    EXPECT_EQ(d.test.size(), 100u);
    for (const Dataset* split : {&d.train, &d.val, &d.test}) {
      const auto ones = std::count(split->labels.begin(), split->labels.end(), 1);
      EXPECT_LE(std::abs(2 * static_cast<double>(ones) - static_cast<double>(split->size())),
                0.01 * static_cast<double>(split->size()) + 1);
    }
  }
}

TEST(DataGenerate, RowsAreFramedAndLabelsFollowTheRule) {
  for (TaskKind k : kAllTasks) {
    const auto d = generate(spec_for(k));
    for (std::size_t i = 0; i < d.train.size(); ++i) {
      const auto row = d.train.row(i);
      ASSERT_EQ(row.size(), d.spec.seq_len());
      EXPECT_EQ(row.front(), kClsToken);
      EXPECT_EQ(row.back(), kSepToken);
      for (std::size_t p = 1; p + 1 < row.size(); ++p) {
        EXPECT_GE(row[p], 2);
        EXPECT_LT(row[p], static_cast<std::int32_t>(d.spec.vocab_size));
      }
      EXPECT_EQ(label_of(d.spec, row), d.train.labels[i]);
    }
  }
}

TEST(DataGenerate, MajorityPairHasNoTies) {
  const auto d = generate(spec_for(TaskKind::kMajorityPair));
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto row = d.train.row(i);
    EXPECT_NE(std::count(row.begin(), row.end(), d.spec.token_a), std::count(row.begin(), row.end(), d.spec.token_b));
  }
}

TEST(DataGenerate, MarkedParityAlwaysHasAMarker) {
  const auto d = generate(spec_for(TaskKind::kMarkedParity));
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const auto row = d.train.row(i);
    const auto markers = std::count(row.begin(), row.end(), d.spec.marker);
    EXPECT_GE(markers, 1);
    EXPECT_LE(static_cast<std::size_t>(markers), d.spec.max_markers);
  }
}

TEST(DataGenerate, InfeasibleSpecsAreContractErrors) {
  auto expect_contract = [](const TaskSpec& s) {
    try {
      generate(s);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kContract);
    }
  };
  TaskSpec s = spec_for(TaskKind::kMarkedParity);
  s.payload_len = 4;
  s.max_markers = 3;
  expect_contract(s);
  s = spec_for(TaskKind::kMajorityPair);
  s.token_b = s.token_a;
  expect_contract(s);
  s = spec_for(TaskKind::kMajorityPair);
  s.token_a = 1;  // the separator
  expect_contract(s);
  s = spec_for(TaskKind::kSignalDims);
  s.intrinsic_dim = 0;
  expect_contract(s);
  s = spec_for(TaskKind::kSignalDims);
  s.train_size = 0;
  expect_contract(s);
}

TEST(DataTasks, NamesRoundTrip) {
  for (TaskKind k : kAllTasks) EXPECT_EQ(parse_task(task_name(k)), k);
  EXPECT_THROW(parse_task("glue"), Error);
}

TEST(DataFile, SaveLoadRoundTrip) {
  const auto path = temp_file("data.vibd");
  const auto d = generate(spec_for(TaskKind::kMarkedParity, 5));
  save_dataset(path.string(), d);
  const auto back = load_dataset(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.spec.kind, d.spec.kind);
  EXPECT_EQ(back.spec.vocab_size, d.spec.vocab_size);
  EXPECT_EQ(back.spec.seq_len(), d.spec.seq_len());
  EXPECT_EQ(back.spec.seed, d.spec.seed);
  expect_same(back.train, d.train);
  expect_same(back.val, d.val);
  expect_same(back.test, d.test);
}

TEST(DataFile, BadInputs) {
  const auto path = temp_file("bad.vibd");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE and some bytes";
  }
  try {
    load_dataset(path.string());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
  }
  // Truncated after a valid header start.
  const auto good = temp_file("good.vibd");
  save_dataset(good.string(), generate(spec_for(TaskKind::kMajorityPair)));
  std::filesystem::resize_file(good, 40);
  EXPECT_THROW(load_dataset(good.string()), Error);
  std::filesystem::remove(path);
  std::filesystem::remove(good);
  try {
    load_dataset("/nonexistent/dir/x.vibd");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kIo);
  }
}

TEST(DataBatch, SelectAndBatch) {
  const auto d = generate(spec_for(TaskKind::kMajorityPair));
  const std::vector<std::size_t> idx{5, 2, 9};
  const TokenBatch b = d.train.batch(idx);
  EXPECT_EQ(b.batch, 3u);
  EXPECT_EQ(b.seq, d.train.seq);
  EXPECT_TRUE(std::equal(b.ids.begin(), b.ids.begin() + static_cast<std::ptrdiff_t>(b.seq), d.train.row(5).begin()));
  EXPECT_EQ(d.train.batch_labels(idx), (std::vector<std::int32_t>{d.train.labels[5], d.train.labels[2], d.train.labels[9]}));
  const Dataset sel = d.train.select(idx);
  EXPECT_EQ(sel.size(), 3u);
  EXPECT_EQ(sel.labels[1], d.train.labels[2]);
}
