#pragma once

// Flat "dotted.key = value" run configuration. Blank lines and lines starting
// with '#' are ignored. Unknown keys and unparsable values are config errors
// naming the key.
//
// `seed` is a base seed: data.seed, teacher.seed (which also seeds the
// teacher's initial weights) and prune.seed inherit it unless set explicitly.

#include <map>
#include <set>
#include <string>
#include <string_view>

#include "vibprune/data.hpp"
#include "vibprune/pipeline.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct ExperimentConfig {
  std::uint64_t seed = 0;
  TaskSpec data;
  ModelConfig model;  // vocab_size and max_seq follow the data spec
  TeacherTrainConfig teacher;
  RunConfig run;

  /// Keys assigned so far, in canonical form.
  std::set<std::string> assigned;

  /// Assigns one key. Config error for an unknown key or bad value.
  void set(std::string_view key, std::string_view value);
  /// Re-derives seeds and data-dependent model fields, then validates.
  void finalize();
  /// Every known key with its current value, in key order.
  std::map<std::string, std::string> dump() const;
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);

VIBPRUNE_NAMESPACE_END
