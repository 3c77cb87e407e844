#pragma once

// One JSON object per line, flushed after every record.

#include <fstream>
#include <string>

#include "vibprune/pipeline.hpp"

VIBPRUNE_NAMESPACE_BEGIN

std::string metrics_json(const StepMetrics& m);

class MetricsWriter {
 public:
  /// Appends when `append` is set, otherwise truncates. Io error if unwritable.
  explicit MetricsWriter(const std::string& path, bool append = false);
  void write(const StepMetrics& m);
  MetricsSink sink();

 private:
  std::ofstream out_;
  std::string path_;
};

VIBPRUNE_NAMESPACE_END
