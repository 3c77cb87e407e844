#include "vibprune/metrics.hpp"

#include <cmath>

#include "json.hpp"

VIBPRUNE_NAMESPACE_BEGIN

std::string metrics_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["phase"] = phase_name(m.phase);
  const std::pair<const char*, double> values[] = {
      {"loss_total", m.loss_total},       {"loss_task", m.loss_task}, {"loss_vib", m.loss_vib},
      {"loss_pred", m.loss_pred},         {"loss_layer", m.loss_layer}, {"loss_sparsity", m.loss_sparsity},
      {"s_e", m.s_e},                     {"t_cur", m.t_cur},         {"lambda1", m.lambda1},
      {"lambda2", m.lambda2}};
  for (const auto& [key, v] : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNumeric, std::string("metrics field ") + key + " is not finite");
    j[key] = v;
  }
  if (m.val_accuracy) j["val_accuracy"] = *m.val_accuracy;
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::string& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc), path_(path) {
  if (!out_) throw Error(ErrorKind::kIo, "cannot open metrics file '" + path + "'");
}

void MetricsWriter::write(const StepMetrics& m) {
  out_ << metrics_json(m) << '\n';
  out_.flush();
  if (!out_) throw Error(ErrorKind::kIo, "write to '" + path_ + "' failed");
}

MetricsSink MetricsWriter::sink() {
  return [this](const StepMetrics& m) { write(m); };
}

VIBPRUNE_NAMESPACE_END
