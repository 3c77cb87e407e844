// Command-line driver: every phase reads a flat config plus overrides and
// writes its outputs under --out. Failures print one JSON line on stderr.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "vibprune/analysis.hpp"
#include "vibprune/checkpoint.hpp"
#include "vibprune/config.hpp"
#include "vibprune/metrics.hpp"
#include "gradcheck_entry.hpp"

namespace fs = std::filesystem;
using namespace vibprune;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant, metric;
  std::optional<double> target;
  std::string out = ".";
  std::string data, teacher, student, model;
  std::string split = "val";
  std::string tokens = "0,1";
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "Flat key=value config file");
  cmd->add_option("--set", o.sets, "Extra key=value override, repeatable");
  cmd->add_option("--seed", o.seed, "Base seed; replaces every component seed");
  cmd->add_option("--variant", o.variant, "vtrans | fast | faster");
  cmd->add_option("--target", o.target, "Target sparsity in (0, 1)");
  cmd->add_option("--metric", o.metric, "parameters | flops");
  cmd->add_option("--out", o.out, "Output directory")->capture_default_str();
  cmd->add_option("--data", o.data, "Dataset file; generated from the config when absent");
}

ExperimentConfig resolve(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::kConfig, "override '" + kv + "' is not key=value");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) {
    const auto s = std::to_string(*o.seed);
    for (const char* key : {"seed", "data.seed", "teacher.seed", "prune.seed"}) cfg.set(key, s);
  }
  if (o.variant) cfg.set("prune.variant", *o.variant);
  if (o.target) cfg.set("prune.target", std::to_string(*o.target));
  if (o.metric) cfg.set("prune.metric", *o.metric);
  cfg.finalize();
  return cfg;
}

DatasetSplits dataset(const Options& o, const ExperimentConfig& cfg) {
  return o.data.empty() ? generate(cfg.data) : load_dataset(o.data);
}

const Dataset& split_of(const DatasetSplits& d, const std::string& name) {
  if (name == "train") return d.train;
  if (name == "val") return d.val;
  if (name == "test") return d.test;
  throw Error(ErrorKind::kConfig, "unknown split '" + name + "'");
}

fs::path out_dir(const Options& o) {
  fs::create_directories(o.out);
  return fs::path(o.out);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorKind::kIo, "cannot write '" + path.string() + "'");
  f << text << '\n';
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorKind::kConfig, std::string("missing required ") + flag);
}

void check_shapes(const GatedTransformer& teacher, const ExperimentConfig& cfg) {
  if (teacher.config.vocab_size != cfg.model.vocab_size || teacher.config.max_seq < cfg.model.max_seq)
    throw Error(ErrorKind::kConfig, "teacher checkpoint does not fit the configured data");
}

Checkpoint student_checkpoint(const GatedTransformer& student, const DistillConfig& distill) {
  Checkpoint ck = to_checkpoint(student);
  const auto& w = distill.w_layer;
  ck.push_back({"distill.w_layer", {static_cast<std::uint32_t>(w.size(0)), static_cast<std::uint32_t>(w.size(1))},
                std::vector<float>(w.data().begin(), w.data().end())});
  return ck;
}

// Parameter and FLOP totals of whatever a checkpoint holds, measured on the dense form.
DenseModel dense_view(const Checkpoint& ck, double tau) {
  if (is_dense_checkpoint(ck)) return dense_from_checkpoint(ck);
  GatedTransformer m = model_from_checkpoint(ck);
  if (!m.is_student()) return dense_from_teacher(m);
  if (!m.binarized()) binarize(m, tau);
  return extract_dense(m);
}

int cmd_train_teacher(const Options& o) {
  const auto cfg = resolve(o);
  const auto dir = out_dir(o);
  const auto data = dataset(o, cfg);
  save_dataset((dir / "data.vibd").string(), data);
  MetricsWriter metrics((dir / "metrics.jsonl").string(), true);
  const GatedTransformer teacher = train_teacher(cfg.model, data.train, cfg.teacher, metrics.sink());
  save_checkpoint((dir / "teacher.vibp").string(), to_checkpoint(teacher));
  const DenseModel dense = dense_from_teacher(teacher);
  const json j{{"val_accuracy", accuracy(teacher, data.val)},
               {"test_accuracy", accuracy(teacher, data.test)},
               {"params", param_count(dense)},
               {"flops", flop_count(dense, cfg.model.max_seq)}};
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_prune(const Options& o) {
  const auto cfg = resolve(o);
  require(o.teacher, "--teacher");
  const auto dir = out_dir(o);
  const auto data = dataset(o, cfg);
  const GatedTransformer teacher = model_from_checkpoint(load_checkpoint(o.teacher));
  check_shapes(teacher, cfg);
  const Dataset used = training_data(data.train, cfg.run);
  const TeacherCache cache(teacher, used);
  GatedTransformer student = make_student(teacher, cfg.run);
  PruneState state = make_prune_state(student, cfg.run, used.size());
  MetricsWriter metrics((dir / "metrics.jsonl").string(), true);
  const auto steps = prune_phase(student, cache, used, state, cfg.run, metrics.sink());
  binarize(student, cfg.run.tau);
  save_checkpoint((dir / "student.vibp").string(), student_checkpoint(student, state.distill));
  const json j{{"final_s_e", steps.empty() ? 0.0 : steps.back().s_e},
               {"target", cfg.run.target},
               {"metric", metric_name(cfg.run.metric)},
               {"variant", variant_name(cfg.run.variant)},
               {"steps", steps.size()},
               {"val_accuracy", accuracy(student, data.val, cfg.run.tau)}};
  write_text(dir / "prune_report.json", j.dump(2));
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_finetune(const Options& o) {
  const auto cfg = resolve(o);
  require(o.teacher, "--teacher");
  require(o.student, "--student");
  const auto dir = out_dir(o);
  const auto data = dataset(o, cfg);
  const GatedTransformer teacher = model_from_checkpoint(load_checkpoint(o.teacher));
  check_shapes(teacher, cfg);
  const Checkpoint ck = load_checkpoint(o.student);
  GatedTransformer student = model_from_checkpoint(ck);
  if (!student.binarized()) throw Error(ErrorKind::kContract, "finetune needs a binarized student");
  DistillConfig distill = DistillConfig::create(student.config.width, student.config.layers, cfg.run.eta);
  distill.reverse_kl = cfg.run.reverse_kl;
  if (has_array(ck, "distill.w_layer")) {
    const auto& w = find_array(ck, "distill.w_layer").values;
    if (w.size() != distill.w_layer.numel()) throw Error(ErrorKind::kFormat, "distill.w_layer has the wrong size");
    auto dst = distill.w_layer.data();
    std::copy(w.begin(), w.end(), dst.begin());
  }
  const Dataset used = training_data(data.train, cfg.run);
  const TeacherCache cache(teacher, used);
  MetricsWriter metrics((dir / "metrics.jsonl").string(), true);
  finetune_phase(student, cache, used, distill, cfg.run, metrics.sink());
  save_checkpoint((dir / "finetuned.vibp").string(), student_checkpoint(student, distill));
  const json j{{"val_accuracy", accuracy(student, data.val, cfg.run.tau)}};
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_extract(const Options& o) {
  const auto cfg = resolve(o);
  require(o.student, "--student");
  const auto dir = out_dir(o);
  const GatedTransformer student = model_from_checkpoint(load_checkpoint(o.student));
  if (!student.is_student()) throw Error(ErrorKind::kContract, "extract needs a pruned student checkpoint");
  const DenseModel dense = extract_dense(student);
  save_checkpoint((dir / "dense.vibp").string(), to_checkpoint(dense));
  const auto report = extract_report(dense, cfg.run.ref_seq);
  write_text(dir / "extract_report.json", report_json(report));
  std::cout << json::parse(report_json(report)).dump() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  const auto cfg = resolve(o);
  require(o.model, "--model");
  const auto data = dataset(o, cfg);
  const Dataset& split = split_of(data, o.split);
  const Checkpoint ck = load_checkpoint(o.model);
  const DenseModel dense = dense_view(ck, cfg.run.tau);
  const double acc = is_dense_checkpoint(ck) ? accuracy(dense, split) : accuracy(model_from_checkpoint(ck), split, cfg.run.tau);
  const std::size_t seq = cfg.run.ref_seq == 0 ? dense.source.max_seq : cfg.run.ref_seq;
  const json j{{"accuracy", acc}, {"params", param_count(dense)}, {"flops", flop_count(dense, seq)}};
  std::cout << j.dump() << '\n';
  return 0;
}

int cmd_analyze(const Options& o) {
  const auto cfg = resolve(o);
  require(o.model, "--model");
  const auto dir = out_dir(o);
  const Checkpoint ck = load_checkpoint(o.model);
  if (is_dense_checkpoint(ck)) {
    const auto pattern = pruning_pattern(dense_from_checkpoint(ck));
    write_text(dir / "pattern.json", pattern_json(pattern));
    std::cout << json{{"written", {"pattern.json"}}}.dump() << '\n';
    return 0;
  }
  const auto data = dataset(o, cfg);
  const Dataset& split = split_of(data, o.split);
  const GatedTransformer model = model_from_checkpoint(ck);
  std::vector<std::int32_t> ids;
  std::stringstream ss(o.tokens);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) ids.push_back(static_cast<std::int32_t>(std::stol(item)));
  write_text(dir / "attention.json", attention_json(token_attention(model, split, ids, cfg.run.tau)));
  write_text(dir / "head_js.json", divergence_json(head_js(model, split, cfg.run.tau)));
  write_text(dir / "pattern.json", pattern_json(pruning_pattern(model, cfg.run.tau)));
  std::cout << json{{"written", {"attention.json", "head_js.json", "pattern.json"}}}.dump() << '\n';
  return 0;
}

int cmd_gradcheck(const Options& o) {
  const auto cfg = resolve(o);
  const auto rows = run_gradcheck_f64(cfg.seed);
  json j = json::object();
  bool ok = true;
  for (const auto& r : rows) {
    j[r.component] = {{"max_relative_error", r.max_relative_error}, {"threshold", r.threshold}, {"passed", r.passed}};
    ok = ok && r.passed;
  }
  std::cout << j.dump() << '\n';
  if (!ok) throw Error(ErrorKind::kNumeric, "gradcheck exceeded a threshold");
  return 0;
}

void print_error(std::string_view kind, std::string_view detail) {
  std::cerr << json{{"error", kind}, {"detail", detail}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured pruning of small transformers with VIB gates"};
  app.require_subcommand(1);
  Options o;

  auto* teacher = app.add_subcommand("train-teacher", "Generate data and train the dense teacher");
  add_common(teacher, o);
  auto* prune = app.add_subcommand("prune", "Prune a student under the sparsity constraint, then binarize");
  add_common(prune, o);
  prune->add_option("--teacher", o.teacher, "Teacher checkpoint");
  auto* finetune = app.add_subcommand("finetune", "Finetune the surviving weights of a binarized student");
  add_common(finetune, o);
  finetune->add_option("--teacher", o.teacher, "Teacher checkpoint");
  finetune->add_option("--student", o.student, "Binarized student checkpoint");
  auto* extract = app.add_subcommand("extract", "Remove masked units into a dense model");
  add_common(extract, o);
  extract->add_option("--student", o.student, "Binarized student checkpoint");
  auto* eval = app.add_subcommand("eval", "Accuracy, parameter and FLOP counts of a checkpoint");
  add_common(eval, o);
  eval->add_option("--model", o.model, "Any checkpoint");
  eval->add_option("--split", o.split, "train | val | test")->capture_default_str();
  auto* analyze = app.add_subcommand("analyze", "Attention and pruning-pattern probes");
  add_common(analyze, o);
  analyze->add_option("--model", o.model, "Any checkpoint");
  analyze->add_option("--split", o.split, "train | val | test")->capture_default_str();
  analyze->add_option("--tokens", o.tokens, "Comma-separated token ids for the attention-mass probe")
      ->capture_default_str();
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss component");
  add_common(gradcheck, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage error", e.what());
    return 2;
  }

  try {
    if (teacher->parsed()) return cmd_train_teacher(o);
    if (prune->parsed()) return cmd_prune(o);
    if (finetune->parsed()) return cmd_finetune(o);
    if (extract->parsed()) return cmd_extract(o);
    if (eval->parsed()) return cmd_eval(o);
    if (analyze->parsed()) return cmd_analyze(o);
    if (gradcheck->parsed()) return cmd_gradcheck(o);
  } catch (const Error& e) {
    print_error(error_kind_name(e.kind()), e.detail());
    return 1;
  } catch (const std::exception& e) {
    print_error("io error", e.what());
    return 1;
  }
  return 1;
}
