#include "cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "dida/dataset.hpp"
#include "dida/error.hpp"
#include "dida/handcrafted.hpp"
#include "dida/invariant_net.hpp"
#include "dida/io.hpp"
#include "dida/log.hpp"
#include "dida/random.hpp"
#include "dida/tasks.hpp"
#include "dida/verify.hpp"

namespace dida::cli {

namespace {

namespace fs = std::filesystem;
using io::Json;

constexpr const char* kEvalSchema = "dida.eval/1";
constexpr const char* kMetaSchema = "dida.meta/1";
constexpr const char* kReportSchema = "dida.report/1";
constexpr const char* kScatterHeader = "true_perf,pred_perf,extractor_name";

struct GlobalFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> jobs;
};

/// Command config after flags were merged in. `doc` keeps the
/// command-specific keys only.
struct RunConfig {
  Json doc = Json::object();
  std::uint64_t seed = 0;
  std::optional<fs::path> out;
  int jobs = 1;

  fs::path out_dir() const { return out.value_or("out"); }
};

template <typename T>
T value_or(const Json& doc, const char* key, T fallback, std::string_view what) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const Json::exception& e) {
    fail(ErrorKind::configuration, std::string(what) + ": key '" + key + "': " + e.what());
  }
}

template <typename T>
std::optional<T> optional_value(const Json& doc, const char* key, std::string_view what) {
  if (!doc.contains(key)) return std::nullopt;
  return value_or<T>(doc, key, T{}, what);
}

RunConfig load_config(const GlobalFlags& flags, const std::vector<std::string>& known, const std::string& command) {
  RunConfig rc;
  if (!flags.config.empty()) {
    rc.doc = io::read_json(flags.config);
    require(rc.doc.is_object(), ErrorKind::configuration, flags.config + ": config must be a JSON object");
  }
  for (const auto& [key, value] : rc.doc.items()) {
    if (key == "seed" || key == "out" || key == "jobs") continue;
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      fail(ErrorKind::configuration, "unknown " + command + " config key '" + key + "'");
    }
  }
  rc.seed = flags.seed.value_or(value_or<std::uint64_t>(rc.doc, "seed", 0, command));
  if (flags.out) {
    rc.out = *flags.out;
  } else if (auto o = optional_value<std::string>(rc.doc, "out", command)) {
    rc.out = *o;
  }
  rc.jobs = flags.jobs.value_or(value_or<int>(rc.doc, "jobs", 1, command));
  require(rc.jobs >= 1, ErrorKind::configuration, "jobs must be >= 1");
  rc.doc.erase("seed");
  rc.doc.erase("out");
  rc.doc.erase("jobs");
  return rc;
}

void make_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail(ErrorKind::io, "cannot create output directory " + dir.string());
}

std::string pick(const std::string& flag, const Json& doc, const char* key, std::string_view what) {
  if (!flag.empty()) return flag;
  return value_or<std::string>(doc, key, "", what);
}

std::vector<LabeledDataset> select(const std::vector<LabeledDataset>& all, const std::vector<int>& idx) {
  std::vector<LabeledDataset> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

std::string format_number(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

// ---- gen-data ------------------------------------------------------------------------------

const std::vector<std::string> kToyKeys{"count",     "n_min",     "n_max",           "min_classes",
                                        "max_classes", "dims_min", "dims_max",       "noise_min",
                                        "noise_max", "label_noise_max", "vary_geometry", "max_stretch"};

ToyBenchmarkConfig toy_from_json(const Json& doc, std::uint64_t seed) {
  ToyBenchmarkConfig c;
  const char* what = "gen-data";
  c.count = value_or(doc, "count", c.count, what);
  c.n_min = value_or(doc, "n_min", c.n_min, what);
  c.n_max = value_or(doc, "n_max", c.n_max, what);
  c.min_classes = value_or(doc, "min_classes", c.min_classes, what);
  c.max_classes = value_or(doc, "max_classes", c.max_classes, what);
  c.dims_min = value_or(doc, "dims_min", c.dims_min, what);
  c.dims_max = value_or(doc, "dims_max", c.dims_max, what);
  c.noise_min = value_or(doc, "noise_min", c.noise_min, what);
  c.noise_max = value_or(doc, "noise_max", c.noise_max, what);
  c.label_noise_max = value_or(doc, "label_noise_max", c.label_noise_max, what);
  c.vary_geometry = value_or(doc, "vary_geometry", c.vary_geometry, what);
  c.max_stretch = value_or(doc, "max_stretch", c.max_stretch, what);
  c.seed = seed;
  c.validate();
  return c;
}

Json toy_to_json(const ToyBenchmarkConfig& c) {
  return {{"count", c.count},         {"seed", c.seed},
          {"n_min", c.n_min},         {"n_max", c.n_max},
          {"min_classes", c.min_classes}, {"max_classes", c.max_classes},
          {"dims_min", c.dims_min},   {"dims_max", c.dims_max},
          {"noise_min", c.noise_min}, {"noise_max", c.noise_max},
          {"label_noise_max", c.label_noise_max}, {"vary_geometry", c.vary_geometry},
          {"max_stretch", c.max_stretch}};
}

int cmd_gen_data(const GlobalFlags& flags) {
  RunConfig rc = load_config(flags, kToyKeys, "gen-data");
  const ToyBenchmarkConfig cfg = toy_from_json(rc.doc, rc.seed);
  const fs::path out = rc.out_dir();
  make_out_dir(out);

  const auto datasets = generate_toy_benchmark(cfg);
  std::vector<ManifestEntry> entries;
  entries.reserve(datasets.size());
  for (const auto& z : datasets) {
    const std::string rel = "datasets/" + z.id + ".csv";
    write_csv(out / rel, z);
    entries.push_back({z.id, rel, "label"});
  }
  write_manifest(out / "manifest.json", entries);
  io::write_json(out / "gen-data.json", {{"generator", toy_to_json(cfg)}, {"datasets", entries.size()}});
  std::cout << "wrote " << entries.size() << " datasets and " << (out / "manifest.json").string() << "\n";
  return kExitOk;
}

// ---- train ---------------------------------------------------------------------------------

struct TrainFlags {
  std::string task;
  std::string model;
  std::string manifest;
};

void check_task(const std::string& task) {
  if (task != "patch-id" && task != "ranker") {
    fail(ErrorKind::configuration, "task must be patch-id or ranker, got '" + task + "'");
  }
}

std::string metrics_lines(const std::vector<tasks::EpochMetrics>& history, const std::string& task,
                          const std::string& method, std::uint64_t seed) {
  std::string out;
  for (const auto& m : history) {
    Json j = tasks::to_json(m);
    j["task"] = task;
    j["method"] = method;
    j["seed"] = seed;
    out += j.dump() + "\n";
  }
  return out;
}

int cmd_train(const GlobalFlags& flags, const TrainFlags& tf) {
  RunConfig rc = load_config(flags, {"task", "model", "manifest", "arch", "training"}, "train");
  const std::string task = pick(tf.task, rc.doc, "task", "train");
  require(!task.empty(), ErrorKind::configuration, "train needs a task (--task patch-id|ranker)");
  check_task(task);

  Json arch_doc = value_or<Json>(rc.doc, "arch", Json::object(), "train");
  std::string model_name = pick(tf.model, rc.doc, "model", "train");
  if (model_name.empty()) model_name = value_or<std::string>(arch_doc, "model", "dida", "train");
  if (model_name == "handcrafted") {
    fail(ErrorKind::configuration,
         "handcrafted meta-features have no trainable extractor; use them through extract");
  }
  require(arch_doc.is_object(), ErrorKind::configuration, "arch must be a JSON object");
  arch_doc["model"] = model_name;
  const net::ArchConfig arch = net::arch_from_json(arch_doc);

  Json training = value_or<Json>(rc.doc, "training", Json::object(), "train");
  require(training.is_object(), ErrorKind::configuration, "training must be a JSON object");
  require(!training.contains("seed"), ErrorKind::configuration, "set the seed at the top level, not in training");
  training["seed"] = rc.seed;

  std::optional<tasks::PatchIdConfig> patch_cfg;
  std::optional<tasks::RankerConfig> rank_cfg;
  Json training_resolved;
  if (task == "patch-id") {
    patch_cfg = tasks::patch_id_config_from_json(training);
    patch_cfg->jobs = rc.jobs;
    training_resolved = tasks::to_json(*patch_cfg);
  } else {
    rank_cfg = tasks::ranker_config_from_json(training);
    rank_cfg->jobs = rc.jobs;
    training_resolved = tasks::to_json(*rank_cfg);
  }

  const std::string manifest = pick(tf.manifest, rc.doc, "manifest", "train");
  require(!manifest.empty(), ErrorKind::configuration, "train needs a manifest (--manifest)");
  const auto datasets = load_manifest_datasets(manifest);

  const fs::path out = rc.out_dir();
  make_out_dir(out);
  const std::string method = net::to_string(arch.kind);
  const Json run_doc = {{"task", task},        {"method", method},      {"seed", rc.seed},
                        {"manifest", manifest}, {"arch", net::to_json(arch)}, {"training", training_resolved}};
  io::write_json(out / "run.json", run_doc);

  auto model = net::init_model(arch, child_seed(rc.seed, 0));
  log::info("train ", task, " with ", method, " (", net::count_parameters(arch), " parameters) on ", datasets.size(),
            " datasets");

  const Json base_extra = {{"task", task}, {"method", method}, {"seed", rc.seed}, {"manifest", manifest},
                           {"training", training_resolved}};
  tasks::EpochHook hook = [&](const tasks::EpochSnapshot& s) {
    Json extra = base_extra;
    extra["epoch"] = s.epoch;
    if (s.head) extra["head"] = tasks::to_json(*s.head);
    io::atomic_write(out / "metrics.jsonl", metrics_lines(*s.history, task, method, rc.seed));
    net::save_checkpoint(out / "checkpoint-last.json", *s.model, extra);
    if (s.best) net::save_checkpoint(out / "checkpoint.json", *s.model, extra);
  };

  int best_epoch = 0;
  double best = 0.0;
  if (patch_cfg) {
    const auto result = tasks::train_patch_id(*model, datasets, *patch_cfg, hook);
    best_epoch = result.best_epoch;
    best = result.best_test_accuracy;
  } else {
    const auto result = tasks::train_ranker(*model, datasets, *rank_cfg, hook);
    best_epoch = result.best_epoch;
    best = result.best_test_accuracy;
  }
  std::cout << task << " " << method << ": best test accuracy " << format_number("%.4f", best) << " at epoch "
            << best_epoch << "\n";
  return kExitOk;
}

// ---- eval ----------------------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint;
  std::string manifest;
};

int cmd_eval(const GlobalFlags& flags, const EvalFlags& ef) {
  RunConfig rc = load_config(flags, {"checkpoint", "manifest"}, "eval");
  const std::string ckpt_path = pick(ef.checkpoint, rc.doc, "checkpoint", "eval");
  require(!ckpt_path.empty(), ErrorKind::configuration, "eval needs a checkpoint (--checkpoint)");

  const auto loaded = net::load_checkpoint(ckpt_path);
  const Json& extra = loaded.extra;
  for (const char* key : {"task", "method", "seed", "training", "manifest", "epoch"}) {
    if (!extra.contains(key)) fail(ErrorKind::format, ckpt_path + ": checkpoint lacks training record '" + key + "'");
  }
  const std::string task = extra.at("task").get<std::string>();
  check_task(task);
  std::string manifest = pick(ef.manifest, rc.doc, "manifest", "eval");
  if (manifest.empty()) manifest = extra.at("manifest").get<std::string>();
  const auto datasets = load_manifest_datasets(manifest);
  const net::Model& model = *loaded.model;

  Json report = {{"schema", kEvalSchema},
                 {"task", task},
                 {"method", extra.at("method")},
                 {"seed", extra.at("seed")},
                 {"epoch", extra.at("epoch")}};
  if (task == "patch-id") {
    auto cfg = tasks::patch_id_config_from_json(extra.at("training"));
    cfg.jobs = rc.jobs;
    const auto split = tasks::make_patch_id_split(datasets, cfg);
    const auto train_pairs = tasks::build_patch_pairs(select(datasets, split.train_datasets), cfg.test_pairs,
                                                      cfg.sampling, child_seed(cfg.seed, 5));
    const auto [test_loss, test_acc] = tasks::evaluate_patch_pairs(model, split.test_pairs, rc.jobs);
    const auto [train_loss, train_acc] = tasks::evaluate_patch_pairs(model, train_pairs, rc.jobs);
    report["test"] = {{"accuracy", test_acc}, {"loss", test_loss}, {"count", split.test_pairs.size()}};
    report["train"] = {{"accuracy", train_acc}, {"loss", train_loss}, {"count", train_pairs.size()}};
  } else {
    if (!extra.contains("head")) fail(ErrorKind::format, ckpt_path + ": ranker checkpoint lacks its head");
    auto cfg = tasks::ranker_config_from_json(extra.at("training"));
    cfg.jobs = rc.jobs;
    const auto head = tasks::ranker_head_from_json(extra.at("head"));
    const auto split = tasks::make_ranking_split(datasets, cfg);
    const auto train_triplets =
        tasks::build_rank_triplets(select(datasets, split.train_datasets), static_cast<int>(split.test_triplets.size()),
                                   cfg.sampling, child_seed(cfg.seed, 5), cfg.triplets_per_patch, rc.jobs);
    const double test_acc = tasks::ranking_accuracy(&model, head, nullptr, split.test_triplets, false, rc.jobs);
    const double train_acc = tasks::ranking_accuracy(&model, head, nullptr, train_triplets, false, rc.jobs);
    report["test"] = {{"accuracy", test_acc}, {"count", split.test_triplets.size()}};
    report["train"] = {{"accuracy", train_acc}, {"count", train_triplets.size()}};
  }
  log::info("eval ", task, ": train accuracy ", report["train"]["accuracy"].get<double>(), ", test accuracy ",
            report["test"]["accuracy"].get<double>());
  const fs::path out = rc.out_dir();
  make_out_dir(out);
  io::write_json(out / "eval.json", report);
  std::cout << report.dump(2) << "\n";
  return kExitOk;
}

// ---- verify --------------------------------------------------------------------------------

int cmd_verify(const GlobalFlags& flags, std::string suite, std::optional<int> trials) {
  std::vector<std::string> known{"suite", "trials", "budget", "sigmas", "max_rows", "max_features", "max_atoms",
                                 "max_dim", "max_n", "max_dx", "max_r", "max_t", "lemma_dim", "cells"};
  RunConfig rc = load_config(flags, known, "verify");
  if (suite.empty()) suite = value_or<std::string>(rc.doc, "suite", "all", "verify");
  rc.doc.erase("suite");
  if (trials) rc.doc["trials"] = *trials;
  if (rc.doc.contains("trials")) {
    require(rc.doc["trials"].is_number_integer() && rc.doc["trials"].get<long>() >= 1, ErrorKind::configuration,
            "trials must be a positive integer");
  }
  rc.doc["seed"] = rc.seed;
  verify::VerifyConfig cfg = verify::verify_config_from_json(rc.doc);
  cfg.jobs = rc.jobs;

  std::vector<std::string> suites;
  if (suite == "all") {
    suites = verify::suite_names();
  } else {
    const auto& names = verify::suite_names();
    if (std::find(names.begin(), names.end(), suite) == names.end()) {
      fail(ErrorKind::configuration, "unknown suite '" + suite + "'");
    }
    suites = {suite};
  }
  const fs::path out = rc.out_dir();
  make_out_dir(out);
  bool all_passed = true;
  for (const auto& name : suites) {
    const auto r = verify::run_suite(name, cfg);
    io::write_json(out / ("verify-" + name + ".json"), r.report());
    io::atomic_write(out / ("verify-" + name + ".jsonl"), io::to_jsonl(r.records));
    std::cout << name << ": " << r.trials << " trials, " << r.violations << " violations, max "
              << format_number("%.3e", r.max_value) << " -> " << (r.passed() ? "PASS" : "FAIL") << "\n";
    all_passed = all_passed && r.passed();
  }
  return all_passed ? kExitOk : kExitViolations;
}

// ---- extract -------------------------------------------------------------------------------

struct ExtractFlags {
  std::string extractor;
  std::string data;
  std::string label;
};

int cmd_extract(const GlobalFlags& flags, const ExtractFlags& xf) {
  RunConfig rc = load_config(flags, {"extractor", "data", "label_column"}, "extract");
  const std::string extractor = pick(xf.extractor, rc.doc, "extractor", "extract");
  const std::string data = pick(xf.data, rc.doc, "data", "extract");
  std::string label = pick(xf.label, rc.doc, "label_column", "extract");
  if (label.empty()) label = "label";
  require(!extractor.empty(), ErrorKind::configuration, "extract needs --extractor handcrafted|<checkpoint>");
  require(!data.empty(), ErrorKind::configuration, "extract needs a dataset (--data)");

  const auto loaded = load_csv(data, label);
  Json doc = {{"schema", kMetaSchema}};
  doc["dataset"] = {{"path", data},
                    {"rows", loaded.dataset.n()},
                    {"features", loaded.dataset.dx()},
                    {"classes", loaded.dataset.num_classes},
                    {"dropped_rows", loaded.dropped_rows}};
  std::vector<std::string> names;
  Vector values;
  if (extractor == "handcrafted") {
    const auto h = meta::extract_handcrafted(loaded.dataset);
    names = meta::HandcraftedVector::names();
    values = h.values;
    doc["extractor"] = {{"name", "handcrafted"}};
  } else {
    const auto ckpt = net::load_checkpoint(extractor);
    values = ckpt.model->extract(normalize_features(loaded.dataset));
    for (Index i = 0; i < values.size(); ++i) names.push_back("f" + std::to_string(i));
    const std::string method = net::to_string(ckpt.model->arch().kind);
    doc["extractor"] = {{"name", method},
                        {"checkpoint", extractor},
                        {"format_version", net::kCheckpointVersion},
                        {"task", ckpt.extra.value("task", "")}};
  }
  doc["names"] = names;
  doc["values"] = std::vector<double>(values.data(), values.data() + values.size());
  if (rc.out) {
    make_out_dir(*rc.out);
    io::write_json(*rc.out / "meta-features.json", doc);
  }
  std::cout << doc.dump(2) << "\n";
  return kExitOk;
}

// ---- report --------------------------------------------------------------------------------

enum class InputKind { metrics, eval, meta, scatter };

const char* kind_name(InputKind k) {
  switch (k) {
    case InputKind::metrics: return "metrics";
    case InputKind::eval: return "eval";
    case InputKind::meta: return "meta-features";
    case InputKind::scatter: return "scatter";
  }
  return "?";
}

struct ParsedInput {
  InputKind kind;
  std::vector<Json> records;  // metrics lines, or the single JSON document
  std::vector<std::vector<std::string>> rows;  // scatter rows
};

bool is_metric_record(const Json& j) {
  if (!j.is_object()) return false;
  for (const char* key : {"task", "method", "seed", "epoch", "split", "accuracy"}) {
    if (!j.contains(key)) return false;
  }
  return j.at("accuracy").is_number() && j.at("epoch").is_number_integer() && j.at("split").is_string();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

ParsedInput parse_input(const std::string& path) {
  const std::string text = io::read_file(path);
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) fail(ErrorKind::format, path + ": empty input");
  ParsedInput in;
  const Json whole = Json::parse(text, nullptr, false);
  if (!whole.is_discarded() && whole.is_object() && whole.contains("schema")) {
    const std::string schema = whole.at("schema").is_string() ? whole.at("schema").get<std::string>() : "";
    if (schema == kEvalSchema) {
      in.kind = InputKind::eval;
    } else if (schema == kMetaSchema) {
      in.kind = InputKind::meta;
      if (!whole.contains("names") || !whole.contains("values") || !whole.contains("extractor") ||
          whole["names"].size() != whole["values"].size()) {
        fail(ErrorKind::format, path + ": malformed meta-feature document");
      }
    } else {
      fail(ErrorKind::format, path + ": unsupported schema '" + schema + "'");
    }
    in.records.push_back(whole);
    return in;
  }
  if (text.rfind(kScatterHeader, 0) == 0) {
    in.kind = InputKind::scatter;
    std::istringstream lines(text);
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      auto cells = split_csv_line(line);
      if (cells.size() != 3) fail(ErrorKind::format, path + ": scatter rows need 3 cells");
      in.rows.push_back(std::move(cells));
    }
    if (in.rows.empty()) fail(ErrorKind::format, path + ": no scatter rows");
    return in;
  }
  std::vector<Json> records;
  try {
    records = io::read_jsonl(path);
  } catch (const Error&) {
    fail(ErrorKind::format, path + ": not a metrics JSONL, eval report, meta-feature document or scatter CSV");
  }
  for (const auto& r : records) {
    if (!is_metric_record(r)) fail(ErrorKind::format, path + ": record is not an epoch metric: " + r.dump());
  }
  if (records.empty()) fail(ErrorKind::format, path + ": no records");
  in.kind = InputKind::metrics;
  in.records = std::move(records);
  return in;
}

struct Stat {
  std::size_t n = 0;
  double mean = 0.0;
  double stdev = 0.0;
};

/// Mean and sample standard deviation (0 for a single run).
Stat stat_of(const std::vector<double>& v) {
  Stat s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stdev = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string accuracy_cell(const Stat& s) {
  return format_number("%.2f", 100.0 * s.mean) + " ± " + format_number("%.2f", 100.0 * s.stdev);
}

std::string error_cell(const Stat& s) {
  return format_number("%.4f", s.mean) + " ± " + format_number("%.4f", s.stdev);
}

int cmd_report(const GlobalFlags& flags, const std::vector<std::string>& positional) {
  RunConfig rc = load_config(flags, {"inputs"}, "report");
  std::vector<std::string> inputs = value_or<std::vector<std::string>>(rc.doc, "inputs", {}, "report");
  inputs.insert(inputs.end(), positional.begin(), positional.end());
  require(!inputs.empty(), ErrorKind::configuration, "report needs at least one input file");

  std::vector<ParsedInput> parsed;
  for (const auto& path : inputs) parsed.push_back(parse_input(path));
  const InputKind kind = parsed.front().kind;
  for (std::size_t i = 1; i < parsed.size(); ++i) {
    if (parsed[i].kind != kind) {
      fail(ErrorKind::format, std::string("mixed report inputs: ") + kind_name(kind) + " and " +
                                  kind_name(parsed[i].kind) + " (" + inputs[i] + ")");
    }
  }

  std::string csv;
  Json rows = Json::array();
  if (kind == InputKind::metrics || kind == InputKind::eval) {
    // (task, method) -> per-run test accuracy
    std::map<std::pair<std::string, std::string>, std::vector<double>> runs;
    if (kind == InputKind::metrics) {
      for (const auto& in : parsed) {
        // best test accuracy per seed, as the checkpoint selection does
        std::map<std::tuple<std::string, std::string, std::uint64_t>, double> best;
        for (const auto& r : in.records) {
          if (r.at("split").get<std::string>() != "test") continue;
          const auto key = std::make_tuple(r.at("task").get<std::string>(), r.at("method").get<std::string>(),
                                           r.at("seed").get<std::uint64_t>());
          const double acc = r.at("accuracy").get<double>();
          auto it = best.find(key);
          if (it == best.end() || acc > it->second) best[key] = acc;
        }
        if (best.empty()) fail(ErrorKind::format, "metrics input has no test records");
        for (const auto& [key, acc] : best) runs[{std::get<0>(key), std::get<1>(key)}].push_back(acc);
      }
    } else {
      for (const auto& in : parsed) {
        const auto& d = in.records.front();
        try {
          runs[{d.at("task").get<std::string>(), d.at("method").get<std::string>()}].push_back(
              d.at("test").at("accuracy").get<double>());
        } catch (const Json::exception& e) {
          fail(ErrorKind::format, std::string("malformed eval report: ") + e.what());
        }
      }
    }
    csv = "task,method,runs,mean_accuracy,std_accuracy,table\n";
    for (const auto& [key, values] : runs) {
      const Stat s = stat_of(values);
      csv += key.first + "," + key.second + "," + std::to_string(s.n) + "," + format_number("%.6f", s.mean) + "," +
             format_number("%.6f", s.stdev) + "," + accuracy_cell(s) + "\n";
      rows.push_back({{"task", key.first},
                      {"method", key.second},
                      {"runs", s.n},
                      {"mean_accuracy", s.mean},
                      {"std_accuracy", s.stdev},
                      {"accuracies", values}});
    }
  } else if (kind == InputKind::scatter) {
    std::map<std::string, std::vector<double>> mse;
    for (const auto& in : parsed) {
      std::map<std::string, std::pair<double, std::size_t>> sums;
      for (const auto& cells : in.rows) {
        double t = 0.0, p = 0.0;
        try {
          t = std::stod(cells[0]);
          p = std::stod(cells[1]);
        } catch (const std::exception&) {
          fail(ErrorKind::format, "scatter row with non-numeric cells");
        }
        auto& s = sums[cells[2]];
        s.first += (t - p) * (t - p);
        ++s.second;
      }
      for (const auto& [name, s] : sums) mse[name].push_back(s.first / static_cast<double>(s.second));
    }
    csv = "extractor,runs,mean_mse,std_mse,table\n";
    for (const auto& [name, values] : mse) {
      const Stat s = stat_of(values);
      csv += name + "," + std::to_string(s.n) + "," + format_number("%.6f", s.mean) + "," +
             format_number("%.6f", s.stdev) + "," + error_cell(s) + "\n";
      rows.push_back({{"extractor", name}, {"runs", s.n}, {"mean_mse", s.mean}, {"std_mse", s.stdev}, {"mse", values}});
    }
  } else {
    // extractor -> feature -> values, features kept in first-seen order
    std::map<std::string, std::vector<std::string>> order;
    std::map<std::string, std::map<std::string, std::vector<double>>> values;
    for (const auto& in : parsed) {
      const auto& d = in.records.front();
      const std::string name = d.at("extractor").value("name", "");
      const auto& names = d.at("names");
      const auto& vals = d.at("values");
      auto& o = order[name];
      for (std::size_t i = 0; i < names.size(); ++i) {
        const std::string f = names[i].get<std::string>();
        if (!values[name].count(f)) o.push_back(f);
        values[name][f].push_back(vals[i].get<double>());
      }
    }
    csv = "extractor,feature,count,mean,std\n";
    for (const auto& [name, features] : order) {
      for (const auto& f : features) {
        const Stat s = stat_of(values[name][f]);
        csv += name + "," + f + "," + std::to_string(s.n) + "," + format_number("%.10g", s.mean) + "," +
               format_number("%.10g", s.stdev) + "\n";
        rows.push_back({{"extractor", name}, {"feature", f}, {"count", s.n}, {"mean", s.mean}, {"std", s.stdev}});
      }
    }
  }

  const fs::path out = rc.out_dir();
  make_out_dir(out);
  io::atomic_write(out / "report.csv", csv);
  io::write_json(out / "report.json",
                 {{"schema", kReportSchema}, {"kind", kind_name(kind)}, {"inputs", inputs}, {"rows", rows}});
  std::cout << csv;
  return kExitOk;
}

int exit_code_for(const Error& e) {
  return e.kind() == ErrorKind::configuration ? kExitUsage : kExitRuntime;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Dataset meta-feature learning toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags flags;
  app.add_option("--config", flags.config, "JSON config for the command")->check(CLI::ExistingFile);
  app.add_option("--seed", flags.seed, "Seed (overrides the config)");
  app.add_option("--out", flags.out, "Output directory (overrides the config)");
  app.add_option("--jobs", flags.jobs, "Worker threads for independent trials")->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic toy benchmark");

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "Train a model on patch identification or k-NN ranking");
  train->add_option("--task", tf.task, "patch-id or ranker");
  train->add_option("--model", tf.model, "dida, dss-linear, dss-nonlinear or dss-equivariant");
  train->add_option("--manifest", tf.manifest, "Dataset manifest");

  EvalFlags ef;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its held-out split");
  eval->add_option("--checkpoint", ef.checkpoint, "Checkpoint JSON");
  eval->add_option("--manifest", ef.manifest, "Dataset manifest (defaults to the training manifest)");

  std::string suite;
  std::optional<int> trials;
  auto* ver = app.add_subcommand("verify", "Run a verification suite");
  ver->add_option("--suite", suite, "invariance, ot-oracle, prop1, prop2, lemma1, gradients or all");
  ver->add_option("--trials", trials, "Trial count")->check(CLI::PositiveNumber);

  ExtractFlags xf;
  auto* ext = app.add_subcommand("extract", "Compute the meta-features of one CSV dataset");
  ext->add_option("--extractor", xf.extractor, "handcrafted or a checkpoint path");
  ext->add_option("--data", xf.data, "CSV dataset");
  ext->add_option("--label", xf.label, "Label column (default: label)");

  std::vector<std::string> report_inputs;
  auto* rep = app.add_subcommand("report", "Aggregate metrics, eval, scatter or meta-feature files");
  rep->add_option("inputs", report_inputs, "Input files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(flags);
    if (train->parsed()) return cmd_train(flags, tf);
    if (eval->parsed()) return cmd_eval(flags, ef);
    if (ver->parsed()) return cmd_verify(flags, suite, trials);
    if (ext->parsed()) return cmd_extract(flags, xf);
    if (rep->parsed()) return cmd_report(flags, report_inputs);
  } catch (const Error& e) {
    log::error(e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    log::error(e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"dida"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace dida::cli
