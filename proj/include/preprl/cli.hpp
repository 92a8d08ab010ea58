#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "preprl/checkpoint.hpp"
#include "preprl/config.hpp"
#include "preprl/pipeline.hpp"
#include "preprl/records.hpp"

namespace preprl::cli {

namespace fs = std::filesystem;

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c = {"gen-data", "train-nn", "train-rl", "train-cl",
                                             "eval",     "robustness", "trace",  "report"};
  return c;
}

struct CliConfig {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;  // empty: $PREP_RL_OUT, then "runs"
  bool quiet = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::string checkpoint;
  std::optional<std::string> data;  // train | val | test | distorted
  std::optional<std::size_t> count;
  std::string run_dir;

  // eval defaults to the clean test split, trace to the distorted one.
  std::string split() const { return data.value_or(command == "trace" ? "distorted" : "test"); }
};

enum ExitCode { ok = 0, runtime_failure = 1, config_error = 2 };

class UsageError : public std::runtime_error {
 public:
  UsageError(const std::string& msg, std::string usage)
      : std::runtime_error(msg), usage_(std::move(usage)) {}
  const std::string& usage() const { return usage_; }

 private:
  std::string usage_;
};

inline CliConfig parse_args(int argc, const char* const* argv) {
  CliConfig c;
  CLI::App app{"Reinforcement-learning image preprocessing", "prep_rl"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.add_option("--config", c.config_path, "config file (section.key = value)")
      ->check(CLI::ExistingFile);
  app.add_option("--set", c.overrides, "override one key, K=V (repeatable)")
      ->allow_extra_args(false);
  app.add_option("--out", c.out_dir, "output directory (default $PREP_RL_OUT or ./runs)");
  app.add_option("--seed", c.seed, "experiment seed");
  app.add_option("--runs", c.runs, "number of runs");
  app.add_flag("--quiet", c.quiet, "only print results");

  app.add_subcommand("gen-data", "write the glyph dataset as IDX files");
  app.add_subcommand("train-nn", "train the plain classifier");
  app.add_subcommand("train-rl", "train the preprocessing agent");
  auto* cl = app.add_subcommand("train-cl", "fine-tune a classifier from an agent");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  app.add_subcommand("robustness", "NN/RL/CL on clean and distorted test data");
  auto* tr = app.add_subcommand("trace", "export agent transformation traces");
  auto* rep = app.add_subcommand("report", "rebuild the metrics table of a finished run");
  cl->add_option("--checkpoint", c.checkpoint, "agent checkpoint")->required();
  for (auto* sub : {ev, tr}) {
    sub->add_option("--checkpoint", c.checkpoint, "model checkpoint")->required();
    sub->add_option("--data", c.data, "train | val | test | distorted")
        ->check(CLI::IsMember({"train", "val", "test", "distorted"}));
  }
  tr->add_option("--count", c.count, "number of traces");
  rep->add_option("--run-dir,dir", c.run_dir, "directory holding runs.jsonl")->required();

  if (argc > 1 && argv[1][0] != '-' &&
      std::find(commands().begin(), commands().end(), argv[1]) == commands().end())
    throw UsageError("unknown command '" + std::string(argv[1]) + "'", app.help());
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) throw UsageError("", app.help());
    throw UsageError(e.what(), app.help());
  }
  for (auto* sub : app.get_subcommands()) c.command = sub->get_name();
  return c;
}

// Layers the config file, then --set overrides, then --seed/--runs.
inline ExperimentConfig resolve_config(const CliConfig& c) {
  ExperimentConfig cfg;
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot read config " + c.config_path);
    std::ostringstream text;
    text << in.rdbuf();
    apply_config_text(cfg, text.str(), c.config_path);
  }
  for (const auto& o : c.overrides) apply_setting(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  if (c.runs) cfg.runs = *c.runs;
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

inline fs::path output_base(const CliConfig& c) {
  if (!c.out_dir.empty()) return c.out_dir;
  if (const char* env = std::getenv("PREP_RL_OUT"); env && *env) return env;
  return "runs";
}

// <base>/<command>-YYYYmmdd-HHMMSS, suffixed when the stamp is taken.
inline fs::path make_run_dir(const fs::path& base, const std::string& command) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  fs::path dir = base / (command + "-" + stamp);
  for (int n = 2; fs::exists(dir); ++n) dir = base / (command + "-" + stamp + "-" + std::to_string(n));
  fs::create_directories(dir);
  return dir;
}

inline std::string shape_token(const Shape& s) {
  std::string out;
  for (auto d : s) out += (out.empty() ? "" : "x") + std::to_string(d);
  return out;
}

inline Shape parse_shape_token(const std::string& s) {
  Shape out;
  std::string part;
  std::istringstream in(s);
  while (std::getline(in, part, 'x')) out.push_back(std::stoul(part));
  return out;
}

struct LoadedModel {
  std::string kind;  // nn | cl | rl
  std::optional<Network<float>> classifier;
  std::optional<QNetwork<float>> agent;
  TransformMode actions = TransformMode::standard;
  std::size_t max_len = 10;
};

inline void save_model(const fs::path& path, const Network<float>& net, const std::string& kind,
                       ArchPreset arch, std::size_t k) {
  save_checkpoint(path.string(), net.state());
  save_metadata(path.string() + ".meta", {{"kind", kind},
                                          {"arch", to_string(arch)},
                                          {"k", std::to_string(k)},
                                          {"input", shape_token(net.input_shape())}});
}

inline void save_agent(const fs::path& path, const QNetwork<float>& net, ArchPreset arch,
                       const ExperimentConfig& cfg) {
  save_checkpoint(path.string(), net.state());
  save_metadata(path.string() + ".meta", {{"kind", "rl"},
                                          {"arch", to_string(arch)},
                                          {"k", std::to_string(net.k())},
                                          {"n", std::to_string(net.n())},
                                          {"actions", to_string(cfg.rl.actions)},
                                          {"max_len", std::to_string(cfg.env.max_len)},
                                          {"input", shape_token(net.input_shape())}});
}

inline LoadedModel load_model(const std::string& path) {
  const Metadata meta = load_metadata(path + ".meta");
  auto get = [&](const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError(path + ".meta: missing '" + key + "'");
    return it->second;
  };
  LoadedModel m;
  m.kind = get("kind");
  const ArchPreset arch = parse_arch(get("arch"));
  const std::size_t k = std::stoul(get("k"));
  const Shape input = parse_shape_token(get("input"));
  const auto state = load_checkpoint<float>(path);
  if (m.kind == "rl") {
    m.actions = parse_transform_mode(get("actions"));
    m.max_len = std::stoul(get("max_len"));
    QNetwork<float> q(arch, input, k, std::stoul(get("n")), 0);
    q.load_state(state);
    m.agent = std::move(q);
  } else if (m.kind == "nn" || m.kind == "cl") {
    Network<float> net(classifier_spec(arch, input, k), 0);
    net.load_state(state);
    m.classifier = std::move(net);
  } else {
    throw FormatError(path + ".meta: unknown model kind '" + m.kind + "'");
  }
  return m;
}

inline Dataset<float> pick_split(const Splits<float>& s, const ExperimentConfig& cfg,
                                 const std::string& which) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "distorted") return distort(s.test, cfg.distortion).data;
  return s.test;
}

class Runner {
 public:
  Runner(const CliConfig& c, ExperimentConfig cfg, fs::path dir, std::ostream& out)
      : c_(c), cfg_(std::move(cfg)), dir_(std::move(dir)), out_(out),
        log_file_((dir_ / "run.log").string()) {}

  void log(const std::string& line) {
    log_file_ << line << "\n";
    log_file_.flush();
    if (!c_.quiet) out_ << line << "\n";
  }
  void result(const std::string& line) {
    log_file_ << line << "\n";
    out_ << line << "\n";
  }
  LogFn logger() {
    return [this](const std::string& s) { log(s); };
  }

  void run() {
    const std::string& cmd = c_.command;
    log("command " + cmd + ", output " + dir_.string());
    log("effective config:\n" + dump_config(cfg_));
    if (cmd == "gen-data") return gen_data();
    if (cmd == "train-nn") return train_nn_cmd();
    if (cmd == "train-rl") return train_rl_cmd();
    if (cmd == "train-cl") return train_cl_cmd();
    if (cmd == "eval") return eval_cmd();
    if (cmd == "robustness") return robustness_cmd();
    if (cmd == "trace") return trace_cmd();
    throw std::logic_error("unhandled command " + cmd);
  }

 private:
  template <typename F>
  auto stage(const std::string& name, F&& fn) {
    log("[" + name + "]");
    try {
      return fn();
    } catch (const std::exception& e) {
      throw std::runtime_error("stage " + name + " failed: " + e.what());
    }
  }

  Splits<float> data() {
    return stage("load-data", [&] { return load_splits<float>(cfg_.data); });
  }

  void gen_data() {
    if (cfg_.data.source != "glyphs") throw ConfigError("gen-data needs data.source = glyphs");
    const auto s = data();
    stage("write-idx", [&] {
      for (auto [prefix, ds] : {std::pair<const char*, const Dataset<float>*>{"train", &s.train},
                                {"val", &s.val},
                                {"t10k", &s.test}}) {
        save_idx(*ds, (dir_ / (std::string(prefix) + "-images-idx3-ubyte")).string(),
                 (dir_ / (std::string(prefix) + "-labels-idx1-ubyte")).string());
      }
      return 0;
    });
    result("wrote " + std::to_string(s.train.size()) + "/" + std::to_string(s.val.size()) + "/" +
           std::to_string(s.test.size()) + " train/val/test images to " + dir_.string());
  }

  void train_nn_cmd() {
    const auto s = data();
    auto nn = stage("train-nn", [&] { return train_nn(cfg_, s, cfg_.run_seed(0), logger()); });
    const double test = evaluate_classifier(nn.net, s.test).accuracy;
    save_model(dir_ / "nn.ckpt", nn.net, "nn", cfg_.arch, s.train.k);
    result("nn val " + std::to_string(nn.val_accuracy) + " test " + std::to_string(test) +
           " -> " + (dir_ / "nn.ckpt").string());
  }

  void train_rl_cmd() {
    const auto s = data();
    auto rl = stage("train-rl", [&] { return train_rl(cfg_, s, cfg_.run_seed(0), logger()); });
    const double test =
        evaluate_agent(rl.net, s.test, TransformSet::of(cfg_.rl.actions), cfg_.env.max_len)
            .accuracy;
    save_agent(dir_ / "rl.ckpt", rl.net, cfg_.arch, cfg_);
    result("rl val " + std::to_string(rl.val_accuracy) + " test " + std::to_string(test) +
           " -> " + (dir_ / "rl.ckpt").string());
  }

  void train_cl_cmd() {
    LoadedModel m = stage("load-checkpoint", [&] { return load_model(c_.checkpoint); });
    if (!m.agent) throw ConfigError("train-cl needs an agent checkpoint, got kind " + m.kind);
    if (m.actions != cfg_.rl.actions)
      throw ConfigError("agent.actions does not match the checkpoint (" +
                        std::string(to_string(m.actions)) + ")");
    const auto s = data();
    auto cl = stage("train-cl", [&] { return train_cl(cfg_, *m.agent, s, cfg_.run_seed(0), logger()); });
    const double test = evaluate_classifier(cl.net, s.test).accuracy;
    save_model(dir_ / "cl.ckpt", cl.net, "cl", cfg_.arch, s.train.k);
    result("cl val " + std::to_string(cl.val_accuracy) + " test " + std::to_string(test) +
           " -> " + (dir_ / "cl.ckpt").string());
  }

  void eval_cmd() {
    LoadedModel m = stage("load-checkpoint", [&] { return load_model(c_.checkpoint); });
    const auto s = data();
    const Dataset<float> ds = pick_split(s, cfg_, c_.split());
    const double acc = stage("evaluate", [&] {
      if (m.agent) return evaluate_agent(*m.agent, ds, TransformSet::of(m.actions), m.max_len).accuracy;
      return evaluate_classifier(*m.classifier, ds).accuracy;
    });
    std::ofstream(dir_ / "eval.json")
        << json{{"checkpoint", c_.checkpoint}, {"kind", m.kind}, {"data", c_.split()},
                {"images", ds.size()}, {"accuracy", acc}}.dump() << "\n";
    result(m.kind + " " + c_.split() + " accuracy " + std::to_string(acc));
  }

  void robustness_cmd() {
    auto res = run_experiment<float>(cfg_, logger());
    write_outputs(dir_, cfg_, res);
    result(format_table(res.report));
    for (std::size_t r = 0; r < res.inversion_rate.size(); ++r)
      log("run " + std::to_string(r) + " exact inversion rate " + std::to_string(res.inversion_rate[r]));
  }

  void trace_cmd() {
    LoadedModel m = stage("load-checkpoint", [&] { return load_model(c_.checkpoint); });
    if (!m.agent) throw ConfigError("trace needs an agent checkpoint, got kind " + m.kind);
    const auto s = data();
    Distorted<float> src;
    if (c_.split() == "distorted") {
      src = distort(s.test, cfg_.distortion);
    } else {
      src.data = pick_split(s, cfg_, c_.split());
      src.chains.resize(src.data.size());
    }
    const std::size_t count = c_.count.value_or(cfg_.trace_count);
    auto traces = collect_traces(*m.agent, src, TransformSet::of(m.actions), m.max_len, count);
    std::vector<json> rows;
    for (const auto& t : traces) rows.push_back(trace_to_json(t));
    write_jsonl((dir_ / "traces.jsonl").string(), rows);
    result("wrote " + std::to_string(rows.size()) + " traces to " + (dir_ / "traces.jsonl").string());
  }

 public:
  static void write_outputs(const fs::path& dir, const ExperimentConfig& cfg,
                            const ExperimentResult<float>& res) {
    std::vector<json> runs, cells, traces;
    for (const auto& r : res.records)
      runs.push_back(record_to_json(r, to_string(cfg.arch), cfg.data.name));
    for (const auto& c : res.report.cells) cells.push_back(cell_to_json(c));
    for (const auto& t : res.traces) traces.push_back(trace_to_json(t));
    write_jsonl((dir / "runs.jsonl").string(), runs);
    write_jsonl((dir / "metrics.jsonl").string(), cells);
    write_jsonl((dir / "traces.jsonl").string(), traces);
    std::ofstream(dir / "report.txt") << format_table(res.report);
  }

 private:
  const CliConfig& c_;
  ExperimentConfig cfg_;
  fs::path dir_;
  std::ostream& out_;
  std::ofstream log_file_;
};

// Rebuilds report.txt and metrics.jsonl from <dir>/runs.jsonl.
inline MetricsReport rebuild_report(const fs::path& dir) {
  const auto rows = read_jsonl((dir / "runs.jsonl").string());
  if (rows.empty()) throw FormatError((dir / "runs.jsonl").string() + ": no records");
  std::vector<RunRecord> records;
  for (const auto& r : rows) records.push_back(record_from_json(r));
  const auto& first = rows.front();
  MetricsReport rep = aggregate(records, first.value("arch", ""), first.value("dataset", ""));
  std::vector<json> cells;
  for (const auto& c : rep.cells) cells.push_back(cell_to_json(c));
  write_jsonl((dir / "metrics.jsonl").string(), cells);
  std::ofstream(dir / "report.txt") << format_table(rep);
  return rep;
}

inline int run(const CliConfig& c, std::ostream& out, std::ostream& err) {
  if (c.command == "report") {
    try {
      out << format_table(rebuild_report(c.run_dir));
      return ok;
    } catch (const std::exception& e) {
      err << "report failed: " << e.what() << "\n";
      return runtime_failure;
    }
  }
  ExperimentConfig cfg;
  fs::path dir;
  try {
    cfg = resolve_config(c);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  }
  try {
    dir = make_run_dir(output_base(c), c.command);
    std::ofstream(dir / "config.cfg") << dump_config(cfg);
  } catch (const std::exception& e) {
    err << "cannot prepare output directory: " << e.what() << "\n";
    return config_error;
  }
  try {
    Runner(c, cfg, dir, out).run();
    return ok;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    err << e.what() << "\n";
    return runtime_failure;
  }
}

inline int main_entry(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CliConfig c;
  try {
    c = parse_args(argc, argv);
  } catch (const UsageError& e) {
    if (std::string(e.what()).empty()) {
      out << e.usage();
      return ok;
    }
    err << e.what() << "\n\n" << e.usage();
    return config_error;
  }
  return run(c, out, err);
}

}  // namespace preprl::cli
