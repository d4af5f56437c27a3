#pragma once

// rankcal command-line driver. `run_cli` is the whole program; main() only
// forwards to it so tests can call it in-process.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rankcal/calibrate.hpp"
#include "rankcal/csv.hpp"
#include "rankcal/dataset.hpp"
#include "rankcal/experiment.hpp"
#include "rankcal/metrics.hpp"
#include "rankcal/train.hpp"
#include "rankcal/version.hpp"

namespace rankcal::cli {

namespace fs = std::filesystem;

/// Bad flag values or combinations; reported with usage text.
class UsageError : public Error {
 public:
  using Error::Error;
};

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& flag) {
  std::vector<T> out;
  if (text.empty()) return out;
  for (auto field : csv::split(text)) {
    if constexpr (std::is_floating_point_v<T>) {
      auto v = csv::parse_double(field);
      if (!v) throw UsageError(flag + ": not a number: '" + std::string(field) + "'");
      out.push_back(*v);
    } else {
      auto v = csv::parse_int(field);
      if (!v || *v < 0) throw UsageError(flag + ": not a non-negative integer: '" + std::string(field) + "'");
      out.push_back(static_cast<T>(*v));
    }
  }
  return out;
}

inline std::optional<double> parse_optional_double(const std::string& text, const std::string& flag) {
  if (text.empty()) return std::nullopt;
  auto v = csv::parse_double(text);
  if (!v) throw UsageError(flag + ": not a number: '" + text + "'");
  return v;
}

// Refuses to overwrite any input.
inline void check_distinct(const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  for (const auto& o : outputs) {
    for (const auto& i : inputs) {
      if (fs::weakly_canonical(o) == fs::weakly_canonical(i)) {
        throw ContractError("output " + o.string() + " would overwrite input " + i.string());
      }
    }
  }
}

struct Manifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;
  double duration_seconds = 0.0;
};

inline void write_manifest(const Manifest& m, const fs::path& path) {
  nlohmann::json j{{"tool", "rankcal"},
                   {"version", kVersion},
                   {"command", m.command},
                   {"config", m.config},
                   {"inputs", m.inputs},
                   {"outputs", m.outputs},
                   {"seed", m.seed},
                   {"duration_seconds", m.duration_seconds}};
  csv::write_atomic(path, j.dump(2) + '\n');
}

// Every option value after parsing, including defaults, keyed by long name.
inline nlohmann::json resolved_config(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty()) continue;
    const std::string name = opt->get_lnames().front();
    if (name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    j[name] = value;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Flag groups

struct TrainFlags {
  std::string loss = "m-ndcg";
  double w = 0.1;
  double margin = 2.0;
  std::size_t q = 4;
  double alpha = 2.0;
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  std::string decay_epochs;
  double decay_factor = 0.1;
  std::string hidden = "128,128";
  std::uint64_t seed = 1;

  void add_to(CLI::App& app) {
    app.add_option("--loss", loss, "ce, mrl or m-ndcg")->check(CLI::IsMember({"ce", "mrl", "m-ndcg"}));
    app.add_option("--w", w, "weight of the ranking term");
    app.add_option("--margin", margin, "MRL margin m");
    app.add_option("--q", q, "group size Q (anchor plus Q-1 mixed samples)");
    app.add_option("--alpha", alpha, "Beta(alpha, alpha) mixing parameter");
    app.add_option("--epochs", epochs);
    app.add_option("--batch-size", batch_size);
    app.add_option("--lr", lr, "initial learning rate");
    app.add_option("--momentum", momentum);
    app.add_option("--decay-epochs", decay_epochs, "comma list; default 50% and 75% of --epochs");
    app.add_option("--decay-factor", decay_factor);
    app.add_option("--hidden", hidden, "comma list of hidden widths");
    app.add_option("--seed", seed, "init and training seed")->envname("RANKCAL_SEED");
  }

  TrainConfig config() const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch_size;
    c.lr = lr;
    c.momentum = momentum;
    c.decay_epochs = decay_epochs.empty() ? TrainConfig::default_decay(epochs)
                                          : parse_list<std::size_t>(decay_epochs, "--decay-epochs");
    c.decay_factor = decay_factor;
    c.loss = LossConfig{parse_loss_mode(loss), w, margin};
    c.group_size = q;
    c.alpha = alpha;
    c.seed = seed;
    try {
      c.validate();
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
    return c;
  }

  ModelSpec model(const DataBundle& data) const {
    ModelSpec s;
    s.input_dim = data.train.dim();
    s.hidden = parse_list<std::size_t>(hidden, "--hidden");
    s.classes = static_cast<std::size_t>(data.train.num_classes);
    s.init_seed = seed;
    try {
      s.validate();
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
    return s;
  }
};

// ---------------------------------------------------------------------------
// Commands. Each returns the manifest describing what it wrote.

struct GenDataFlags {
  int classes = 10;
  std::size_t dim = 32;
  std::size_t n_per_class = 1200;
  double spread = 1.0;
  double radius = 1.0;
  std::uint64_t seed = 1;
  std::string split = "0.8,0.1,0.1";
  std::string ood_shift;
  std::size_t ood_n_per_class = 0;
  std::string out_dir;
};

inline Manifest cmd_gen_data(const GenDataFlags& f) {
  GenerateOptions opt;
  opt.spec = SyntheticSpec{f.classes, f.dim, f.n_per_class, f.spread, f.radius, f.seed, 0};
  const auto fr = parse_list<double>(f.split, "--split");
  if (fr.size() != 3) throw UsageError("--split needs three fractions");
  opt.fractions = {fr[0], fr[1], fr[2]};
  opt.ood_shift = parse_optional_double(f.ood_shift, "--ood-shift");
  if (f.ood_n_per_class > 0 && !opt.ood_shift) throw UsageError("--ood-n-per-class requires --ood-shift");
  opt.ood_n_per_class = f.ood_n_per_class > 0 ? f.ood_n_per_class : std::max<std::size_t>(1, f.n_per_class / 10);
  try {
    opt.spec.validate();
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  const auto bundle = generate_bundle(opt);
  const fs::path dir(f.out_dir);
  save_bundle(bundle, dir);
  Manifest m{"gen-data", {}, {}, {}, f.seed, 0.0};
  for (const char* name : {"train.csv", "val.csv", "test.csv"}) m.outputs.push_back((dir / name).string());
  if (bundle.ood) m.outputs.push_back((dir / "ood.csv").string());
  return m;
}

inline std::string history_csv(const Checkpoint& ck) {
  std::string out = "epoch,train_loss,val_loss,val_accuracy\n";
  for (const auto& e : ck.history) {
    out += std::to_string(e.epoch) + ',' + csv::format_double(e.train_loss) + ',' + csv::format_double(e.val_loss) +
           ',' + csv::format_double(e.val_accuracy) + '\n';
  }
  return out;
}

inline Manifest cmd_train(const TrainFlags& f, const std::string& data_dir, const std::string& out_dir,
                          std::ostream& log) {
  const auto cfg = f.config();
  const auto data = load_bundle(data_dir);
  const auto spec = f.model(data);
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  const auto ck = fit(data.train, data.val, spec, cfg, [&](const EpochLog& e) {
    log << "epoch " << e.epoch + 1 << "/" << cfg.epochs << " train_loss " << e.train_loss << " val_loss "
        << e.val_loss << " val_acc " << e.val_accuracy << '\n';
  });
  Manifest m{"train", {}, {}, {}, cfg.seed, 0.0};
  for (const char* name : {"train.csv", "val.csv", "test.csv"}) m.inputs.push_back((fs::path(data_dir) / name).string());
  save_checkpoint(ck, dir / "checkpoint.txt");
  csv::write_atomic(dir / "history.csv", history_csv(ck));
  dump_logits(ck, data.val, dir / "val_logits.csv");
  dump_logits(ck, data.test, dir / "test_logits.csv");
  m.outputs = {(dir / "checkpoint.txt").string(), (dir / "history.csv").string(), (dir / "val_logits.csv").string(),
               (dir / "test_logits.csv").string()};
  if (data.ood) {
    m.inputs.push_back((fs::path(data_dir) / "ood.csv").string());
    dump_logits(ck, *data.ood, dir / "ood_logits.csv");
    m.outputs.push_back((dir / "ood_logits.csv").string());
  }
  return m;
}

struct EvalFlags {
  std::string logits;
  std::string temperature_file;
  std::size_t bins = 15;
  std::string out;
  std::string reliability;
};

inline std::string metrics_row(const std::string& stage, double t, const EvalSummary& s) {
  return stage + ',' + csv::format_double(t) + ',' + csv::format_double(s.acc) + ',' + csv::format_double(s.ece) +
         ',' + csv::format_double(s.aece) + ',' + csv::format_double(s.oe) + ',' + csv::format_double(s.ue) + '\n';
}

inline fs::path default_reliability_path(const fs::path& out) {
  fs::path p = out;
  p.replace_extension();
  return p.string() + ".reliability.csv";
}

inline Manifest cmd_eval(const EvalFlags& f) {
  if (f.bins < 1) throw UsageError("--bins must be >= 1");
  const fs::path out(f.out);
  const fs::path rel = f.reliability.empty() ? default_reliability_path(out) : fs::path(f.reliability);
  std::vector<fs::path> inputs{f.logits};
  if (!f.temperature_file.empty()) inputs.emplace_back(f.temperature_file);
  check_distinct(inputs, {out, rel});

  const auto lf = load_logits(f.logits);
  std::string text = "stage,temperature,acc,ece,aece,oe,ue\n";
  text += metrics_row("pre_ts", 1.0, summarize(lf.logits, lf.labels, 1.0, f.bins));
  if (!f.temperature_file.empty()) {
    const double t = read_temperature_csv(f.temperature_file).value;
    text += metrics_row("post_ts", t, summarize(lf.logits, lf.labels, t, f.bins));
  }
  const auto table = reliability_table(predict(apply_temperature(lf.logits, 1.0), lf.labels), f.bins);
  csv::write_atomic(out, text);
  csv::write_atomic(rel, reliability_csv(table));
  Manifest m{"eval", {}, {}, {out.string(), rel.string()}, 0, 0.0};
  for (const auto& p : inputs) m.inputs.push_back(p.string());
  return m;
}

inline Manifest cmd_calibrate(const std::string& logits, const std::string& out, std::ostream& log) {
  check_distinct({logits}, {out});
  const auto lf = load_logits(logits);
  const auto t = fit_temperature(lf.logits, lf.labels);
  if (t.degenerate) log << "warning: all logits are constant per row; T left at 1\n";
  if (t.clipped) log << "warning: fitted T " << t.value << " lies on the search boundary\n";
  csv::write_atomic(out, temperature_csv(t));
  return {"calibrate", {}, {logits}, {out}, 0, 0.0};
}

struct SweepFlags {
  std::string data_dir;
  std::string out;
  std::string axis;
  std::string values;
  std::size_t seeds = 3;
  std::size_t jobs = 1;
  std::size_t bins = 15;
};

inline Manifest cmd_sweep(const SweepFlags& s, const TrainFlags& f) {
  SweepPlan plan;
  try {
    plan.axis = parse_sweep_axis(s.axis);
  } catch (const ContractError& e) {
    throw UsageError(e.what());
  }
  plan.values = parse_list<double>(s.values, "--values");
  if (plan.values.empty()) throw UsageError("--values needs at least one value");
  if (s.seeds < 1) throw UsageError("--seeds must be >= 1");
  for (std::size_t i = 0; i < s.seeds; ++i) plan.seeds.push_back(f.seed + i);
  plan.jobs = s.jobs;
  plan.bins = s.bins;
  const auto cfg = f.config();
  const auto data = load_bundle(s.data_dir);
  const auto spec = f.model(data);
  for (double v : plan.values) {
    try {
      with_axis(cfg, plan.axis, v).validate();
    } catch (const ContractError& e) {
      throw UsageError(e.what());
    }
  }
  const auto rows = run_sweep(data, spec, cfg, plan);
  csv::write_atomic(s.out, sweep_csv(rows));
  Manifest m{"sweep", {}, {}, {s.out}, f.seed, 0.0};
  for (const char* name : {"train.csv", "val.csv", "test.csv"}) m.inputs.push_back((fs::path(s.data_dir) / name).string());
  return m;
}

inline std::string ood_csv(const std::string& id, const std::string& ood, double value) {
  return "id_file,ood_file,auroc\n" + id + ',' + ood + ',' + csv::format_double(value) + '\n';
}

inline Manifest cmd_ood_eval(const std::string& id, const std::string& ood, const std::string& out) {
  check_distinct({id, ood}, {out});
  for (const auto& p : {id, ood}) {
    if (p.find(',') != std::string::npos) throw UsageError("file names containing ',' cannot be reported: " + p);
  }
  const auto a = load_logits(id);
  const auto b = load_logits(ood);
  if (a.logits.cols() != b.logits.cols()) throw DimensionError("ID and OOD logits differ in class count");
  csv::write_atomic(out, ood_csv(id, ood, entropy_auroc(a.logits, b.logits)));
  return {"ood-eval", {}, {id, ood}, {out}, 0, 0.0};
}

// ---------------------------------------------------------------------------

inline fs::path manifest_path_for(const std::string& command, const std::string& primary_output, bool is_dir) {
  return is_dir ? fs::path(primary_output) / (command + ".manifest.json") : fs::path(primary_output + ".manifest.json");
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

/// Inserts `--key value` for every `key=value` line of the --config file whose
/// key is not already given as a flag. Blank lines and `#` comments are skipped.
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::optional<std::string> file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
  }
  if (!file) return args;
  auto given = [&](const std::string& key) {
    for (const auto& a : args) {
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    }
    return false;
  };
  std::vector<std::string> out(args);
  const auto lines = csv::read_lines(*file);
  for (std::size_t n = 0; n < lines.size(); ++n) {
    const std::string line = trim(lines[n]);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(*file, n + 1, "expected key=value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    if (key.empty() || key == "config") throw ParseError(*file, n + 1, "invalid key '" + key + "'");
    if (given(key)) continue;
    out.push_back("--" + key);
    out.push_back(value);
  }
  return out;
}

/// Re-executes the command recorded in a manifest with its resolved config.
inline int cmd_rerun(const std::string& manifest, std::ostream& out, std::ostream& err) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw IoError("cannot open " + manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest, 1, std::string("bad manifest: ") + e.what());
  }
  if (j.value("tool", "") != "rankcal" || !j.contains("command") || !j.contains("config")) {
    throw ParseError(manifest, 1, "not a rankcal manifest");
  }
  std::vector<std::string> args{"rankcal", j.at("command").get<std::string>()};
  for (const auto& [key, value] : j.at("config").items()) {
    const std::string v = value.get<std::string>();
    if (v.empty()) continue;
    args.push_back("--" + key);
    args.push_back(v);
  }
  return run_cli(args, out, err);
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"rankcal: calibration-aware training toolkit", "rankcal"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  app.set_version_flag("--version", kVersion);

  std::string config_path;
  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic Gaussian-mixture dataset");
  gen_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  gen_cmd->add_option("--classes", gen.classes);
  gen_cmd->add_option("--dim", gen.dim);
  gen_cmd->add_option("--n-per-class", gen.n_per_class);
  gen_cmd->add_option("--spread", gen.spread, "within-class standard deviation");
  gen_cmd->add_option("--radius", gen.radius, "norm of the class means");
  gen_cmd->add_option("--seed", gen.seed)->envname("RANKCAL_SEED");
  gen_cmd->add_option("--split", gen.split, "train,val,test fractions");
  gen_cmd->add_option("--ood-shift", gen.ood_shift, "also write ood.csv with means shifted by shift*radius");
  gen_cmd->add_option("--ood-n-per-class", gen.ood_n_per_class, "OOD samples per class (default n-per-class/10)");
  gen_cmd->add_option("--out-dir", gen.out_dir)->required();

  TrainFlags train;
  std::string train_data, train_out;
  auto* train_cmd = app.add_subcommand("train", "train a classifier and dump logits");
  train_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  train_cmd->add_option("--data-dir", train_data)->required();
  train_cmd->add_option("--out-dir", train_out)->required();
  train.add_to(*train_cmd);

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "calibration metrics of a logits file");
  eval_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  eval_cmd->add_option("--logits", ev.logits)->required();
  eval_cmd->add_option("--temperature-file", ev.temperature_file, "also report post-TS metrics");
  eval_cmd->add_option("--bins", ev.bins);
  eval_cmd->add_option("--out", ev.out, "metrics CSV")->required();
  eval_cmd->add_option("--reliability", ev.reliability, "reliability CSV (default <out>.reliability.csv)");

  std::string cal_logits, cal_out;
  auto* cal_cmd = app.add_subcommand("calibrate", "fit a temperature on validation logits");
  cal_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  cal_cmd->add_option("--logits", cal_logits)->required();
  cal_cmd->add_option("--out", cal_out)->required();

  SweepFlags sw;
  TrainFlags sweep_train;
  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate over one hyperparameter axis");
  sweep_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  sweep_cmd->add_option("--data-dir", sw.data_dir)->required();
  sweep_cmd->add_option("--out", sw.out)->required();
  sweep_cmd->add_option("--axis", sw.axis, "margin, q or alpha")->required();
  sweep_cmd->add_option("--values", sw.values, "comma list")->required();
  sweep_cmd->add_option("--seeds", sw.seeds, "seeds per value: seed, seed+1, ...");
  sweep_cmd->add_option("--jobs", sw.jobs, "parallel runs");
  sweep_cmd->add_option("--bins", sw.bins);
  sweep_train.add_to(*sweep_cmd);

  std::string ood_id, ood_ood, ood_out;
  auto* ood_cmd = app.add_subcommand("ood-eval", "entropy AUROC of OOD against ID logits");
  ood_cmd->add_option("--config", config_path, "flat key=value file; explicit flags win");
  ood_cmd->add_option("--id", ood_id)->required();
  ood_cmd->add_option("--ood", ood_ood)->required();
  ood_cmd->add_option("--out", ood_out)->required();

  std::string manifest;
  auto* rerun_cmd = app.add_subcommand("rerun", "re-execute the command recorded in a manifest");
  rerun_cmd->add_option("--manifest", manifest)->required();

  std::vector<std::string> full;
  try {
    full = expand_config(args);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  std::vector<const char*> argv;
  for (const auto& a : full) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  }

  CLI::App* active = app.get_subcommands().front();
  const auto start = std::chrono::steady_clock::now();
  try {
    if (active == rerun_cmd) return cmd_rerun(manifest, out, err);
    Manifest m;
    fs::path where;
    if (active == gen_cmd) {
      m = cmd_gen_data(gen);
      where = manifest_path_for(m.command, gen.out_dir, true);
    } else if (active == train_cmd) {
      m = cmd_train(train, train_data, train_out, err);
      where = manifest_path_for(m.command, train_out, true);
    } else if (active == eval_cmd) {
      m = cmd_eval(ev);
      where = manifest_path_for(m.command, ev.out, false);
    } else if (active == cal_cmd) {
      m = cmd_calibrate(cal_logits, cal_out, err);
      where = manifest_path_for(m.command, cal_out, false);
    } else if (active == sweep_cmd) {
      m = cmd_sweep(sw, sweep_train);
      where = manifest_path_for(m.command, sw.out, false);
    } else {
      m = cmd_ood_eval(ood_id, ood_ood, ood_out);
      where = manifest_path_for(m.command, ood_out, false);
    }
    m.config = resolved_config(*active);
    m.duration_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_manifest(m, where);
    for (const auto& o : m.outputs) out << o << '\n';
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n' << active->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace rankcal::cli
