#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cfcbm/cfcbm.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Overrides {
  std::optional<double> alpha_h, alpha_l, beta, lr, tau, temperature;
  std::optional<std::uint64_t> epochs, seed, batch_size, patches;
  std::optional<std::string> mode;
};

void add_config_flags(CLI::App* cmd, Overrides& o, bool with_patches = true) {
  cmd->add_option("--alpha-h", o.alpha_h, "High-level prior probability");
  cmd->add_option("--alpha-l", o.alpha_l, "Low-level prior probability");
  cmd->add_option("--beta", o.beta, "KL weight");
  cmd->add_option("--lr", o.lr, "Classifier learning rate");
  cmd->add_option("--tau", o.tau, "Inference threshold");
  cmd->add_option("--temperature", o.temperature, "Relaxation temperature");
  cmd->add_option("--epochs", o.epochs, "Training epochs");
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_option("--batch-size", o.batch_size, "Mini-batch size");
  if (with_patches) cmd->add_option("--patches", o.patches, "Expected patch count P");
  cmd->add_option("--mode", o.mode, "joint | high-only | low-only | no-discovery")
      ->check(CLI::IsMember({"joint", "high-only", "low-only", "no-discovery"}));
}

/// defaults < config file < flags
cfcbm::TrainConfig resolve_config(const std::string& config_path, const Overrides& o,
                                  cfcbm::TrainConfig base = {}) {
  cfcbm::TrainConfig c = base;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw cfcbm::IoError("cannot open config " + config_path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw cfcbm::ParameterError("config " + config_path + ": " + e.what());
    }
    c = cfcbm::config_from_json(j, c);
  }
  if (o.alpha_h) c.alpha_h = *o.alpha_h;
  if (o.alpha_l) c.alpha_l = *o.alpha_l;
  if (o.beta) c.beta = *o.beta;
  if (o.lr) c.lr = *o.lr;
  if (o.tau) c.infer_tau = *o.tau;
  if (o.temperature) c.gumbel_temperature = *o.temperature;
  if (o.epochs) c.epochs = *o.epochs;
  if (o.seed) c.seed = *o.seed;
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.patches) c.patches = *o.patches;
  if (o.mode) c.mode = cfcbm::mode_from_string(*o.mode);
  cfcbm::validate_config(c);
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw cfcbm::IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw cfcbm::IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw cfcbm::IoError("cannot create " + dir.string() + ": " + ec.message());
}

fs::path checkpoint_file(const fs::path& p) {
  return fs::is_directory(p) ? p / "checkpoint.cfck" : p;
}

std::string history_csv(const cfcbm::TrainHistory& h) {
  using cfcbm::format_float;
  std::ostringstream out;
  out << "epoch,ce_high,ce_low,kl_high,kl_low,total,accuracy_high,accuracy_low,sparsity_high,"
         "sparsity_low\n";
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << format_float(e.loss.ce_high) << ',' << format_float(e.loss.ce_low)
        << ',' << format_float(e.loss.kl_high) << ',' << format_float(e.loss.kl_low) << ','
        << format_float(e.loss.total) << ',' << format_float(e.accuracy_high) << ','
        << format_float(e.accuracy_low) << ',' << format_float(e.sparsity_high) << ','
        << format_float(e.sparsity_low) << '\n';
  }
  return out.str();
}

void log_epoch(const cfcbm::EpochRecord& e, std::uint64_t total) {
  if ((e.epoch + 1) % 10 != 0 && e.epoch + 1 != total) return;
  std::cerr << "epoch " << e.epoch + 1 << "/" << total << " loss " << e.loss.total << " acc "
            << e.accuracy_high << "/" << e.accuracy_low << " sparsity " << e.sparsity_high << "/"
            << e.sparsity_low << "\n";
}

std::vector<std::uint64_t> parse_list(const std::string& text, const char* what) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw cfcbm::ParameterError(std::string("invalid ") + what + " entry '" + item + "'");
    }
  }
  if (out.empty()) throw cfcbm::ParameterError(std::string("empty ") + what + " list");
  return out;
}

std::string substitute(std::string pattern, const std::string& key, const std::string& value) {
  for (auto pos = pattern.find(key); pos != std::string::npos; pos = pattern.find(key)) {
    pattern.replace(pos, key.size(), value);
  }
  return pattern;
}

/// Trains, saves checkpoint + history + config into out.
cfcbm::TrainerState run_training(const cfcbm::EmbeddingBundle& data,
                                 const cfcbm::ConceptHierarchy& hierarchy,
                                 const cfcbm::TrainConfig& config, const fs::path& out) {
  make_dir(out);
  auto result = cfcbm::train(data, hierarchy, config,
                             [&](const cfcbm::EpochRecord& e) { log_epoch(e, config.epochs); });
  const json echo = cfcbm::config_to_json(result.state.config);
  cfcbm::save_checkpoint(out / "checkpoint.cfck", result.state);
  write_json(out / "history.json",
             {{"config", echo}, {"epochs", cfcbm::history_to_json(result.history)}});
  write_text(out / "history.csv", history_csv(result.history));
  write_json(out / "config.json", echo);
  return std::move(result.state);
}

cfcbm::EvaluationReport run_eval(const cfcbm::EmbeddingBundle& data,
                                 const cfcbm::TrainerState& state, const fs::path& out) {
  cfcbm::check_compatible(data, state.hierarchy, cfcbm::TrainConfig{});
  const auto& cfg = state.config;
  auto report = cfcbm::evaluate(data, state.params, state.hierarchy, cfg.mode, cfg.infer_tau);
  cfcbm::emit_report(report, out, cfcbm::config_to_json(cfg), &state.hierarchy);
  write_json(out / "config.json", cfcbm::config_to_json(cfg));
  return report;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, manifest, config, out, resume;
  Overrides o;
};

int cmd_train(const TrainArgs& a) {
  const auto data = cfcbm::load_dataset(a.data);
  const fs::path out(a.out);
  if (!a.resume.empty()) {
    auto state = cfcbm::load_checkpoint(checkpoint_file(a.resume));
    const auto config = resolve_config(a.config, a.o, state.config);
    if (config.epochs < state.epochs_completed) {
      throw cfcbm::ParameterError("checkpoint already has " +
                                  std::to_string(state.epochs_completed) + " epochs");
    }
    state.config.epochs = config.epochs;
    cfcbm::check_compatible(data, state.hierarchy, state.config);
    cfcbm::TrainHistory history;
    cfcbm::continue_training(state, cfcbm::prepare_examples(data),
                             config.epochs - state.epochs_completed, history,
                             [&](const cfcbm::EpochRecord& e) { log_epoch(e, config.epochs); });
    make_dir(out);
    const json echo = cfcbm::config_to_json(state.config);
    cfcbm::save_checkpoint(out / "checkpoint.cfck", state);
    write_json(out / "history.json",
               {{"config", echo}, {"epochs", cfcbm::history_to_json(history)}});
    write_text(out / "history.csv", history_csv(history));
    write_json(out / "config.json", echo);
    return 0;
  }
  if (a.manifest.empty()) throw cfcbm::ParameterError("train requires --manifest");
  const auto hierarchy = cfcbm::load_manifest(a.manifest);
  run_training(data, hierarchy, resolve_config(a.config, a.o), out);
  std::cout << (out / "checkpoint.cfck").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string data, checkpoint, manifest, out;
  std::optional<double> tau;
  std::optional<std::string> mode;
};

cfcbm::TrainerState load_for_eval(const EvalArgs& a) {
  auto state = cfcbm::load_checkpoint(checkpoint_file(a.checkpoint));
  if (!a.manifest.empty()) {
    const auto hierarchy = cfcbm::load_manifest(a.manifest);
    if (!(hierarchy == state.hierarchy)) {
      throw cfcbm::ValidationError("manifest " + a.manifest +
                                   " differs from the hierarchy stored in the checkpoint");
    }
  }
  if (a.tau) state.config.infer_tau = *a.tau;
  if (a.mode) state.config.mode = cfcbm::mode_from_string(*a.mode);
  cfcbm::validate_config(state.config);
  return state;
}

int cmd_eval(const EvalArgs& a) {
  const auto data = cfcbm::load_dataset(a.data);
  const auto state = load_for_eval(a);
  const auto report = run_eval(data, state, a.out);
  std::cout << "accuracy_high " << report.accuracy_high << "\naccuracy_low "
            << report.accuracy_low << "\nsparsity_high " << report.sparsity_high
            << "\nsparsity_low " << report.sparsity_low << "\n";
  return 0;
}

int cmd_analyze(const EvalArgs& a) {
  const auto data = cfcbm::load_dataset(a.data);
  const auto state = load_for_eval(a);
  cfcbm::check_compatible(data, state.hierarchy, cfcbm::TrainConfig{});
  const auto report = cfcbm::evaluate(data, state.params, state.hierarchy, state.config.mode,
                                      state.config.infer_tau);
  make_dir(a.out);
  cfcbm::emit_plot_data(report, a.out, &state.hierarchy);
  write_json(fs::path(a.out) / "config.json", cfcbm::config_to_json(state.config));
  return 0;
}

struct SweepArgs {
  std::string data, eval_data, manifest, config, out, patches = "4,16", seeds;
  Overrides o;
};

json report_row(const cfcbm::EvaluationReport& r) {
  json j{{"accuracy_high", r.accuracy_high},
         {"accuracy_low", r.accuracy_low},
         {"sparsity_high", r.sparsity_high},
         {"sparsity_low", r.sparsity_low}};
  if (r.jaccard_example) j["jaccard_example"] = *r.jaccard_example;
  if (r.jaccard_class) j["jaccard_class"] = *r.jaccard_class;
  return j;
}

int cmd_ablate(const SweepArgs& a) {
  if (a.manifest.empty()) throw cfcbm::ParameterError("ablate-patches requires --manifest");
  const auto hierarchy = cfcbm::load_manifest(a.manifest);
  const auto base = resolve_config(a.config, a.o);
  const auto patch_counts = parse_list(a.patches, "patch");
  const fs::path out(a.out);
  make_dir(out);

  std::ostringstream csv;
  csv << "patches,accuracy_high,accuracy_low,sparsity_high,sparsity_low,jaccard_example,"
         "jaccard_class\n";
  json rows = json::array();
  for (auto P : patch_counts) {
    const auto p_text = std::to_string(P);
    const auto train_path = substitute(a.data, "{P}", p_text);
    const auto eval_path = a.eval_data.empty() ? train_path : substitute(a.eval_data, "{P}", p_text);
    std::cerr << "P=" << P << ": " << train_path << "\n";
    const auto train_set = cfcbm::load_dataset(train_path);
    const auto eval_set = eval_path == train_path ? train_set : cfcbm::load_dataset(eval_path);
    auto config = base;
    config.patches = P;
    const fs::path dir = out / ("P" + p_text);
    const auto state = run_training(train_set, hierarchy, config, dir);
    const auto report = run_eval(eval_set, state, dir);
    auto row = report_row(report);
    row["patches"] = P;
    rows.push_back(row);
    using cfcbm::format_float;
    using cfcbm::format_optional;
    csv << P << ',' << format_float(report.accuracy_high) << ','
        << format_float(report.accuracy_low) << ',' << format_float(report.sparsity_high) << ','
        << format_float(report.sparsity_low) << ',' << format_optional(report.jaccard_example)
        << ',' << format_optional(report.jaccard_class) << '\n';
  }
  write_text(out / "ablation.csv", csv.str());
  write_json(out / "ablation.json", {{"config", cfcbm::config_to_json(base)}, {"rows", rows}});
  write_json(out / "config.json", cfcbm::config_to_json(base));
  return 0;
}

struct Stats {
  double mean = 0.0;
  std::optional<double> std;  // n-1 denominator, absent for a single run
};

Stats summarize(const std::vector<double>& v) {
  Stats s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

int cmd_variability(const SweepArgs& a) {
  if (a.manifest.empty()) throw cfcbm::ParameterError("variability requires --manifest");
  const auto hierarchy = cfcbm::load_manifest(a.manifest);
  const auto base = resolve_config(a.config, a.o);
  const auto seeds = parse_list(a.seeds.empty() ? "0,1,2,3,4,5,6,7,8,9" : a.seeds, "seed");
  const auto train_set = cfcbm::load_dataset(a.data);
  const auto eval_set = a.eval_data.empty() ? train_set : cfcbm::load_dataset(a.eval_data);
  const fs::path out(a.out);
  make_dir(out);

  const std::vector<std::string> metrics = {"accuracy_high", "accuracy_low", "sparsity_high",
                                            "sparsity_low"};
  std::vector<std::vector<double>> values(metrics.size());
  json runs = json::array();
  for (auto seed : seeds) {
    std::cerr << "seed " << seed << "\n";
    auto config = base;
    config.seed = seed;
    const fs::path dir = out / ("seed" + std::to_string(seed));
    const auto state = run_training(train_set, hierarchy, config, dir);
    const auto report = run_eval(eval_set, state, dir);
    const double v[] = {report.accuracy_high, report.accuracy_low, report.sparsity_high,
                        report.sparsity_low};
    for (std::size_t m = 0; m < metrics.size(); ++m) values[m].push_back(v[m]);
    auto row = report_row(report);
    row["seed"] = seed;
    runs.push_back(row);
  }

  json summary;
  std::ostringstream csv;
  csv << "metric,mean,std,n\n";
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    const auto s = summarize(values[m]);
    json entry{{"mean", s.mean}, {"n", seeds.size()}};
    if (s.std) entry["std"] = *s.std;
    summary[metrics[m]] = entry;
    csv << metrics[m] << ',' << cfcbm::format_float(s.mean) << ','
        << cfcbm::format_optional(s.std) << ',' << seeds.size() << '\n';
  }
  write_json(out / "variability.json",
             {{"config", cfcbm::config_to_json(base)}, {"runs", runs}, {"summary", summary}});
  write_text(out / "variability.csv", csv.str());
  write_json(out / "config.json", cfcbm::config_to_json(base));
  std::cout << csv.str();
  return 0;
}

int cmd_inspect(const std::string& data_path, const std::string& manifest) {
  const auto h = cfcbm::read_header(data_path);
  std::cout << "format CFEB\n"
            << "version " << h.version << "\n"
            << "n_examples " << h.n << "\n"
            << "n_patches " << h.p << "\n"
            << "embed_dim " << h.k << "\n"
            << "n_classes " << h.c << "\n"
            << "n_high " << h.h << "\n"
            << "n_low " << h.l_all << "\n"
            << "example_attributes " << ((h.flags & cfcbm::kFlagExampleAttributes) ? 1 : 0) << "\n"
            << "class_attributes " << ((h.flags & cfcbm::kFlagClassAttributes) ? 1 : 0) << "\n";
  if (!manifest.empty()) {
    const auto bundle = cfcbm::load_dataset(data_path);
    cfcbm::validate(cfcbm::load_manifest(manifest), bundle.concepts);
    std::cout << "manifest ok\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine concept bottleneck training and evaluation"};
  app.require_subcommand(1, 1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", train.data, "CFEB dataset")->required();
  train_cmd->add_option("--manifest", train.manifest, "Concept manifest JSON");
  train_cmd->add_option("--config", train.config, "Config JSON");
  train_cmd->add_option("--out", train.out, "Output directory")->required();
  train_cmd->add_option("--resume", train.resume, "Continue from a checkpoint");
  add_config_flags(train_cmd, train.o);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint and write reports");
  EvalArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Alignment and activation plot data");
  for (auto [cmd, args] : {std::pair{eval_cmd, &eval}, std::pair{analyze_cmd, &analyze}}) {
    cmd->add_option("--data", args->data, "CFEB dataset")->required();
    cmd->add_option("--checkpoint", args->checkpoint, "Checkpoint file or directory")->required();
    cmd->add_option("--manifest", args->manifest, "Concept manifest JSON (checked)");
    cmd->add_option("--out", args->out, "Output directory")->required();
    cmd->add_option("--tau", args->tau, "Inference threshold");
    cmd->add_option("--mode", args->mode, "Override the checkpoint mode")
        ->check(CLI::IsMember({"joint", "high-only", "low-only", "no-discovery"}));
  }

  SweepArgs ablate;
  auto* ablate_cmd = app.add_subcommand("ablate-patches", "Train and evaluate once per patch count");
  ablate_cmd->add_option("--data", ablate.data, "Training CFEB path, {P} is replaced")->required();
  ablate_cmd->add_option("--eval-data", ablate.eval_data, "Evaluation CFEB path, {P} is replaced");
  ablate_cmd->add_option("--manifest", ablate.manifest, "Concept manifest JSON")->required();
  ablate_cmd->add_option("--config", ablate.config, "Config JSON");
  ablate_cmd->add_option("--out", ablate.out, "Output directory")->required();
  ablate_cmd->add_option("--patches", ablate.patches, "Comma separated patch counts");
  add_config_flags(ablate_cmd, ablate.o, false);

  SweepArgs var;
  auto* var_cmd = app.add_subcommand("variability", "Mean and std over seeds");
  var_cmd->add_option("--data", var.data, "Training CFEB")->required();
  var_cmd->add_option("--eval-data", var.eval_data, "Evaluation CFEB");
  var_cmd->add_option("--manifest", var.manifest, "Concept manifest JSON")->required();
  var_cmd->add_option("--config", var.config, "Config JSON");
  var_cmd->add_option("--out", var.out, "Output directory")->required();
  var_cmd->add_option("--seeds", var.seeds, "Comma separated seeds");
  add_config_flags(var_cmd, var.o);

  std::string inspect_data, inspect_manifest;
  auto* inspect_cmd = app.add_subcommand("inspect", "Print CFEB header fields");
  inspect_cmd->add_option("--data", inspect_data, "CFEB dataset")->required();
  inspect_cmd->add_option("--manifest", inspect_manifest, "Also validate this manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << sub->help();
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval);
    if (*analyze_cmd) return cmd_analyze(analyze);
    if (*ablate_cmd) return cmd_ablate(ablate);
    if (*var_cmd) return cmd_variability(var);
    if (*inspect_cmd) return cmd_inspect(inspect_data, inspect_manifest);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
