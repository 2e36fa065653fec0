#include "oet/cli.hpp"

#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "oet/config.hpp"
#include "oet/errors.hpp"
#include "oet/harness.hpp"
#include "oet/model.hpp"
#include "oet/optimizers.hpp"
#include "oet/rng.hpp"

namespace oet {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot open for writing: " + path.string());
  out << content;
  if (!out) throw data_error("write failed: " + path.string());
}

void write_config_echo(const RunConfig& config) {
  write_text(fs::path(config.output_dir) / "effective_config.json",
             effective_config_json(config).dump(2) + "\n");
}

std::string split_stem(const RunConfig& config, const std::string& dataset) {
  return (fs::path(config.output_dir) / "datasets" / dataset).string();
}

std::string adv_label(const std::string& adv_path) {
  return adv_path.empty() ? std::string("clean") : fs::path(adv_path).stem().string();
}

int cmd_convert(const std::string& config_path, const std::string& only_dataset) {
  const RunConfig config = load_config(config_path);
  if (config.datasets.empty()) throw config_error("config has no datasets to convert");
  write_config_echo(config);

  for (const DatasetSpec& spec : config.datasets) {
    if (!only_dataset.empty() && spec.name != only_dataset) continue;
    const DatasetSplit split = convert_dataset(config, spec);
    const auto violations = validate(split);
    if (!violations.empty()) {
      throw data_error("dataset " + spec.name + " failed validation: " + violations.front());
    }
    fs::create_directories(fs::path(config.output_dir) / "datasets");
    save_split(split, split_stem(config, spec.name));
    std::cout << "converted " << spec.name << ": test " << split.test.size() << ", train "
              << split.train.size() << "\n";
  }
  if (!only_dataset.empty()) find_dataset_spec(config, only_dataset);
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& target_name,
              const std::string& dataset_name, const std::string& method_override) {
  RunConfig config = load_config(config_path);
  if (!method_override.empty()) {
    config.optimizer.method = method_override;
    config.optimizer.validate();
  }
  write_config_echo(config);

  const DatasetSplit split = load_split(split_stem(config, dataset_name));
  if (split.train.empty()) {
    throw config_error("dataset " + dataset_name + " has no training cases (run convert first)");
  }

  const TargetHandle target = resolve_target(config, target_name);
  TargetHandle attacker;
  TrainTask task;
  task.target = &target;
  task.train_cases = split.train;
  task.goal = config.goal;
  task.tmpl = config.tmpl;
  task.position = config.position;
  if (config.optimizer.method == "pair") {
    if (config.optimizer.pair.attacker_target.empty()) {
      throw config_error("pair requires $.optimizer.pair.attacker");
    }
    attacker = resolve_target(config, config.optimizer.pair.attacker_target);
    task.attacker = &attacker;
  }

  const TrainResult result = train(config.optimizer, task);

  const fs::path out = fs::path(config.output_dir) / "adv" /
                       (config.optimizer.method + "-" + target_name + "-" + dataset_name + ".json");
  fs::create_directories(out.parent_path());
  save_adv_string(result.adv, out.string());
  std::cout << "trained " << config.optimizer.method << " on " << target_name << "/"
            << dataset_name << ": final loss " << result.adv.final_loss << ", steps "
            << result.trace.records.size() << "\n"
            << "adv string written to " << out.string() << "\n";
  return 0;
}

int cmd_attack(const std::string& config_path, const std::string& target_name,
               const std::string& dataset_name, const std::string& adv_path) {
  const RunConfig config = load_config(config_path);
  write_config_echo(config);

  const DatasetSplit split = load_split(split_stem(config, dataset_name));
  if (split.test.empty()) {
    throw config_error("dataset " + dataset_name + " has no test cases (run convert first)");
  }

  std::string adv_text;
  if (!adv_path.empty()) adv_text = load_adv_string(adv_path).text;

  const TargetHandle target = resolve_target(config, target_name);
  const std::uint64_t run_seed =
      derive_seed(config.seed, "attack/" + target_name + "/" + dataset_name);
  const auto results = run_attack(target, split.test, config.goal, config.tmpl, config.position,
                                  adv_text, attack_protocol(config), run_seed);

  const fs::path out = fs::path(config.output_dir) / "trials" /
                       (target_name + "-" + dataset_name + "-" + adv_label(adv_path) + ".jsonl");
  fs::create_directories(out.parent_path());
  save_trials(results, out.string());

  long hits = 0;
  for (const CaseResult& cr : results) hits += cr.case_success ? 1 : 0;
  std::cout << "attacked " << target_name << "/" << dataset_name << ": " << hits << "/"
            << results.size() << " cases succeeded at least once\n"
            << "trials written to " << out.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& trial_files,
             const std::string& target_name, const std::string& dataset_name,
             const std::string& adv_id, bool stamp) {
  const RunConfig config = load_config(config_path);
  write_config_echo(config);
  if (trial_files.empty()) throw config_error("eval: at least one --trials file is required");

  std::vector<std::vector<CaseResult>> runs;
  for (const std::string& f : trial_files) runs.push_back(load_trials(f));

  fs::create_directories(fs::path(config.output_dir) / "reports");
  for (AsrMode mode : config.protocol.asr_modes) {
    std::vector<double> values;
    long hits = 0;
    long total = 0;
    long denom0 = -1;
    for (const auto& results : runs) {
      const auto [h, d] = asr_counts(results, mode);
      if (denom0 < 0) denom0 = d;
      if (d != denom0) {
        throw config_error("eval: trial files disagree on the denominator; "
                           "repeats must share the protocol");
      }
      hits += h;
      total += d;
      values.push_back(static_cast<double>(h) / static_cast<double>(d));
    }

    EvalReport report;
    report.target_name = target_name;
    report.dataset = dataset_name;
    report.adv_id = adv_id;
    report.mode = mode;
    report.successes = hits;
    report.denominator = total;
    report.asr = static_cast<double>(hits) / static_cast<double>(total);
    report.trials_per_case = config.protocol.trials;
    report.run_seed = config.seed;
    report.custom_metrics = compute_custom_metrics(runs.front());
    if (runs.size() > 1) report.asr_std = repeat_stats(values).second;
    if (stamp) {
      char buf[32];
      const std::time_t now = std::time(nullptr);
      std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
      report.timestamp = buf;
    }

    const fs::path out = fs::path(config.output_dir) / "reports" /
                         (target_name + "-" + dataset_name + "-" + adv_id + "-" +
                          to_string(mode) + ".json");
    save_report(report, out.string());
    std::cout << to_string(mode) << " ASR " << format_asr(report.asr);
    if (report.asr_std >= 0.0) std::cout << " (std " << format_asr(report.asr_std) << ")";
    std::cout << " -> " << out.string() << "\n";
  }
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& format_name,
               const std::string& out_path) {
  if (inputs.empty()) throw config_error("report: at least one --inputs file is required");
  std::vector<EvalReport> reports;
  for (const std::string& f : inputs) reports.push_back(load_report(f));
  const std::string rendered = render_report(reports, report_format_from_string(format_name));
  if (out_path.empty()) {
    std::cout << rendered;
  } else {
    write_text(out_path, rendered);
    std::cout << "report written to " << out_path << "\n";
  }
  return 0;
}

int cmd_transfer(const std::string& config_path, const std::vector<std::string>& adv_paths,
                 std::vector<std::string> target_names, const std::string& dataset_name,
                 const std::string& format_name) {
  const RunConfig config = load_config(config_path);
  write_config_echo(config);
  if (adv_paths.empty()) throw config_error("transfer: at least one --adv file is required");

  if (target_names.empty()) {
    for (const TargetSpec& t : config.targets) target_names.push_back(t.name);
  }
  if (target_names.empty()) throw config_error("transfer: no evaluation targets");

  // Resolve everything up front so an unresolvable name fails before any run.
  std::vector<TargetHandle> targets;
  for (const std::string& name : target_names) targets.push_back(resolve_target(config, name));
  std::vector<AdvString> advs;
  for (const std::string& p : adv_paths) advs.push_back(load_adv_string(p));

  const DatasetSplit split = load_split(split_stem(config, dataset_name));
  if (split.test.empty()) throw config_error("dataset " + dataset_name + " has no test cases");

  const std::uint64_t run_seed = derive_seed(config.seed, "transfer/" + dataset_name);
  const TransferMatrix matrix =
      transfer_eval(advs, targets, split.test, config.goal, config.tmpl, config.position,
                    attack_protocol(config), run_seed, dataset_name);

  const ReportFormat format = report_format_from_string(format_name);
  const std::string rendered = render_matrix(matrix, config.protocol.asr_modes.front(), format);
  const fs::path out = fs::path(config.output_dir) / "reports" /
                       ("transfer-" + dataset_name + (format == ReportFormat::csv ? ".csv" : ".md"));
  write_text(out, rendered);
  std::cout << rendered << "matrix written to " << out.string() << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, int seeds, double step) {
  const TokenSeq prompt = encode("Q: summarize the passage !! please");
  const Span span{24, 26};
  const TokenSeq target = encode("sql injection");

  double worst = 0.0;
  for (int i = 0; i < seeds; ++i) {
    const ModelWeights w = make_random_weights(seed + static_cast<std::uint64_t>(i));
    const double err = finite_diff_check(w, prompt, span, target, step);
    std::cout << "seed " << (seed + static_cast<std::uint64_t>(i)) << ": max relative error "
              << err << "\n";
    worst = std::max(worst, err);
  }
  std::cout << "max relative error over " << seeds << " seed(s): " << worst << "\n";
  return worst <= 1e-4 ? 0 : 1;
}

int cmd_init_model(const std::string& out_path, std::uint64_t seed, int train_steps,
                   const std::string& corpus_path, double lr) {
  ModelWeights w = make_random_weights(seed);
  if (train_steps > 0) {
    if (corpus_path.empty()) throw config_error("init-model: --train-steps needs --corpus");
    std::ifstream in(corpus_path, std::ios::binary);
    if (!in) throw data_error("cannot open corpus: " + corpus_path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
    const double final_loss = sgd_train(w, lines, train_steps, lr, derive_seed(seed, "sgd"));
    std::cout << "trained " << train_steps << " steps over " << lines.size()
              << " lines, final mean nll/token " << final_loss << "\n";
  }
  fs::create_directories(fs::absolute(out_path).parent_path());
  save_weights(w, out_path);
  std::cout << "weights written to " << out_path << " (" << w.param_count() << " parameters)\n";
  return 0;
}

int cmd_methods() {
  for (const std::string& name : list_optimizers()) std::cout << name << "\n";
  return 0;
}

}  // namespace

int run_command(const std::vector<std::string>& args) {
  CLI::App app{"optimization-based prompt-injection evaluation toolkit", "oet"};
  app.require_subcommand(1);

  std::string config_path;
  std::string dataset;
  std::string target;
  std::string adv_path;
  std::string method_override;
  std::string format_name = "markdown";
  std::string out_path;
  std::string adv_id = "adv";
  std::vector<std::string> trial_files;
  std::vector<std::string> inputs;
  std::vector<std::string> adv_paths;
  std::vector<std::string> target_names;
  std::uint64_t seed = 0;
  int seeds = 5;
  double step = 1e-5;
  int train_steps = 0;
  double lr = 0.05;
  std::string corpus;
  bool stamp = false;

  CLI::App* convert = app.add_subcommand("convert", "convert raw datasets into attack cases");
  convert->add_option("--config", config_path, "run-config JSON")->required();
  convert->add_option("--dataset", dataset, "convert only this dataset");

  CLI::App* train_cmd = app.add_subcommand("train", "train an adversarial string");
  train_cmd->add_option("--config", config_path, "run-config JSON")->required();
  train_cmd->add_option("--target", target, "target name")->required();
  train_cmd->add_option("--dataset", dataset, "dataset name")->required();
  train_cmd->add_option("--method", method_override, "override the configured method");

  CLI::App* attack = app.add_subcommand("attack", "run injected inference over the test split");
  attack->add_option("--config", config_path, "run-config JSON")->required();
  attack->add_option("--target", target, "target name")->required();
  attack->add_option("--dataset", dataset, "dataset name")->required();
  attack->add_option("--adv", adv_path, "trained adv-string JSON (omit for the clean baseline)");

  CLI::App* eval = app.add_subcommand("eval", "compute ASR from saved trials");
  eval->add_option("--config", config_path, "run-config JSON")->required();
  eval->add_option("--trials", trial_files, "trial JSONL file(s); several files = repeats")
      ->required();
  eval->add_option("--target", target, "target label for the report");
  eval->add_option("--dataset", dataset, "dataset label for the report");
  eval->add_option("--adv", adv_id, "adv-string label for the report");
  eval->add_flag("--timestamps", stamp, "stamp reports with wall-clock time (breaks determinism)");

  CLI::App* report = app.add_subcommand("report", "render eval reports");
  report->add_option("--inputs", inputs, "eval report JSON files")->required();
  report->add_option("--format", format_name, "markdown or csv");
  report->add_option("--out", out_path, "write here instead of stdout");

  CLI::App* transfer = app.add_subcommand("transfer", "evaluate adv strings across targets");
  transfer->add_option("--config", config_path, "run-config JSON")->required();
  transfer->add_option("--adv", adv_paths, "adv-string JSON files")->required();
  transfer->add_option("--targets", target_names, "evaluation targets (default: all)");
  transfer->add_option("--dataset", dataset, "dataset name")->required();
  transfer->add_option("--format", format_name, "markdown or csv");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the gradients");
  gradcheck->add_option("--seed", seed, "first weight seed");
  gradcheck->add_option("--seeds", seeds, "number of seeds");
  gradcheck->add_option("--step", step, "central-difference step");

  CLI::App* init_model = app.add_subcommand("init-model", "write a seeded (optionally SGD-trained) weight file");
  init_model->add_option("--out", out_path, "weight file path")->required();
  init_model->add_option("--seed", seed, "init seed");
  init_model->add_option("--train-steps", train_steps, "SGD steps over the corpus");
  init_model->add_option("--corpus", corpus, "text corpus, one document per line");
  init_model->add_option("--lr", lr, "SGD learning rate");

  app.add_subcommand("methods", "list available optimizer methods");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (convert->parsed()) return cmd_convert(config_path, dataset);
    if (train_cmd->parsed()) return cmd_train(config_path, target, dataset, method_override);
    if (attack->parsed()) return cmd_attack(config_path, target, dataset, adv_path);
    if (eval->parsed()) return cmd_eval(config_path, trial_files, target, dataset, adv_id, stamp);
    if (report->parsed()) return cmd_report(inputs, format_name, out_path);
    if (transfer->parsed()) {
      return cmd_transfer(config_path, adv_paths, target_names, dataset, format_name);
    }
    if (gradcheck->parsed()) return cmd_gradcheck(seed, seeds, step);
    if (init_model->parsed()) return cmd_init_model(out_path, seed, train_steps, corpus, lr);
    if (app.get_subcommand("methods")->parsed()) return cmd_methods();
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace oet
