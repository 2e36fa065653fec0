#include "oet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>

#include <json.hpp>

#include "oet/errors.hpp"
#include "oet/rng.hpp"
#include "oet/text.hpp"
#include "parallel.hpp"

namespace oet {

using json = nlohmann::json;

const char* to_string(AsrMode m) {
  return m == AsrMode::per_trial ? "per_trial" : "per_case_any";
}

AsrMode asr_mode_from_string(const std::string& s) {
  if (s == "per_case_any") return AsrMode::per_case_any;
  if (s == "per_trial") return AsrMode::per_trial;
  throw config_error("unknown ASR mode: " + s);
}

bool is_success(const std::string& response, const std::string& target_sentence,
                bool case_sensitive) {
  if (case_sensitive) return response.find(target_sentence) != std::string::npos;
  return contains_ci(response, target_sentence);
}

std::vector<CaseResult> run_attack(const TargetHandle& target,
                                   const std::vector<AttackCase>& test_cases,
                                   const AttackGoal& goal, const PromptTemplate& tmpl,
                                   InjectionPosition position, const std::string& adv_text,
                                   const AttackProtocol& protocol, std::uint64_t run_seed) {
  if (protocol.trials < 1) throw config_error("run_attack: K must be >= 1");
  goal.validate();
  protocol.gen.validate();

  std::vector<CaseResult> results(test_cases.size());
  const std::size_t k = static_cast<std::size_t>(protocol.trials);
  for (std::size_t ci = 0; ci < test_cases.size(); ++ci) {
    results[ci].case_id = test_cases[ci].id;
    results[ci].trials.resize(k);
  }

  const std::size_t jobs = test_cases.size() * k;
  detail::parallel_for(
      jobs,
      [&](std::size_t job) {
        const std::size_t ci = job / k;
        const int trial = static_cast<int>(job % k);
        const AttackCase& c = test_cases[ci];

        const AssembledPrompt prompt = assemble(tmpl, c, goal, adv_text, position);
        GenParams params = protocol.gen;
        params.seed = derive_seed(run_seed, c.id, static_cast<std::uint64_t>(trial));

        TrialResult& tr = results[ci].trials[static_cast<std::size_t>(trial)];
        tr.case_id = c.id;
        tr.trial = trial;
        tr.seed = params.seed;
        const ChatResponse resp = complete(target, prompt.text, params);
        tr.response = resp.text;
        tr.finish_reason = resp.finish_reason;
        tr.success = resp.finish_reason != FinishReason::error &&
                     is_success(resp.text, goal.target_sentence);
      },
      protocol.workers > 0 ? static_cast<unsigned>(protocol.workers) : 0);

  for (CaseResult& cr : results) {
    cr.case_success = false;
    for (const TrialResult& tr : cr.trials) cr.case_success = cr.case_success || tr.success;
  }
  return results;
}

std::pair<long, long> asr_counts(const std::vector<CaseResult>& results, AsrMode mode) {
  if (results.empty()) throw config_error("compute_asr: no case results");
  long hits = 0;
  long total = 0;
  if (mode == AsrMode::per_case_any) {
    for (const CaseResult& cr : results) {
      hits += cr.case_success ? 1 : 0;
      ++total;
    }
  } else {
    for (const CaseResult& cr : results) {
      for (const TrialResult& tr : cr.trials) {
        hits += tr.success ? 1 : 0;
        ++total;
      }
    }
  }
  return {hits, total};
}

double compute_asr(const std::vector<CaseResult>& results, AsrMode mode) {
  const auto [hits, total] = asr_counts(results, mode);
  return static_cast<double>(hits) / static_cast<double>(total);
}

std::pair<double, double> repeat_stats(const std::vector<double>& asr_values) {
  if (asr_values.empty()) throw config_error("repeat_stats: no values");
  double mean = 0.0;
  for (double v : asr_values) mean += v;
  mean /= static_cast<double>(asr_values.size());
  double var = 0.0;
  for (double v : asr_values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(asr_values.size());  // population std
  return {mean, std::sqrt(var)};
}

namespace {

std::string fixed_decimals(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

}  // namespace

std::string format_asr(double value) {
  const bool fine = std::abs(value) < 0.01 && value != 0.0;
  return fixed_decimals(value, fine ? 3 : 2);
}

std::string format_stat(double mean, double stddev) {
  return format_asr(mean) + " (" + fixed_decimals(stddev, 3) + ")";
}

// --- custom metrics -----------------------------------------------------------

namespace {

std::map<std::string, MetricFn>& metric_registry() {
  static std::map<std::string, MetricFn> metrics;
  return metrics;
}

std::mutex& metric_mutex() {
  static std::mutex mu;
  return mu;
}

}  // namespace

void register_custom_metric(const std::string& name, MetricFn fn) {
  if (name.empty()) throw config_error("metric name must be nonempty");
  if (!fn) throw config_error("metric \"" + name + "\" has no function");
  std::lock_guard lock(metric_mutex());
  if (metric_registry().contains(name)) {
    throw config_error("metric \"" + name + "\" is already registered");
  }
  metric_registry().emplace(name, std::move(fn));
}

std::vector<std::string> list_custom_metrics() {
  std::lock_guard lock(metric_mutex());
  std::vector<std::string> names;
  for (const auto& [name, fn] : metric_registry()) names.push_back(name);
  return names;
}

std::map<std::string, double> compute_custom_metrics(const std::vector<CaseResult>& results) {
  std::map<std::string, MetricFn> snapshot;
  {
    std::lock_guard lock(metric_mutex());
    snapshot = metric_registry();
  }
  std::map<std::string, double> out;
  for (const auto& [name, fn] : snapshot) out[name] = fn(results);
  return out;
}

// --- transferability -----------------------------------------------------------

TransferMatrix transfer_eval(const std::vector<AdvString>& adv_strings,
                             const std::vector<TargetHandle>& eval_targets,
                             const std::vector<AttackCase>& test_cases, const AttackGoal& goal,
                             const PromptTemplate& tmpl, InjectionPosition position,
                             const AttackProtocol& protocol, std::uint64_t run_seed,
                             const std::string& dataset_name) {
  TransferMatrix m;
  for (const AdvString& adv : adv_strings) {
    m.row_labels.push_back(adv.method + "@" + adv.target_name);
  }
  for (const TargetHandle& t : eval_targets) m.col_labels.push_back(t.name);

  m.cells.resize(adv_strings.size());
  for (std::size_t r = 0; r < adv_strings.size(); ++r) {
    m.cells[r].resize(eval_targets.size());
    for (std::size_t c = 0; c < eval_targets.size(); ++c) {
      TransferCell& cell = m.cells[r][c];
      try {
        const auto results = run_attack(eval_targets[c], test_cases, goal, tmpl, position,
                                        adv_strings[r].text, protocol, run_seed);
        for (AsrMode mode : {AsrMode::per_case_any, AsrMode::per_trial}) {
          EvalReport rep;
          rep.target_name = eval_targets[c].name;
          rep.dataset = dataset_name;
          rep.adv_id = m.row_labels[r];
          rep.mode = mode;
          const auto [hits, total] = asr_counts(results, mode);
          rep.successes = hits;
          rep.denominator = total;
          rep.asr = static_cast<double>(hits) / static_cast<double>(total);
          rep.trials_per_case = protocol.trials;
          rep.run_seed = run_seed;
          rep.custom_metrics = compute_custom_metrics(results);
          cell.reports.push_back(std::move(rep));
        }
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  }
  return m;
}

// --- rendering -----------------------------------------------------------------

ReportFormat report_format_from_string(const std::string& s) {
  if (s == "markdown") return ReportFormat::markdown;
  if (s == "csv") return ReportFormat::csv;
  throw config_error("unknown report format: " + s);
}

namespace {

std::string report_cell(const EvalReport& r) {
  if (r.asr_std >= 0.0) return format_stat(r.asr, r.asr_std);
  return format_asr(r.asr);
}

}  // namespace

std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format) {
  // Rows: (target, adv, mode); columns: datasets, sorted for determinism.
  std::vector<std::string> datasets;
  for (const EvalReport& r : reports) datasets.push_back(r.dataset);
  std::sort(datasets.begin(), datasets.end());
  datasets.erase(std::unique(datasets.begin(), datasets.end()), datasets.end());

  struct RowKey {
    std::string target, adv, mode;
    auto operator<=>(const RowKey&) const = default;
  };
  std::map<RowKey, std::map<std::string, std::string>> rows;
  for (const EvalReport& r : reports) {
    rows[RowKey{r.target_name, r.adv_id, to_string(r.mode)}][r.dataset] = report_cell(r);
  }

  std::string out;
  if (format == ReportFormat::markdown) {
    out += "| target | adv | mode |";
    for (const auto& d : datasets) out += " " + d + " |";
    out += "\n|---|---|---|";
    for (std::size_t i = 0; i < datasets.size(); ++i) out += "---|";
    out += "\n";
    for (const auto& [key, cells] : rows) {
      out += "| " + key.target + " | " + key.adv + " | " + key.mode + " |";
      for (const auto& d : datasets) {
        auto it = cells.find(d);
        out += " " + (it == cells.end() ? std::string("-") : it->second) + " |";
      }
      out += "\n";
    }
  } else {
    out += "target,adv,mode";
    for (const auto& d : datasets) out += "," + d;
    out += "\n";
    for (const auto& [key, cells] : rows) {
      out += key.target + "," + key.adv + "," + key.mode;
      for (const auto& d : datasets) {
        auto it = cells.find(d);
        out += "," + (it == cells.end() ? std::string() : it->second);
      }
      out += "\n";
    }
  }
  return out;
}

std::string render_matrix(const TransferMatrix& matrix, AsrMode mode, ReportFormat format) {
  auto cell_text = [&](const TransferCell& cell) -> std::string {
    if (!cell.error.empty()) return "error";
    for (const EvalReport& r : cell.reports) {
      if (r.mode == mode) return report_cell(r);
    }
    return "-";
  };

  std::string out;
  if (format == ReportFormat::markdown) {
    out += "| trained on \\ evaluated on |";
    for (const auto& c : matrix.col_labels) out += " " + c + " |";
    out += "\n|---|";
    for (std::size_t i = 0; i < matrix.col_labels.size(); ++i) out += "---|";
    out += "\n";
    for (std::size_t r = 0; r < matrix.row_labels.size(); ++r) {
      out += "| " + matrix.row_labels[r] + " |";
      for (std::size_t c = 0; c < matrix.col_labels.size(); ++c) {
        out += " " + cell_text(matrix.cells[r][c]) + " |";
      }
      out += "\n";
    }
  } else {
    out += "trained_on";
    for (const auto& c : matrix.col_labels) out += "," + c;
    out += "\n";
    for (std::size_t r = 0; r < matrix.row_labels.size(); ++r) {
      out += matrix.row_labels[r];
      for (std::size_t c = 0; c < matrix.col_labels.size(); ++c) {
        out += "," + cell_text(matrix.cells[r][c]);
      }
      out += "\n";
    }
  }
  return out;
}

// --- persistence -----------------------------------------------------------------

namespace {

std::string dump_line(const json& obj) {
  return obj.dump(-1, ' ', false, json::error_handler_t::replace);
}

FinishReason finish_reason_from_string(const std::string& s) {
  if (s == "length") return FinishReason::length;
  if (s == "error") return FinishReason::error;
  return FinishReason::stop;
}

}  // namespace

void save_trials(const std::vector<CaseResult>& results, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_trials: cannot open " + path);
  for (const CaseResult& cr : results) {
    for (const TrialResult& tr : cr.trials) {
      const json obj = {{"case_id", tr.case_id},   {"trial", tr.trial},
                        {"response", tr.response}, {"success", tr.success},
                        {"seed", tr.seed},         {"finish_reason", to_string(tr.finish_reason)}};
      out << dump_line(obj) << '\n';
    }
  }
  if (!out) throw data_error("save_trials: write failed for " + path);
}

std::vector<CaseResult> load_trials(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_trials: cannot open " + path);

  std::vector<CaseResult> results;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception&) {
      throw data_error("load_trials: " + path + " line " + std::to_string(line_no) +
                       ": invalid JSON");
    }
    TrialResult tr;
    try {
      tr.case_id = obj.at("case_id").get<std::string>();
      tr.trial = obj.at("trial").get<int>();
      tr.response = obj.at("response").get<std::string>();
      tr.success = obj.at("success").get<bool>();
      tr.seed = obj.at("seed").get<std::uint64_t>();
      tr.finish_reason = finish_reason_from_string(obj.at("finish_reason").get<std::string>());
    } catch (const json::exception& e) {
      throw data_error("load_trials: " + path + " line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    if (results.empty() || results.back().case_id != tr.case_id) {
      CaseResult cr;
      cr.case_id = tr.case_id;
      results.push_back(std::move(cr));
    }
    results.back().trials.push_back(std::move(tr));
  }
  for (CaseResult& cr : results) {
    cr.case_success = false;
    for (const TrialResult& tr : cr.trials) cr.case_success = cr.case_success || tr.success;
  }
  return results;
}

void save_report(const EvalReport& report, const std::string& path) {
  json obj = {{"target", report.target_name},
              {"dataset", report.dataset},
              {"adv", report.adv_id},
              {"mode", to_string(report.mode)},
              {"successes", report.successes},
              {"denominator", report.denominator},
              {"asr", report.asr},
              {"trials_per_case", report.trials_per_case},
              {"run_seed", report.run_seed}};
  if (report.asr_std >= 0.0) obj["asr_std"] = report.asr_std;
  if (!report.timestamp.empty()) obj["timestamp"] = report.timestamp;
  if (!report.custom_metrics.empty()) obj["custom_metrics"] = report.custom_metrics;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("save_report: cannot open " + path);
  out << obj.dump(2, ' ', false, json::error_handler_t::replace) << "\n";
}

EvalReport load_report(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("load_report: cannot open " + path);
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::exception& e) {
    throw data_error("load_report: " + path + ": " + e.what());
  }
  EvalReport r;
  try {
    r.target_name = obj.at("target").get<std::string>();
    r.dataset = obj.at("dataset").get<std::string>();
    r.adv_id = obj.at("adv").get<std::string>();
    r.mode = asr_mode_from_string(obj.at("mode").get<std::string>());
    r.successes = obj.at("successes").get<long>();
    r.denominator = obj.at("denominator").get<long>();
    r.asr = obj.at("asr").get<double>();
    r.trials_per_case = obj.at("trials_per_case").get<int>();
    r.run_seed = obj.at("run_seed").get<std::uint64_t>();
    if (obj.contains("asr_std")) r.asr_std = obj.at("asr_std").get<double>();
    if (obj.contains("timestamp")) r.timestamp = obj.at("timestamp").get<std::string>();
    if (obj.contains("custom_metrics")) {
      r.custom_metrics = obj.at("custom_metrics").get<std::map<std::string, double>>();
    }
  } catch (const json::exception& e) {
    throw data_error("load_report: " + path + ": " + e.what());
  }
  return r;
}

}  // namespace oet
