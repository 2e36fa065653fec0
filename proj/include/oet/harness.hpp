#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "oet/injection.hpp"
#include "oet/optimizers.hpp"
#include "oet/targets.hpp"

namespace oet {

struct TrialResult {
  std::string case_id;
  int trial = 0;  // 0..K-1
  std::string response;
  bool success = false;
  std::uint64_t seed = 0;
  FinishReason finish_reason = FinishReason::stop;
};

struct CaseResult {
  std::string case_id;
  std::vector<TrialResult> trials;
  bool case_success = false;  // OR over trials
};

enum class AsrMode { per_case_any, per_trial };
const char* to_string(AsrMode m);
AsrMode asr_mode_from_string(const std::string& s);

struct EvalReport {
  std::string target_name;
  std::string dataset;
  std::string adv_id;  // method or adv-string label
  AsrMode mode = AsrMode::per_case_any;
  long successes = 0;
  long denominator = 0;
  double asr = 0.0;  // successes / denominator
  double asr_std = -1.0;  // population std across repeats; < 0 when absent
  int trials_per_case = 0;
  std::uint64_t run_seed = 0;
  // Filled by the CLI only when wall-clock stamps are requested; artifacts
  // stay byte-reproducible by default.
  std::string timestamp;
  std::map<std::string, double> custom_metrics;
};

struct AttackProtocol {
  int trials = 5;  // K
  GenParams gen;   // temperature 0.6, max_new_tokens 64 by default
  int workers = 4;
};

// True iff target_sentence occurs in response; ASCII case folding unless
// case_sensitive is set.
bool is_success(const std::string& response, const std::string& target_sentence,
                bool case_sensitive = false);

// K trials per case with per-trial seeds hash(run_seed, case id, trial).
// Error responses count as non-success. Trials run across a bounded worker
// pool; outputs are ordered by (case, trial) regardless of scheduling.
std::vector<CaseResult> run_attack(const TargetHandle& target,
                                   const std::vector<AttackCase>& test_cases,
                                   const AttackGoal& goal, const PromptTemplate& tmpl,
                                   InjectionPosition position, const std::string& adv_text,
                                   const AttackProtocol& protocol, std::uint64_t run_seed);

// Exact rational ASR (per_case_any: successful cases / cases; per_trial:
// successful trials / all trials). Throws config_error on empty input.
double compute_asr(const std::vector<CaseResult>& results, AsrMode mode);
std::pair<long, long> asr_counts(const std::vector<CaseResult>& results, AsrMode mode);

// Mean and population standard deviation (divide by n).
std::pair<double, double> repeat_stats(const std::vector<double>& asr_values);

// "0.60 (0.163)" rendering: value to 2 decimals (3 when < 0.01), std to 3.
std::string format_asr(double value);
std::string format_stat(double mean, double stddev);

// --- custom metrics -----------------------------------------------------------

using MetricFn = std::function<double(const std::vector<CaseResult>&)>;
void register_custom_metric(const std::string& name, MetricFn fn);
std::vector<std::string> list_custom_metrics();
std::map<std::string, double> compute_custom_metrics(const std::vector<CaseResult>& results);

// --- transferability -----------------------------------------------------------

struct TransferCell {
  std::vector<EvalReport> reports;  // one per ASR mode
  std::string error;                // nonempty when this cell failed
};

struct TransferMatrix {
  std::vector<std::string> row_labels;  // training target of each adv string
  std::vector<std::string> col_labels;  // evaluation targets
  std::vector<std::vector<TransferCell>> cells;
};

TransferMatrix transfer_eval(const std::vector<AdvString>& adv_strings,
                             const std::vector<TargetHandle>& eval_targets,
                             const std::vector<AttackCase>& test_cases, const AttackGoal& goal,
                             const PromptTemplate& tmpl, InjectionPosition position,
                             const AttackProtocol& protocol, std::uint64_t run_seed,
                             const std::string& dataset_name);

// --- rendering / persistence ----------------------------------------------------

enum class ReportFormat { markdown, csv };
ReportFormat report_format_from_string(const std::string& s);

// Deterministic bytes; datasets as columns, (target, adv, mode) rows.
std::string render_report(const std::vector<EvalReport>& reports, ReportFormat format);
std::string render_matrix(const TransferMatrix& matrix, AsrMode mode, ReportFormat format);

void save_trials(const std::vector<CaseResult>& results, const std::string& path);
std::vector<CaseResult> load_trials(const std::string& path);

void save_report(const EvalReport& report, const std::string& path);
EvalReport load_report(const std::string& path);

}  // namespace oet
