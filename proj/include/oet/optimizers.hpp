#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "oet/injection.hpp"
#include "oet/model.hpp"
#include "oet/targets.hpp"

namespace oet {

enum class CharsetFilter { any_byte, printable_ascii };
const char* to_string(CharsetFilter f);
CharsetFilter charset_filter_from_string(const std::string& s);

// Token ids the optimizer may place in the adversarial string.
std::vector<int> charset_tokens(CharsetFilter f);

struct GcgParams {
  int top_k = 64;
  int batch = 128;
  // Monotone variant: only loss-improving substitutions are accepted. The
  // classic take-batch-minimum behavior is available by clearing this.
  bool greedy_accept = true;
};

struct CandidateParams {
  int candidates = 64;  // per-position replacement pool (UAT / AutoPrompt)
};

struct GbdaParams {
  int population = 8;
  double temp_start = 1.0;
  double temp_end = 0.1;
  double learning_rate = 0.3;
};

struct PezParams {
  double learning_rate = 0.3;
};

struct AutodanParams {
  int population = 32;
  int elite = 4;
  double mutation_rate = 0.05;
  double crossover_rate = 0.5;
};

struct PairParams {
  int max_rounds = 10;
  std::string attacker_target;  // target name, resolved by the CLI
};

struct OptimizerConfig {
  std::string method = "gcg";
  int steps = 500;
  int adv_len = 20;
  CharsetFilter charset = CharsetFilter::any_byte;
  // When nonempty, overrides the charset filter with an explicit token list
  // (used for small exhaustive instances).
  std::vector<int> custom_charset;
  std::uint64_t seed = 0;
  double early_stop_nats_per_token = 0.01;

  GcgParams gcg;
  CandidateParams uat;
  CandidateParams autoprompt;
  GbdaParams gbda;
  PezParams pez;
  AutodanParams autodan;
  PairParams pair;

  std::vector<int> allowed_tokens() const;
  void validate() const;
};

struct AdvString {
  TokenSeq tokens;
  std::string text;  // always decode(tokens)
  std::string method;
  double final_loss = 0.0;
  std::vector<double> best_loss_trace;  // best-so-far per step, non-increasing
  std::uint64_t seed = 0;
  std::string target_name;
};

struct TraceRecord {
  int step = 0;
  int pool_size = 0;      // candidates evaluated this step
  double best_loss = 0.0; // best-so-far after the step
  bool accepted = false;  // did the working string change
};

struct TrainTrace {
  std::vector<TraceRecord> records;
};

struct TrainResult {
  AdvString adv;
  TrainTrace trace;
};

// Everything a training method needs to evaluate candidates.
struct TrainTask {
  const TargetHandle* target = nullptr;
  const TargetHandle* attacker = nullptr;  // PAIR only
  std::vector<AttackCase> train_cases;
  AttackGoal goal;
  PromptTemplate tmpl;
  InjectionPosition position = InjectionPosition::data_end;
};

// Mean nll_loss of the target sentence over the training cases, with the
// adversarial tokens spliced into each assembled prompt. Context overflow on
// any case raises data_error naming the case.
double aggregate_loss(const WhiteBox& wb, const std::vector<AttackCase>& cases,
                      const AttackGoal& goal, const PromptTemplate& tmpl,
                      InjectionPosition position, const TokenSeq& adv);

// Trains one universal adversarial string with the configured method.
// Gradient methods require a white-box target; pair requires task.attacker.
// Returns the best string seen by aggregate loss, fully seeded.
TrainResult train(const OptimizerConfig& config, const TrainTask& task);

// --- single steps (exposed so small instances can be checked exhaustively) --

// Loss evaluators must be pure and safe to call from multiple threads.
using LossFn = std::function<double(const TokenSeq&)>;

// One GCG iteration: per-position top_k gradient candidates, `batch`
// substitutions sampled without replacement, true-loss scored. Ties keep the
// current tokens; among variants, lowest position then lowest token id wins.
TokenSeq gcg_step(const TokenSeq& current, double current_loss, const LossGrad& grad,
                  const std::vector<int>& allowed, const GcgParams& params, std::uint64_t seed,
                  const LossFn& loss, int* pool_size = nullptr, double* out_loss = nullptr);

// One UAT iteration: single best first-order substitution, verified by true
// loss, accepted only on strict improvement.
TokenSeq uat_step(const TokenSeq& current, double current_loss, const LossGrad& grad,
                  const std::vector<int>& allowed, const CandidateParams& params,
                  const LossFn& loss, int* pool_size = nullptr, double* out_loss = nullptr);

// One AutoPrompt iteration at a fixed round-robin position.
TokenSeq autoprompt_step(const TokenSeq& current, double current_loss, const LossGrad& grad,
                         std::size_t position, const std::vector<int>& allowed,
                         const CandidateParams& params, const LossFn& loss,
                         int* pool_size = nullptr, double* out_loss = nullptr);

// One AutoDAN generation: elites survive, the rest come from tournament
// parents, single-point crossover and per-token mutation.
struct Genome {
  TokenSeq tokens;
  double loss = 0.0;
};
void autodan_step(std::vector<Genome>& population, const AutodanParams& params,
                  const std::vector<int>& allowed, std::mt19937_64& rng, const LossFn& loss);

// Nearest vocab embedding by Euclidean distance over `allowed` token ids
// (ties -> lowest token id). row has d_model entries.
int nearest_embedding_token(const ModelWeights& w, const double* row,
                            const std::vector<int>& allowed);

// --- PAIR ------------------------------------------------------------------

struct PairOutcome {
  std::string final_prompt;    // last assembled prompt sent to the target
  std::string final_candidate; // last injection candidate from the attacker
  int rounds_used = 0;
  bool success = false;
};

// Attacker/target loop for one case: the attacker sees the goal, the case
// and the full candidate/response history, and must answer with an injection
// between kPairSentinelOpen/kPairSentinelClose markers.
PairOutcome pair_attack(const OptimizerConfig& config, const TargetHandle& attacker,
                        const TargetHandle& target, const AttackCase& attack_case,
                        const AttackGoal& goal, const PromptTemplate& tmpl,
                        InjectionPosition position);

inline constexpr const char* kPairSentinelOpen = "<<<INJECTION>>>";
inline constexpr const char* kPairSentinelClose = "<<<END>>>";

// --- custom methods ----------------------------------------------------------

using TrainFn = std::function<TrainResult(const OptimizerConfig&, const TrainTask&)>;

// Makes `name` selectable as OptimizerConfig::method (and in the CLI).
// Registering an existing name (including the built-ins) is an error.
void register_custom_optimizer(const std::string& name, TrainFn fn);
std::vector<std::string> list_optimizers();

// --- persistence -------------------------------------------------------------

// JSON object with exactly the keys
// {"method","tokens","text","final_loss","seed","target","trace"}.
void save_adv_string(const AdvString& adv, const std::string& path);
AdvString load_adv_string(const std::string& path);

}  // namespace oet
