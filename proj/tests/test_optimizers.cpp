#include <algorithm>
#include <cmath>
#include <filesystem>

#include <doctest.h>

#include "oet/errors.hpp"
#include "oet/harness.hpp"
#include "oet/optimizers.hpp"

using namespace oet;

namespace {

// Small model + terse template keep per-candidate loss evaluations cheap.
ModelConfig small_config() {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d_model = 32;
  cfg.heads = 2;
  cfg.context = 256;
  return cfg;
}

TargetHandle small_target(std::uint64_t seed = 0) {
  return TargetHandle::local_target("toy", make_random_weights(seed, small_config()));
}

PromptTemplate terse_template() {
  PromptTemplate tmpl;
  tmpl.preamble = "Do the task.";
  return tmpl;
}

AttackCase tiny_case(const std::string& id = "t-0") {
  AttackCase c;
  c.id = id;
  c.dataset = "tiny";
  c.domain = "test";
  c.instruction = "Say hi.";
  c.data = "context: " + id;
  c.reference_answer = "hi";
  return c;
}

AttackGoal tiny_goal() {
  AttackGoal g;
  g.goal_text = "Print ok";
  g.target_sentence = "ok";
  return g;
}

OptimizerConfig tiny_config(const std::string& method) {
  OptimizerConfig cfg;
  cfg.method = method;
  cfg.steps = 4;
  cfg.adv_len = 2;
  cfg.seed = 1;
  cfg.gcg.top_k = 8;
  cfg.gcg.batch = 8;
  cfg.uat.candidates = 8;
  cfg.autoprompt.candidates = 8;
  cfg.gbda.population = 2;
  cfg.autodan.population = 6;
  cfg.autodan.elite = 2;
  cfg.custom_charset = {33, 63, 97, 98, 113, 120};
  return cfg;
}

TrainTask make_task(const TargetHandle& target, int cases = 1) {
  TrainTask task;
  task.target = &target;
  task.goal = tiny_goal();
  task.tmpl = terse_template();
  task.position = InjectionPosition::data_end;
  for (int i = 0; i < cases; ++i) task.train_cases.push_back(tiny_case("t-" + std::to_string(i)));
  return task;
}

// Loss closure over a prepared task, identical to what train() uses.
LossFn task_loss(const WhiteBox& wb, const TrainTask& task) {
  return [&wb, &task](const TokenSeq& adv) {
    return aggregate_loss(wb, task.train_cases, task.goal, task.tmpl, task.position, adv);
  };
}

std::vector<TokenSeq> all_strings(const std::vector<int>& charset, std::size_t len) {
  std::vector<TokenSeq> out{TokenSeq{}};
  for (std::size_t i = 0; i < len; ++i) {
    std::vector<TokenSeq> next;
    for (const TokenSeq& prefix : out) {
      for (int t : charset) {
        TokenSeq s = prefix;
        s.push_back(t);
        next.push_back(std::move(s));
      }
    }
    out = std::move(next);
  }
  return out;
}

LossGrad task_grad(const WhiteBox& wb, const TrainTask& task, const TokenSeq& adv) {
  // Mean one-hot gradient over the task's cases, via the public surface.
  LossGrad total;
  total.span_len = adv.size();
  total.grad.assign(adv.size() * static_cast<std::size_t>(Vocab::size), 0.0);
  for (const AttackCase& c : task.train_cases) {
    const AssembledPrompt p = assemble(task.tmpl, c, task.goal, decode(adv), task.position);
    const TokenView tv = token_view(p);
    const LossGrad lg =
        loss_grad_onehot(*wb.weights, tv.tokens, tv.adv_span, encode(task.goal.target_sentence));
    total.loss += lg.loss;
    for (std::size_t i = 0; i < total.grad.size(); ++i) total.grad[i] += lg.grad[i];
  }
  total.loss /= static_cast<double>(task.train_cases.size());
  for (double& g : total.grad) g /= static_cast<double>(task.train_cases.size());
  return total;
}

}  // namespace

TEST_CASE("aggregate_loss: single case equals its nll, duplication keeps the mean") {
  const TargetHandle target = small_target();
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const TokenSeq adv = encode("!!");

  const AssembledPrompt p =
      assemble(task.tmpl, task.train_cases[0], task.goal, "!!", task.position);
  const TokenView tv = token_view(p);
  const double direct = nll_loss(*wb.weights, tv.tokens, encode(task.goal.target_sentence));
  const double single =
      aggregate_loss(wb, task.train_cases, task.goal, task.tmpl, task.position, adv);
  CHECK(single == doctest::Approx(direct).epsilon(1e-15));

  std::vector<AttackCase> doubled = {task.train_cases[0], task.train_cases[0]};
  CHECK(aggregate_loss(wb, doubled, task.goal, task.tmpl, task.position, adv) ==
        doctest::Approx(single).epsilon(1e-15));
}

TEST_CASE("aggregate_loss: two cases average their per-case losses") {
  const TargetHandle target = small_target();
  const WhiteBox wb = *white_box(target);
  TrainTask task = make_task(target, 2);
  const TokenSeq adv = encode("qx");

  double per_case[2];
  for (int i = 0; i < 2; ++i) {
    const AssembledPrompt p =
        assemble(task.tmpl, task.train_cases[static_cast<std::size_t>(i)], task.goal, "qx",
                 task.position);
    per_case[i] = nll_loss(*wb.weights, token_view(p).tokens, encode(task.goal.target_sentence));
  }
  const double got =
      aggregate_loss(wb, task.train_cases, task.goal, task.tmpl, task.position, adv);
  CHECK(std::abs(got - (per_case[0] + per_case[1]) / 2.0) <= 1e-12);
}

TEST_CASE("aggregate_loss: context overflow names the offending case") {
  const TargetHandle target = small_target();
  const WhiteBox wb = *white_box(target);
  TrainTask task = make_task(target);
  task.train_cases[0].data = std::string(400, 'x');
  try {
    aggregate_loss(wb, task.train_cases, task.goal, task.tmpl, task.position, encode("!!"));
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(std::string(e.what()).find("t-0") != std::string::npos);
  }
}

TEST_CASE("gcg_step: zero gradient keeps the current tokens") {
  const TargetHandle target = TargetHandle::local_target("zero", make_zero_weights(small_config()));
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  const TokenSeq current = encode("!!");
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  GcgParams params;
  params.top_k = 6;
  params.batch = 12;
  const TokenSeq next = gcg_step(current, cur_loss, grad, {33, 63, 97, 98}, params, 0, loss);
  CHECK(next == current);
}

TEST_CASE("gcg_step: full grid equals the exhaustive argmin (adv_len 1, 16 bytes)") {
  const TargetHandle target = small_target(3);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  std::vector<int> charset;
  for (int t = 97; t < 113; ++t) charset.push_back(t);  // 16 bytes

  const TokenSeq current{97};
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  GcgParams params;
  params.top_k = 16;
  params.batch = 16;
  double step_loss = 0.0;
  const TokenSeq chosen = gcg_step(current, cur_loss, grad, charset, params, 7, loss, nullptr,
                                   &step_loss);

  // Brute force over every substitution.
  TokenSeq best = current;
  double best_loss = cur_loss;
  for (int t : charset) {
    const double l = loss(TokenSeq{t});
    if (l < best_loss) {
      best_loss = l;
      best = TokenSeq{t};
    }
  }
  CHECK(chosen == best);
  CHECK(step_loss == best_loss);
}

TEST_CASE("gcg_step: full grid on adv_len 2 beats or ties every single substitution") {
  const TargetHandle target = small_target(5);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  const std::vector<int> charset = {33, 63, 97, 98, 113, 120, 121, 122};
  const TokenSeq current = encode("!!");
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  GcgParams params;
  params.top_k = static_cast<int>(charset.size());
  params.batch = static_cast<int>(2 * charset.size());  // the whole grid
  double step_loss = 0.0;
  gcg_step(current, cur_loss, grad, charset, params, 11, loss, nullptr, &step_loss);

  for (std::size_t i = 0; i < current.size(); ++i) {
    for (int t : charset) {
      TokenSeq cand = current;
      cand[i] = t;
      CHECK(step_loss <= loss(cand) + 1e-15);
    }
  }
  CHECK(step_loss <= cur_loss);
}

TEST_CASE("uat_step: zero gradient means no change") {
  const TargetHandle target = TargetHandle::local_target("zero", make_zero_weights(small_config()));
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);
  const TokenSeq current = encode("!!");
  const LossGrad grad = task_grad(wb, task, current);
  CHECK(uat_step(current, loss(current), grad, {33, 97, 98}, CandidateParams{}, loss) == current);
}

TEST_CASE("uat_step: picks the argmin of the first-order score table") {
  const TargetHandle target = small_target(9);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  std::vector<int> charset;
  for (int t = 97; t < 113; ++t) charset.push_back(t);

  const TokenSeq current{97};
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  // Exhaustive first-order score table.
  int best_t = -1;
  double best_score = 0.0;
  for (int t : charset) {
    if (t == current[0]) continue;
    const double score = grad.at(0, t) - grad.at(0, current[0]);
    if (best_t < 0 || score < best_score) {
      best_score = score;
      best_t = t;
    }
  }
  REQUIRE(best_t >= 0);

  double out_loss = 0.0;
  const TokenSeq next =
      uat_step(current, cur_loss, grad, charset, CandidateParams{}, loss, nullptr, &out_loss);
  if (next != current) {
    CHECK(next[0] == best_t);
    CHECK(out_loss < cur_loss);  // acceptance rule: strict improvement
  } else {
    // The single first-order pick did not verify; the true loss cannot be
    // lower than the current one for that candidate.
    TokenSeq cand = current;
    cand[0] = best_t;
    CHECK(loss(cand) >= cur_loss);
  }
}

TEST_CASE("autoprompt_step: full candidate pool equals the per-position argmin") {
  const TargetHandle target = small_target(13);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  std::vector<int> charset;
  for (int t = 97; t < 113; ++t) charset.push_back(t);

  const TokenSeq current = encode("!q");
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  CandidateParams params;
  params.candidates = static_cast<int>(charset.size());
  double step_loss = 0.0;
  const TokenSeq next =
      autoprompt_step(current, cur_loss, grad, 1, charset, params, loss, nullptr, &step_loss);

  TokenSeq best = current;
  double best_loss = cur_loss;
  for (int t : charset) {
    TokenSeq cand = current;
    cand[1] = t;
    const double l = loss(cand);
    if (l < best_loss) {
      best_loss = l;
      best = cand;
    }
  }
  CHECK(next == best);
  CHECK(next[0] == current[0]);  // only the round-robin position moves
}

TEST_CASE("autoprompt_step: zero gradient means no change") {
  const TargetHandle target = TargetHandle::local_target("zero", make_zero_weights(small_config()));
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);
  const TokenSeq current = encode("!!");
  const LossGrad grad = task_grad(wb, task, current);
  CHECK(autoprompt_step(current, loss(current), grad, 0, {33, 97}, CandidateParams{}, loss) ==
        current);
}

TEST_CASE("train: autoprompt visits each position round-robin") {
  // Two steps over a two-token string: step 0 may only change position 0,
  // step 1 only position 1. With the full byte charset an improving
  // substitution exists at both, so both positions move off the init token.
  const TargetHandle target = small_target(71);
  TrainTask task = make_task(target);
  OptimizerConfig cfg = tiny_config("autoprompt");
  cfg.custom_charset.clear();
  cfg.autoprompt.candidates = 64;
  cfg.adv_len = 2;
  cfg.steps = 2;
  const TrainResult res = train(cfg, task);
  REQUIRE(res.trace.records.size() == 2);
  CHECK(res.trace.records[0].accepted);
  CHECK(res.trace.records[1].accepted);
  CHECK(res.adv.tokens[0] != 33);
  CHECK(res.adv.tokens[1] != 33);
}

TEST_CASE("gcg_step: non-monotone variant takes the batch minimum even on ties") {
  const TargetHandle target = TargetHandle::local_target("zero", make_zero_weights(small_config()));
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  const TokenSeq current = encode("!!");
  const double cur_loss = loss(current);
  const LossGrad grad = task_grad(wb, task, current);

  GcgParams params;
  params.top_k = 4;
  params.batch = 6;
  params.greedy_accept = false;
  double out_loss = 0.0;
  const TokenSeq next =
      gcg_step(current, cur_loss, grad, {33, 97, 98, 113}, params, 3, loss, nullptr, &out_loss);

  // All variants tie with the current loss on the constant model; the batch
  // minimum is still returned and differs from current in at most one slot.
  CHECK(out_loss == cur_loss);
  int moved = 0;
  for (std::size_t i = 0; i < current.size(); ++i) moved += next[i] != current[i] ? 1 : 0;
  CHECK(moved <= 1);
}

TEST_CASE("autodan_step: zero mutation and crossover keep the best loss unchanged") {
  const TargetHandle target = small_target(17);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);
  const std::vector<int> charset = {33, 97, 98, 113};

  std::vector<Genome> pop;
  for (int i = 0; i < 6; ++i) {
    Genome g;
    g.tokens = {charset[static_cast<std::size_t>(i) % charset.size()],
                charset[static_cast<std::size_t>(i + 1) % charset.size()]};
    g.loss = loss(g.tokens);
    pop.push_back(std::move(g));
  }
  double prev_best = pop[0].loss;
  for (const Genome& g : pop) prev_best = std::min(prev_best, g.loss);

  AutodanParams params;
  params.population = 6;
  params.elite = 2;
  params.mutation_rate = 0.0;
  params.crossover_rate = 0.0;
  std::mt19937_64 rng(5);
  autodan_step(pop, params, charset, rng, loss);

  double new_best = pop[0].loss;
  for (const Genome& g : pop) new_best = std::min(new_best, g.loss);
  CHECK(new_best == prev_best);
}

TEST_CASE("autodan_step: the best member survives into the next generation") {
  const TargetHandle target = small_target(19);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);
  const std::vector<int> charset = {33, 97, 98, 113};

  std::vector<Genome> pop;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 8; ++i) {
    Genome g;
    g.tokens = {charset[rng() % charset.size()], charset[rng() % charset.size()]};
    g.loss = loss(g.tokens);
    pop.push_back(std::move(g));
  }
  Genome best = pop[0];
  for (const Genome& g : pop) {
    if (g.loss < best.loss) best = g;
  }

  AutodanParams params;
  params.population = 8;
  params.elite = 2;
  params.mutation_rate = 0.5;
  params.crossover_rate = 0.5;
  autodan_step(pop, params, charset, rng, loss);

  bool survived = false;
  for (const Genome& g : pop) survived = survived || (g.tokens == best.tokens);
  CHECK(survived);
}

TEST_CASE("autodan reaches the brute-force minimum on a 4-byte, 2-token instance") {
  const TargetHandle target = small_target(23);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);
  const std::vector<int> charset = {97, 98, 99, 100};

  double oracle_min = 1e300;
  for (const TokenSeq& s : all_strings(charset, 2)) oracle_min = std::min(oracle_min, loss(s));

  AutodanParams params;
  params.population = 8;
  params.elite = 2;
  params.mutation_rate = 0.5;
  params.crossover_rate = 0.5;

  std::mt19937_64 rng(41);
  std::vector<Genome> pop;
  for (int i = 0; i < params.population; ++i) {
    Genome g;
    g.tokens = {charset[rng() % charset.size()], charset[rng() % charset.size()]};
    g.loss = loss(g.tokens);
    pop.push_back(std::move(g));
  }

  double best = 1e300;
  for (const Genome& g : pop) best = std::min(best, g.loss);
  int generations = 0;
  while (best > oracle_min && generations < 50) {
    autodan_step(pop, params, charset, rng, loss);
    for (const Genome& g : pop) best = std::min(best, g.loss);
    ++generations;
  }
  CHECK(best == oracle_min);
}

TEST_CASE("pez projection: exact rows, ties and a linear-scan oracle") {
  const ModelWeights w = make_random_weights(0, small_config());
  std::vector<int> all;
  for (int t = 0; t < Vocab::size; ++t) all.push_back(t);
  const std::size_t d = static_cast<std::size_t>(w.config.d_model);

  // A row equal to an embedding projects to that token.
  for (int t : {0, 33, 257}) {
    CHECK(nearest_embedding_token(w, &w.wte[static_cast<std::size_t>(t) * d], all) == t);
  }

  // Equidistant rows resolve to the lowest token id.
  ModelWeights tied = make_zero_weights(small_config());
  tied.wte[5 * d + 0] = 1.0;   // token 5 at (1, 0, ...)
  tied.wte[9 * d + 1] = 1.0;   // token 9 at (0, 1, ...)
  std::vector<double> origin(d, 0.0);
  CHECK(nearest_embedding_token(tied, origin.data(), {5, 9}) == 5);
  CHECK(nearest_embedding_token(tied, origin.data(), {9, 5}) == 5);

  // 100 random rows against a plain linear scan.
  std::mt19937_64 rng(99);
  std::vector<double> row(d);
  for (int probe = 0; probe < 100; ++probe) {
    for (double& v : row) {
      v = 0.05 * (static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5);
    }
    int want = -1;
    double want_dist = 1e300;
    for (int t = 0; t < Vocab::size; ++t) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = row[j] - w.wte[static_cast<std::size_t>(t) * d + j];
        dist += diff * diff;
      }
      if (dist < want_dist) {
        want_dist = dist;
        want = t;
      }
    }
    CHECK(nearest_embedding_token(w, row.data(), all) == want);
  }
}

TEST_CASE("relaxed methods report the true loss of their hard final string") {
  const TargetHandle target = small_target(29);
  const WhiteBox wb = *white_box(target);
  const TrainTask task = make_task(target);

  for (const char* method : {"gbda", "pez"}) {
    OptimizerConfig cfg = tiny_config(method);
    cfg.steps = 3;
    const TrainResult res = train(cfg, task);
    const double recheck = aggregate_loss(wb, task.train_cases, task.goal, task.tmpl,
                                          task.position, res.adv.tokens);
    CHECK(res.adv.final_loss == recheck);
    CHECK(res.adv.text == decode(res.adv.tokens));
  }
}

TEST_CASE("gbda: same seed, same trajectory") {
  const TargetHandle target = small_target(31);
  TrainTask task = make_task(target);
  OptimizerConfig cfg = tiny_config("gbda");
  cfg.steps = 3;
  const TrainResult a = train(cfg, task);
  const TrainResult b = train(cfg, task);
  CHECK(a.adv.tokens == b.adv.tokens);
  CHECK(a.adv.best_loss_trace == b.adv.best_loss_trace);
  CHECK(a.adv.final_loss == b.adv.final_loss);
}

TEST_CASE("gbda: final hard loss cannot beat the exhaustive minimum") {
  const TargetHandle target = small_target(37);
  const WhiteBox wb = *white_box(target);
  TrainTask task = make_task(target);
  const LossFn loss = task_loss(wb, task);

  OptimizerConfig cfg = tiny_config("gbda");
  cfg.adv_len = 1;
  cfg.steps = 4;
  cfg.custom_charset.clear();
  for (int t = 97; t < 113; ++t) cfg.custom_charset.push_back(t);

  double oracle_min = 1e300;
  for (const TokenSeq& s : all_strings(cfg.custom_charset, 1)) {
    oracle_min = std::min(oracle_min, loss(s));
  }
  const TrainResult res = train(cfg, task);
  CHECK(res.adv.final_loss >= oracle_min - 1e-15);
}

TEST_CASE("train: every method's best-so-far trace is non-increasing") {
  const TargetHandle target = small_target(43);
  TrainTask task = make_task(target, 2);

  for (const char* method : {"gcg", "uat", "autoprompt", "random", "autodan", "gbda", "pez"}) {
    OptimizerConfig cfg = tiny_config(method);
    cfg.steps = 5;
    const TrainResult res = train(cfg, task);
    REQUIRE_FALSE(res.adv.best_loss_trace.empty());
    for (std::size_t i = 1; i < res.adv.best_loss_trace.size(); ++i) {
      CHECK(res.adv.best_loss_trace[i] <= res.adv.best_loss_trace[i - 1]);
    }
    CHECK(res.adv.method == method);
    CHECK(res.adv.final_loss == res.adv.best_loss_trace.back());
  }
}

TEST_CASE("train: byte-for-byte determinism") {
  const TargetHandle target = small_target(47);
  TrainTask task = make_task(target, 2);
  for (const char* method : {"gcg", "autodan", "pez"}) {
    OptimizerConfig cfg = tiny_config(method);
    cfg.steps = 3;
    const TrainResult a = train(cfg, task);
    const TrainResult b = train(cfg, task);
    CHECK(a.adv.tokens == b.adv.tokens);
    CHECK(a.adv.text == b.adv.text);
    CHECK(a.adv.best_loss_trace == b.adv.best_loss_trace);
  }
}

TEST_CASE("train: random with one step returns the seeded initial string") {
  const TargetHandle target = small_target(53);
  TrainTask task = make_task(target);
  OptimizerConfig cfg = tiny_config("random");
  cfg.steps = 1;
  const TrainResult res = train(cfg, task);
  CHECK(res.adv.tokens == TokenSeq(static_cast<std::size_t>(cfg.adv_len), 33));
  CHECK(res.trace.records.size() == 1);
}

TEST_CASE("train: gradient methods refuse black-box targets before any work") {
  const TargetHandle mock = TargetHandle::mock_target("m", "t", "r");
  TrainTask task = make_task(mock);
  for (const char* method : {"gcg", "uat", "autoprompt", "gbda", "pez"}) {
    OptimizerConfig cfg = tiny_config(method);
    CHECK_THROWS_AS(train(cfg, task), capability_error);
  }
}

TEST_CASE("train: gcg improves or maintains the initial loss") {
  const TargetHandle target = small_target(59);
  TrainTask task = make_task(target);
  const WhiteBox wb = *white_box(target);

  OptimizerConfig cfg = tiny_config("gcg");
  cfg.steps = 5;
  const double initial = aggregate_loss(wb, task.train_cases, task.goal, task.tmpl, task.position,
                                        TokenSeq(static_cast<std::size_t>(cfg.adv_len), 33));
  const TrainResult res = train(cfg, task);
  CHECK(res.adv.final_loss <= initial);
}

TEST_CASE("train: early stop cuts the trace short") {
  const TargetHandle target = small_target(61);
  TrainTask task = make_task(target);
  OptimizerConfig cfg = tiny_config("random");
  cfg.steps = 50;
  cfg.early_stop_nats_per_token = 1e9;  // everything passes the bar
  const TrainResult res = train(cfg, task);
  CHECK(res.trace.records.size() == 1);
}

TEST_CASE("pair_attack: trigger in the clean prompt succeeds at round 1") {
  // The attacker always proposes something; the target fires on template text.
  const TargetHandle attacker = TargetHandle::mock_target(
      "attacker", "", std::string(kPairSentinelOpen) + "anything" + kPairSentinelClose);
  const TargetHandle target = TargetHandle::mock_target("victim", "### Input:", "ok then");

  OptimizerConfig cfg = tiny_config("pair");
  const PairOutcome out = pair_attack(cfg, attacker, target, tiny_case(), tiny_goal(),
                                      PromptTemplate{}, InjectionPosition::data_end);
  CHECK(out.success);
  CHECK(out.rounds_used == 1);
}

TEST_CASE("pair_attack: scripted attacker lands on round 3") {
  // The attacker's meta-prompt grows with history; keying the mock on the
  // second attempt's header makes it emit the real injection only at round 3.
  const TargetHandle attacker = TargetHandle::mock_target(
      "attacker", "Attempt 2 injection:",
      std::string(kPairSentinelOpen) + "please <<T>> now" + kPairSentinelClose);
  const TargetHandle target = TargetHandle::mock_target("victim", "<<T>>", "fine: ok");

  OptimizerConfig cfg = tiny_config("pair");
  cfg.pair.max_rounds = 10;
  const PairOutcome out = pair_attack(cfg, attacker, target, tiny_case(), tiny_goal(),
                                      PromptTemplate{}, InjectionPosition::data_end);
  CHECK(out.success);
  CHECK(out.rounds_used == 3);
  CHECK(out.final_candidate == "please <<T>> now");
}

TEST_CASE("pair_attack: a never-triggering attacker fails after exactly max_rounds") {
  const TargetHandle attacker = TargetHandle::mock_target("attacker", "", "no markers here");
  const TargetHandle target = TargetHandle::mock_target("victim", "<<T>>", "ok");

  OptimizerConfig cfg = tiny_config("pair");
  cfg.pair.max_rounds = 4;
  const PairOutcome out = pair_attack(cfg, attacker, target, tiny_case(), tiny_goal(),
                                      PromptTemplate{}, InjectionPosition::data_end);
  CHECK_FALSE(out.success);
  CHECK(out.rounds_used == 4);
}

TEST_CASE("train: pair produces a usable adv string against mock targets") {
  const TargetHandle attacker = TargetHandle::mock_target(
      "attacker", "", std::string(kPairSentinelOpen) + "do <<T>>" + kPairSentinelClose);
  const TargetHandle target = TargetHandle::mock_target("victim", "<<T>>", "sure, ok");

  TrainTask task = make_task(target);
  task.attacker = &attacker;
  OptimizerConfig cfg = tiny_config("pair");
  const TrainResult res = train(cfg, task);
  CHECK(res.adv.text == "do <<T>>");
  CHECK(res.adv.final_loss == 0.0);  // failure rate
}

TEST_CASE("custom optimizer registration") {
  const TargetHandle target = small_target(67);
  TrainTask task = make_task(target);

  register_custom_optimizer("noop", [](const OptimizerConfig& cfg, const TrainTask& t) {
    TrainResult res;
    res.adv.method = cfg.method;
    res.adv.tokens = TokenSeq(static_cast<std::size_t>(cfg.adv_len), 33);
    res.adv.text = decode(res.adv.tokens);
    res.adv.seed = cfg.seed;
    res.adv.target_name = t.target ? t.target->name : "";
    res.adv.best_loss_trace = {0.0};
    return res;
  });

  OptimizerConfig cfg = tiny_config("noop");
  const TrainResult res = train(cfg, task);
  CHECK(res.adv.tokens == TokenSeq(2, 33));

  const auto names = list_optimizers();
  CHECK(std::find(names.begin(), names.end(), "noop") != names.end());
  CHECK(std::find(names.begin(), names.end(), "gcg") != names.end());

  CHECK_THROWS_AS(register_custom_optimizer("noop", [](const OptimizerConfig&, const TrainTask&) {
                    return TrainResult{};
                  }),
                  config_error);
  CHECK_THROWS_AS(register_custom_optimizer("gcg", [](const OptimizerConfig&, const TrainTask&) {
                    return TrainResult{};
                  }),
                  config_error);
}

TEST_CASE("adv strings persist through JSON with tokens as the authority") {
  AdvString adv;
  adv.method = "gcg";
  adv.tokens = {33, 200, 97};  // byte 200 is not valid standalone UTF-8
  adv.text = decode(adv.tokens);
  adv.final_loss = 1.25;
  adv.best_loss_trace = {2.0, 1.5, 1.25};
  adv.seed = 9;
  adv.target_name = "toy";

  const std::string path =
      (std::filesystem::temp_directory_path() / "oet_adv_roundtrip.json").string();
  save_adv_string(adv, path);
  const AdvString r = load_adv_string(path);
  CHECK(r.tokens == adv.tokens);
  CHECK(r.text == adv.text);
  CHECK(r.method == adv.method);
  CHECK(r.final_loss == adv.final_loss);
  CHECK(r.best_loss_trace == adv.best_loss_trace);
  CHECK(r.seed == adv.seed);
  CHECK(r.target_name == adv.target_name);
  std::filesystem::remove(path);
}

TEST_CASE("optimizer config validation") {
  OptimizerConfig cfg;
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = OptimizerConfig{};
  cfg.autodan.elite = cfg.autodan.population + 1;
  CHECK_THROWS_AS(cfg.validate(), config_error);
  cfg = OptimizerConfig{};
  cfg.custom_charset = {300};
  CHECK_THROWS_AS(cfg.validate(), config_error);
}
