#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>

#include "oet/model.hpp"

namespace oet {

struct GenParams {
  double temperature = 0.6;
  int max_new_tokens = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class FinishReason { stop, length, error };
const char* to_string(FinishReason r);

struct ChatResponse {
  std::string text;
  FinishReason finish_reason = FinishReason::stop;
  double latency_ms = 0.0;
  int retries = 0;  // transport retries performed (remote targets)
};

enum class TargetKind { local, remote, mock };
const char* to_string(TargetKind k);

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_delay{1000};
  double factor = 2.0;
};

class Semaphore;

// Uniform handle over the three target kinds. Immutable once built; copies
// share loaded weights and the remote in-flight gate.
struct TargetHandle {
  TargetKind kind = TargetKind::mock;
  std::string name;
  GenParams defaults;

  // local
  std::string weights_path;
  std::shared_ptr<const ModelWeights> weights;

  // remote
  std::string base_url;
  std::string model;
  RetryPolicy retry;
  int max_in_flight = 4;
  std::shared_ptr<Semaphore> in_flight_gate;

  // mock
  std::string trigger;
  std::string canned_response;

  static TargetHandle local_target(const std::string& name, const std::string& weights_path,
                                   GenParams defaults = {});
  static TargetHandle local_target(const std::string& name, ModelWeights weights,
                                   GenParams defaults = {});
  static TargetHandle remote_target(const std::string& name, const std::string& base_url,
                                    const std::string& model, GenParams defaults = {},
                                    RetryPolicy retry = {}, int max_in_flight = 4);
  static TargetHandle mock_target(const std::string& name, const std::string& trigger,
                                  const std::string& canned_response, GenParams defaults = {});
};

// Fixed refusal the mock emits when its trigger is absent. Never contains
// the default target sentence, so mock ASR outcomes are exact 0/1.
inline constexpr const char* kMockRefusal = "I cannot help with that.";

// One inference round trip. Local: encode/sample/decode (prompts longer than
// the context are left-truncated so the injected tail survives; capped
// generations report finish_reason length). Mock: canned response iff the
// trigger occurs in the prompt. Remote: one chat-completions call; transport
// failures come back as finish_reason error, never as an exception.
ChatResponse complete(const TargetHandle& target, const std::string& prompt,
                      const GenParams& params);
ChatResponse complete(const TargetHandle& target, const std::string& prompt);

// Gradient/loss access, present for local targets only.
struct WhiteBox {
  std::shared_ptr<const ModelWeights> weights;

  double nll(const TokenSeq& prompt, const TokenSeq& target) const;
  LossGrad grad_onehot(const TokenSeq& prompt, Span adv_span, const TokenSeq& target) const;
  EmbedGrad grad_embed(const TokenSeq& prompt, Span adv_span, const TokenSeq& target) const;
  SoftGrad grad_soft(const TokenSeq& prefix, const std::vector<double>& soft_span,
                     std::size_t span_len, const TokenSeq& suffix, const TokenSeq& target) const;
};
std::optional<WhiteBox> white_box(const TargetHandle& target);

// Raw chat-completions round trip with retry/backoff on transport errors and
// 429/5xx. Requires OET_API_KEY in the environment (config_error otherwise,
// before any network traffic). Exhausted retries yield an error response.
ChatResponse remote_complete(const std::string& base_url, const std::string& model,
                             const std::string& prompt, const GenParams& params,
                             const RetryPolicy& retry, Semaphore* gate = nullptr);

inline constexpr const char* kApiKeyEnvVar = "OET_API_KEY";

}  // namespace oet
