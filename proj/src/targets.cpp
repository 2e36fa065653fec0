#include "oet/targets.hpp"

#include <chrono>
#include <stdexcept>
#include <utility>

#include "oet/errors.hpp"
#include "semaphore.hpp"

namespace oet {

void GenParams::validate() const {
  if (max_new_tokens < 1) throw config_error("gen params: max_new_tokens must be >= 1");
  if (temperature < 0.0) throw config_error("gen params: temperature must be non-negative");
}

const char* to_string(FinishReason r) {
  switch (r) {
    case FinishReason::length: return "length";
    case FinishReason::error: return "error";
    case FinishReason::stop: break;
  }
  return "stop";
}

const char* to_string(TargetKind k) {
  switch (k) {
    case TargetKind::local: return "local";
    case TargetKind::remote: return "remote";
    case TargetKind::mock: break;
  }
  return "mock";
}

TargetHandle TargetHandle::local_target(const std::string& name, const std::string& weights_path,
                                        GenParams defaults) {
  TargetHandle t;
  t.kind = TargetKind::local;
  t.name = name;
  t.defaults = defaults;
  t.weights_path = weights_path;
  t.weights = std::make_shared<const ModelWeights>(load_weights(weights_path));
  return t;
}

TargetHandle TargetHandle::local_target(const std::string& name, ModelWeights weights,
                                        GenParams defaults) {
  TargetHandle t;
  t.kind = TargetKind::local;
  t.name = name;
  t.defaults = defaults;
  t.weights = std::make_shared<const ModelWeights>(std::move(weights));
  return t;
}

TargetHandle TargetHandle::remote_target(const std::string& name, const std::string& base_url,
                                         const std::string& model, GenParams defaults,
                                         RetryPolicy retry, int max_in_flight) {
  TargetHandle t;
  t.kind = TargetKind::remote;
  t.name = name;
  t.defaults = defaults;
  t.base_url = base_url;
  t.model = model;
  t.retry = retry;
  t.max_in_flight = max_in_flight;
  t.in_flight_gate = std::make_shared<Semaphore>(max_in_flight);
  return t;
}

TargetHandle TargetHandle::mock_target(const std::string& name, const std::string& trigger,
                                       const std::string& canned_response, GenParams defaults) {
  TargetHandle t;
  t.kind = TargetKind::mock;
  t.name = name;
  t.defaults = defaults;
  t.trigger = trigger;
  t.canned_response = canned_response;
  return t;
}

namespace {

ChatResponse complete_local(const TargetHandle& target, const std::string& prompt,
                            const GenParams& params) {
  const ModelWeights& w = *target.weights;
  TokenSeq tokens = encode(prompt);

  // Keep the tail when the prompt alone overflows the context: injected
  // content sits at the end of the assembled prompt.
  bool truncated = false;
  const std::size_t context = static_cast<std::size_t>(w.config.context);
  if (tokens.size() > context) {
    tokens.erase(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(context));
    truncated = true;
  }

  const TokenSeq out = sample(w, tokens, params.temperature, params.max_new_tokens, params.seed);

  ChatResponse resp;
  resp.text = decode(out);
  const bool hit_cap = static_cast<int>(out.size()) == params.max_new_tokens;
  const bool hit_context = tokens.size() + out.size() >= context;
  resp.finish_reason =
      (truncated || hit_cap || hit_context) ? FinishReason::length : FinishReason::stop;
  return resp;
}

ChatResponse complete_mock(const TargetHandle& target, const std::string& prompt) {
  ChatResponse resp;
  resp.text = prompt.find(target.trigger) != std::string::npos ? target.canned_response
                                                               : std::string(kMockRefusal);
  resp.finish_reason = FinishReason::stop;
  return resp;
}

}  // namespace

ChatResponse complete(const TargetHandle& target, const std::string& prompt,
                      const GenParams& params) {
  if (prompt.empty()) throw std::invalid_argument("complete: empty prompt");
  params.validate();

  const auto start = std::chrono::steady_clock::now();
  ChatResponse resp;
  switch (target.kind) {
    case TargetKind::local:
      resp = complete_local(target, prompt, params);
      break;
    case TargetKind::mock:
      resp = complete_mock(target, prompt);
      break;
    case TargetKind::remote:
      resp = remote_complete(target.base_url, target.model, prompt, params, target.retry,
                             target.in_flight_gate.get());
      break;
  }
  resp.latency_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return resp;
}

ChatResponse complete(const TargetHandle& target, const std::string& prompt) {
  return complete(target, prompt, target.defaults);
}

double WhiteBox::nll(const TokenSeq& prompt, const TokenSeq& target) const {
  return nll_loss(*weights, prompt, target);
}

LossGrad WhiteBox::grad_onehot(const TokenSeq& prompt, Span adv_span,
                               const TokenSeq& target) const {
  return loss_grad_onehot(*weights, prompt, adv_span, target);
}

EmbedGrad WhiteBox::grad_embed(const TokenSeq& prompt, Span adv_span,
                               const TokenSeq& target) const {
  return loss_grad_embed(*weights, prompt, adv_span, target);
}

SoftGrad WhiteBox::grad_soft(const TokenSeq& prefix, const std::vector<double>& soft_span,
                             std::size_t span_len, const TokenSeq& suffix,
                             const TokenSeq& target) const {
  return loss_grad_soft(*weights, prefix, soft_span, span_len, suffix, target);
}

std::optional<WhiteBox> white_box(const TargetHandle& target) {
  if (target.kind != TargetKind::local) return std::nullopt;
  return WhiteBox{target.weights};
}

}  // namespace oet
