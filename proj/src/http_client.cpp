#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "oet/errors.hpp"
#include "oet/targets.hpp"
#include "semaphore.hpp"

namespace oet {

using json = nlohmann::json;

namespace {

struct ParsedUrl {
  std::string origin;       // scheme://host[:port]
  std::string path_prefix;  // optional, no trailing slash
};

ParsedUrl parse_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw config_error("remote target: base_url must include a scheme: " + base_url);
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  ParsedUrl out;
  if (path_start == std::string::npos) {
    out.origin = base_url;
  } else {
    out.origin = base_url.substr(0, path_start);
    out.path_prefix = base_url.substr(path_start);
    while (!out.path_prefix.empty() && out.path_prefix.back() == '/') out.path_prefix.pop_back();
  }
  return out;
}

bool retryable_status(int status) { return status == 429 || status >= 500; }

ChatResponse error_response(int retries) {
  ChatResponse resp;
  resp.finish_reason = FinishReason::error;
  resp.text.clear();
  resp.retries = retries;
  return resp;
}

}  // namespace

ChatResponse remote_complete(const std::string& base_url, const std::string& model,
                             const std::string& prompt, const GenParams& params,
                             const RetryPolicy& retry, Semaphore* gate) {
  const char* api_key = std::getenv(kApiKeyEnvVar);
  if (api_key == nullptr || *api_key == '\0') {
    throw config_error(std::string("remote target: ") + kApiKeyEnvVar + " is not set");
  }

  const ParsedUrl url = parse_base_url(base_url);
  const std::string path = url.path_prefix + "/v1/chat/completions";

  const json body = {
      {"model", model},
      {"messages", json::array({json{{"role", "user"}, {"content", prompt}}})},
      {"temperature", params.temperature},
      {"max_tokens", params.max_new_tokens},
  };
  const std::string payload = body.dump(-1, ' ', false, json::error_handler_t::replace);

  httplib::Headers headers = {{"Authorization", std::string("Bearer ") + api_key}};

  int retries = 0;
  for (int attempt = 0;; ++attempt) {
    httplib::Result res;
    {
      SemaphoreGuard guard(gate);
      httplib::Client client(url.origin);
      client.set_connection_timeout(30, 0);
      client.set_read_timeout(120, 0);
      res = client.Post(path, headers, payload, "application/json");
    }

    bool should_retry = false;
    if (!res) {
      should_retry = true;
    } else if (retryable_status(res->status)) {
      should_retry = true;
    } else if (res->status >= 200 && res->status < 300) {
      try {
        const json reply = json::parse(res->body);
        ChatResponse out;
        out.text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
        const std::string finish = reply.at("choices").at(0).value("finish_reason", "stop");
        out.finish_reason = finish == "length" ? FinishReason::length : FinishReason::stop;
        out.retries = retries;
        return out;
      } catch (const json::exception& e) {
        return error_response(retries);
      }
    } else {
      // Non-retryable HTTP error (4xx other than 429).
      return error_response(retries);
    }

    if (!should_retry || attempt >= retry.max_retries) {
      return error_response(retries);
    }
    double delay_ms = static_cast<double>(retry.base_delay.count());
    for (int i = 0; i < attempt; ++i) delay_ms *= retry.factor;
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay_ms));
    ++retries;
  }
}

}  // namespace oet
