#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"
#include "evalkit/text.hpp"

namespace evalkit {

void JudgeSpec::validate() const {
  if (trim(judge_id).empty()) throw ConfigError("judge_id must not be empty");
  const auto fail = [&](const std::string& what) {
    throw ConfigError(fmt::format("judge '{}': {}", judge_id, what));
  };
  if (max_retries < 0) fail("max_retries must be >= 0");
  if (!(request_timeout > 0.0)) fail("request_timeout must be positive");
  if (!(initial_backoff >= 0.0) || !(max_backoff >= initial_backoff)) {
    fail("backoff must satisfy 0 <= initial_backoff <= max_backoff");
  }
  if (max_prompt_tokens == 0) fail("max_prompt_tokens must be positive");
  if (max_new_tokens <= 0) fail("max_new_tokens must be positive");
  if (kind == JudgeKind::remote) {
    if (trim(endpoint).empty()) fail("a remote judge needs an endpoint");
    if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
      fail(fmt::format("endpoint '{}' is not an http(s) URL", endpoint));
    }
    if (trim(credentials_ref).empty()) fail("a remote judge needs credentials_ref");
    if (trim(model_id).empty()) fail("a remote judge needs model_id");
  } else if (command.empty() && trim(model_id).empty()) {
    fail("a local judge needs a command or a model directory in model_id");
  }
}

JudgeSpec JudgeSpec::from_json(const nlohmann::json& j) {
  JudgeSpec s;
  try {
    s.judge_id = j.at("judge_id").get<std::string>();
    const auto kind = j.value("kind", std::string("local"));
    if (kind == "local") {
      s.kind = JudgeKind::local;
    } else if (kind == "remote") {
      s.kind = JudgeKind::remote;
    } else {
      throw ConfigError(fmt::format("judge '{}': unknown kind '{}'", s.judge_id, kind));
    }
    s.model_id = j.value("model_id", s.model_id);
    s.endpoint = j.value("endpoint", s.endpoint);
    s.credentials_ref = j.value("credentials_ref", s.credentials_ref);
    s.request_timeout = j.value("request_timeout", s.request_timeout);
    s.max_retries = j.value("max_retries", s.max_retries);
    s.initial_backoff = j.value("initial_backoff", s.initial_backoff);
    s.max_backoff = j.value("max_backoff", s.max_backoff);
    s.command = j.value("command", s.command);
    s.prompt_template = j.value("prompt_template", s.prompt_template);
    s.max_prompt_tokens = j.value("max_prompt_tokens", s.max_prompt_tokens);
    s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("malformed judge spec: {}", e.what()));
  }
  s.validate();
  return s;
}

nlohmann::ordered_json JudgeSpec::to_json() const {
  nlohmann::ordered_json j;
  j["judge_id"] = judge_id;
  j["kind"] = kind == JudgeKind::remote ? "remote" : "local";
  j["model_id"] = model_id;
  if (!endpoint.empty()) j["endpoint"] = endpoint;
  if (!credentials_ref.empty()) j["credentials_ref"] = credentials_ref;
  j["request_timeout"] = request_timeout;
  j["max_retries"] = max_retries;
  j["initial_backoff"] = initial_backoff;
  j["max_backoff"] = max_backoff;
  if (!command.empty()) j["command"] = command;
  if (!prompt_template.empty()) j["prompt_template"] = prompt_template;
  j["max_prompt_tokens"] = max_prompt_tokens;
  j["max_new_tokens"] = max_new_tokens;
  return j;
}

}  // namespace evalkit
