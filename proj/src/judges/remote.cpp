#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <thread>

#include <fmt/format.h>
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"

namespace evalkit {

namespace {

bool retryable(int status) { return status == 0 || status == 429 || (status >= 500 && status <= 599); }

std::string snippet(const std::string& body) {
  constexpr std::size_t kMax = 200;
  return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

}  // namespace

RemoteChatGenerator::RemoteChatGenerator(JudgeSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.kind != JudgeKind::remote) {
    throw ConfigError(fmt::format("judge '{}' is not a remote judge", spec_.judge_id));
  }
  const char* value = std::getenv(spec_.credentials_ref.c_str());
  if (value == nullptr || *value == '\0') {
    throw ConfigError(fmt::format("judge '{}': environment variable {} is not set",
                                  spec_.judge_id, spec_.credentials_ref));
  }
  token_ = value;
  const auto scheme_end = spec_.endpoint.find("://") + 3;
  const auto path_begin = spec_.endpoint.find('/', scheme_end);
  base_url_ = spec_.endpoint.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : spec_.endpoint.substr(path_begin);
}

std::string RemoteChatGenerator::scrub(std::string text) const {
  if (token_.empty()) return text;
  for (auto pos = text.find(token_); pos != std::string::npos; pos = text.find(token_, pos)) {
    text.replace(pos, token_.size(), "[redacted]");
  }
  return text;
}

std::string RemoteChatGenerator::generate(const std::string& prompt) {
  nlohmann::json body;
  body["model"] = spec_.model_id;
  body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", prompt}}});
  const std::string payload = body.dump();

  httplib::Client client(base_url_);
  const auto timeout = std::chrono::duration_cast<std::chrono::microseconds>(
      std::chrono::duration<double>(spec_.request_timeout));
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);
  const httplib::Headers headers{{"Authorization", "Bearer " + token_}};

  const int attempts = spec_.max_retries + 1;
  int status = 0;
  std::string last_error;
  double backoff = spec_.initial_backoff;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    auto res = client.Post(path_, headers, payload, "application/json");
    if (res) {
      status = res->status;
      if (status >= 200 && status < 300) {
        try {
          const auto reply = nlohmann::json::parse(res->body);
          return scrub(reply.at("choices").at(0).at("message").at("content").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
          throw RemoteError(scrub(fmt::format("judge '{}': malformed completion: {}", spec_.judge_id,
                                              e.what())),
                            status, attempt);
        }
      }
      last_error = fmt::format("HTTP {}: {}", status, scrub(snippet(res->body)));
    } else {
      status = 0;
      last_error = fmt::format("transport error: {}", httplib::to_string(res.error()));
    }
    if (!retryable(status)) {
      throw RemoteError(fmt::format("judge '{}': {}", spec_.judge_id, last_error), status, attempt);
    }
    if (attempt < attempts) {
      spdlog::warn("judge '{}': attempt {}/{} failed ({}); retrying in {:.2f}s", spec_.judge_id,
                   attempt, attempts, last_error, backoff);
      std::this_thread::sleep_for(std::chrono::duration<double>(backoff));
      backoff = std::min(backoff * 2.0, spec_.max_backoff);
    }
  }
  throw RemoteError(fmt::format("judge '{}': giving up after {} attempts; last failure {}",
                                spec_.judge_id, attempts, last_error),
                    status, attempts);
}

}  // namespace evalkit
