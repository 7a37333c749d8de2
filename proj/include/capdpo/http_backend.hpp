#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <string>

#include "capdpo/judge.hpp"

namespace capdpo::judge {

// Process-wide switch that makes every real HTTP backend refuse to connect.
// Pipelines configured with mock backends turn it on.
namespace net {
void set_forbidden(bool forbidden);
bool forbidden();
// Number of connection attempts made by real backends in this process.
std::uint64_t attempts();
}  // namespace net

struct HttpBackendConfig {
  // Full URL of an OpenAI-compatible chat-completions endpoint.
  std::string endpoint;
  std::string model;
  std::chrono::milliseconds timeout{60000};
  // Read from JUDGE_API_KEY when empty.
  std::string api_key;
  bool multimodal = false;
};

// Chat-completions client. HTTP 429, 5xx and connection failures raise
// Errc::kTransport (retryable); other non-2xx replies raise kBackendRejected.
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  std::string submit(const JudgeRequest& request) override;
  std::string id() const override { return config_.model; }
  bool accepts_attachments() const override { return config_.multimodal; }

 private:
  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

}  // namespace capdpo::judge
