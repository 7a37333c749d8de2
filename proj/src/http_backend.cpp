#include "capdpo/http_backend.hpp"

#include <cstdlib>

#include <httplib.h>
#include <json.hpp>

#include "capdpo/error.hpp"

namespace capdpo::judge {

namespace net {
namespace {
std::atomic<bool> g_forbidden{false};
std::atomic<std::uint64_t> g_attempts{0};
}  // namespace

void set_forbidden(bool forbidden) { g_forbidden.store(forbidden); }
bool forbidden() { return g_forbidden.load(); }
std::uint64_t attempts() { return g_attempts.load(); }
}  // namespace net

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  const auto& url = config_.endpoint;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) fail(Errc::kConfig, "endpoint must be an absolute URL: " + url);
  const auto path_begin = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_begin);
  path_ = path_begin == std::string::npos ? "/" : url.substr(path_begin);
  if (config_.model.empty()) fail(Errc::kConfig, "http backend needs a model name");
  if (config_.api_key.empty()) {
    if (const char* key = std::getenv("JUDGE_API_KEY")) config_.api_key = key;
  }
}

std::string HttpBackend::submit(const JudgeRequest& request) {
  request.validate();
  if (net::forbidden()) fail(Errc::kNetworkForbidden, "network access is disabled for this run");
  if (!request.attachments.empty() && !config_.multimodal) {
    fail(Errc::kUnsupportedAttachment, "backend '" + config_.model + "' is text-only");
  }

  nlohmann::json content;
  if (request.attachments.empty()) {
    content = request.prompt;
  } else {
    content = nlohmann::json::array();
    content.push_back({{"type", "text"}, {"text", request.prompt}});
    for (const auto& ref : request.attachments) {
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", ref}}}});
    }
  }
  nlohmann::json body = {
      {"model", config_.model},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", content}}})},
      {"temperature", request.temperature},
      {"max_tokens", request.max_output_tokens},
  };
  if (request.seed) body["seed"] = *request.seed;

  httplib::Client client(scheme_host_port_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  net::g_attempts.fetch_add(1);
  auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res) fail(Errc::kTransport, "request to " + config_.endpoint + " failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    fail(Errc::kTransport, "endpoint returned HTTP " + std::to_string(res->status));
  }
  if (res->status < 200 || res->status >= 300) {
    fail(Errc::kBackendRejected, "endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body);
  }
  try {
    const auto reply = nlohmann::json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kBackendRejected, std::string("unexpected response shape: ") + e.what());
  }
}

}  // namespace capdpo::judge
