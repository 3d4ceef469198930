#include "dist/knowledge.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cstdlib>
#include <regex>

namespace dist::knowledge {

using nlohmann::json;

HttpChatClient::HttpChatClient(std::string url, std::string model, std::string key,
                               std::chrono::milliseconds timeout)
    : url_(std::move(url)), model_(std::move(model)), key_(std::move(key)), timeout_(timeout) {}

std::unique_ptr<HttpChatClient> HttpChatClient::from_environment() {
  auto env = [](const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
  };
  std::string url = env("DIST_LLM_URL");
  std::string model = env("DIST_LLM_MODEL");
  if (url.empty()) throw ConfigError("DIST_LLM_URL is not set");
  if (model.empty()) throw ConfigError("DIST_LLM_MODEL is not set");
  return std::make_unique<HttpChatClient>(std::move(url), std::move(model), env("DIST_LLM_KEY"));
}

std::string HttpChatClient::complete(const PromptRequest& request) {
  ++calls_;
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url_, m, url_re)) throw ConfigError("malformed LLM url: " + url_);
  const std::string origin = m[1].str();
  const std::string path = m[2].matched ? m[2].str() : "/";

  json body = {{"model", model_},
               {"temperature", 0},
               {"messages", json::array({{{"role", "user"}, {"content", request.prompt}}})}};
  httplib::Headers headers;
  if (!key_.empty()) headers.emplace("Authorization", "Bearer " + key_);

  httplib::Client client(origin);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_).count();
  client.set_connection_timeout(static_cast<time_t>(secs), 0);
  client.set_read_timeout(static_cast<time_t>(secs), 0);
  auto res = client.Post(path, headers, body.dump(), "application/json");
  if (!res) throw TransportError("LLM request failed: " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw TransportError("LLM endpoint returned HTTP " + std::to_string(res->status) + ": " +
                         res->body.substr(0, 200));
  try {
    const json reply = json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& ex) {
    throw TransportError(std::string("unexpected LLM response body: ") + ex.what());
  }
}

}  // namespace dist::knowledge
