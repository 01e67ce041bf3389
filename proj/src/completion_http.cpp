#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <json.hpp>

#include "hytune/datagen.hpp"

namespace hytune {

HttpCompletionClient::HttpCompletionClient(std::string endpoint, std::chrono::milliseconds timeout,
                                           std::string token_env)
    : timeout_(timeout) {
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, url)) {
    throw ValidationError("completion endpoint '" + endpoint +
                          "' is not an http:// or https:// URL");
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (endpoint.rfind("https://", 0) == 0) {
    throw ValidationError("this build has no TLS support; use an http:// endpoint");
  }
#endif
  origin_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
  if (const char* token = std::getenv(token_env.c_str()); token != nullptr && *token != '\0') {
    token_ = token;
  }
}

std::string HttpCompletionClient::complete(const CompletionRequest& request) {
  ++calls_;
  httplib::Client client(origin_);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - seconds);
  client.set_connection_timeout(seconds.count(), micros.count());
  client.set_read_timeout(seconds.count(), micros.count());
  client.set_write_timeout(seconds.count(), micros.count());

  httplib::Headers headers;
  if (token_) {
    headers.emplace("Authorization", "Bearer " + *token_);
  }
  const nlohmann::json body = {{"prompt", request.prompt}, {"max_length", request.max_length}};
  auto response = client.Post(path_, headers, body.dump(), "application/json");
  if (!response) {
    throw CompletionError("completion request to " + origin_ + path_ +
                          " failed: " + httplib::to_string(response.error()));
  }
  if (response->status != 200) {
    throw CompletionError("completion service returned HTTP " + std::to_string(response->status));
  }
  try {
    const auto reply = nlohmann::json::parse(response->body);
    return reply.at("completion").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CompletionError(std::string("malformed completion reply: ") + e.what());
  }
}

}  // namespace hytune
