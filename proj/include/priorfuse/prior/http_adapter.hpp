#pragma once

#include <cstdlib>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "priorfuse/prior/client.hpp"

namespace priorfuse::prior {

struct HttpAdapterConfig {
  std::string name{"http"};
  std::string base_url;  // scheme://host[:port]
  std::string path{"/v1/edit"};
  std::string api_key_env{"PRIORFUSE_API_KEY"};
  double timeout_seconds{300.0};
};

// Reference adapter. Request: POST JSON {"image": <base64 PNG>, "prompt": ...}
// with a bearer token from the environment. Response: either image/png bytes
// or JSON {"image": <base64 PNG>}; errors are reported from {"error": ...}.
class HttpAdapter final : public ProviderAdapter {
 public:
  explicit HttpAdapter(HttpAdapterConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.base_url.empty()) throw InvalidArgument("http adapter needs a base_url");
  }

  std::string name() const override { return cfg_.name; }

  std::vector<std::uint8_t> generate(const ImageBuffer& image, const std::string& prompt) override {
    httplib::Client cli(cfg_.base_url);
    const auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    cli.set_read_timeout(secs, 0);
    cli.set_write_timeout(secs, 0);
    httplib::Headers headers;
    if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key) {
      headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const nlohmann::json body{{"image", base64_encode(encode_png(image))}, {"prompt", prompt}};
    auto res = cli.Post(cfg_.path, headers, body.dump(), "application/json");
    if (!res) throw ProviderError(cfg_.name, "transport error: " + httplib::to_string(res.error()));
    if (res->status != 200) {
      std::string msg = "HTTP " + std::to_string(res->status);
      try {
        auto j = nlohmann::json::parse(res->body);
        if (j.contains("error")) msg += ": " + j["error"].dump();
      } catch (...) {
        if (!res->body.empty()) msg += ": " + res->body.substr(0, 200);
      }
      throw ProviderError(cfg_.name, msg);
    }
    const auto type = res->get_header_value("Content-Type");
    if (type.rfind("image/", 0) == 0) return {res->body.begin(), res->body.end()};
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const std::exception& e) {
      throw ProviderError(cfg_.name, std::string("unparseable response: ") + e.what());
    }
    if (!j.contains("image")) throw ProviderError(cfg_.name, "response has no image field");
    return base64_decode(j["image"].get<std::string>());
  }

 private:
  HttpAdapterConfig cfg_;
};

}  // namespace priorfuse::prior
