#pragma once

#include <chrono>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "salcls/errors.hpp"
#include "salcls/oracles.hpp"

namespace salcls {

// Wire contract with a remote inference server:
//   request  POST <path>  {"prompt": str}
//   response 200          {"text": str}
struct HttpOracleConfig {
  std::string url;            // e.g. http://host:8080/generate
  std::string auth_token;     // sent as "Authorization: Bearer <token>" when set
  int timeout_ms = 30000;
  int retries = 2;            // additional attempts after the first
  int backoff_ms = 250;       // doubled per retry
  int concurrency = 1;
};

namespace detail {

struct ParsedUrl {
  std::string host_port;  // scheme://host[:port]
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw ConfigError("oracle url must include a scheme: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string http_generate(const HttpOracleConfig& cfg, const std::string& prompt) {
  const ParsedUrl parsed = parse_url(cfg.url);
  json body{{"prompt", prompt}};
  std::string last_error;
  int backoff = cfg.backoff_ms;
  for (int attempt = 0; attempt <= cfg.retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff *= 2;
    }
    httplib::Client client(parsed.host_port);
    client.set_connection_timeout(0, cfg.timeout_ms * 1000);
    client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
    httplib::Headers headers;
    if (!cfg.auth_token.empty())
      headers.emplace("Authorization", "Bearer " + cfg.auth_token);
    auto res = client.Post(parsed.path, headers, body.dump(), "application/json");
    if (!res) {
      last_error = "no response from " + cfg.url;
      continue;
    }
    if (res->status != 200) {
      last_error = "status " + std::to_string(res->status) + " from " + cfg.url;
      continue;
    }
    try {
      json parsed_body = json::parse(res->body);
      if (!parsed_body.contains("text") || !parsed_body["text"].is_string()) {
        last_error = "response missing string field 'text'";
        continue;
      }
      return parsed_body["text"].get<std::string>();
    } catch (const json::parse_error& e) {
      last_error = std::string("bad response body: ") + e.what();
    }
  }
  throw OracleUnavailable(last_error);
}

}  // namespace detail

// Remote classification oracle: renders the prompt, posts it, maps the free-
// text answer onto the label set.
class HttpClassOracle final : public ClassOracle {
 public:
  HttpClassOracle(HttpOracleConfig cfg, PromptTemplate plain, PromptTemplate hinted)
      : cfg_(std::move(cfg)), plain_(std::move(plain)), hinted_(std::move(hinted)) {}

  int predict(const std::string& text, const LabelSet& labels,
              const std::vector<std::string>& hints) const override {
    const std::string prompt =
        build_class_prompt(hints.empty() ? plain_ : hinted_, text, labels, hints);
    return map_answer_to_label(detail::http_generate(cfg_, prompt), labels);
  }

  int max_concurrency() const override { return cfg_.concurrency; }

 private:
  HttpOracleConfig cfg_;
  PromptTemplate plain_;
  PromptTemplate hinted_;
};

// Remote saliency oracle: posts the saliency prompt and whitespace-splits the
// extractive answer into words. Presence filtering happens in query_saliency.
class HttpSaliencyOracle final : public SaliencyOracle {
 public:
  HttpSaliencyOracle(HttpOracleConfig cfg, PromptTemplate tmpl)
      : cfg_(std::move(cfg)), tmpl_(std::move(tmpl)) {}

  std::vector<std::string> extract(const std::string& text,
                                   const std::string& label_name) const override {
    const std::string prompt = build_saliency_prompt(tmpl_, text, label_name);
    return split_whitespace(detail::http_generate(cfg_, prompt));
  }

  int max_concurrency() const override { return cfg_.concurrency; }

 private:
  HttpOracleConfig cfg_;
  PromptTemplate tmpl_;
};

// Environment variable names for remote endpoints.
inline const char* kEnvClassUrl = "ORACLE_CLASS_URL";
inline const char* kEnvSaliencyUrl = "ORACLE_SALIENCY_URL";
inline const char* kEnvToken = "ORACLE_TOKEN";

inline std::string env_or_empty(const char* name) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string();
}

}  // namespace salcls
