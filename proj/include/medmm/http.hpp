#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

namespace medmm {

struct HttpRequest {
  std::string url;  // absolute, e.g. https://host/v1/messages
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
  double timeout_seconds = 60.0;
};

struct HttpResponse {
  int status = 0;  // 0 means the request never produced a response
  std::string body;
  std::string error;  // transport-level failure description
};

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const HttpRequest& request) = 0;
};

// cpp-httplib backed transport; https needs OpenSSL at build time.
class HttplibTransport : public Transport {
 public:
  HttpResponse post(const HttpRequest& request) override;
};

// Test double. Serves scripted responses in order, then falls back to the
// responder (if any). Every request is recorded. Thread-safe.
class MockTransport : public Transport {
 public:
  using Responder = std::function<HttpResponse(const HttpRequest&)>;

  MockTransport() = default;
  explicit MockTransport(Responder responder) : responder_(std::move(responder)) {}

  void enqueue(HttpResponse response);
  HttpResponse post(const HttpRequest& request) override;

  std::vector<HttpRequest> requests() const;
  size_t request_count() const;

 private:
  mutable std::mutex mu_;
  std::deque<HttpResponse> scripted_;
  Responder responder_;
  std::vector<HttpRequest> requests_;
};

// Splits "https://host:port/prefix" into ("https://host:port", "/prefix").
std::pair<std::string, std::string> split_base_url(const std::string& url);

}  // namespace medmm
