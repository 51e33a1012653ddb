#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "httplib.h"

#include "medmm/http.hpp"

#include <cmath>

namespace medmm {

std::pair<std::string, std::string> split_base_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  const size_t host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, ""};
  return {url.substr(0, path_start), url.substr(path_start)};
}

HttpResponse HttplibTransport::post(const HttpRequest& request) {
  const auto [origin, path] = split_base_url(request.url);
  httplib::Client client(origin);
  const auto secs = static_cast<time_t>(std::ceil(request.timeout_seconds));
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);

  httplib::Headers headers;
  std::string content_type = "application/json";
  for (const auto& [k, v] : request.headers) {
    if (k == "content-type") {
      content_type = v;
    } else {
      headers.emplace(k, v);
    }
  }
  auto result = client.Post(path.empty() ? "/" : path, headers, request.body, content_type);
  HttpResponse out;
  if (!result) {
    out.error = httplib::to_string(result.error());
    return out;
  }
  out.status = result->status;
  out.body = result->body;
  return out;
}

void MockTransport::enqueue(HttpResponse response) {
  std::lock_guard lock(mu_);
  scripted_.push_back(std::move(response));
}

HttpResponse MockTransport::post(const HttpRequest& request) {
  std::unique_lock lock(mu_);
  requests_.push_back(request);
  if (!scripted_.empty()) {
    HttpResponse r = std::move(scripted_.front());
    scripted_.pop_front();
    return r;
  }
  lock.unlock();
  if (responder_) return responder_(request);
  return HttpResponse{0, "", "mock transport has no response queued"};
}

std::vector<HttpRequest> MockTransport::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

size_t MockTransport::request_count() const {
  std::lock_guard lock(mu_);
  return requests_.size();
}

}  // namespace medmm
