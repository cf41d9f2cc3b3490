#include <httplib.h>

#include <thread>

#include "openchamber/syncproto.hpp"

namespace openchamber {

struct HttpTransport::Impl {
  httplib::Client client;
  explicit Impl(const std::string& url) : client(url) {}
};

HttpTransport::HttpTransport(std::string base_url, int timeout_seconds)
    : impl_(std::make_unique<Impl>(base_url)) {
  if (!impl_->client.is_valid()) throw SyncError(SyncErrorCode::BadRequest, "invalid server URL " + base_url);
  impl_->client.set_connection_timeout(timeout_seconds, 0);
  impl_->client.set_read_timeout(timeout_seconds, 0);
  impl_->client.set_write_timeout(timeout_seconds, 0);
}

HttpTransport::~HttpTransport() = default;

WireResponse HttpTransport::send(const WireRequest& request) {
  httplib::Headers headers(request.headers.begin(), request.headers.end());
  httplib::Result result;
  if (request.method == "GET") {
    httplib::Params params(request.query.begin(), request.query.end());
    result = impl_->client.Get(request.path, params, headers);
  } else if (request.method == "POST") {
    result = impl_->client.Post(request.path, headers, request.body, "application/json");
  } else {
    throw SyncError(SyncErrorCode::BadRequest, "unsupported method " + request.method);
  }
  if (!result)
    throw SyncError(SyncErrorCode::NetworkUnavailable,
                    request.method + " " + request.path + ": " + httplib::to_string(result.error()));
  return {result->status, result->body};
}

struct SyncHttpServer::Impl {
  SyncServer& sync;
  httplib::Server http;
  std::thread thread;

  explicit Impl(SyncServer& s) : sync(s) {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      WireRequest wire{req.method, req.path, {}, {}, req.body};
      for (const auto& [k, v] : req.params) wire.query.emplace(k, v);
      for (const auto& [k, v] : req.headers) wire.headers.emplace(k, v);
      WireResponse out = sync.handle(wire);
      res.status = out.status;
      res.set_header(kSyncVersionHeader, std::to_string(kSyncProtocolVersion));
      res.set_content(out.body, "application/json");
    };
    http.Get(".*", handler);
    http.Post(".*", handler);
  }
};

SyncHttpServer::SyncHttpServer(SyncServer& server) : impl_(std::make_unique<Impl>(server)) {}

SyncHttpServer::~SyncHttpServer() { stop(); }

int SyncHttpServer::start(const std::string& host, int port) {
  int bound = port == 0 ? impl_->http.bind_to_any_port(host) : (impl_->http.bind_to_port(host, port) ? port : -1);
  if (bound < 0)
    throw SyncError(SyncErrorCode::BindFailure, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
  return bound;
}

void SyncHttpServer::run(const std::string& host, int port, const std::function<void(int)>& on_bound) {
  int bound = port == 0 ? impl_->http.bind_to_any_port(host) : (impl_->http.bind_to_port(host, port) ? port : -1);
  if (bound < 0)
    throw SyncError(SyncErrorCode::BindFailure, "cannot bind " + host + ":" + std::to_string(port));
  if (on_bound) on_bound(bound);
  impl_->http.listen_after_bind();
}

void SyncHttpServer::stop() {
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace openchamber
