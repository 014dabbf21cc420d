#pragma once

// Loopback HTTP server around MockBackend, for tests and local runs.

#include <atomic>
#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>

#include "cfood/detail/http.hpp"
#include <json.hpp>

#include "cfood/testing/mock_backend.hpp"

namespace cfood::testing {

class FixtureServer {
public:
  /// Called before the backend; returning a reply short-circuits it.
  using Hook = std::function<std::optional<Reply>(const std::string& path, const nlohmann::json& body)>;

  explicit FixtureServer(std::shared_ptr<const MockBackend> backend, std::string host = "127.0.0.1", int port = 0)
      : backend_(std::move(backend)), host_(std::move(host)) {
    server_.Get("/v1/health", [this](const httplib::Request& req, httplib::Response& res) { serve(req, res, true); });
    server_.Post(R"(/v1/.*)", [this](const httplib::Request& req, httplib::Response& res) { serve(req, res, false); });
    port_ = port == 0 ? server_.bind_to_any_port(host_) : (server_.bind_to_port(host_, port) ? port : -1);
    if (port_ < 0) throw std::runtime_error("fixture server: cannot bind " + host_ + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  FixtureServer(const FixtureServer&) = delete;
  FixtureServer& operator=(const FixtureServer&) = delete;
  ~FixtureServer() { stop(); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::string url() const { return "http://" + host_ + ":" + std::to_string(port_); }
  std::size_t requests() const noexcept { return requests_; }

  void set_hook(Hook hook) {
    std::lock_guard lock(mu_);
    hook_ = std::move(hook);
  }

  /// Blocks the calling thread of a server (for signal-driven shutdown in tools).
  void wait() {
    if (thread_.joinable()) thread_.join();
  }

private:
  void serve(const httplib::Request& req, httplib::Response& res, bool is_get) {
    ++requests_;
    Reply reply;
    nlohmann::json body;
    if (!is_get) {
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::parse_error& e) {
        write(res, {400, {{"error", std::string("invalid JSON: ") + e.what()}}});
        return;
      }
    }
    Hook hook;
    {
      std::lock_guard lock(mu_);
      hook = hook_;
    }
    if (hook) {
      if (auto r = hook(req.path, body)) {
        write(res, *r);
        return;
      }
    }
    write(res, is_get ? backend_->handle_get(req.path) : backend_->handle_post(req.path, body));
  }

  static void write(httplib::Response& res, const Reply& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  }

  std::shared_ptr<const MockBackend> backend_;
  std::string host_;
  int port_ = -1;
  httplib::Server server_;
  std::thread thread_;
  std::mutex mu_;
  Hook hook_;
  std::atomic<std::size_t> requests_{0};
};

}  // namespace cfood::testing
