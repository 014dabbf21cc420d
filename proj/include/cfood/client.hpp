#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "cfood/detail/http.hpp"
#include <json.hpp>

#include "cfood/detail/text.hpp"
#include "cfood/error.hpp"
#include "cfood/protocol.hpp"

namespace cfood {

/// Moves JSON documents to and from a model server. Implementations throw
/// TransportError for connection trouble and ServerError for non-2xx replies.
class Transport {
public:
  virtual ~Transport() = default;
  virtual json post(std::string_view path, const json& body) = 0;
  virtual json get(std::string_view path) = 0;
};

struct HttpOptions {
  std::chrono::milliseconds connect_timeout{5000};
  std::chrono::milliseconds read_timeout{60000};
};

class HttpTransport final : public Transport {
public:
  explicit HttpTransport(std::string base_url, HttpOptions opts = {}) : base_url_(std::move(base_url)), opts_(opts) {
    while (!base_url_.empty() && base_url_.back() == '/') base_url_.pop_back();
    if (base_url_.empty()) throw PreconditionError("empty endpoint URL");
  }

  json post(std::string_view path, const json& body) override {
    auto cli = make_client();
    auto res = cli.Post(std::string(path), body.dump(), "application/json");
    return finish(path, res);
  }

  json get(std::string_view path) override {
    auto cli = make_client();
    auto res = cli.Get(std::string(path));
    return finish(path, res);
  }

  const std::string& base_url() const noexcept { return base_url_; }

private:
  // One connection per call keeps the transport safe to share across threads.
  httplib::Client make_client() const {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(opts_.connect_timeout);
    cli.set_read_timeout(opts_.read_timeout);
    cli.set_write_timeout(opts_.read_timeout);
    cli.set_keep_alive(false);
    return cli;
  }

  json finish(std::string_view path, const httplib::Result& res) const {
    if (!res) {
      const auto err = res.error();
      const std::string msg = std::string(path) + ": " + httplib::to_string(err) + " (" + base_url_ + ")";
      if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout) {
        throw TimeoutError(msg);
      }
      throw TransportError(msg);
    }
    if (res->status < 200 || res->status >= 300) {
      std::string detail = res->body;
      try {
        auto j = json::parse(res->body);
        if (j.is_object() && j.contains("error") && j["error"].is_string()) detail = j["error"].get<std::string>();
      } catch (const json::exception&) {
      }
      throw ServerError(res->status, std::string(path) + ": " + detail);
    }
    try {
      return json::parse(res->body);
    } catch (const json::parse_error&) {
      throw ProtocolError(std::string(path) + ": response body is not JSON");
    }
  }

  std::string base_url_;
  HttpOptions opts_;
};

struct ClientOptions {
  std::ptrdiff_t max_in_flight = 8;
  int retries = 3;
  std::chrono::milliseconds backoff_base{250};
};

/// Typed, validating client for the model-inspection protocol. Shareable
/// across threads; at most `max_in_flight` requests are outstanding.
class ModelClient {
public:
  explicit ModelClient(std::shared_ptr<Transport> transport, ClientOptions opts = {})
      : transport_(std::move(transport)), opts_(opts) {
    if (!transport_) throw PreconditionError("ModelClient: null transport");
    if (opts_.max_in_flight < 1 || opts_.max_in_flight > kMaxInFlight) {
      throw PreconditionError("ModelClient: max_in_flight must be in [1, " + std::to_string(kMaxInFlight) + "]");
    }
    if (opts_.retries < 0) throw PreconditionError("ModelClient: negative retry count");
    slots_ = std::make_unique<std::counting_semaphore<kMaxInFlight>>(opts_.max_in_flight);
  }

  static ModelClient http(const std::string& url, ClientOptions opts = {}, HttpOptions http = {}) {
    return ModelClient(std::make_shared<HttpTransport>(url, http), opts);
  }

  const ClientOptions& options() const noexcept { return opts_; }

  Health health() {
    std::lock_guard lock(health_mu_);
    if (!health_) health_ = protocol::health(with_retries([&] { return transport_->get("/v1/health"); }));
    return *health_;
  }

  std::string generate(std::string_view prompt, const GenerationParams& params) {
    if (params.max_new_tokens < 1) throw PreconditionError("generate: max_new_tokens must be >= 1");
    if (!(params.temperature >= 0.0)) throw PreconditionError("generate: temperature must be >= 0");
    json body = to_json(params);
    body["prompt"] = prompt;
    return protocol::generation(call("/v1/generate", body));
  }

  QAResult answer(std::string_view question, std::string_view context) {
    require_text(question, "answer: question");
    require_text(context, "answer: context");
    return protocol::qa_result(call("/v1/qa", {{"question", question}, {"context", context}}), question, context);
  }

  /// Probability of `fixed_answer` given a possibly masked context. An answer
  /// that no longer occurs in the context has probability 0 by definition.
  double answer_prob(std::string_view question, std::string_view context, std::string_view fixed_answer) {
    require_text(question, "answer_prob: question");
    if (fixed_answer.empty() || context.find(fixed_answer) == std::string_view::npos) return 0.0;
    return protocol::qa_prob(
        call("/v1/qa_prob", {{"question", question}, {"context", context}, {"fixed_answer", fixed_answer}}));
  }

  std::vector<double> embed(std::string_view text) {
    require_text(text, "embed: text");
    const auto dim = static_cast<std::size_t>(health().embed_dim);
    return protocol::embedding(call("/v1/embed", {{"text", text}}), dim);
  }

  double nli_entail(std::string_view premise, std::string_view hypothesis) {
    return protocol::entailment(call("/v1/nli", {{"premise", premise}, {"hypothesis", hypothesis}}));
  }

  AttributionRecord attribute(std::string_view question, std::string_view context, AttributionMethod method) {
    require_text(question, "attribute: question");
    require_text(context, "attribute: context");
    return protocol::attribution(
        call("/v1/attribute", {{"question", question}, {"context", context}, {"method", to_string(method)}}), method,
        question, context);
  }

  HiddenStateMatrix hidden_states(std::string_view question, std::string_view context) {
    require_text(question, "hidden_states: question");
    require_text(context, "hidden_states: context");
    const auto dim = static_cast<std::size_t>(health().hidden_dim);
    return protocol::hidden_states(call("/v1/hidden_states", {{"question", question}, {"context", context}}), question,
                                   context, dim);
  }

  std::vector<std::string> pos_tag(const std::vector<std::string>& tokens) {
    if (tokens.empty()) return {};
    return protocol::tags(call("/v1/tag", {{"tokens", tokens}}), tokens.size());
  }

  std::vector<RetrievalCandidate> retrieve_candidates(std::string_view question, int k) {
    if (k < 1) throw PreconditionError("retrieve_candidates: k must be >= 1");
    require_text(question, "retrieve_candidates: question");
    return protocol::candidates(call("/v1/retrieve", {{"question", question}, {"k", k}}), static_cast<std::size_t>(k));
  }

private:
  static constexpr std::ptrdiff_t kMaxInFlight = 256;

  static void require_text(std::string_view s, const char* what) {
    if (detail::trim(s).empty()) throw PreconditionError(std::string(what) + " must be non-empty");
  }

  json call(std::string_view path, const json& body) {
    return with_retries([&] { return transport_->post(path, body); });
  }

  /// Transport failures and 5xx replies are retried with exponential backoff;
  /// 4xx replies and protocol violations are not.
  template <typename Fn>
  json with_retries(Fn&& fn) {
    slots_->acquire();
    struct Release {
      std::counting_semaphore<kMaxInFlight>& s;
      ~Release() { s.release(); }
    } release{*slots_};
    for (int attempt = 0;; ++attempt) {
      try {
        return fn();
      } catch (const TransportError&) {
        if (attempt >= opts_.retries) throw;
      } catch (const ServerError& e) {
        if (e.status() < 500 || attempt >= opts_.retries) throw;
      }
      std::this_thread::sleep_for(opts_.backoff_base * (1LL << attempt));
    }
  }

  std::shared_ptr<Transport> transport_;
  ClientOptions opts_;
  std::unique_ptr<std::counting_semaphore<kMaxInFlight>> slots_;
  std::mutex health_mu_;
  std::optional<Health> health_;
};

}  // namespace cfood
