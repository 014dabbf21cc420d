#include <gtest/gtest.h>

#include <atomic>

#include "cfood/client.hpp"
#include "cfood/testing/fixture_server.hpp"
#include "cfood/testing/mock_backend.hpp"

using namespace cfood;
using nlohmann::json;
using cfood::testing::FixtureServer;
using cfood::testing::MockBackend;
using cfood::testing::Reply;

namespace {

ClientOptions fast_retries(int retries = 3) {
  ClientOptions o;
  o.retries = retries;
  o.backoff_base = std::chrono::milliseconds(1);
  o.max_in_flight = 4;
  return o;
}

std::shared_ptr<const MockBackend> backend() {
  return std::make_shared<const MockBackend>(std::vector<std::string>{"Rome is the capital of Italy.", "Paris lies on the Seine."});
}

json qa_reply() {
  return {{"answer", "Rome"},
          {"char_start", 0},
          {"char_end", 4},
          {"prob", 0.5},
          {"tokens", json::array({{{"text", "Rome"}, {"segment", "context"}, {"char_start", 0}, {"char_end", 4}}})}};
}

}  // namespace

// --- decoders -----------------------------------------------------------------

TEST(Decoders, QaResultRoundTrip) {
  const auto r = protocol::qa_result(qa_reply(), "Which city?", "Rome is old.");
  EXPECT_EQ(r.answer, "Rome");
  EXPECT_EQ(r.tokens.size(), 1u);
  const auto back = protocol::qa_result(to_json(r), "Which city?", "Rome is old.");
  EXPECT_EQ(back.tokens, r.tokens);
}

TEST(Decoders, QaResultViolations) {
  auto j = qa_reply();
  j["prob"] = 1.5;
  EXPECT_THROW(protocol::qa_result(j, "q?", "Rome is old."), ProtocolError);
  j = qa_reply();
  j["char_end"] = 3;  // "Rom" != answer
  EXPECT_THROW(protocol::qa_result(j, "q?", "Rome is old."), ProtocolError);
  j = qa_reply();
  j["tokens"][0]["char_end"] = 5;  // token text no longer matches
  EXPECT_THROW(protocol::qa_result(j, "q?", "Rome is old."), ProtocolError);
  j = qa_reply();
  j["tokens"][0]["segment"] = "title";
  EXPECT_THROW(protocol::qa_result(j, "q?", "Rome is old."), ProtocolError);
  j = qa_reply();
  j.erase("answer");
  EXPECT_THROW(protocol::qa_result(j, "q?", "Rome is old."), ProtocolError);
  EXPECT_THROW(protocol::qa_result(json::array(), "q?", "Rome is old."), ProtocolError);
}

TEST(Decoders, OffsetsAreCodePoints) {
  json j{{"answer", "Zürich"},
         {"char_start", 3},
         {"char_end", 9},
         {"prob", 0.3},
         {"tokens", json::array({{{"text", "Zürich"}, {"segment", "context"}, {"char_start", 3}, {"char_end", 9}}})}};
  EXPECT_NO_THROW(protocol::qa_result(j, "Where?", "In Zürich."));
}

TEST(Decoders, AttributionAndHiddenStates) {
  const json toks = json::array({{{"text", "Who"}, {"segment", "question"}, {"char_start", 0}, {"char_end", 3}},
                                 {{"text", "Ann"}, {"segment", "context"}, {"char_start", 0}, {"char_end", 3}}});
  json a{{"method", "shap"}, {"tokens", toks}, {"importance", {0.1, 0.9}}};
  EXPECT_NO_THROW(protocol::attribution(a, AttributionMethod::Shap, "Who?", "Ann."));
  EXPECT_THROW(protocol::attribution(a, AttributionMethod::Attention, "Who?", "Ann."), ProtocolError);
  a["importance"] = {0.1};
  EXPECT_THROW(protocol::attribution(a, AttributionMethod::Shap, "Who?", "Ann."), ProtocolError);
  a["importance"] = {0.1, "x"};
  EXPECT_THROW(protocol::attribution(a, AttributionMethod::Shap, "Who?", "Ann."), ProtocolError);

  json h{{"rows", 2}, {"cols", 2}, {"values", {{1, 2}, {3, 4}}}, {"tokens", toks}};
  EXPECT_EQ(protocol::hidden_states(h, "Who?", "Ann.", 2).values(1, 0), 3.0);
  EXPECT_THROW(protocol::hidden_states(h, "Who?", "Ann.", 3), ProtocolError);
  h["values"] = {{1, 2}, {3}};
  EXPECT_THROW(protocol::hidden_states(h, "Who?", "Ann.", 2), ProtocolError);
}

TEST(Decoders, SmallEndpoints) {
  EXPECT_THROW(protocol::embedding({{"vector", {1.0, 2.0}}}, 3), ProtocolError);
  EXPECT_THROW(protocol::embedding({{"vector", json::array()}}, 0), ProtocolError);
  EXPECT_THROW(protocol::tags({{"tags", {"NN"}}}, 2), ProtocolError);
  EXPECT_THROW(protocol::candidates({{"candidates", json::array()}}, 3), ProtocolError);
  EXPECT_THROW(protocol::health({{"mode", "prod"}, {"model_id", "x"}, {"embed_dim", 1}, {"hidden_dim", 1}}), ProtocolError);
  EXPECT_THROW(protocol::entailment({{"entailment", -0.1}}), ProtocolError);
  EXPECT_EQ(protocol::generation({{"text", "hi"}}), "hi");
}

// --- mock backend rules ---------------------------------------------------------------

TEST(MockBackend, Tokenizer) {
  const auto t = cfood::testing::tokenize("It's São Paulo, [MASK]!");
  std::vector<std::string> texts;
  for (const auto& x : t) texts.push_back(x.text);
  EXPECT_EQ(texts, (std::vector<std::string>{"It's", "São", "Paulo", ",", "[MASK]", "!"}));
  EXPECT_EQ(t[2].start, 9u);  // code points
  EXPECT_TRUE(t[4].mask);
}

TEST(MockBackend, Tagger) {
  EXPECT_EQ(cfood::testing::tag_tokens({"The", "dog", "runs", "quickly", "in", "1999", "Paris", "walked", ";", "@"}),
            (std::vector<std::string>{"DT", "NN", "VBZ", "RB", "IN", "CD", "NNP", "VBD", ":", "SYM"}));
  EXPECT_EQ(cfood::testing::tag_tokens({"cats", "dogs"}), (std::vector<std::string>{"NNS", "NNS"}));
}

TEST(MockBackend, ReaderPicksFirstSalientRun) {
  auto client = cfood::testing::mock_client();
  const auto r = client.answer("Who designed the engine?", "The engine was designed by Charles Babbage in London.");
  EXPECT_EQ(r.answer, "Charles Babbage");
  // "designed" and "engine" fall within the window: h = 2/2.
  EXPECT_NEAR(r.prob, 0.95, 1e-12);
  EXPECT_NEAR(client.answer_prob("Who designed the engine?", "The engine was designed by Charles Babbage.", "London"), 0.0, 0.0);
}

TEST(MockBackend, ErrorStatuses) {
  const MockBackend b;
  EXPECT_EQ(b.handle_post("/v1/nope", json::object()).status, 404);
  EXPECT_EQ(b.handle_post("/v1/qa", {{"question", ""}, {"context", "x"}}).status, 400);
  EXPECT_EQ(b.handle_post("/v1/attribute", {{"question", "q"}, {"context", "x"}, {"method", "lime"}}).status, 400);
  EXPECT_EQ(b.handle_post("/v1/retrieve", {{"question", "q"}, {"k", 2}}).status, 400);  // empty corpus
  EXPECT_EQ(b.handle_get("/v1/health").status, 200);
}

TEST(MockBackend, GenerationIsAPureFunction) {
  const MockBackend b;
  const std::string prompt = "Context: Ann met Bob Smith today.\nQuestion:";
  for (std::uint64_t seed = 0; seed < 20; ++seed) EXPECT_EQ(b.generate(prompt, 50, seed), b.generate(prompt, 50, seed));
  EXPECT_EQ(b.generate("Context: x\nSomething else", 50, 1), "I don't know");
  EXPECT_EQ(b.generate("Context: Ann Lee met Bob.\nQuestion: Which name is mentioned right before met?\nAnswer:", 50, 2), "Ann Lee");
}

// --- client over HTTP ------------------------------------------------------------------

TEST(HttpClient, FullProtocolAgainstFixtureServer) {
  FixtureServer server(backend());
  auto client = ModelClient::http(server.url(), fast_retries());
  const auto h = client.health();
  EXPECT_EQ(h.mode, "mock");
  EXPECT_EQ(h.embed_dim, cfood::testing::kEmbedDim);
  const auto r = client.answer("What is the capital?", "Rome is the capital of Italy.");
  EXPECT_EQ(r.answer, "Rome");
  EXPECT_EQ(client.embed("Rome").size(), static_cast<std::size_t>(cfood::testing::kEmbedDim));
  EXPECT_GE(client.nli_entail("Rome is big", "Rome"), 0.99);
  const auto a = client.attribute("What is the capital?", "Rome is the capital of Italy.", AttributionMethod::IntegratedGradients);
  EXPECT_EQ(a.tokens.size(), a.importance.size());
  const auto hs = client.hidden_states("What is the capital?", "Rome is the capital of Italy.");
  EXPECT_EQ(hs.cols(), cfood::testing::kHiddenDim);
  EXPECT_EQ(client.pos_tag({"Rome", "is"}), (std::vector<std::string>{"NNP", "VBZ"}));
  const auto c = client.retrieve_candidates("Where does the Seine flow?", 1);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].context, "Paris lies on the Seine.");
  EXPECT_EQ(c[0].generated_question, "What is known about Paris?");
  EXPECT_EQ(client.generate("Context: Rome is old.\nSay something", {10, 0.7, 3}), "I don't know");
}

TEST(HttpClient, RetriesServerErrors) {
  FixtureServer server(backend());
  std::atomic<int> failures{2};
  server.set_hook([&](const std::string&, const json&) -> std::optional<Reply> {
    if (failures-- > 0) return Reply{503, {{"error", "warming up"}}};
    return std::nullopt;
  });
  auto client = ModelClient::http(server.url(), fast_retries(3));
  EXPECT_EQ(client.answer("Which city?", "Rome is old.").answer, "Rome");
  EXPECT_EQ(server.requests(), 3u);
}

TEST(HttpClient, GivesUpAfterRetryBudget) {
  FixtureServer server(backend());
  server.set_hook([](const std::string&, const json&) -> std::optional<Reply> { return Reply{500, {{"error", "boom"}}}; });
  auto client = ModelClient::http(server.url(), fast_retries(2));
  try {
    client.answer("Which city?", "Rome is old.");
    FAIL();
  } catch (const ServerError& e) {
    EXPECT_EQ(e.status(), 500);
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
  EXPECT_EQ(server.requests(), 3u);
}

TEST(HttpClient, ClientErrorsAreNotRetried) {
  FixtureServer server(backend());
  auto client = ModelClient::http(server.url(), fast_retries(3));
  server.set_hook([](const std::string&, const json&) -> std::optional<Reply> { return Reply{422, {{"error", "bad"}}}; });
  try {
    client.answer("Which city?", "Rome is old.");
    FAIL();
  } catch (const ServerError& e) {
    EXPECT_EQ(e.status(), 422);
  }
  EXPECT_EQ(server.requests(), 1u);
}

TEST(HttpClient, MalformedReplyIsProtocolError) {
  FixtureServer server(backend());
  server.set_hook([](const std::string& path, const json&) -> std::optional<Reply> {
    if (path == "/v1/qa") return Reply{200, {{"answer", "Nope"}, {"char_start", 0}, {"char_end", 4}, {"prob", 0.5}, {"tokens", json::array()}}};
    return std::nullopt;
  });
  auto client = ModelClient::http(server.url(), fast_retries());
  EXPECT_THROW(client.answer("Which city?", "Rome is old."), ProtocolError);
  EXPECT_EQ(server.requests(), 1u);
}

TEST(HttpClient, UnreachableServerIsTransportError) {
  int port = 0;
  {
    FixtureServer probe(backend());
    port = probe.port();
  }
  HttpOptions h;
  h.connect_timeout = std::chrono::milliseconds(200);
  auto client = ModelClient::http("http://127.0.0.1:" + std::to_string(port), fast_retries(1), h);
  EXPECT_THROW(client.health(), TransportError);
}

TEST(HttpClient, AnswerProbShortCircuitsWhenAnswerGone) {
  FixtureServer server(backend());
  auto client = ModelClient::http(server.url(), fast_retries());
  EXPECT_EQ(client.answer_prob("Which city?", "[MASK] is old.", "Rome"), 0.0);
  EXPECT_EQ(server.requests(), 0u);
  EXPECT_GT(client.answer_prob("Which city?", "Rome is old.", "Rome"), 0.0);
  EXPECT_EQ(server.requests(), 1u);
}

TEST(HttpClient, PreconditionsCheckedLocally) {
  auto client = cfood::testing::mock_client();
  EXPECT_THROW(client.answer(" ", "ctx"), PreconditionError);
  EXPECT_THROW(client.generate("p", {0, 0.7, 1}), PreconditionError);
  EXPECT_THROW(client.retrieve_candidates("q", 0), PreconditionError);
  ClientOptions bad;
  bad.max_in_flight = 0;
  EXPECT_THROW(ModelClient(std::make_shared<cfood::testing::MockTransport>(backend()), bad), PreconditionError);
}

TEST(FixtureServer, RawWireErrors) {
  FixtureServer server(backend());
  httplib::Client cli(server.url());
  auto bad = cli.Post("/v1/qa", "{not json", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  EXPECT_TRUE(json::parse(bad->body).contains("error"));
  auto unknown = cli.Post("/v1/unknown", "{}", "application/json");
  ASSERT_TRUE(unknown);
  EXPECT_EQ(unknown->status, 404);
  auto missing = cli.Post("/v1/embed", R"({"txt":"a"})", "application/json");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 400);
}
