#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cfood/detail/utf8.hpp"
#include "cfood/error.hpp"

// Wire types of the model-inspection protocol (HTTP+JSON, snake_case).
// Parsing validates every response; anything off-schema is a ProtocolError.
namespace cfood {

using nlohmann::json;

enum class Segment { Question, Context };

inline std::string_view to_string(Segment s) noexcept { return s == Segment::Question ? "question" : "context"; }

/// One model token. Offsets are code points into the token's own segment text.
struct Token {
  std::string text;
  Segment segment = Segment::Context;
  std::string pos_tag;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  friend bool operator==(const Token&, const Token&) = default;
};

struct GenerationParams {
  int max_new_tokens = 50;
  double temperature = 0.7;
  std::uint64_t seed = 0;
};

struct QAResult {
  std::string answer;
  std::size_t char_start = 0;
  std::size_t char_end = 0;
  double prob = 0.0;
  std::vector<Token> tokens;
};

enum class AttributionMethod { Attention, ScaledAttention, InputXGrad, IntegratedGradients, Shap };

inline constexpr std::array<AttributionMethod, 5> kAllMethods{
    AttributionMethod::Attention, AttributionMethod::ScaledAttention, AttributionMethod::InputXGrad,
    AttributionMethod::IntegratedGradients, AttributionMethod::Shap};

inline std::string_view to_string(AttributionMethod m) noexcept {
  switch (m) {
    case AttributionMethod::Attention: return "attention";
    case AttributionMethod::ScaledAttention: return "scaled_attention";
    case AttributionMethod::InputXGrad: return "input_x_grad";
    case AttributionMethod::IntegratedGradients: return "integrated_gradients";
    case AttributionMethod::Shap: return "shap";
  }
  return "attention";
}

inline AttributionMethod parse_method(std::string_view s) {
  for (auto m : kAllMethods) {
    if (to_string(m) == s) return m;
  }
  throw PreconditionError("unknown attribution method '" + std::string(s) + "'");
}

struct AttributionRecord {
  AttributionMethod method = AttributionMethod::Attention;
  std::vector<Token> tokens;
  std::vector<double> importance;
};

struct HiddenStateMatrix {
  Eigen::MatrixXd values;  // rows = tokens, cols = hidden width
  std::vector<Token> tokens;
  Eigen::Index rows() const noexcept { return values.rows(); }
  Eigen::Index cols() const noexcept { return values.cols(); }
};

struct Health {
  std::string mode;
  std::string model_id;
  int embed_dim = 0;
  int hidden_dim = 0;
};

struct RetrievalCandidate {
  std::string context;
  std::string generated_question;
  friend bool operator==(const RetrievalCandidate&, const RetrievalCandidate&) = default;
};

// --- JSON encoding ------------------------------------------------------------

inline json to_json(const Token& t) {
  json j{{"text", t.text}, {"segment", to_string(t.segment)}, {"char_start", t.char_start}, {"char_end", t.char_end}};
  if (!t.pos_tag.empty()) j["pos_tag"] = t.pos_tag;
  return j;
}

inline json to_json(const std::vector<Token>& tokens) {
  json arr = json::array();
  for (const auto& t : tokens) arr.push_back(to_json(t));
  return arr;
}

inline json to_json(const QAResult& r) {
  return {{"answer", r.answer}, {"char_start", r.char_start}, {"char_end", r.char_end}, {"prob", r.prob}, {"tokens", to_json(r.tokens)}};
}

inline json to_json(const AttributionRecord& a) {
  return {{"method", to_string(a.method)}, {"tokens", to_json(a.tokens)}, {"importance", a.importance}};
}

inline json to_json(const GenerationParams& p) {
  return {{"max_new_tokens", p.max_new_tokens}, {"temperature", p.temperature}, {"seed", p.seed}};
}

// --- validating decoders -----------------------------------------------------

namespace protocol {

inline const json& field(const json& obj, std::string_view endpoint, const char* key) {
  if (!obj.is_object()) throw ProtocolError(std::string(endpoint) + ": response is not a JSON object");
  auto it = obj.find(key);
  if (it == obj.end()) throw ProtocolError(std::string(endpoint) + ": missing field '" + key + "'");
  return *it;
}

inline std::string string_field(const json& obj, std::string_view endpoint, const char* key) {
  const auto& v = field(obj, endpoint, key);
  if (!v.is_string()) throw ProtocolError(std::string(endpoint) + ": field '" + key + "' is not a string");
  return v.get<std::string>();
}

inline double finite_number(const json& v, std::string_view endpoint, const char* what) {
  if (!v.is_number()) throw ProtocolError(std::string(endpoint) + ": " + what + " is not a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ProtocolError(std::string(endpoint) + ": " + what + " is not finite");
  return d;
}

inline double probability(const json& obj, std::string_view endpoint, const char* key) {
  const double p = finite_number(field(obj, endpoint, key), endpoint, key);
  if (p < 0.0 || p > 1.0) throw ProtocolError(std::string(endpoint) + ": " + key + " = " + std::to_string(p) + " outside [0, 1]");
  return p;
}

inline std::size_t count_field(const json& obj, std::string_view endpoint, const char* key) {
  const auto& v = field(obj, endpoint, key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ProtocolError(std::string(endpoint) + ": field '" + key + "' is not a non-negative integer");
  }
  return static_cast<std::size_t>(v.get<long long>());
}

/// Tokens must be well-formed and their offsets must slice the segment text
/// to the token text.
inline std::vector<Token> tokens(const json& obj, std::string_view endpoint, std::string_view question,
                                 std::string_view context, bool need_pos) {
  const auto& arr = field(obj, endpoint, "tokens");
  if (!arr.is_array()) throw ProtocolError(std::string(endpoint) + ": 'tokens' is not an array");
  const auto q_off = detail::codepoint_offsets(question);
  const auto c_off = detail::codepoint_offsets(context);
  std::vector<Token> out;
  out.reserve(arr.size());
  for (const auto& t : arr) {
    Token tok;
    tok.text = string_field(t, endpoint, "text");
    const auto seg = string_field(t, endpoint, "segment");
    if (seg == "question") {
      tok.segment = Segment::Question;
    } else if (seg == "context") {
      tok.segment = Segment::Context;
    } else {
      throw ProtocolError(std::string(endpoint) + ": unknown segment '" + seg + "'");
    }
    if (t.contains("pos_tag")) {
      if (!t.at("pos_tag").is_string()) throw ProtocolError(std::string(endpoint) + ": pos_tag is not a string");
      tok.pos_tag = t.at("pos_tag").get<std::string>();
    } else if (need_pos) {
      throw ProtocolError(std::string(endpoint) + ": token without pos_tag");
    }
    tok.char_start = count_field(t, endpoint, "char_start");
    tok.char_end = count_field(t, endpoint, "char_end");
    const auto& offs = tok.segment == Segment::Question ? q_off : c_off;
    const std::string_view text = tok.segment == Segment::Question ? question : context;
    if (tok.char_start >= tok.char_end || tok.char_end >= offs.size()) {
      throw ProtocolError(std::string(endpoint) + ": token offsets outside segment");
    }
    if (text.substr(offs[tok.char_start], offs[tok.char_end] - offs[tok.char_start]) != tok.text) {
      throw ProtocolError(std::string(endpoint) + ": token '" + tok.text + "' does not match its offsets");
    }
    out.push_back(std::move(tok));
  }
  return out;
}

inline std::string generation(const json& obj) { return string_field(obj, "/v1/generate", "text"); }

inline QAResult qa_result(const json& obj, std::string_view question, std::string_view context) {
  constexpr std::string_view ep = "/v1/qa";
  QAResult r;
  r.answer = string_field(obj, ep, "answer");
  r.char_start = count_field(obj, ep, "char_start");
  r.char_end = count_field(obj, ep, "char_end");
  r.prob = probability(obj, ep, "prob");
  const std::size_t n = detail::codepoint_length(context);
  if (r.char_start > r.char_end || r.char_end > n || detail::utf8_slice(context, r.char_start, r.char_end) != r.answer) {
    throw ProtocolError("/v1/qa: answer is not the context span [char_start, char_end)");
  }
  r.tokens = tokens(obj, ep, question, context, false);
  return r;
}

inline double qa_prob(const json& obj) { return probability(obj, "/v1/qa_prob", "prob"); }

inline std::vector<double> embedding(const json& obj, std::size_t expected_dim) {
  constexpr std::string_view ep = "/v1/embed";
  const auto& arr = field(obj, ep, "vector");
  if (!arr.is_array() || arr.empty()) throw ProtocolError("/v1/embed: 'vector' is not a non-empty array");
  std::vector<double> v;
  v.reserve(arr.size());
  for (const auto& x : arr) v.push_back(finite_number(x, ep, "vector entry"));
  if (expected_dim != 0 && v.size() != expected_dim) {
    throw ProtocolError("/v1/embed: dimension " + std::to_string(v.size()) + " != advertised " + std::to_string(expected_dim));
  }
  return v;
}

inline double entailment(const json& obj) { return probability(obj, "/v1/nli", "entailment"); }

inline AttributionRecord attribution(const json& obj, AttributionMethod expected, std::string_view question,
                                     std::string_view context) {
  constexpr std::string_view ep = "/v1/attribute";
  AttributionRecord rec;
  const auto method = string_field(obj, ep, "method");
  if (method != to_string(expected)) throw ProtocolError("/v1/attribute: method '" + method + "' was not requested");
  rec.method = expected;
  rec.tokens = tokens(obj, ep, question, context, false);
  const auto& imp = field(obj, ep, "importance");
  if (!imp.is_array()) throw ProtocolError("/v1/attribute: 'importance' is not an array");
  for (const auto& x : imp) rec.importance.push_back(finite_number(x, ep, "importance"));
  if (rec.importance.size() != rec.tokens.size()) {
    throw ProtocolError("/v1/attribute: " + std::to_string(rec.importance.size()) + " importances for " +
                        std::to_string(rec.tokens.size()) + " tokens");
  }
  return rec;
}

inline HiddenStateMatrix hidden_states(const json& obj, std::string_view question, std::string_view context,
                                       std::size_t expected_dim) {
  constexpr std::string_view ep = "/v1/hidden_states";
  const auto rows = count_field(obj, ep, "rows");
  const auto cols = count_field(obj, ep, "cols");
  if (rows < 1 || cols < 1) throw ProtocolError("/v1/hidden_states: empty matrix");
  if (expected_dim != 0 && cols != expected_dim) throw ProtocolError("/v1/hidden_states: width differs from advertised hidden_dim");
  const auto& vals = field(obj, ep, "values");
  if (!vals.is_array() || vals.size() != rows) throw ProtocolError("/v1/hidden_states: 'values' row count != rows");
  HiddenStateMatrix m;
  m.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (!vals[r].is_array() || vals[r].size() != cols) throw ProtocolError("/v1/hidden_states: ragged row");
    for (std::size_t c = 0; c < cols; ++c) {
      m.values(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = finite_number(vals[r][c], ep, "hidden value");
    }
  }
  m.tokens = tokens(obj, ep, question, context, false);
  if (m.tokens.size() != rows) throw ProtocolError("/v1/hidden_states: token count != rows");
  return m;
}

inline std::vector<std::string> tags(const json& obj, std::size_t expected) {
  const auto& arr = field(obj, "/v1/tag", "tags");
  if (!arr.is_array() || arr.size() != expected) throw ProtocolError("/v1/tag: tag count differs from token count");
  std::vector<std::string> out;
  for (const auto& t : arr) {
    if (!t.is_string() || t.get<std::string>().empty()) throw ProtocolError("/v1/tag: tag is not a non-empty string");
    out.push_back(t.get<std::string>());
  }
  return out;
}

inline std::vector<RetrievalCandidate> candidates(const json& obj, std::size_t k) {
  const auto& arr = field(obj, "/v1/retrieve", "candidates");
  if (!arr.is_array() || arr.empty() || arr.size() > k) {
    throw ProtocolError("/v1/retrieve: expected between 1 and " + std::to_string(k) + " candidates");
  }
  std::vector<RetrievalCandidate> out;
  for (const auto& c : arr) {
    out.push_back({string_field(c, "/v1/retrieve", "context"), string_field(c, "/v1/retrieve", "generated_question")});
  }
  return out;
}

inline Health health(const json& obj) {
  constexpr std::string_view ep = "/v1/health";
  Health h;
  h.mode = string_field(obj, ep, "mode");
  if (h.mode != "mock" && h.mode != "real") throw ProtocolError("/v1/health: mode must be mock or real");
  h.model_id = string_field(obj, ep, "model_id");
  h.embed_dim = static_cast<int>(count_field(obj, ep, "embed_dim"));
  h.hidden_dim = static_cast<int>(count_field(obj, ep, "hidden_dim"));
  return h;
}

}  // namespace protocol
}  // namespace cfood
