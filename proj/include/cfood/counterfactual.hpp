#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/detail/io.hpp"
#include "cfood/error.hpp"

namespace cfood {

enum class Approach { SoloQag, DuoQag };

inline std::string_view to_string(Approach a) noexcept { return a == Approach::SoloQag ? "solo_qag" : "duo_qag"; }

inline Approach parse_approach(std::string_view s) {
  if (s == "solo" || s == "solo_qag") return Approach::SoloQag;
  if (s == "duo" || s == "duo_qag") return Approach::DuoQag;
  throw PreconditionError("unknown approach '" + std::string(s) + "' (expected solo or duo)");
}

/// raw -> kept | relevance_discarded; relevance_discarded -> rescued |
/// noise_discarded. `unusable` is terminal: every generation attempt failed.
enum class CfStatus { Raw, Kept, RelevanceDiscarded, Rescued, NoiseDiscarded, Unusable };

inline std::string_view to_string(CfStatus s) noexcept {
  switch (s) {
    case CfStatus::Raw: return "raw";
    case CfStatus::Kept: return "kept";
    case CfStatus::RelevanceDiscarded: return "relevance_discarded";
    case CfStatus::Rescued: return "rescued";
    case CfStatus::NoiseDiscarded: return "noise_discarded";
    case CfStatus::Unusable: return "unusable";
  }
  return "raw";
}

inline CfStatus parse_status(std::string_view s) {
  for (auto st : {CfStatus::Raw, CfStatus::Kept, CfStatus::RelevanceDiscarded, CfStatus::Rescued, CfStatus::NoiseDiscarded,
                  CfStatus::Unusable}) {
    if (to_string(st) == s) return st;
  }
  throw ParseError("unknown counterfactual status '" + std::string(s) + "'");
}

inline bool is_allowed_transition(CfStatus from, CfStatus to) noexcept {
  switch (from) {
    case CfStatus::Raw: return to == CfStatus::Kept || to == CfStatus::RelevanceDiscarded;
    case CfStatus::RelevanceDiscarded: return to == CfStatus::Rescued || to == CfStatus::NoiseDiscarded;
    default: return false;
  }
}

/// kept and rescued instances are the usable augmentation data.
inline bool is_usable(CfStatus s) noexcept { return s == CfStatus::Kept || s == CfStatus::Rescued; }

struct Attempt {
  std::uint64_t seed = 0;
  std::string raw_output;
  bool accepted = false;
  friend bool operator==(const Attempt&, const Attempt&) = default;
};

enum class Relevance { True, False, Unparseable };

struct FilterVerdict {
  Relevance relevance = Relevance::Unparseable;
  std::vector<std::string> ensemble_answers;
  int votes_agree = 0;
  CfStatus final_status = CfStatus::Raw;
  friend bool operator==(const FilterVerdict&, const FilterVerdict&) = default;
};

struct CounterfactualInstance {
  std::string id;
  std::string source_id;
  Approach approach = Approach::SoloQag;
  std::string generator_name;
  std::string context;
  std::string question;
  std::string answer;
  CfStatus status = CfStatus::Raw;
  std::vector<Attempt> attempts;
  std::optional<FilterVerdict> verdict;

  void transition(CfStatus to) {
    if (!is_allowed_transition(status, to)) {
      throw PreconditionError("instance '" + id + "': illegal status transition " + std::string(to_string(status)) +
                              " -> " + std::string(to_string(to)));
    }
    status = to;
  }

  friend bool operator==(const CounterfactualInstance&, const CounterfactualInstance&) = default;
};

using CfStore = std::vector<CounterfactualInstance>;

// --- JSONL store ------------------------------------------------------------

inline nlohmann::json to_json(const CounterfactualInstance& cf) {
  using nlohmann::json;
  json attempts = json::array();
  for (const auto& a : cf.attempts) attempts.push_back({{"seed", a.seed}, {"raw_output", a.raw_output}, {"accepted", a.accepted}});
  json j{{"id", cf.id},
         {"source_id", cf.source_id},
         {"approach", to_string(cf.approach)},
         {"generator_name", cf.generator_name},
         {"context", cf.context},
         {"question", cf.question},
         {"answer", cf.answer},
         {"status", to_string(cf.status)},
         {"attempts", std::move(attempts)}};
  if (cf.verdict) {
    const auto& v = *cf.verdict;
    json rel = v.relevance == Relevance::Unparseable ? json("unparseable") : json(v.relevance == Relevance::True);
    j["verdict"] = {{"relevance", rel},
                    {"ensemble_answers", v.ensemble_answers},
                    {"votes_agree", v.votes_agree},
                    {"final_status", to_string(v.final_status)}};
  }
  return j;
}

inline CounterfactualInstance cf_from_json(const nlohmann::json& j, std::size_t line = 0) {
  try {
    CounterfactualInstance cf;
    cf.id = j.at("id").get<std::string>();
    cf.source_id = j.at("source_id").get<std::string>();
    cf.approach = parse_approach(j.at("approach").get<std::string>());
    cf.generator_name = j.at("generator_name").get<std::string>();
    cf.context = j.at("context").get<std::string>();
    cf.question = j.at("question").get<std::string>();
    cf.answer = j.at("answer").get<std::string>();
    cf.status = parse_status(j.at("status").get<std::string>());
    for (const auto& a : j.at("attempts")) {
      cf.attempts.push_back({a.at("seed").get<std::uint64_t>(), a.at("raw_output").get<std::string>(), a.at("accepted").get<bool>()});
    }
    if (cf.attempts.size() > 3) throw ParseError("instance '" + cf.id + "' has more than 3 attempts", line);
    if (j.contains("verdict")) {
      const auto& v = j.at("verdict");
      FilterVerdict fv;
      const auto& rel = v.at("relevance");
      fv.relevance = rel.is_boolean() ? (rel.get<bool>() ? Relevance::True : Relevance::False) : Relevance::Unparseable;
      fv.ensemble_answers = v.at("ensemble_answers").get<std::vector<std::string>>();
      fv.votes_agree = v.at("votes_agree").get<int>();
      fv.final_status = parse_status(v.at("final_status").get<std::string>());
      cf.verdict = std::move(fv);
    }
    return cf;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed counterfactual record: ") + e.what(), line);
  }
}

inline std::string to_jsonl(const CfStore& store) {
  std::string out;
  for (const auto& cf : store) out += to_json(cf).dump() + "\n";
  return out;
}

inline CfStore parse_cf_store(std::string_view content) {
  CfStore store;
  detail::for_each_line(content, [&](std::string_view line, std::size_t lineno) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    store.push_back(cf_from_json(j, lineno));
  });
  return store;
}

inline CfStore load_cf_store(const std::filesystem::path& path) { return parse_cf_store(detail::read_file(path)); }
inline void save_cf_store(const CfStore& store, const std::filesystem::path& path) { detail::write_file(path, to_jsonl(store)); }

}  // namespace cfood
