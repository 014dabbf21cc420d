#pragma once

#include <array>
#include <cctype>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/client.hpp"
#include "cfood/corpus.hpp"
#include "cfood/counterfactual.hpp"
#include "cfood/detail/hash.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/detail/text.hpp"
#include "cfood/generator.hpp"
#include "cfood/prompts.hpp"

namespace cfood::filtering {

inline constexpr std::size_t kEnsembleSize = 3;
inline constexpr int kVotesToRescue = 2;

/// Reads the first true/false word after "Context is relevant:" (or anywhere,
/// when the label is missing). Case-insensitive.
inline Relevance parse_relevance(std::string_view output) {
  std::size_t from = 0;
  constexpr std::string_view kLabel = "context is relevant:";
  if (const auto at = detail::ifind(output, kLabel); at != std::string_view::npos) from = at + kLabel.size();
  for (std::size_t i = from; i < output.size();) {
    if (!std::isalpha(static_cast<unsigned char>(output[i]))) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < output.size() && std::isalpha(static_cast<unsigned char>(output[j]))) ++j;
    const auto word = detail::to_lower(output.substr(i, j - i));
    if (word == "true") return Relevance::True;
    if (word == "false") return Relevance::False;
    i = j;
  }
  return Relevance::Unparseable;
}

enum class Agreement { ExactMatch, F1AtLeastHalf };

inline Agreement parse_agreement(std::string_view s) {
  if (s == "em") return Agreement::ExactMatch;
  if (s == "f1") return Agreement::F1AtLeastHalf;
  throw PreconditionError("unknown agreement criterion '" + std::string(s) + "' (expected em or f1)");
}

inline bool agrees(std::string_view generated, std::string_view ensemble_answer, Agreement criterion) {
  const std::vector<std::string> gold{std::string(generated)};
  return criterion == Agreement::ExactMatch ? exact_match(ensemble_answer, gold) : f1_score(ensemble_answer, gold) >= 0.5;
}

struct VoteResult {
  int votes = 0;
  CfStatus status = CfStatus::NoiseDiscarded;
};

/// Round-trip consistency: rescued when at least two of the three ensemble
/// answers agree with the generated answer.
inline VoteResult round_trip_vote(std::string_view generated_answer, std::span<const std::string> ensemble_answers,
                                  Agreement criterion = Agreement::ExactMatch) {
  if (ensemble_answers.size() != kEnsembleSize) {
    throw PreconditionError("round_trip_vote: expected 3 ensemble answers, got " + std::to_string(ensemble_answers.size()));
  }
  VoteResult r;
  for (const auto& a : ensemble_answers) r.votes += agrees(generated_answer, a, criterion) ? 1 : 0;
  r.status = r.votes >= kVotesToRescue ? CfStatus::Rescued : CfStatus::NoiseDiscarded;
  return r;
}

inline Relevance relevance_check(const CounterfactualInstance& cf, ModelClient& client, const PromptTemplate& tmpl,
                                 const GenerationParams& params) {
  if (cf.status != CfStatus::Raw) throw PreconditionError("relevance_check: instance '" + cf.id + "' is not raw");
  const auto prompt = tmpl.render({{"generated_question", cf.question}, {"generated_answer", cf.answer}, {"context", cf.context}});
  return parse_relevance(client.generate(prompt, params));
}

/// The ensemble answers the generated question from the counterfactual
/// context with the answer-generation prompt, once per seed.
inline std::vector<std::string> ensemble_answers(const CounterfactualInstance& cf, const QAExample& source,
                                                 ModelClient& client, const PromptTemplate& answer_tmpl,
                                                 std::span<const std::uint64_t> seeds, const GenerationParams& base) {
  const auto prompt = build_prompt(answer_tmpl, source, cf.context, {{"generated_question", cf.question}});
  std::vector<std::string> out;
  for (auto seed : seeds) {
    auto params = base;
    params.seed = seed;
    out.push_back(generation::parse_generated_answer(client.generate(prompt, params)));
  }
  return out;
}

struct FilterConfig {
  std::array<std::uint64_t, kEnsembleSize> ensemble_seeds{101, 202, 303};
  std::uint64_t relevance_seed = 0;
  Agreement agreement = Agreement::ExactMatch;
  int max_new_tokens = 50;
  double temperature = 0.7;
  std::size_t workers = 1;
};

struct FilterSummary {
  std::size_t kept = 0;
  std::size_t relevance_discarded = 0;
  std::size_t rescued = 0;
  std::size_t noise_discarded = 0;
  std::size_t unparseable_relevance = 0;

  std::size_t usable() const noexcept { return kept + rescued; }

  nlohmann::json to_json() const {
    return {{"kept", kept},
            {"relevance_discarded", relevance_discarded},
            {"rescued", rescued},
            {"noise_discarded", noise_discarded},
            {"unparseable_relevance", unparseable_relevance}};
  }
};

/// Decision table for one instance given its relevance verdict and, when
/// relevance failed, the ensemble answers.
inline FilterVerdict decide(const CounterfactualInstance& cf, Relevance relevance,
                            const std::vector<std::string>& ensemble, Agreement agreement) {
  FilterVerdict v;
  v.relevance = relevance;
  if (relevance == Relevance::True) {
    v.final_status = CfStatus::Kept;
    return v;
  }
  const auto vote = round_trip_vote(cf.answer, ensemble, agreement);
  v.ensemble_answers = ensemble;
  v.votes_agree = vote.votes;
  v.final_status = vote.status;
  return v;
}

struct FilterResult {
  CfStore store;
  FilterSummary summary;
};

/// Relevance filtering, then round-trip rescue of every discard. Only status
/// and verdict change; text fields are left exactly as generated.
inline FilterResult apply_filters(const CfStore& input, const Dataset& dataset, ModelClient& client,
                                  const TemplateSet& templates, const FilterConfig& config) {
  FilterResult result{input, {}};
  for (const auto& cf : input) {
    if (cf.status != CfStatus::Raw && cf.status != CfStatus::Unusable) {
      throw PreconditionError("apply_filters: instance '" + cf.id + "' already filtered (" + std::string(to_string(cf.status)) + ")");
    }
  }
  auto& store = result.store;
  detail::parallel_for(store.size(), config.workers, [&](std::size_t i) {
    auto& cf = store[i];
    if (cf.status == CfStatus::Unusable) return;
    try {
      const GenerationParams params{config.max_new_tokens, config.temperature, detail::derive_seed(config.relevance_seed, cf.id, 0)};
      const auto relevance = relevance_check(cf, client, templates[TemplateName::RelevanceFilter], params);
      std::vector<std::string> ensemble;
      if (relevance != Relevance::True) {
        const auto* src = dataset.find(cf.source_id);
        if (!src) throw PreconditionError("source example not found");
        ensemble = ensemble_answers(cf, *src, client, templates[TemplateName::DuoAnswer], config.ensemble_seeds, params);
      }
      auto verdict = decide(cf, relevance, ensemble, config.agreement);
      if (relevance == Relevance::True) {
        cf.transition(CfStatus::Kept);
      } else {
        cf.transition(CfStatus::RelevanceDiscarded);
        cf.transition(verdict.final_status);
      }
      cf.verdict = std::move(verdict);
    } catch (const Error& e) {
      throw Error("filtering instance '" + cf.id + "': " + e.what());
    }
  });
  for (const auto& cf : store) {
    if (!cf.verdict) continue;
    if (cf.verdict->relevance == Relevance::Unparseable) ++result.summary.unparseable_relevance;
    switch (cf.status) {
      case CfStatus::Kept: ++result.summary.kept; break;
      case CfStatus::Rescued: ++result.summary.rescued; ++result.summary.relevance_discarded; break;
      case CfStatus::NoiseDiscarded: ++result.summary.noise_discarded; ++result.summary.relevance_discarded; break;
      default: break;
    }
  }
  return result;
}

}  // namespace cfood::filtering
