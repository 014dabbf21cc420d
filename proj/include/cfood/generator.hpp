#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfood/client.hpp"
#include "cfood/corpus.hpp"
#include "cfood/counterfactual.hpp"
#include "cfood/detail/hash.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/detail/text.hpp"
#include "cfood/diversity.hpp"
#include "cfood/prompts.hpp"

namespace cfood::generation {

inline constexpr std::size_t kMaxAttempts = 3;
inline constexpr std::size_t kMinQuestionTokens = 3;
inline constexpr std::string_view kRefusal = "I don't know";

/// Index of the candidate whose generated question is closest (edit
/// distance) to the original; ties go to the lowest index.
inline std::size_t select_context(std::string_view original_question, std::span<const RetrievalCandidate> candidates) {
  if (candidates.empty()) throw PreconditionError("select_context: no candidates");
  std::size_t best = 0;
  std::size_t best_dist = diversity::levenshtein(original_question, candidates[0].generated_question);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto d = diversity::levenshtein(original_question, candidates[i].generated_question);
    if (d < best_dist) {
      best = i;
      best_dist = d;
    }
  }
  return best;
}

/// Strips whitespace, surrounding quotes and terminal punctuation.
inline std::string clean_answer(std::string_view raw) {
  static constexpr std::string_view kQuotes[] = {"\"", "'", "`", "\xE2\x80\x9C", "\xE2\x80\x9D", "\xE2\x80\x98", "\xE2\x80\x99"};
  static constexpr std::string_view kTerminal = ".,;:!?";
  std::string_view s = detail::trim(raw);
  for (bool changed = true; changed && !s.empty();) {
    changed = false;
    while (!s.empty() && kTerminal.find(s.back()) != std::string_view::npos) {
      s.remove_suffix(1);
      changed = true;
    }
    for (auto q : kQuotes) {
      if (s.size() >= q.size() && s.substr(0, q.size()) == q) {
        s.remove_prefix(q.size());
        changed = true;
      }
      if (s.size() >= q.size() && s.substr(s.size() - q.size()) == q) {
        s.remove_suffix(q.size());
        changed = true;
      }
    }
    s = detail::trim(s);
  }
  return std::string(s);
}

inline bool is_refusal(std::string_view answer) {
  return detail::to_lower(clean_answer(answer)) == detail::to_lower(kRefusal);
}

/// A generated pair is usable when the question has at least three
/// whitespace tokens and the answer is non-empty and not a refusal.
inline bool is_satisfiable(std::string_view question, std::string_view answer) {
  return detail::split_whitespace(question).size() >= kMinQuestionTokens && !detail::trim(answer).empty() &&
         !is_refusal(answer);
}

struct QAPair {
  std::string question;
  std::string answer;
};

namespace detail_parse {

inline std::string_view strip_label(std::string_view line, std::string_view label) {
  line = detail::trim(line);
  if (detail::starts_with_ci(line, label)) line = detail::trim(line.substr(label.size()));
  return line;
}

inline std::vector<std::string> nonblank_lines(std::string_view s) {
  std::vector<std::string> out;
  for (auto& l : detail::split_lines(s)) {
    if (!detail::trim(l).empty()) out.push_back(std::move(l));
  }
  return out;
}

}  // namespace detail_parse

/// Parses a single-step generation (the prompt ends with "Question:"): the
/// first line up to "Answer:" is the question; the rest of that line, or the
/// following "Answer:" line, is the answer. Trailing text is ignored.
/// Total: malformed input yields nullopt.
inline std::optional<QAPair> parse_solo(std::string_view generation) {
  const auto lines = detail_parse::nonblank_lines(generation);
  if (lines.empty()) return std::nullopt;
  std::string_view first = detail_parse::strip_label(lines[0], "Question:");
  QAPair out;
  std::size_t next = 1;
  const auto tag = detail::ifind(first, "Answer:");
  if (tag != std::string_view::npos) {
    out.question = std::string(detail::trim(first.substr(0, tag)));
    out.answer = std::string(detail::trim(first.substr(tag + 7)));
  } else {
    out.question = std::string(detail::trim(first));
    if (next >= lines.size()) return std::nullopt;
    out.answer = std::string(detail_parse::strip_label(lines[next], "Answer:"));
    ++next;
  }
  if (out.answer.empty() && next < lines.size()) out.answer = std::string(detail::trim(lines[next]));
  out.answer = clean_answer(out.answer);
  if (out.question.empty()) return std::nullopt;
  return out;
}

/// Phase-1 question: the first non-blank line, minus a "Question:" label.
inline std::string parse_generated_question(std::string_view generation) {
  const auto lines = detail_parse::nonblank_lines(generation);
  return lines.empty() ? std::string() : std::string(detail_parse::strip_label(lines[0], "Question:"));
}

/// Phase-2 answer: the first non-blank line, minus an "Answer:" label.
inline std::string parse_generated_answer(std::string_view generation) {
  const auto lines = detail_parse::nonblank_lines(generation);
  return lines.empty() ? std::string() : clean_answer(detail_parse::strip_label(lines[0], "Answer:"));
}

/// Per-attempt seeds: hash(run_seed, source_id, attempt_index).
inline std::vector<std::uint64_t> attempt_seeds(std::uint64_t run_seed, std::string_view source_id) {
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; seeds.size() < kMaxAttempts; ++i) {
    const auto s = detail::derive_seed(run_seed, source_id, i);
    if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
  }
  return seeds;
}

inline void check_seeds(std::span<const std::uint64_t> seeds) {
  if (seeds.size() != kMaxAttempts) throw PreconditionError("generation needs exactly 3 seeds");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw PreconditionError("generation seeds must be distinct");
  }
}

struct GenerationSettings {
  std::string generator_name = "llm";
  int max_new_tokens = 50;
  double temperature = 0.7;
};

inline std::string instance_id(const QAExample& example, Approach approach) {
  return example.id + "#" + std::string(to_string(approach));
}

inline CounterfactualInstance new_instance(const QAExample& example, Approach approach, std::string_view context,
                                           const GenerationSettings& settings) {
  CounterfactualInstance cf;
  cf.id = instance_id(example, approach);
  cf.source_id = example.id;
  cf.approach = approach;
  cf.generator_name = settings.generator_name;
  cf.context = std::string(context);
  return cf;
}

/// Single-step question+answer generation, up to three seeded attempts.
inline CounterfactualInstance run_solo_qag(const QAExample& example, std::string_view chosen_context, ModelClient& client,
                                           std::span<const std::uint64_t> seeds, const PromptTemplate& tmpl,
                                           const GenerationSettings& settings = {}) {
  check_seeds(seeds);
  auto cf = new_instance(example, Approach::SoloQag, chosen_context, settings);
  const auto prompt = build_prompt(tmpl, example, chosen_context);
  for (auto seed : seeds) {
    const auto raw = client.generate(prompt, {settings.max_new_tokens, settings.temperature, seed});
    const auto parsed = parse_solo(raw);
    const bool ok = parsed && is_satisfiable(parsed->question, parsed->answer);
    cf.attempts.push_back({seed, raw, ok});
    if (ok) {
      cf.question = parsed->question;
      cf.answer = parsed->answer;
      return cf;
    }
  }
  cf.status = CfStatus::Unusable;
  return cf;
}

/// Two-phase generation: question from the context, then the answer to that
/// question. A refusal in phase 2 fails the attempt.
inline CounterfactualInstance run_duo_qag(const QAExample& example, std::string_view chosen_context, ModelClient& client,
                                          std::span<const std::uint64_t> seeds, const PromptTemplate& question_tmpl,
                                          const PromptTemplate& answer_tmpl, const GenerationSettings& settings = {}) {
  check_seeds(seeds);
  auto cf = new_instance(example, Approach::DuoQag, chosen_context, settings);
  const auto q_prompt = build_prompt(question_tmpl, example, chosen_context);
  for (auto seed : seeds) {
    const GenerationParams params{settings.max_new_tokens, settings.temperature, seed};
    std::string raw = client.generate(q_prompt, params);
    const auto question = parse_generated_question(raw);
    std::string answer;
    if (detail::split_whitespace(question).size() >= kMinQuestionTokens) {
      const auto a_prompt = build_prompt(answer_tmpl, example, chosen_context, {{"generated_question", question}});
      const auto raw_answer = client.generate(a_prompt, params);
      raw += "\n\n" + raw_answer;
      answer = parse_generated_answer(raw_answer);
    }
    const bool ok = is_satisfiable(question, answer);
    cf.attempts.push_back({seed, raw, ok});
    if (ok) {
      cf.question = question;
      cf.answer = answer;
      return cf;
    }
  }
  cf.status = CfStatus::Unusable;
  return cf;
}

struct GeneratorConfig {
  Approach approach = Approach::DuoQag;
  TemplateName solo_template = TemplateName::SoloGptjtLlama;
  GenerationSettings settings;
  int candidates = 5;
  std::uint64_t run_seed = 0;
  std::size_t workers = 1;
};

/// Retrieve candidates, pick the context, generate. One instance per example,
/// in dataset order, independent of worker count.
inline CfStore generate_counterfactuals(const Dataset& dataset, ModelClient& client, const TemplateSet& templates,
                                        const GeneratorConfig& config) {
  if (!is_solo_template(config.solo_template)) throw PreconditionError("solo_template must be a solo_* template");
  CfStore store(dataset.size());
  detail::parallel_for(dataset.size(), config.workers, [&](std::size_t i) {
    const auto& ex = dataset[i];
    const auto candidates = client.retrieve_candidates(ex.question, config.candidates);
    const auto& chosen = candidates[select_context(ex.question, candidates)].context;
    const auto seeds = attempt_seeds(config.run_seed, ex.id);
    store[i] = config.approach == Approach::SoloQag
                   ? run_solo_qag(ex, chosen, client, seeds, templates[config.solo_template], config.settings)
                   : run_duo_qag(ex, chosen, client, seeds, templates[TemplateName::DuoQuestion],
                                 templates[TemplateName::DuoAnswer], config.settings);
  });
  return store;
}

}  // namespace cfood::generation
