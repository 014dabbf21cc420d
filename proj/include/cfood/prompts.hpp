#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cfood/corpus.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/error.hpp"

#ifndef CFOOD_DEFAULT_PROMPT_DIR
#define CFOOD_DEFAULT_PROMPT_DIR "prompts"
#endif

namespace cfood {

enum class TemplateName { SoloGptjtLlama, SoloAlpaca, SoloGptneoxt, DuoQuestion, DuoAnswer, RelevanceFilter };

inline constexpr std::array<TemplateName, 6> kAllTemplates{TemplateName::SoloGptjtLlama, TemplateName::SoloAlpaca,
                                                           TemplateName::SoloGptneoxt,   TemplateName::DuoQuestion,
                                                           TemplateName::DuoAnswer,      TemplateName::RelevanceFilter};

inline std::string_view to_string(TemplateName n) noexcept {
  switch (n) {
    case TemplateName::SoloGptjtLlama: return "solo_gptjt_llama";
    case TemplateName::SoloAlpaca: return "solo_alpaca";
    case TemplateName::SoloGptneoxt: return "solo_gptneoxt";
    case TemplateName::DuoQuestion: return "duo_question";
    case TemplateName::DuoAnswer: return "duo_answer";
    case TemplateName::RelevanceFilter: return "relevance_filter";
  }
  return "solo_gptjt_llama";
}

inline TemplateName parse_template_name(std::string_view s) {
  for (auto n : kAllTemplates) {
    if (to_string(n) == s) return n;
  }
  throw PreconditionError("unknown prompt template '" + std::string(s) + "'");
}

inline bool is_solo_template(TemplateName n) noexcept {
  return n == TemplateName::SoloGptjtLlama || n == TemplateName::SoloAlpaca || n == TemplateName::SoloGptneoxt;
}

using Substitutions = std::map<std::string, std::string, std::less<>>;

struct PromptTemplate {
  TemplateName name = TemplateName::SoloGptjtLlama;
  std::string body;

  /// Names of `{placeholder}` occurrences, in order of first appearance.
  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    std::set<std::string, std::less<>> seen;
    for_each_placeholder([&](std::size_t, std::size_t, std::string_view name) {
      if (seen.emplace(name).second) out.emplace_back(name);
    });
    return out;
  }

  /// Single-pass substitution; substituted values are never rescanned.
  std::string render(const Substitutions& values) const {
    std::string out;
    std::size_t pos = 0;
    for_each_placeholder([&](std::size_t begin, std::size_t end, std::string_view key) {
      auto it = values.find(key);
      if (it == values.end()) {
        throw PreconditionError("template '" + std::string(to_string(name)) + "': no value for placeholder '" +
                                std::string(key) + "'");
      }
      out.append(body, pos, begin - pos);
      out += it->second;
      pos = end;
    });
    out.append(body, pos, std::string::npos);
    return out;
  }

private:
  // A placeholder is `{` + [a-z_]+ + `}`; other braces are literal text.
  template <typename Fn>
  void for_each_placeholder(Fn&& fn) const {
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] != '{') continue;
      std::size_t j = i + 1;
      while (j < body.size() && ((body[j] >= 'a' && body[j] <= 'z') || body[j] == '_')) ++j;
      if (j < body.size() && body[j] == '}' && j > i + 1) {
        fn(i, j + 1, std::string_view(body).substr(i + 1, j - i - 1));
        i = j;
      }
    }
  }
};

inline PromptTemplate load_template(const std::filesystem::path& dir, TemplateName name) {
  const auto path = dir / (std::string(to_string(name)) + ".txt");
  if (!std::filesystem::exists(path)) throw PreconditionError("prompt template not found: " + path.string());
  std::string body = detail::read_file(path);
  if (!body.empty() && body.back() == '\n') body.pop_back();
  return {name, std::move(body)};
}

inline std::filesystem::path default_prompt_dir() { return CFOOD_DEFAULT_PROMPT_DIR; }

/// Every template the pipeline uses, loaded once.
struct TemplateSet {
  std::map<TemplateName, PromptTemplate> templates;

  static TemplateSet load(const std::filesystem::path& dir = default_prompt_dir()) {
    TemplateSet set;
    for (auto n : kAllTemplates) set.templates.emplace(n, load_template(dir, n));
    return set;
  }
  const PromptTemplate& operator[](TemplateName n) const { return templates.at(n); }
};

/// 1-shot prompt: the original triple forms the shot, `chosen_context` the
/// new context. `extra` supplies phase-specific values such as
/// generated_question.
inline std::string build_prompt(const PromptTemplate& tmpl, const QAExample& example, std::string_view chosen_context,
                                const Substitutions& extra = {}) {
  Substitutions values{{"original_context", example.context},
                       {"original_question", example.question},
                       {"original_answer", example.gold_answers.empty() ? std::string() : example.gold_answers.front()},
                       {"context", std::string(chosen_context)}};
  for (const auto& [k, v] : extra) values[k] = v;
  return tmpl.render(values);
}

}  // namespace cfood
