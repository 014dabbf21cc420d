#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "cfood/detail/io.hpp"
#include "cfood/detail/text.hpp"
#include "cfood/detail/utf8.hpp"
#include "cfood/error.hpp"

namespace cfood {

/// Half-open code-point range into a context.
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const CharSpan&, const CharSpan&) = default;
};

struct QAExample {
  std::string id;
  std::string question;
  std::string context;
  std::vector<std::string> gold_answers;
  std::vector<CharSpan> gold_spans;
  std::string dataset_name;
  friend bool operator==(const QAExample&, const QAExample&) = default;
};

class Dataset {
public:
  Dataset() = default;
  Dataset(std::string name, std::vector<QAExample> examples) : name_(std::move(name)), examples_(std::move(examples)) {
    index_.reserve(examples_.size());
    for (std::size_t i = 0; i < examples_.size(); ++i) {
      if (!index_.emplace(examples_[i].id, i).second) throw ParseError("duplicate example id '" + examples_[i].id + "'");
    }
  }

  const std::string& name() const noexcept { return name_; }
  const std::vector<QAExample>& examples() const noexcept { return examples_; }
  std::size_t size() const noexcept { return examples_.size(); }
  bool empty() const noexcept { return examples_.empty(); }
  const QAExample& operator[](std::size_t i) const { return examples_.at(i); }
  auto begin() const noexcept { return examples_.begin(); }
  auto end() const noexcept { return examples_.end(); }

  const QAExample* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &examples_[it->second];
  }

  friend bool operator==(const Dataset& a, const Dataset& b) { return a.name_ == b.name_ && a.examples_ == b.examples_; }

private:
  std::string name_;
  std::vector<QAExample> examples_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct EvalScore {
  double em = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;
};

enum class DatasetFormat { MrqaJsonl, SquadJson };

inline DatasetFormat parse_dataset_format(std::string_view s) {
  if (s == "mrqa-jsonl" || s == "mrqa") return DatasetFormat::MrqaJsonl;
  if (s == "squad-json" || s == "squad") return DatasetFormat::SquadJson;
  throw PreconditionError("unknown dataset format '" + std::string(s) + "' (expected mrqa-jsonl or squad-json)");
}

inline std::string to_string(DatasetFormat f) { return f == DatasetFormat::MrqaJsonl ? "mrqa-jsonl" : "squad-json"; }

// --- answer normalization and scoring --------------------------------------

/// SQuAD normalization: lowercase, drop ASCII punctuation, drop the articles
/// a/an/the, collapse whitespace.
inline std::string normalize_answer(std::string_view text) {
  std::string no_punct;
  no_punct.reserve(text.size());
  for (unsigned char c : text) {
    if (c < 0x80 && std::ispunct(c)) continue;
    no_punct.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
  }
  std::string out;
  for (const auto& tok : detail::split_whitespace(no_punct)) {
    if (tok == "a" || tok == "an" || tok == "the") continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

inline bool exact_match(std::string_view prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw PreconditionError("exact_match: empty gold answer list");
  const auto p = normalize_answer(prediction);
  return std::any_of(golds.begin(), golds.end(), [&](const std::string& g) { return normalize_answer(g) == p; });
}

namespace detail {

inline double token_f1(const std::string& pred_norm, const std::string& gold_norm) {
  const auto pt = split_whitespace(pred_norm);
  const auto gt = split_whitespace(gold_norm);
  if (pt.empty() || gt.empty()) return pt.empty() && gt.empty() ? 1.0 : 0.0;
  std::map<std::string, int> counts;
  for (const auto& t : gt) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : pt) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  const double precision = static_cast<double>(common) / static_cast<double>(pt.size());
  const double recall = static_cast<double>(common) / static_cast<double>(gt.size());
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace detail

/// Max over golds of bag-of-tokens F1 on normalized text. Both sides empty
/// after normalization scores 1, one side empty scores 0.
inline double f1_score(std::string_view prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw PreconditionError("f1_score: empty gold answer list");
  const auto p = normalize_answer(prediction);
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, detail::token_f1(p, normalize_answer(g)));
  return best;
}

/// Aggregate EM/F1 of `predictions` (aligned with dataset order).
inline EvalScore evaluate(const Dataset& dataset, const std::vector<std::string>& predictions) {
  if (predictions.size() != dataset.size()) {
    throw PreconditionError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(dataset.size()) + " examples");
  }
  EvalScore s;
  s.n = dataset.size();
  if (s.n == 0) return s;
  for (std::size_t i = 0; i < s.n; ++i) {
    s.em += exact_match(predictions[i], dataset[i].gold_answers) ? 1.0 : 0.0;
    s.f1 += f1_score(predictions[i], dataset[i].gold_answers);
  }
  s.em /= static_cast<double>(s.n);
  s.f1 /= static_cast<double>(s.n);
  return s;
}

// --- loading ----------------------------------------------------------------

namespace detail {

using nlohmann::json;

inline const json& require(const json& obj, const char* key, std::size_t line) {
  if (!obj.is_object() || !obj.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line);
  return obj.at(key);
}

inline std::string require_string(const json& obj, const char* key, std::size_t line) {
  const auto& v = require(obj, key, line);
  if (!v.is_string()) throw ParseError(std::string("field '") + key + "' is not a string", line);
  return v.get<std::string>();
}

inline void check_example(QAExample& ex, std::size_t line) {
  if (trim(ex.question).empty()) throw ParseError("example '" + ex.id + "' has an empty question", line);
  if (trim(ex.context).empty()) throw ParseError("example '" + ex.id + "' has an empty context", line);
  const std::size_t n = codepoint_length(ex.context);
  for (const auto& span : ex.gold_spans) {
    if (span.start >= span.end || span.end > n) {
      throw ParseError("example '" + ex.id + "': gold span [" + std::to_string(span.start) + ", " +
                           std::to_string(span.end) + ") outside context",
                       line);
    }
    const auto sliced = normalize_answer(utf8_slice(ex.context, span.start, span.end));
    const bool matches = std::any_of(ex.gold_answers.begin(), ex.gold_answers.end(),
                                     [&](const std::string& g) { return normalize_answer(g) == sliced; });
    if (!matches) {
      throw ParseError("example '" + ex.id + "': gold span text does not match any gold answer", line);
    }
  }
  if (ex.gold_answers.empty()) throw ParseError("example '" + ex.id + "' has no gold answers", line);
}

inline void add_gold_if_new(QAExample& ex, const std::string& text) {
  const auto norm = normalize_answer(text);
  const bool present = std::any_of(ex.gold_answers.begin(), ex.gold_answers.end(),
                                   [&](const std::string& g) { return normalize_answer(g) == norm; });
  if (!present) ex.gold_answers.push_back(text);
}

inline Dataset parse_mrqa(std::string_view content, const std::string& fallback_name) {
  std::string name = fallback_name;
  std::vector<QAExample> examples;
  bool first = true;
  for_each_line(content, [&](std::string_view line, std::size_t lineno) {
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (first && obj.is_object() && obj.contains("header")) {
      first = false;
      const auto& h = obj.at("header");
      if (h.is_object() && h.contains("dataset") && h.at("dataset").is_string()) name = h.at("dataset").get<std::string>();
      return;
    }
    first = false;
    const auto context = require_string(obj, "context", lineno);
    const auto& qas = require(obj, "qas", lineno);
    if (!qas.is_array()) throw ParseError("field 'qas' is not an array", lineno);
    for (const auto& qa : qas) {
      QAExample ex;
      ex.id = require_string(qa, "qid", lineno);
      ex.question = require_string(qa, "question", lineno);
      ex.context = context;
      ex.dataset_name = name;
      if (qa.contains("answers")) {
        for (const auto& a : qa.at("answers")) {
          if (!a.is_string()) throw ParseError("non-string answer in '" + ex.id + "'", lineno);
          ex.gold_answers.push_back(a.get<std::string>());
        }
      }
      if (qa.contains("detected_answers")) {
        for (const auto& d : qa.at("detected_answers")) {
          const auto text = require_string(d, "text", lineno);
          add_gold_if_new(ex, text);
          if (!d.contains("char_spans")) continue;
          for (const auto& sp : d.at("char_spans")) {
            if (!sp.is_array() || sp.size() != 2 || !sp[0].is_number_integer() || !sp[1].is_number_integer()) {
              throw ParseError("malformed char_spans in '" + ex.id + "'", lineno);
            }
            const auto s = sp[0].get<long long>();
            const auto e = sp[1].get<long long>();  // inclusive on disk
            if (s < 0 || e < s) throw ParseError("invalid char span in '" + ex.id + "'", lineno);
            ex.gold_spans.push_back({static_cast<std::size_t>(s), static_cast<std::size_t>(e) + 1});
          }
        }
      }
      check_example(ex, lineno);
      examples.push_back(std::move(ex));
    }
  });
  return Dataset(name, std::move(examples));
}

inline Dataset parse_squad(std::string_view content, const std::string& fallback_name) {
  json doc;
  try {
    doc = json::parse(content);
  } catch (const json::parse_error& e) {
    // nlohmann reports a byte offset; translate it into a line number.
    const std::size_t upto = std::min<std::size_t>(e.byte, content.size());
    const auto line = static_cast<std::size_t>(std::count(content.begin(), content.begin() + static_cast<std::ptrdiff_t>(upto), '\n')) + 1;
    throw ParseError(std::string("malformed JSON: ") + e.what(), line);
  }
  const auto& data = require(doc, "data", 0);
  if (!data.is_array()) throw ParseError("field 'data' is not an array");
  std::vector<QAExample> examples;
  for (const auto& article : data) {
    for (const auto& para : require(article, "paragraphs", 0)) {
      const auto context = require_string(para, "context", 0);
      for (const auto& qa : require(para, "qas", 0)) {
        QAExample ex;
        ex.id = require_string(qa, "id", 0);
        ex.question = require_string(qa, "question", 0);
        ex.context = context;
        ex.dataset_name = fallback_name;
        for (const auto& a : require(qa, "answers", 0)) {
          const auto text = require_string(a, "text", 0);
          if (std::find(ex.gold_answers.begin(), ex.gold_answers.end(), text) == ex.gold_answers.end()) {
            ex.gold_answers.push_back(text);
          }
          if (a.contains("answer_start") && a.at("answer_start").is_number_integer()) {
            const auto s = static_cast<std::size_t>(a.at("answer_start").get<long long>());
            const CharSpan span{s, s + codepoint_length(text)};
            if (std::find(ex.gold_spans.begin(), ex.gold_spans.end(), span) == ex.gold_spans.end()) {
              ex.gold_spans.push_back(span);
            }
          }
        }
        check_example(ex, 0);
        examples.push_back(std::move(ex));
      }
    }
  }
  return Dataset(fallback_name, std::move(examples));
}

}  // namespace detail

inline Dataset parse_dataset(std::string_view content, DatasetFormat format, const std::string& fallback_name = "dataset") {
  if (detail::trim(content).empty()) throw ParseError("empty dataset file");
  return format == DatasetFormat::MrqaJsonl ? detail::parse_mrqa(content, fallback_name)
                                            : detail::parse_squad(content, fallback_name);
}

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
  if (!std::filesystem::exists(path)) throw PreconditionError("dataset file not found: " + path.string());
  try {
    return parse_dataset(detail::read_file(path), format, path.stem().string());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

/// MRQA JSONL rendering. Consecutive examples sharing a context share a line.
inline std::string to_mrqa_jsonl(const Dataset& dataset) {
  using nlohmann::json;
  std::string out = json{{"header", {{"dataset", dataset.name()}}}}.dump() + "\n";
  const auto& xs = dataset.examples();
  for (std::size_t i = 0; i < xs.size();) {
    json line;
    line["context"] = xs[i].context;
    line["qas"] = json::array();
    std::size_t j = i;
    for (; j < xs.size() && xs[j].context == xs[i].context; ++j) {
      const auto& ex = xs[j];
      json qa{{"qid", ex.id}, {"question", ex.question}, {"answers", ex.gold_answers}};
      json detected = json::array();
      for (const auto& sp : ex.gold_spans) {
        detected.push_back({{"text", detail::utf8_slice(ex.context, sp.start, sp.end)},
                            {"char_spans", json::array({json::array({sp.start, sp.end - 1})})}});
      }
      qa["detected_answers"] = std::move(detected);
      line["qas"].push_back(std::move(qa));
    }
    out += line.dump() + "\n";
    i = j;
  }
  return out;
}

inline void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  detail::write_file(path, to_mrqa_jsonl(dataset));
}

}  // namespace cfood
