#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/detail/csv.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/error.hpp"

namespace cfood::report {

inline constexpr std::array<std::string_view, 6> kOodDatasets{"SQuAD-Adv", "TriviaQA", "HotpotQA", "NQ", "NewsQA", "BioASQ"};

using Scores = std::map<std::string, double, std::less<>>;

/// Mean over `ood_set` of (model - base).
template <typename Range>
double g_ood(const Scores& base, const Scores& model, const Range& ood_set) {
  double sum = 0.0;
  std::size_t n = 0;
  std::string missing;
  for (const auto& d : ood_set) {
    auto b = base.find(d);
    auto m = model.find(d);
    if (b == base.end() || m == model.end()) {
      missing += (missing.empty() ? "" : ", ") + std::string(d);
      continue;
    }
    sum += m->second - b->second;
    ++n;
  }
  if (!missing.empty()) throw PreconditionError("g_ood: missing scores for " + missing);
  if (n == 0) throw PreconditionError("g_ood: empty OOD set");
  return sum / static_cast<double>(n);
}

inline double g_ood(const Scores& base, const Scores& model) { return g_ood(base, model, kOodDatasets); }

/// Labelled score rows (first column = label). Columns whose header starts
/// with "published_" are kept separately for comparison.
struct ScoreTable {
  std::vector<std::string> datasets;
  std::vector<std::string> labels;
  std::map<std::string, Scores> rows;
  std::map<std::string, Scores> published;

  const Scores& row(const std::string& label) const {
    auto it = rows.find(label);
    if (it == rows.end()) throw PreconditionError("score table has no row '" + label + "'");
    return it->second;
  }
};

inline ScoreTable parse_score_table(std::string_view csv) {
  const auto rows = detail::parse_csv(csv);
  if (rows.empty() || rows[0].size() < 2) throw ParseError("score table: missing header");
  ScoreTable t;
  const auto& header = rows[0];
  for (std::size_t c = 1; c < header.size(); ++c) {
    if (header[c].rfind("published_", 0) != 0) t.datasets.push_back(header[c]);
  }
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != header.size()) throw ParseError("score table: wrong number of fields", r + 1);
    t.labels.push_back(row[0]);
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c].empty()) continue;
      double v = 0;
      try {
        std::size_t used = 0;
        v = std::stod(row[c], &used);
        if (used != row[c].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError("score table: '" + row[c] + "' is not a number", r + 1);
      }
      (header[c].rfind("published_", 0) == 0 ? t.published[row[0]] : t.rows[row[0]])[header[c]] = v;
    }
  }
  return t;
}

inline ScoreTable load_score_table(const std::filesystem::path& path) { return parse_score_table(detail::read_file(path)); }

struct GoodRow {
  std::string label;
  double g_ood = 0.0;
  std::optional<double> published;
};

/// G_ood of every non-base row against `base_label`.
inline std::vector<GoodRow> g_ood_table(const ScoreTable& t, const std::string& base_label = "Base") {
  const auto& base = t.row(base_label);
  std::vector<GoodRow> out;
  for (const auto& label : t.labels) {
    if (label == base_label) continue;
    GoodRow g{label, g_ood(base, t.row(label)), std::nullopt};
    if (auto p = t.published.find(label); p != t.published.end()) {
      if (auto v = p->second.find("published_g_ood"); v != p->second.end()) g.published = v->second;
    }
    out.push_back(std::move(g));
  }
  return out;
}

// --- Markdown -----------------------------------------------------------------

inline std::string markdown_table(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return {};
  const auto line = [](const std::vector<std::string>& cells) {
    std::string s = "|";
    for (const auto& c : cells) s += " " + c + " |";
    return s + "\n";
  };
  std::string out = line(rows[0]);
  out += "|";
  for (std::size_t i = 0; i < rows[0].size(); ++i) out += " --- |";
  out += "\n";
  for (std::size_t r = 1; r < rows.size(); ++r) out += line(rows[r]);
  return out;
}

/// Stage outputs the report reads, in report order.
inline constexpr std::array<std::string_view, 6> kReportInputs{"filter_summary.json", "diversity.csv",       "eval_scores.json",
                                                               "calibration.json",    "calibration_ledger.csv", "faithfulness.csv"};

struct ReportOptions {
  std::string title = "Counterfactual augmentation report";
  std::optional<std::filesystem::path> table2;
};

/// Renders report.md (and g_ood.csv when a score table is given) from the
/// stage outputs in `dir`. Pure function of those files.
inline std::string emit_report(const std::filesystem::path& dir, const ReportOptions& opts = {}) {
  std::string missing;
  for (auto name : kReportInputs) {
    if (!std::filesystem::exists(dir / name)) missing += (missing.empty() ? "" : ", ") + std::string(name);
  }
  if (!missing.empty()) throw PreconditionError("report: missing stage outputs: " + missing);
  const auto csv = [&](std::string_view name) { return detail::parse_csv(detail::read_file(dir / name)); };
  const auto js = [&](std::string_view name) { return nlohmann::json::parse(detail::read_file(dir / name)); };

  std::string md = "# " + opts.title + "\n\n";

  md += "## Counterfactual filtering\n\n";
  {
    const auto s = js("filter_summary.json");
    std::vector<std::vector<std::string>> rows{{"kept", "relevance_discarded", "rescued", "noise_discarded", "unparseable_relevance"}};
    std::vector<std::string> r;
    for (const auto& k : rows[0]) r.push_back(std::to_string(s.value(k, 0)));
    rows.push_back(r);
    md += markdown_table(rows) + "\n";
  }

  md += "## Diversity\n\n";
  {
    const auto rows = csv("diversity.csv");
    md += rows.size() > 1 ? markdown_table(rows) + "\n" : "No runs.\n\n";
  }

  md += "## Reader accuracy\n\n";
  {
    const auto s = js("eval_scores.json");
    std::vector<std::vector<std::string>> rows{{"dataset", "n", "em", "f1"}};
    rows.push_back({s.value("dataset", std::string()), std::to_string(s.value("n", 0)), detail::fmt_fixed(s.value("em", 0.0), 4),
                    detail::fmt_fixed(s.value("f1", 0.0), 4)});
    md += markdown_table(rows) + "\n";
  }

  md += "## Calibration\n\n";
  {
    const auto rows = csv("calibration_ledger.csv");
    md += rows.size() > 1 ? markdown_table(rows) + "\n" : "No runs.\n\n";
    const auto cal = js("calibration.json");
    if (cal.contains("skipped") && !cal["skipped"].empty()) {
      md += "Skipped calibration runs:\n\n";
      for (const auto& s : cal["skipped"]) md += "- " + s.get<std::string>() + "\n";
      md += "\n";
    }
  }

  md += "## Faithfulness\n\n";
  {
    const auto rows = csv("faithfulness.csv");
    md += rows.size() > 1 ? markdown_table(rows) + "\n" : "No runs.\n\n";
  }

  if (opts.table2) {
    const auto t = load_score_table(*opts.table2);
    const auto good = g_ood_table(t);
    std::string out = "label,g_ood,published_g_ood\n";
    std::vector<std::vector<std::string>> rows{{"label", "G_ood", "published"}};
    for (const auto& g : good) {
      const auto pub = g.published ? detail::fmt_fixed(*g.published, 2) : "";
      out += detail::csv_row({g.label, detail::fmt_fixed(g.g_ood, 4), pub});
      rows.push_back({g.label, detail::fmt_fixed(g.g_ood, 2), pub});
    }
    detail::write_file(dir / "g_ood.csv", out);
    md += "## Out-of-domain gain (published exact-match scores)\n\n" + markdown_table(rows) + "\n";
  }
  detail::write_file(dir / "report.md", md);
  return md;
}

}  // namespace cfood::report
