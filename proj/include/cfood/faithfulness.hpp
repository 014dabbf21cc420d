#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/client.hpp"
#include "cfood/corpus.hpp"
#include "cfood/detail/csv.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/detail/utf8.hpp"
#include "cfood/error.hpp"
#include "cfood/features.hpp"
#include "cfood/protocol.hpp"

namespace cfood::faithfulness {

inline constexpr std::string_view kDefaultMaskSymbol = "[MASK]";

/// Raised when a variant about to be sent would alter a protected token.
class ProtectedTokenViolation : public Error {
public:
  using Error::Error;
};

enum class MaskMode { RemoveTop, KeepTop };

struct MaskedContext {
  std::string text;
  std::vector<std::size_t> masked;  // attribution token indices replaced by the mask symbol
  std::vector<std::size_t> protected_tokens;
  std::vector<CharSpan> protected_spans;  // where each protected token sits in `text`
};

/// Context tokens of `attr`, validated against the context text.
inline std::vector<std::size_t> aligned_context_tokens(std::string_view context, const AttributionRecord& attr) {
  if (attr.importance.size() != attr.tokens.size()) throw PreconditionError("attribution importance/token count mismatch");
  const auto ctx = features::context_indices(attr);
  const auto n = detail::codepoint_length(context);
  std::size_t prev_end = 0;
  for (auto i : ctx) {
    const auto& t = attr.tokens[i];
    if (t.char_start < prev_end || t.char_end > n || t.char_start >= t.char_end ||
        detail::utf8_slice(context, t.char_start, t.char_end) != t.text) {
      throw PreconditionError("attribution token '" + t.text + "' is not aligned with the context");
    }
    prev_end = t.char_end;
  }
  if (ctx.empty()) throw PreconditionError("attribution has no context tokens");
  return ctx;
}

/// Context tokens overlapping the predicted answer span.
inline std::set<std::size_t> protected_set(const AttributionRecord& attr, const QAResult& prediction) {
  const auto a = features::answer_indices(attr, prediction.char_start, prediction.char_end);
  return {a.begin(), a.end()};
}

/// The masked context: remove_top masks the top ceil(f * n) unprotected
/// tokens by |importance|; keep_top masks every other unprotected token.
/// Question and predicted-answer tokens are never touched.
inline MaskedContext masked_variant(std::string_view context, const AttributionRecord& attr, const QAResult& prediction,
                                    double fraction, MaskMode mode, std::string_view mask_symbol = kDefaultMaskSymbol) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw PreconditionError("masked_variant: fraction must be in [0, 1]");
  const auto ctx = aligned_context_tokens(context, attr);
  const auto prot = protected_set(attr, prediction);
  std::vector<std::size_t> eligible;
  for (auto i : ctx) {
    if (!prot.count(i)) eligible.push_back(i);
  }
  std::stable_sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
    const double ia = std::abs(attr.importance[a]);
    const double ib = std::abs(attr.importance[b]);
    return ia != ib ? ia > ib : a < b;
  });
  const std::size_t top = std::min(features::fraction_count(fraction, eligible.size()), eligible.size());
  std::vector<std::size_t> masked = mode == MaskMode::RemoveTop
                                        ? std::vector<std::size_t>(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(top))
                                        : std::vector<std::size_t>(eligible.begin() + static_cast<std::ptrdiff_t>(top), eligible.end());
  std::sort(masked.begin(), masked.end());
  const std::set<std::size_t> masked_set(masked.begin(), masked.end());

  MaskedContext out;
  out.masked = masked;
  const auto offs = detail::codepoint_offsets(context);
  const auto mask_len = detail::codepoint_length(mask_symbol);
  std::size_t cp_in = 0;    // consumed code points of the original
  std::size_t cp_out = 0;   // emitted code points
  const auto copy_to = [&](std::size_t cp) {
    out.text.append(context.substr(offs[cp_in], offs[cp] - offs[cp_in]));
    cp_out += cp - cp_in;
    cp_in = cp;
  };
  for (auto i : ctx) {
    const auto& t = attr.tokens[i];
    copy_to(t.char_start);
    if (masked_set.count(i)) {
      out.text.append(mask_symbol);
      cp_out += mask_len;
      cp_in = t.char_end;
    } else {
      const auto start = cp_out;
      copy_to(t.char_end);
      if (prot.count(i)) {
        out.protected_tokens.push_back(i);
        out.protected_spans.push_back({start, cp_out});
      }
    }
  }
  copy_to(offs.size() - 1);
  return out;
}

/// Confirms every protected token (and the answer string) survives in the
/// variant. Runs on every outgoing faithfulness request.
inline void assert_protected(const MaskedContext& variant, const AttributionRecord& attr, const QAResult& prediction) {
  const auto expected = protected_set(attr, prediction);
  if (expected.size() != variant.protected_tokens.size()) {
    throw ProtectedTokenViolation("masked variant dropped a protected answer token");
  }
  for (std::size_t k = 0; k < variant.protected_tokens.size(); ++k) {
    const auto& tok = attr.tokens[variant.protected_tokens[k]];
    const auto& span = variant.protected_spans[k];
    if (detail::utf8_slice(variant.text, span.start, span.end) != tok.text) {
      throw ProtectedTokenViolation("protected token '" + tok.text + "' altered by masking");
    }
  }
  if (!prediction.answer.empty() && variant.text.find(prediction.answer) == std::string::npos) {
    throw ProtectedTokenViolation("predicted answer '" + prediction.answer + "' no longer occurs in the masked context");
  }
}

namespace detail_eval {

inline double masked_prob(const QAExample& ex, const MaskedContext& v, const AttributionRecord& attr,
                          const QAResult& prediction, ModelClient& client) {
  if (v.masked.empty()) return prediction.prob;  // unchanged input, no need to ask
  assert_protected(v, attr, prediction);
  return client.answer_prob(ex.question, v.text, prediction.answer);
}

}  // namespace detail_eval

/// p0 - p(answer | top tokens masked). Not clamped.
inline double comprehensiveness(const QAExample& ex, const AttributionRecord& attr, const QAResult& prediction, double fraction,
                                ModelClient& client, std::string_view mask_symbol = kDefaultMaskSymbol) {
  const auto v = masked_variant(ex.context, attr, prediction, fraction, MaskMode::RemoveTop, mask_symbol);
  return prediction.prob - detail_eval::masked_prob(ex, v, attr, prediction, client);
}

/// Reported sufficiency: 1 - clamp(p0 - p(answer | only top tokens kept), 0, 1).
inline double sufficiency(const QAExample& ex, const AttributionRecord& attr, const QAResult& prediction, double fraction,
                          ModelClient& client, std::string_view mask_symbol = kDefaultMaskSymbol) {
  const auto v = masked_variant(ex.context, attr, prediction, fraction, MaskMode::KeepTop, mask_symbol);
  const double raw = prediction.prob - detail_eval::masked_prob(ex, v, attr, prediction, client);
  return 1.0 - std::clamp(raw, 0.0, 1.0);
}

struct FaithfulnessConfig {
  std::vector<double> fractions{0.02, 0.10, 0.20, 0.50};
  std::string mask_symbol{kDefaultMaskSymbol};
  std::vector<AttributionMethod> methods{kAllMethods.begin(), kAllMethods.end()};
  std::size_t workers = 1;

  void validate() const {
    if (fractions.empty()) throw PreconditionError("faithfulness: no fractions");
    for (double f : fractions) {
      if (!(f > 0.0 && f < 1.0)) throw PreconditionError("faithfulness: fractions must lie in (0, 1)");
    }
    if (detail::trim(mask_symbol).empty()) throw PreconditionError("faithfulness: empty mask symbol");
    if (methods.empty()) throw PreconditionError("faithfulness: no attribution methods");
  }
};

struct FractionScore {
  double fraction = 0.0;
  double comprehensiveness = 0.0;
  double sufficiency = 0.0;  // reported form
};

struct MethodScore {
  AttributionMethod method = AttributionMethod::Attention;
  std::vector<FractionScore> per_fraction;
  double comprehensiveness = 0.0;  // mean over fractions
  double sufficiency = 0.0;
};

struct FaithfulnessReport {
  std::string label;
  std::string dataset;
  std::size_t n_examples = 0;
  std::vector<MethodScore> methods;
};

/// Per-example inputs for one method: the base prediction and its attribution.
using AttributionTable = std::map<AttributionMethod, std::vector<AttributionRecord>>;

inline FaithfulnessReport faithfulness_report(std::string label, const Dataset& dataset, const std::vector<QAResult>& predictions,
                                              const AttributionTable& attrs, const FaithfulnessConfig& config, ModelClient& client) {
  config.validate();
  if (predictions.size() != dataset.size()) throw PreconditionError("faithfulness_report: prediction count mismatch");
  std::string gaps;
  for (auto m : config.methods) {
    auto it = attrs.find(m);
    if (it == attrs.end()) {
      gaps += std::string(gaps.empty() ? "" : ", ") + std::string(to_string(m)) + " (all examples)";
    } else if (it->second.size() != dataset.size()) {
      for (std::size_t i = it->second.size(); i < dataset.size(); ++i) {
        gaps += std::string(gaps.empty() ? "" : ", ") + std::string(to_string(m)) + "/" + dataset[i].id;
      }
    }
  }
  if (!gaps.empty()) throw PreconditionError("missing attribution records: " + gaps);
  for (const auto& ex : dataset) {
    if (ex.context.find(config.mask_symbol) != std::string::npos) {
      throw PreconditionError("example '" + ex.id + "': context already contains the mask symbol");
    }
  }

  const std::size_t nf = config.fractions.size();
  FaithfulnessReport report{std::move(label), dataset.name(), dataset.size(), {}};
  for (auto m : config.methods) {
    const auto& recs = attrs.at(m);
    std::vector<double> comp(dataset.size() * nf), suff(dataset.size() * nf);
    cfood::detail::parallel_for(dataset.size() * nf, config.workers, [&](std::size_t job) {
      const std::size_t i = job / nf;
      const double f = config.fractions[job % nf];
      try {
        comp[job] = comprehensiveness(dataset[i], recs[i], predictions[i], f, client, config.mask_symbol);
        suff[job] = sufficiency(dataset[i], recs[i], predictions[i], f, client, config.mask_symbol);
      } catch (const ProtectedTokenViolation&) {
        throw;
      } catch (const Error& e) {
        throw Error("faithfulness for example '" + dataset[i].id + "' (" + std::string(to_string(m)) + "): " + e.what());
      }
    });
    MethodScore ms{m, {}, 0.0, 0.0};
    for (std::size_t k = 0; k < nf; ++k) {
      FractionScore fs{config.fractions[k], 0.0, 0.0};
      for (std::size_t i = 0; i < dataset.size(); ++i) {
        fs.comprehensiveness += comp[i * nf + k];
        fs.sufficiency += suff[i * nf + k];
      }
      fs.comprehensiveness /= static_cast<double>(dataset.size());
      fs.sufficiency /= static_cast<double>(dataset.size());
      ms.comprehensiveness += fs.comprehensiveness / static_cast<double>(nf);
      ms.sufficiency += fs.sufficiency / static_cast<double>(nf);
      ms.per_fraction.push_back(fs);
    }
    report.methods.push_back(std::move(ms));
  }
  return report;
}

inline nlohmann::json to_json(const FaithfulnessReport& r) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : r.methods) {
    nlohmann::json fr = nlohmann::json::array();
    for (const auto& f : m.per_fraction) {
      fr.push_back({{"fraction", f.fraction}, {"comprehensiveness", f.comprehensiveness}, {"sufficiency", f.sufficiency}});
    }
    methods.push_back({{"method", to_string(m.method)},
                       {"comprehensiveness", m.comprehensiveness},
                       {"sufficiency", m.sufficiency},
                       {"per_fraction", fr}});
  }
  return {{"label", r.label}, {"dataset", r.dataset}, {"n_examples", r.n_examples}, {"methods", methods}};
}

inline constexpr std::string_view kAverageDataset = "average";

/// One row per report, then one cross-dataset average row per label.
/// Columns: label, dataset, then {method}_comp and {method}_suff for every
/// method, in protocol order.
inline std::string to_csv(const std::vector<FaithfulnessReport>& reports) {
  using cfood::detail::fmt_fixed;
  std::vector<std::string> header{"label", "dataset"};
  for (auto m : kAllMethods) {
    header.push_back(std::string(to_string(m)) + "_comp");
    header.push_back(std::string(to_string(m)) + "_suff");
  }
  std::string out = cfood::detail::csv_row(header);
  const auto cell = [](const FaithfulnessReport& r, AttributionMethod m) -> std::optional<std::pair<double, double>> {
    for (const auto& ms : r.methods) {
      if (ms.method == m) return std::pair{ms.comprehensiveness, ms.sufficiency};
    }
    return std::nullopt;
  };
  std::vector<std::string> labels;
  for (const auto& r : reports) {
    if (std::find(labels.begin(), labels.end(), r.label) == labels.end()) labels.push_back(r.label);
    std::vector<std::string> row{r.label, r.dataset};
    for (auto m : kAllMethods) {
      const auto c = cell(r, m);
      row.push_back(c ? fmt_fixed(c->first) : "");
      row.push_back(c ? fmt_fixed(c->second) : "");
    }
    out += cfood::detail::csv_row(row);
  }
  for (const auto& label : labels) {
    std::vector<std::string> row{label, std::string(kAverageDataset)};
    for (auto m : kAllMethods) {
      double sc = 0, ss = 0;
      std::size_t n = 0;
      for (const auto& r : reports) {
        if (r.label != label) continue;
        if (const auto c = cell(r, m)) {
          sc += c->first;
          ss += c->second;
          ++n;
        }
      }
      row.push_back(n ? fmt_fixed(sc / static_cast<double>(n)) : "");
      row.push_back(n ? fmt_fixed(ss / static_cast<double>(n)) : "");
    }
    out += cfood::detail::csv_row(row);
  }
  return out;
}

}  // namespace cfood::faithfulness
