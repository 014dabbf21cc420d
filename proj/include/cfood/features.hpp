#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "cfood/corpus.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/error.hpp"
#include "cfood/protocol.hpp"

namespace cfood::features {

// --- heuristic aggregates -------------------------------------------------------

/// Penn Treebank tag set; anything else aggregates under "OTHER".
inline constexpr std::array<std::string_view, 46> kPosTags{
    "CC",  "CD",  "DT",  "EX",  "FW",   "IN",  "JJ",  "JJR", "JJS", "LS",  "MD",   "NN",    "NNS",   "NNP",  "NNPS", "PDT",
    "POS", "PRP", "PRP$", "RB", "RBR",  "RBS", "RP",  "SYM", "TO",  "UH",  "VB",   "VBD",   "VBG",   "VBN",  "VBP",  "VBZ",
    "WDT", "WP",  "WP$", "WRB", "#",    "$",   "''",  "``",  ",",   "-LRB-", "-RRB-", ".", ":",  "OTHER"};

inline std::string_view canonical_tag(std::string_view tag) {
  for (auto t : kPosTags) {
    if (t == tag) return t;
  }
  return "OTHER";
}

enum class Aggregation { Absolute, Signed };

inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "abs") return Aggregation::Absolute;
  if (s == "signed") return Aggregation::Signed;
  throw PreconditionError("unknown aggregation '" + std::string(s) + "' (expected abs or signed)");
}

struct HeuristicFeatures {
  double attr_to_question = 0.0;
  double attr_to_context = 0.0;
  std::map<std::string, double> per_pos;
  std::map<std::pair<std::string, Segment>, double> per_pos_segment;
};

/// Sums of (absolute, by default) importance per segment, per POS tag, and
/// per (tag, segment).
inline HeuristicFeatures heuristic_features(const AttributionRecord& attr, Aggregation agg = Aggregation::Absolute) {
  if (attr.importance.size() != attr.tokens.size()) throw PreconditionError("heuristic_features: misaligned attribution");
  HeuristicFeatures hf;
  for (std::size_t i = 0; i < attr.tokens.size(); ++i) {
    const auto& tok = attr.tokens[i];
    if (tok.pos_tag.empty()) throw PreconditionError("heuristic_features: token '" + tok.text + "' has no POS tag");
    const double v = agg == Aggregation::Absolute ? std::abs(attr.importance[i]) : attr.importance[i];
    (tok.segment == Segment::Question ? hf.attr_to_question : hf.attr_to_context) += v;
    const std::string tag(canonical_tag(tok.pos_tag));
    hf.per_pos[tag] += v;
    hf.per_pos_segment[{tag, tok.segment}] += v;
  }
  return hf;
}

inline const std::vector<std::string>& heuristic_feature_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n{"attr_question", "attr_context"};
    for (auto t : kPosTags) n.push_back("pos_" + std::string(t));
    for (auto t : kPosTags) {
      n.push_back("pos_" + std::string(t) + "_question");
      n.push_back("pos_" + std::string(t) + "_context");
    }
    return n;
  }();
  return names;
}

inline std::vector<double> heuristic_vector(const HeuristicFeatures& hf) {
  std::vector<double> v{hf.attr_to_question, hf.attr_to_context};
  const auto get = [](const auto& m, const auto& key) {
    auto it = m.find(key);
    return it == m.end() ? 0.0 : it->second;
  };
  for (auto t : kPosTags) v.push_back(get(hf.per_pos, std::string(t)));
  for (auto t : kPosTags) {
    v.push_back(get(hf.per_pos_segment, std::pair{std::string(t), Segment::Question}));
    v.push_back(get(hf.per_pos_segment, std::pair{std::string(t), Segment::Context}));
  }
  return v;
}

inline HeuristicFeatures heuristic_from_vector(std::span<const double> v) {
  const auto& names = heuristic_feature_names();
  if (v.size() != names.size()) throw PreconditionError("heuristic vector has wrong length");
  HeuristicFeatures hf;
  hf.attr_to_question = v[0];
  hf.attr_to_context = v[1];
  std::size_t i = 2;
  for (auto t : kPosTags) hf.per_pos[std::string(t)] = v[i++];
  for (auto t : kPosTags) {
    hf.per_pos_segment[{std::string(t), Segment::Question}] = v[i++];
    hf.per_pos_segment[{std::string(t), Segment::Context}] = v[i++];
  }
  return hf;
}

// --- PCA ------------------------------------------------------------------------

struct PcaResult {
  Eigen::MatrixXd scores;              // T x k projections
  Eigen::MatrixXd components;          // H x k unit directions, zero columns past the rank
  Eigen::VectorXd explained_variance;  // k eigenvalues of the token covariance
  Eigen::RowVectorXd mean;             // 1 x H token centroid

  Eigen::MatrixXd reconstruct() const { return (scores * components.transpose()).rowwise() + mean; }
};

/// Per-instance PCA over the token axis. Columns are centered over tokens and
/// projected onto the top-k principal directions in descending eigenvalue
/// order; each direction's largest-magnitude loading is made positive.
/// Components beyond the numerical rank are zero.
inline PcaResult pca_reduce(const Eigen::MatrixXd& states, Eigen::Index k = 10) {
  const Eigen::Index t = states.rows();
  const Eigen::Index h = states.cols();
  if (t < 2) throw PreconditionError("pca_reduce: need at least 2 tokens, got " + std::to_string(t));
  if (k < 1) throw PreconditionError("pca_reduce: k must be >= 1");
  if (!states.allFinite()) throw PreconditionError("pca_reduce: non-finite hidden state");

  PcaResult r;
  r.mean = states.colwise().mean();
  const Eigen::MatrixXd centered = states.rowwise() - r.mean;
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& sv = svd.singularValues();
  const Eigen::MatrixXd& v = svd.matrixV();

  r.components = Eigen::MatrixXd::Zero(h, k);
  r.explained_variance = Eigen::VectorXd::Zero(k);
  const double tol = sv.size() ? sv(0) * static_cast<double>(std::max(t, h)) * Eigen::NumTraits<double>::epsilon() : 0.0;
  for (Eigen::Index j = 0; j < std::min<Eigen::Index>(k, sv.size()); ++j) {
    if (sv(j) <= tol) break;
    Eigen::VectorXd dir = v.col(j);
    Eigen::Index arg = 0;
    dir.cwiseAbs().maxCoeff(&arg);
    if (dir(arg) < 0) dir = -dir;
    r.components.col(j) = dir;
    r.explained_variance(j) = sv(j) * sv(j) / static_cast<double>(t - 1);
  }
  r.scores = centered * r.components;
  return r;
}

// --- salient token selection ----------------------------------------------------

/// Context-segment token indices.
inline std::vector<std::size_t> context_indices(const AttributionRecord& attr) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < attr.tokens.size(); ++i) {
    if (attr.tokens[i].segment == Segment::Context) out.push_back(i);
  }
  return out;
}

/// Context tokens overlapping the half-open code-point span of the answer.
inline std::vector<std::size_t> answer_indices(const AttributionRecord& attr, std::size_t char_start, std::size_t char_end) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < attr.tokens.size(); ++i) {
    const auto& t = attr.tokens[i];
    if (t.segment == Segment::Context && t.char_start < char_end && char_start < t.char_end) out.push_back(i);
  }
  return out;
}

/// ceil(fraction * n) with a small tolerance against binary fractions such
/// as 0.1 * 30 = 3.0000000000000004.
inline std::size_t fraction_count(double fraction, std::size_t n) {
  const double x = fraction * static_cast<double>(n);
  return static_cast<std::size_t>(std::max(0.0, std::ceil(x - 1e-9)));
}

/// Top ceil(fraction * |segment|) indices of `segment` by |importance|, at
/// least one; ties prefer the lower index. Returned in importance order.
inline std::vector<std::size_t> select_salient(const AttributionRecord& attr, std::span<const std::size_t> segment, double fraction) {
  if (segment.empty()) throw PreconditionError("select_salient: empty segment");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw PreconditionError("select_salient: fraction must be in (0, 1]");
  std::vector<std::size_t> idx(segment.begin(), segment.end());
  for (auto i : idx) {
    if (i >= attr.importance.size()) throw PreconditionError("select_salient: index outside attribution");
  }
  const std::size_t count = std::max<std::size_t>(1, fraction_count(fraction, idx.size()));
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    const double ia = std::abs(attr.importance[a]);
    const double ib = std::abs(attr.importance[b]);
    return ia != ib ? ia > ib : a < b;
  });
  idx.resize(count);
  return idx;
}

// --- dense rationale features -----------------------------------------------------

/// Mean reduced row over the context picks, then over the answer picks.
inline std::vector<double> dense_features(const Eigen::MatrixXd& reduced, std::span<const std::size_t> idx_context,
                                          std::span<const std::size_t> idx_answer) {
  if (idx_context.empty() || idx_answer.empty()) throw PreconditionError("dense_features: empty index list");
  const Eigen::Index k = reduced.cols();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(2 * k));
  for (auto idx : {idx_context, idx_answer}) {
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(k);
    for (auto i : idx) {
      if (static_cast<Eigen::Index>(i) >= reduced.rows()) throw PreconditionError("dense_features: index outside matrix");
      sum += reduced.row(static_cast<Eigen::Index>(i));
    }
    sum /= static_cast<double>(idx.size());
    out.insert(out.end(), sum.data(), sum.data() + k);
  }
  return out;
}

struct DenseFeatureConfig {
  double context_fraction = 0.10;
  double answer_fraction = 0.20;
  Eigen::Index k_components = 10;
  Aggregation aggregation = Aggregation::Absolute;

  void validate() const {
    if (!(context_fraction > 0 && context_fraction <= 1) || !(answer_fraction > 0 && answer_fraction <= 1)) {
      throw PreconditionError("dense feature fractions must be in (0, 1]");
    }
    if (k_components < 1) throw PreconditionError("k_components must be >= 1");
  }
};

inline std::vector<std::string> dense_feature_names(Eigen::Index k) {
  std::vector<std::string> n;
  for (Eigen::Index i = 0; i < k; ++i) n.push_back("dense_context_" + std::to_string(i));
  for (Eigen::Index i = 0; i < k; ++i) n.push_back("dense_answer_" + std::to_string(i));
  return n;
}

// --- calibration records ------------------------------------------------------------

enum class FeatureSet { Conf, Heuristic, Dense };

inline std::string_view to_string(FeatureSet f) noexcept {
  switch (f) {
    case FeatureSet::Conf: return "conf";
    case FeatureSet::Heuristic: return "heuristic";
    case FeatureSet::Dense: return "dense";
  }
  return "conf";
}

/// "conf", "heuristic" (= conf+heuristic) or "dense" (= conf+heuristic+dense).
inline FeatureSet parse_feature_set(std::string_view s) {
  if (s == "conf") return FeatureSet::Conf;
  if (s == "heuristic" || s == "conf+heuristic") return FeatureSet::Heuristic;
  if (s == "dense" || s == "conf+heuristic+dense") return FeatureSet::Dense;
  throw PreconditionError("unknown feature set '" + std::string(s) + "' (expected conf, heuristic or dense)");
}

struct CalibrationRecord {
  std::string example_id;
  std::string dataset;
  std::string method;
  double conf = 0.0;
  std::optional<HeuristicFeatures> heuristic;
  std::optional<std::vector<double>> dense;
  bool label = false;

  /// Fixed order: conf, heuristic block, dense block.
  std::vector<std::string> feature_names() const {
    std::vector<std::string> n{"conf"};
    if (heuristic) n.insert(n.end(), heuristic_feature_names().begin(), heuristic_feature_names().end());
    if (dense) {
      const auto d = dense_feature_names(static_cast<Eigen::Index>(dense->size() / 2));
      n.insert(n.end(), d.begin(), d.end());
    }
    return n;
  }

  std::vector<double> values() const {
    std::vector<double> v{conf};
    if (heuristic) {
      const auto h = heuristic_vector(*heuristic);
      v.insert(v.end(), h.begin(), h.end());
    }
    if (dense) v.insert(v.end(), dense->begin(), dense->end());
    return v;
  }

  /// The record restricted to a feature set's blocks.
  CalibrationRecord project(FeatureSet set) const {
    CalibrationRecord r = *this;
    if (set == FeatureSet::Conf) r.heuristic.reset();
    if (set != FeatureSet::Dense) r.dense.reset();
    if (set != FeatureSet::Conf && !r.heuristic) throw PreconditionError("record '" + example_id + "' has no heuristic features");
    if (set == FeatureSet::Dense && !r.dense) throw PreconditionError("record '" + example_id + "' has no dense features");
    return r;
  }
};

/// Everything the features stage gathered for one example.
struct ExampleEvidence {
  QAResult prediction;
  AttributionRecord attribution;
  std::optional<HiddenStateMatrix> hidden;
};

inline void check_alignment(const std::string& id, const AttributionRecord& attr, const HiddenStateMatrix& hidden) {
  bool aligned = attr.tokens.size() == hidden.tokens.size();
  for (std::size_t i = 0; aligned && i < attr.tokens.size(); ++i) {
    const auto& a = attr.tokens[i];
    const auto& b = hidden.tokens[i];
    aligned = a.text == b.text && a.segment == b.segment && a.char_start == b.char_start && a.char_end == b.char_end;
  }
  if (!aligned) throw PreconditionError("example '" + id + "': hidden states not aligned with attribution tokens");
}

/// Dense rationale vector: per-instance PCA, then the means of the salient
/// context and predicted-answer rows. Question tokens never contribute.
inline std::vector<double> dense_for_example(const ExampleEvidence& ev, const DenseFeatureConfig& cfg) {
  const auto& attr = ev.attribution;
  const auto ctx = context_indices(attr);
  auto ans = answer_indices(attr, ev.prediction.char_start, ev.prediction.char_end);
  if (ans.empty()) throw PreconditionError("predicted answer covers no context token");
  const auto pca = pca_reduce(ev.hidden->values, cfg.k_components);
  return dense_features(pca.scores, select_salient(attr, ctx, cfg.context_fraction), select_salient(attr, ans, cfg.answer_fraction));
}

/// One record per example; label = exact match of the predicted span.
inline std::vector<CalibrationRecord> assemble_records(const Dataset& dataset, const std::vector<ExampleEvidence>& evidence,
                                                       const DenseFeatureConfig& cfg, FeatureSet set) {
  cfg.validate();
  if (evidence.size() != dataset.size()) {
    throw PreconditionError("assemble_records: " + std::to_string(evidence.size()) + " evidence entries for " +
                            std::to_string(dataset.size()) + " examples");
  }
  std::vector<CalibrationRecord> out;
  out.reserve(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& ex = dataset[i];
    const auto& ev = evidence[i];
    try {
      CalibrationRecord r;
      r.example_id = ex.id;
      r.dataset = dataset.name();
      r.method = std::string(to_string(ev.attribution.method));
      r.conf = ev.prediction.prob;
      r.label = exact_match(ev.prediction.answer, ex.gold_answers);
      if (set != FeatureSet::Conf) r.heuristic = heuristic_features(ev.attribution, cfg.aggregation);
      if (set == FeatureSet::Dense) {
        if (!ev.hidden) throw PreconditionError("hidden states missing");
        check_alignment(ex.id, ev.attribution, *ev.hidden);
        r.dense = dense_for_example(ev, cfg);
      }
      out.push_back(std::move(r));
    } catch (const PreconditionError& e) {
      throw PreconditionError("example '" + ex.id + "': " + e.what());
    }
  }
  return out;
}

// --- feature store (JSONL) --------------------------------------------------------------

inline nlohmann::json to_json(const CalibrationRecord& r) {
  return {{"example_id", r.example_id}, {"dataset", r.dataset},     {"method", r.method},
          {"feature_names", r.feature_names()}, {"values", r.values()}, {"label", r.label}};
}

inline CalibrationRecord record_from_json(const nlohmann::json& j, std::size_t line = 0) {
  try {
    CalibrationRecord r;
    r.example_id = j.at("example_id").get<std::string>();
    r.dataset = j.value("dataset", std::string());
    r.method = j.value("method", std::string());
    r.label = j.at("label").get<bool>();
    const auto names = j.at("feature_names").get<std::vector<std::string>>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (names.size() != values.size() || names.empty() || names[0] != "conf") {
      throw ParseError("feature record '" + r.example_id + "' has inconsistent feature names", line);
    }
    r.conf = values[0];
    std::size_t pos = 1;
    const auto& hn = heuristic_feature_names();
    if (names.size() >= pos + hn.size() && std::equal(hn.begin(), hn.end(), names.begin() + static_cast<std::ptrdiff_t>(pos))) {
      r.heuristic = heuristic_from_vector(std::span(values).subspan(pos, hn.size()));
      pos += hn.size();
    }
    if (pos < names.size()) {
      const auto rest = names.size() - pos;
      const auto dn = dense_feature_names(static_cast<Eigen::Index>(rest / 2));
      if (rest % 2 != 0 || !std::equal(dn.begin(), dn.end(), names.begin() + static_cast<std::ptrdiff_t>(pos))) {
        throw ParseError("feature record '" + r.example_id + "' has unknown feature names", line);
      }
      r.dense = std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(pos), values.end());
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed feature record: ") + e.what(), line);
  }
}

inline std::string to_jsonl(const std::vector<CalibrationRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  return out;
}

inline std::vector<CalibrationRecord> parse_feature_store(std::string_view content) {
  std::vector<CalibrationRecord> out;
  detail::for_each_line(content, [&](std::string_view line, std::size_t lineno) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    out.push_back(record_from_json(j, lineno));
  });
  return out;
}

}  // namespace cfood::features
