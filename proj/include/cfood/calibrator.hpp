#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/detail/csv.hpp"
#include "cfood/detail/hash.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/error.hpp"
#include "cfood/features.hpp"

namespace cfood::calibration {

// --- random forest ----------------------------------------------------------------

struct ForestParams {
  int n_estimators = 300;
  int max_depth = 20;
  std::uint64_t seed = 0;
  std::size_t min_samples_split = 2;
  std::size_t features_per_split = 0;  // 0 = floor(sqrt(d))
  bool bootstrap = true;
  std::size_t workers = 1;

  void validate() const {
    if (n_estimators < 1) throw PreconditionError("n_estimators must be >= 1");
    if (max_depth < 1) throw PreconditionError("max_depth must be >= 1");
    if (min_samples_split < 2) throw PreconditionError("min_samples_split must be >= 2");
  }
};

/// Trees for heuristic-only inputs default to 300, dense inputs to 500.
inline int default_estimators(features::FeatureSet set) { return set == features::FeatureSet::Dense ? 500 : 300; }

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // positive fraction of the node's training samples
};

class Tree {
public:
  std::vector<TreeNode> nodes;

  double predict(std::span<const double> x) const {
    int at = 0;
    while (nodes[static_cast<std::size_t>(at)].feature >= 0) {
      const auto& n = nodes[static_cast<std::size_t>(at)];
      at = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(at)].value;
  }

  int depth() const { return depth_from(0); }

private:
  int depth_from(int i) const {
    const auto& n = nodes[static_cast<std::size_t>(i)];
    return n.feature < 0 ? 0 : 1 + std::max(depth_from(n.left), depth_from(n.right));
  }
};

namespace cart {

struct Data {
  const std::vector<std::vector<double>>& x;
  const std::vector<bool>& y;
  std::size_t dim;
};

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double impurity = 0.0;  // n_l * gini_l + n_r * gini_r
};

inline double weighted_gini(double pos, double n) { return n - (pos * pos + (n - pos) * (n - pos)) / n; }

/// Best split on one feature over midpoints of sorted distinct values;
/// returns false when the feature is constant on the node.
inline bool best_on_feature(const Data& d, std::vector<std::size_t>& idx, int f, Split& best) {
  const auto fu = static_cast<std::size_t>(f);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return d.x[a][fu] != d.x[b][fu] ? d.x[a][fu] < d.x[b][fu] : a < b;
  });
  const double n = static_cast<double>(idx.size());
  double total_pos = 0;
  for (auto i : idx) total_pos += d.y[i] ? 1 : 0;
  double left_pos = 0;
  bool found = false;
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    left_pos += d.y[idx[k]] ? 1 : 0;
    const double a = d.x[idx[k]][fu];
    const double b = d.x[idx[k + 1]][fu];
    if (a == b) continue;
    const double nl = static_cast<double>(k + 1);
    const double imp = weighted_gini(left_pos, nl) + weighted_gini(total_pos - left_pos, n - nl);
    if (best.feature < 0 || imp < best.impurity) {
      double mid = a + (b - a) / 2;
      if (!(mid < b)) mid = a;
      best = {f, mid, imp};
    }
    found = true;
  }
  return found;
}

class Builder {
public:
  Builder(const Data& d, const ForestParams& p, std::uint64_t tree_seed, std::size_t m)
      : d_(d), p_(p), seed_(tree_seed), m_(m) {}

  Tree build(std::vector<std::size_t> sample) {
    Tree t;
    grow(t, std::move(sample), 0, 1);
    return t;
  }

private:
  int grow(Tree& t, std::vector<std::size_t> idx, int depth, std::uint64_t heap_id) {
    const int at = static_cast<int>(t.nodes.size());
    t.nodes.emplace_back();
    std::size_t pos = 0;
    for (auto i : idx) pos += d_.y[i] ? 1 : 0;
    t.nodes.back().value = static_cast<double>(pos) / static_cast<double>(idx.size());
    if (depth >= p_.max_depth || idx.size() < p_.min_samples_split || pos == 0 || pos == idx.size()) return at;

    const auto split = choose(idx, heap_id);
    if (split.feature < 0) return at;
    std::vector<std::size_t> left, right;
    for (auto i : idx) (d_.x[i][static_cast<std::size_t>(split.feature)] <= split.threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    t.nodes[static_cast<std::size_t>(at)].feature = split.feature;
    t.nodes[static_cast<std::size_t>(at)].threshold = split.threshold;
    const int l = grow(t, std::move(left), depth + 1, 2 * heap_id);
    const int r = grow(t, std::move(right), depth + 1, 2 * heap_id + 1);
    t.nodes[static_cast<std::size_t>(at)].left = l;
    t.nodes[static_cast<std::size_t>(at)].right = r;
    return at;
  }

  // Sampled features first (ascending index, so ties favour the lower
  // feature); if all are constant, the remaining features in index order
  // until one can split.
  Split choose(std::vector<std::size_t>& idx, std::uint64_t heap_id) {
    detail::SplitMix rng(detail::derive_seed(seed_, heap_id));
    std::vector<int> order(d_.dim);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < m_; ++i) {
      const auto j = i + static_cast<std::size_t>(rng.next() % (d_.dim - i));
      std::swap(order[i], order[j]);
    }
    std::vector<int> sampled(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m_));
    std::sort(sampled.begin(), sampled.end());
    Split best;
    for (int f : sampled) best_on_feature(d_, idx, f, best);
    if (best.feature >= 0) return best;
    std::vector<int> rest(order.begin() + static_cast<std::ptrdiff_t>(m_), order.end());
    std::sort(rest.begin(), rest.end());
    for (int f : rest) {
      if (best_on_feature(d_, idx, f, best)) return best;
    }
    return best;
  }

  const Data& d_;
  const ForestParams& p_;
  std::uint64_t seed_;
  std::size_t m_;
};

}  // namespace cart

class Forest {
public:
  Forest() = default;
  Forest(std::vector<Tree> trees, std::size_t dim) : trees_(std::move(trees)), dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  const std::vector<Tree>& trees() const noexcept { return trees_; }

  /// Mean positive-leaf frequency over trees.
  double predict_proba(std::span<const double> x) const {
    if (x.size() != dim_) {
      throw PreconditionError("predict_proba: expected " + std::to_string(dim_) + " features, got " + std::to_string(x.size()));
    }
    if (trees_.empty()) throw PreconditionError("predict_proba: untrained forest");
    double sum = 0.0;
    for (const auto& t : trees_) sum += t.predict(x);
    return sum / static_cast<double>(trees_.size());
  }

private:
  std::vector<Tree> trees_;
  std::size_t dim_ = 0;
};

/// Gini CART ensemble with bootstrap resampling and per-split feature
/// subsampling. Deterministic given the seed; independent of `workers`.
inline Forest train_forest(const std::vector<std::vector<double>>& x, const std::vector<bool>& y, const ForestParams& params) {
  params.validate();
  if (x.size() != y.size()) throw PreconditionError("train_forest: feature/label count mismatch");
  if (x.size() < 2) throw PreconditionError("train_forest: need at least 2 records");
  const std::size_t dim = x[0].size();
  if (dim == 0) throw PreconditionError("train_forest: empty feature vectors");
  for (const auto& row : x) {
    if (row.size() != dim) throw PreconditionError("train_forest: ragged feature matrix");
    for (double v : row) {
      if (!std::isfinite(v)) throw PreconditionError("train_forest: non-finite feature value");
    }
  }
  const auto n_pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), true));
  if (n_pos == 0 || n_pos == y.size()) throw PreconditionError("train_forest: training set has a single class");

  std::size_t m = params.features_per_split ? params.features_per_split
                                            : static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(dim))));
  m = std::clamp<std::size_t>(m, 1, dim);
  const cart::Data data{x, y, dim};
  std::vector<Tree> trees(static_cast<std::size_t>(params.n_estimators));
  detail::parallel_for(trees.size(), params.workers, [&](std::size_t t) {
    const auto tree_seed = detail::derive_seed(params.seed, t);
    std::vector<std::size_t> sample(x.size());
    if (params.bootstrap) {
      detail::SplitMix rng(tree_seed);
      for (auto& s : sample) s = static_cast<std::size_t>(rng.next() % x.size());
    } else {
      std::iota(sample.begin(), sample.end(), std::size_t{0});
    }
    trees[t] = cart::Builder(data, params, tree_seed, m).build(std::move(sample));
  });
  return Forest(std::move(trees), dim);
}

inline Forest train_forest(const std::vector<features::CalibrationRecord>& records, const ForestParams& params) {
  std::vector<std::vector<double>> x;
  std::vector<bool> y;
  for (const auto& r : records) {
    x.push_back(r.values());
    y.push_back(r.label);
  }
  return train_forest(x, y, params);
}

// --- metrics ----------------------------------------------------------------------

struct CalibrationPrediction {
  double conf = 0.0;
  bool correct = false;
};

/// Mann-Whitney statistic, ties counting one half. Computed from an integer
/// count of doubled wins so the result does not depend on input order.
inline double roc_auc(std::span<const CalibrationPrediction> preds) {
  std::vector<double> pos, neg;
  for (const auto& p : preds) (p.correct ? pos : neg).push_back(p.conf);
  if (pos.empty() || neg.empty()) throw PreconditionError("roc_auc: both classes must be present");
  std::sort(neg.begin(), neg.end());
  std::uint64_t doubled = 0;
  for (double s : pos) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), s);
    const auto hi = std::upper_bound(lo, neg.end(), s);
    doubled += 2 * static_cast<std::uint64_t>(lo - neg.begin()) + static_cast<std::uint64_t>(hi - lo);
  }
  return static_cast<double>(doubled) * 0.5 / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

enum class Binning { Rank, EqualWidth };

inline Binning parse_binning(std::string_view s) {
  if (s == "rank") return Binning::Rank;
  if (s == "width") return Binning::EqualWidth;
  throw PreconditionError("unknown ECE binning '" + std::string(s) + "' (expected rank or width)");
}

/// Expected calibration error. Rank binning sorts by (conf, label) and cuts
/// n/K-sized bins, the last absorbing the remainder; equal-width binning uses
/// [k/K, (k+1)/K) with 1.0 in the last bin.
inline double ece(std::span<const CalibrationPrediction> preds, std::size_t k, Binning binning = Binning::Rank) {
  const std::size_t n = preds.size();
  if (n == 0) throw PreconditionError("ece: no predictions");
  if (k < 1) throw PreconditionError("ece: K must be >= 1");
  std::vector<std::size_t> bin_of(n);
  if (binning == Binning::Rank) {
    if (k > n) throw PreconditionError("ece: K=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (preds[a].conf != preds[b].conf) return preds[a].conf < preds[b].conf;
      return preds[a].correct < preds[b].correct;
    });
    const std::size_t size = n / k;
    for (std::size_t r = 0; r < n; ++r) bin_of[order[r]] = std::min(r / size, k - 1);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double c = std::clamp(preds[i].conf, 0.0, 1.0);
      bin_of[i] = std::min(static_cast<std::size_t>(c * static_cast<double>(k)), k - 1);
    }
  }
  std::vector<double> gap(k, 0.0);
  std::vector<std::size_t> count(k, 0);
  // Per-bin sums in rank order keep the value independent of input order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (preds[a].conf != preds[b].conf) return preds[a].conf < preds[b].conf;
    return preds[a].correct < preds[b].correct;
  });
  for (auto i : order) {
    gap[bin_of[i]] += (preds[i].correct ? 1.0 : 0.0) - preds[i].conf;
    ++count[bin_of[i]];
  }
  double total = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    if (count[b] == 0) continue;
    total += static_cast<double>(count[b]) / static_cast<double>(n) * (std::abs(gap[b]) / static_cast<double>(count[b]));
  }
  return total;
}

struct MacroCe {
  double value = 0.0;
  double ice_pos = 0.0;
  double ice_neg = 0.0;
  bool degenerate = false;  // a class was absent and contributed 0
};

inline MacroCe macro_ce_detail(std::span<const CalibrationPrediction> preds) {
  if (preds.empty()) throw PreconditionError("macro_ce: no predictions");
  double pos_sum = 0, neg_sum = 0;
  std::size_t np = 0, nn = 0;
  for (const auto& p : preds) {
    if (p.correct) {
      pos_sum += 1.0 - p.conf;
      ++np;
    } else {
      neg_sum += p.conf;
      ++nn;
    }
  }
  MacroCe m;
  m.ice_pos = np ? pos_sum / static_cast<double>(np) : 0.0;
  m.ice_neg = nn ? neg_sum / static_cast<double>(nn) : 0.0;
  m.degenerate = np == 0 || nn == 0;
  m.value = 0.5 * (m.ice_pos + m.ice_neg);
  return m;
}

inline double macro_ce(std::span<const CalibrationPrediction> preds) { return macro_ce_detail(preds).value; }

inline double accuracy(std::span<const CalibrationPrediction> preds, double threshold = 0.5) {
  if (preds.empty()) throw PreconditionError("accuracy: no predictions");
  std::size_t hit = 0;
  for (const auto& p : preds) hit += ((p.conf >= threshold) == p.correct) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// --- calibration runs -------------------------------------------------------------

struct CalibrationConfig {
  std::size_t n_train = 500;
  std::size_t ece_bins = 10;
  Binning binning = Binning::Rank;
  ForestParams forest;
};

struct CalibReport {
  std::string dataset;
  std::string method;
  std::string feature_set;
  double acc = 0.0;
  std::optional<double> auc;  // undefined when the evaluation split has one class
  double ece = 0.0;
  double macro_ce = 0.0;
  bool macro_ce_degenerate = false;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::uint64_t split_seed = 0;
  std::uint64_t forest_seed = 0;
  int n_estimators = 0;
  int max_depth = 0;
};

inline nlohmann::json to_json(const CalibReport& r) {
  return {{"dataset", r.dataset},
          {"method", r.method},
          {"feature_set", r.feature_set},
          {"acc", r.acc},
          {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)},
          {"ece", r.ece},
          {"macro_ce", r.macro_ce},
          {"macro_ce_degenerate", r.macro_ce_degenerate},
          {"n_train", r.n_train},
          {"n_eval", r.n_eval},
          {"seeds", {{"split", r.split_seed}, {"forest", r.forest_seed}}},
          {"n_estimators", r.n_estimators},
          {"max_depth", r.max_depth}};
}

/// Seeded shuffle, train on the first n_train records, evaluate the rest.
inline CalibReport run_calibration(const std::vector<features::CalibrationRecord>& records, features::FeatureSet set,
                                   std::uint64_t split_seed, const CalibrationConfig& config) {
  if (records.size() <= config.n_train) {
    throw PreconditionError("run_calibration: need more than " + std::to_string(config.n_train) + " records, got " +
                            std::to_string(records.size()));
  }
  if (config.n_train < 2) throw PreconditionError("run_calibration: n_train must be >= 2");
  std::vector<features::CalibrationRecord> shuffled;
  shuffled.reserve(records.size());
  for (const auto& r : records) shuffled.push_back(r.project(set));
  detail::SplitMix rng(split_seed);
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.next() % (i + 1)]);

  const std::vector<features::CalibrationRecord> train(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(config.n_train));
  const auto forest = train_forest(train, config.forest);
  std::vector<CalibrationPrediction> preds;
  for (std::size_t i = config.n_train; i < shuffled.size(); ++i) {
    preds.push_back({forest.predict_proba(shuffled[i].values()), shuffled[i].label});
  }

  CalibReport r;
  r.dataset = records.front().dataset;
  r.method = records.front().method;
  r.feature_set = std::string(features::to_string(set));
  r.acc = accuracy(preds);
  const bool both = std::any_of(preds.begin(), preds.end(), [](auto& p) { return p.correct; }) &&
                    std::any_of(preds.begin(), preds.end(), [](auto& p) { return !p.correct; });
  if (both) r.auc = roc_auc(preds);
  r.ece = ece(preds, std::min(config.ece_bins, preds.size()), config.binning);
  const auto m = macro_ce_detail(preds);
  r.macro_ce = m.value;
  r.macro_ce_degenerate = m.degenerate;
  r.n_train = config.n_train;
  r.n_eval = preds.size();
  r.split_seed = split_seed;
  r.forest_seed = config.forest.seed;
  r.n_estimators = config.forest.n_estimators;
  r.max_depth = config.forest.max_depth;
  return r;
}

inline constexpr std::string_view kLedgerHeader = "dataset,method,feature_set,n_train,n_eval,acc,auc,ece,macro_ce\n";

inline std::string ledger_row(const CalibReport& r) {
  using detail::fmt_fixed;
  return detail::csv_row({r.dataset, r.method, r.feature_set, std::to_string(r.n_train), std::to_string(r.n_eval),
                          fmt_fixed(r.acc), r.auc ? fmt_fixed(*r.auc) : "", fmt_fixed(r.ece), fmt_fixed(r.macro_ce)});
}

inline std::string to_ledger_csv(const std::vector<CalibReport>& reports) {
  std::string out(kLedgerHeader);
  for (const auto& r : reports) out += ledger_row(r);
  return out;
}

}  // namespace cfood::calibration
