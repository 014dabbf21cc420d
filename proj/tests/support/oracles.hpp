#pragma once

// Slow, obviously-correct reference computations. Nothing here calls into
// the library except for plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

// --- calibration metrics ------------------------------------------------------

struct Pred {
  double conf;
  bool correct;
};

/// Sorted by (confidence, label), split into K bins of floor(n/K) with the
/// remainder in the last bin; sum over bins of |B|/n * |acc(B) - conf(B)|.
inline double ece_rank(std::vector<Pred> p, std::size_t k) {
  std::stable_sort(p.begin(), p.end(), [](const Pred& a, const Pred& b) {
    return a.conf < b.conf || (a.conf == b.conf && !a.correct && b.correct);
  });
  const std::size_t n = p.size();
  const std::size_t size = n / k;
  double e = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    const std::size_t lo = b * size;
    const std::size_t hi = b + 1 == k ? n : lo + size;
    std::vector<Pred> bin(p.begin() + static_cast<long>(lo), p.begin() + static_cast<long>(hi));
    if (bin.empty()) continue;
    double acc = 0, conf = 0;
    for (const auto& x : bin) {
      acc += x.correct;
      conf += x.conf;
    }
    acc /= static_cast<double>(bin.size());
    conf /= static_cast<double>(bin.size());
    e += static_cast<double>(bin.size()) / static_cast<double>(n) * std::abs(acc - conf);
  }
  return e;
}

/// Bins [b/K, (b+1)/K), confidence 1.0 falls into the last bin.
inline double ece_width(const std::vector<Pred>& p, std::size_t k) {
  std::vector<std::vector<Pred>> bins(k);
  for (const auto& x : p) {
    std::size_t b = 0;
    while (b + 1 < k && x.conf >= static_cast<double>(b + 1) / static_cast<double>(k)) ++b;
    bins[b].push_back(x);
  }
  double e = 0.0;
  for (const auto& bin : bins) {
    if (bin.empty()) continue;
    double acc = 0, conf = 0;
    for (const auto& x : bin) {
      acc += x.correct;
      conf += x.conf;
    }
    e += static_cast<double>(bin.size()) / static_cast<double>(p.size()) *
         std::abs(acc / static_cast<double>(bin.size()) - conf / static_cast<double>(bin.size()));
  }
  return e;
}

/// Mean of the per-class instance calibration errors; an absent class adds 0.
inline double macro_ce(const std::vector<Pred>& p) {
  double pos = 0, neg = 0;
  int np = 0, nn = 0;
  for (const auto& x : p) {
    if (x.correct) {
      pos += 1.0 - x.conf;
      ++np;
    } else {
      neg += x.conf;
      ++nn;
    }
  }
  return 0.5 * ((np ? pos / np : 0.0) + (nn ? neg / nn : 0.0));
}

/// Probability a random positive outranks a random negative, ties half.
inline double auc_pairs(const std::vector<Pred>& p) {
  double wins = 0;
  double pairs = 0;
  for (const auto& a : p) {
    if (!a.correct) continue;
    for (const auto& b : p) {
      if (b.correct) continue;
      pairs += 1;
      if (a.conf > b.conf) wins += 1;
      else if (a.conf == b.conf) wins += 0.5;
    }
  }
  return wins / pairs;
}

// --- edit distance --------------------------------------------------------------

inline std::size_t levenshtein_rec(const std::u32string& a, std::size_t i, const std::u32string& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  const std::size_t sub = levenshtein_rec(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  const std::size_t del = levenshtein_rec(a, i + 1, b, j) + 1;
  const std::size_t ins = levenshtein_rec(a, i, b, j + 1) + 1;
  return std::min({sub, del, ins});
}

inline std::size_t levenshtein(const std::u32string& a, const std::u32string& b) { return levenshtein_rec(a, 0, b, 0); }

// --- symmetric eigendecomposition -----------------------------------------------

struct Eigen_ {
  Eigen::VectorXd values;   // descending
  Eigen::MatrixXd vectors;  // columns
};

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
inline Eigen_ jacobi_eigen(Eigen::MatrixXd a) {
  const Eigen::Index n = a.rows();
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-30) break;
    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::pair<double, Eigen::Index>> order;
  for (Eigen::Index i = 0; i < n; ++i) order.emplace_back(a(i, i), i);
  std::sort(order.begin(), order.end(), [](auto& x, auto& y) { return x.first > y.first; });
  Eigen_ out{Eigen::VectorXd(n), Eigen::MatrixXd(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = order[static_cast<std::size_t>(i)].first;
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)].second);
  }
  return out;
}

/// Sample covariance over rows.
inline Eigen::MatrixXd covariance(const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  return c.transpose() * c / static_cast<double>(x.rows() - 1);
}

// --- faithfulness under the mock reader ---------------------------------------------

// For a context of n word tokens whose predicted answer is the single token
// at `answer` and whose question shares no word with the window (so the full
// probability is 0.2), masking a set M of other tokens gives
//   p = 0.05 + 0.15 * (W - sum_{i in M} w_i) / W,   w_i = 1 / (1 + |i - answer|).
// With attention importances equal to w_i, the top ceil(pct * (n-1) / 100)
// tokens are the nearest ones (lower index first on ties).
struct FaithClosedForm {
  double comprehensiveness;
  double sufficiency;
};

inline FaithClosedForm mock_faithfulness(std::size_t n, std::size_t answer, int pct) {
  std::vector<std::pair<double, std::size_t>> w;
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == answer) continue;
    const double d = i < answer ? static_cast<double>(answer - i) : static_cast<double>(i - answer);
    w.emplace_back(1.0 / (1.0 + d), i);
    total += 1.0 / (1.0 + d);
  }
  std::sort(w.begin(), w.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  const std::size_t m = w.size();
  const std::size_t top = (static_cast<std::size_t>(pct) * m + 99) / 100;
  double top_mass = 0;
  for (std::size_t r = 0; r < top; ++r) top_mass += w[r].first;
  return {0.15 * top_mass / total, 1.0 - 0.15 * (total - top_mass) / total};
}

// --- out-of-domain gain -------------------------------------------------------------

inline double mean_gain(const std::map<std::string, double>& base, const std::map<std::string, double>& model,
                        const std::vector<std::string>& datasets) {
  double s = 0;
  for (const auto& d : datasets) s += model.at(d) - base.at(d);
  return s / static_cast<double>(datasets.size());
}

}  // namespace oracle
