#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cfood/client.hpp"
#include "cfood/corpus.hpp"
#include "cfood/counterfactual.hpp"
#include "cfood/detail/csv.hpp"
#include "cfood/detail/hash.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/detail/utf8.hpp"
#include "cfood/error.hpp"

namespace cfood::diversity {

// --- edit distance ------------------------------------------------------------

/// Character-level (code point) edit distance with unit insert, delete and
/// substitute costs.
inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  auto s = detail::decode_utf8(a);
  auto t = detail::decode_utf8(b);
  if (s.size() < t.size()) std::swap(s, t);
  std::vector<std::size_t> row(t.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= s.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= t.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (s[i - 1] == t[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[t.size()];
}

/// Distance divided by the longer length; 0 when both strings are empty.
inline double levenshtein_norm(std::string_view a, std::string_view b) {
  const std::size_t longest = std::max(detail::codepoint_length(a), detail::codepoint_length(b));
  if (longest == 0) return 0.0;
  return std::min(1.0, static_cast<double>(levenshtein(a, b)) / static_cast<double>(longest));
}

// --- self-BLEU ----------------------------------------------------------------

/// Lowercased whitespace tokens with ASCII punctuation split into single
/// tokens.
inline std::vector<std::string> bleu_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (const auto& chunk : detail::split_whitespace(text)) {
    std::string word;
    for (unsigned char c : chunk) {
      if (c < 0x80 && std::ispunct(c)) {
        if (!word.empty()) out.push_back(std::move(word));
        word.clear();
        out.emplace_back(1, static_cast<char>(c));
      } else {
        word.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
      }
    }
    if (!word.empty()) out.push_back(std::move(word));
  }
  return out;
}

namespace ngram {

using Ngram = std::vector<std::string>;

inline std::map<Ngram, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return counts;
}

}  // namespace ngram

inline constexpr std::size_t kBleuOrder = 4;

/// BLEU of `hypothesis` against the single reference: uniform weights over
/// orders 1..4, clipped counts, brevity penalty, add-one smoothing for
/// orders >= 2. Zero unigram overlap or an empty hypothesis scores 0.
inline double sentence_bleu(const std::vector<std::string>& reference, const std::vector<std::string>& hypothesis) {
  const std::size_t c = hypothesis.size();
  const std::size_t r = reference.size();
  if (c == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const auto hyp = ngram::ngram_counts(hypothesis, n);
    const auto ref = ngram::ngram_counts(reference, n);
    std::size_t matched = 0;
    std::size_t total = 0;
    for (const auto& [gram, count] : hyp) {
      total += count;
      auto it = ref.find(gram);
      if (it != ref.end()) matched += std::min(count, it->second);
    }
    if (n == 1) {
      if (matched == 0) return 0.0;
      log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    } else {
      log_sum += std::log(static_cast<double>(matched + 1) / static_cast<double>(total + 1));
    }
  }
  const double bp = c < r ? std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c)) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(kBleuOrder));
}

/// Surface similarity of a counterfactual to its original; lower = more diverse.
inline double self_bleu(std::string_view original, std::string_view counterfactual) {
  return sentence_bleu(bleu_tokens(original), bleu_tokens(counterfactual));
}

// --- semantic metrics -----------------------------------------------------------

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw PreconditionError("cosine: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw PreconditionError("cosine: zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double embedding_similarity(std::string_view original, std::string_view counterfactual, ModelClient& client) {
  const auto a = client.embed(original);
  const auto b = client.embed(counterfactual);
  return cosine(a, b);
}

enum class EquivalenceAggregation { Product, Min };

inline EquivalenceAggregation parse_equivalence(std::string_view s) {
  if (s == "product") return EquivalenceAggregation::Product;
  if (s == "min") return EquivalenceAggregation::Min;
  throw PreconditionError("unknown equivalence aggregation '" + std::string(s) + "'");
}

inline double combine_entailment(double forward, double backward, EquivalenceAggregation agg) {
  return agg == EquivalenceAggregation::Product ? forward * backward : std::min(forward, backward);
}

/// Bidirectional entailment: P(o entails c) combined with P(c entails o).
inline double semantic_equivalence(std::string_view original, std::string_view counterfactual, ModelClient& client,
                                   EquivalenceAggregation agg = EquivalenceAggregation::Product) {
  return combine_entailment(client.nli_entail(original, counterfactual), client.nli_entail(counterfactual, original), agg);
}

// --- report ---------------------------------------------------------------------

struct DiversityRow {
  std::string label;
  double self_bleu = 0.0;
  double levenshtein_norm = 0.0;
  double sbert_sim = 0.0;
  double semantic_equivalence = 0.0;
  std::size_t n_pairs = 0;
};

struct DiversityOptions {
  std::uint64_t reference_seed = 0;
  EquivalenceAggregation equivalence = EquivalenceAggregation::Product;
  std::size_t workers = 1;
};

struct TextPair {
  std::string original;
  std::string counterfactual;
};

/// Mean metrics over pairs. Embeddings are fetched once per distinct text.
inline DiversityRow score_pairs(std::string label, const std::vector<TextPair>& pairs, ModelClient& client,
                                const DiversityOptions& opts) {
  if (pairs.empty()) throw PreconditionError("diversity row '" + label + "' has no pairs");
  std::vector<std::string> texts;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& p : pairs) {
    for (const auto* t : {&p.original, &p.counterfactual}) {
      if (slot.emplace(*t, texts.size()).second) texts.push_back(*t);
    }
  }
  std::vector<std::vector<double>> emb(texts.size());
  cfood::detail::parallel_for(texts.size(), opts.workers, [&](std::size_t i) { emb[i] = client.embed(texts[i]); });

  std::vector<double> bleu(pairs.size()), lev(pairs.size()), sim(pairs.size()), eq(pairs.size());
  cfood::detail::parallel_for(pairs.size(), opts.workers, [&](std::size_t i) {
    const auto& p = pairs[i];
    bleu[i] = self_bleu(p.original, p.counterfactual);
    lev[i] = levenshtein_norm(p.original, p.counterfactual);
    sim[i] = cosine(emb[slot.at(p.original)], emb[slot.at(p.counterfactual)]);
    eq[i] = semantic_equivalence(p.original, p.counterfactual, client, opts.equivalence);
  });
  const auto mean = [&](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  return {std::move(label), mean(bleu), mean(lev), mean(sim), mean(eq), pairs.size()};
}

/// Uniform random derangement of [0, n) by rejection over Fisher-Yates
/// shuffles driven by splitmix64.
inline std::vector<std::size_t> seeded_derangement(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw PreconditionError("derangement needs at least 2 items");
  cfood::detail::SplitMix rng(seed);
  std::vector<std::size_t> perm(n);
  for (;;) {
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.next() % (i + 1)]);
    bool fixed_point = false;
    for (std::size_t i = 0; i < n && !fixed_point; ++i) fixed_point = perm[i] == i;
    if (!fixed_point) return perm;
  }
}

inline constexpr std::string_view kReferenceLabel = "Reference";

/// One row per generator label (first-appearance order) over instances that
/// survived filtering, then a Reference row pairing each original question
/// with a different question from the dataset.
inline std::vector<DiversityRow> diversity_report(const Dataset& dataset, const CfStore& store, ModelClient& client,
                                                  const DiversityOptions& opts) {
  std::vector<std::string> missing;
  std::vector<std::string> labels;
  std::map<std::string, std::vector<TextPair>> by_label;
  for (const auto& cf : store) {
    if (!(cf.status == CfStatus::Raw || is_usable(cf.status))) continue;
    const auto* src = dataset.find(cf.source_id);
    if (!src) {
      missing.push_back(cf.source_id);
      continue;
    }
    if (!by_label.count(cf.generator_name)) labels.push_back(cf.generator_name);
    by_label[cf.generator_name].push_back({src->question, cf.question});
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& m : missing) ids += (ids.empty() ? "" : ", ") + m;
    throw PreconditionError("unresolvable source ids: " + ids);
  }
  std::vector<DiversityRow> rows;
  for (const auto& label : labels) rows.push_back(score_pairs(label, by_label.at(label), client, opts));

  const auto perm = seeded_derangement(dataset.size(), opts.reference_seed);
  std::vector<TextPair> ref;
  for (std::size_t i = 0; i < dataset.size(); ++i) ref.push_back({dataset[i].question, dataset[perm[i]].question});
  rows.push_back(score_pairs(std::string(kReferenceLabel), ref, client, opts));
  return rows;
}

inline std::string to_csv(const std::vector<DiversityRow>& rows) {
  using cfood::detail::fmt_fixed;
  std::string out = "label,self_bleu,levenshtein,sbert_sim,sem_equiv,n_pairs\n";
  for (const auto& r : rows) {
    out += cfood::detail::csv_row({r.label, fmt_fixed(r.self_bleu), fmt_fixed(r.levenshtein_norm), fmt_fixed(r.sbert_sim),
                                   fmt_fixed(r.semantic_equivalence), std::to_string(r.n_pairs)});
  }
  return out;
}

}  // namespace cfood::diversity
