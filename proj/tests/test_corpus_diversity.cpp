#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "cfood/corpus.hpp"
#include "cfood/diversity.hpp"
#include "cfood/detail/utf8.hpp"
#include "cfood/testing/mock_backend.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace cfood;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
  const auto p = std::filesystem::temp_directory_path() / ("cfood_test_" + name);
  detail::write_file(p, content);
  return p;
}

}  // namespace

TEST(AnswerScoring, NormalizationDropsArticlesPunctuationAndCase) {
  EXPECT_EQ(normalize_answer("The  Eiffel Tower!"), "eiffel tower");
  EXPECT_TRUE(exact_match("an apple", {"Apple"}));
  EXPECT_FALSE(exact_match("apples", {"apple"}));
}

TEST(AnswerScoring, F1TakesBestGold) {
  EXPECT_DOUBLE_EQ(f1_score("new york city", {"york", "new york city"}), 1.0);
  // 2 shared tokens; precision 2/3, recall 2/2.
  EXPECT_NEAR(f1_score("new york city", {"new york"}), 0.8, 1e-12);
  EXPECT_DOUBLE_EQ(f1_score("paris", {"london"}), 0.0);
}

TEST(AnswerScoring, EvaluateRequiresOnePredictionPerExample) {
  Dataset ds("d", {{"a", "q?", "ctx Paris", {"Paris"}, {}, "d"}});
  EXPECT_THROW(evaluate(ds, {}), PreconditionError);
  const auto s = evaluate(ds, {"paris"});
  EXPECT_EQ(s.n, 1u);
  EXPECT_DOUBLE_EQ(s.em, 1.0);
}

TEST(DatasetIo, MrqaSpansAreInclusiveOnDisk) {
  const std::string content =
      R"({"header": {"dataset": "toy"}})"
      "\n"
      R"({"context": "Héllo Paris", "qas": [{"qid": "x", "question": "Where?", "answers": ["Paris"], "detected_answers": [{"text": "Paris", "char_spans": [[6, 10]]}]}]})"
      "\n";
  const auto ds = parse_dataset(content, DatasetFormat::MrqaJsonl);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds.name(), "toy");
  ASSERT_EQ(ds[0].gold_spans.size(), 1u);
  EXPECT_EQ(ds[0].gold_spans[0].start, 6u);
  EXPECT_EQ(ds[0].gold_spans[0].end, 11u);  // half-open, code points

  // Round trip through the writer.
  const auto back = parse_dataset(to_mrqa_jsonl(ds), DatasetFormat::MrqaJsonl);
  EXPECT_EQ(back[0].gold_spans[0].end, 11u);
  EXPECT_EQ(back[0].context, ds[0].context);
}

TEST(DatasetIo, SpanMustMatchAnswerText) {
  const std::string bad =
      R"({"context": "Hello Paris", "qas": [{"qid": "x", "question": "Where?", "answers": ["Paris"], "detected_answers": [{"text": "Paris", "char_spans": [[0, 4]]}]}]})"
      "\n";
  EXPECT_THROW(parse_dataset(bad, DatasetFormat::MrqaJsonl), ParseError);
}

TEST(DatasetIo, MalformedLineReportsLineNumber) {
  const std::string bad = "{\"header\": {}}\n{not json\n";
  try {
    parse_dataset(bad, DatasetFormat::MrqaJsonl);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(DatasetIo, SquadJson) {
  const auto p = write_temp("squad.json", R"({"version": "1.1", "data": [{"title": "t", "paragraphs": [
      {"context": "Rome is in Italy.", "qas": [{"id": "s1", "question": "Where is Rome?", "answers": [{"text": "Italy", "answer_start": 11}]}]}]}]})");
  const auto ds = load_dataset(p, DatasetFormat::SquadJson);
  ASSERT_EQ(ds.size(), 1u);
  EXPECT_EQ(ds[0].gold_answers, std::vector<std::string>{"Italy"});
  EXPECT_EQ(ds[0].gold_spans[0].start, 11u);
  EXPECT_THROW(parse_dataset_format("csv"), PreconditionError);
}

TEST(DatasetIo, BundledMiniCorpusLoads) {
  const auto ds = load_dataset(std::filesystem::path(CFOOD_SOURCE_DIR) / "data/mini/mini_squad.jsonl", DatasetFormat::MrqaJsonl);
  EXPECT_EQ(ds.size(), 20u);
  const auto* poke = ds.find("m04");
  ASSERT_NE(poke, nullptr);
  EXPECT_EQ(poke->gold_answers.front(), "20th");
}

// --- Levenshtein --------------------------------------------------------------

TEST(Levenshtein, KnownPairs) {
  EXPECT_EQ(diversity::levenshtein("kitten", "sitting"), 3u);
  EXPECT_EQ(diversity::levenshtein("", "abc"), 3u);
  EXPECT_EQ(diversity::levenshtein("flaw", "lawn"), 2u);
  EXPECT_EQ(diversity::levenshtein("é", "e"), 1u);  // code points, not bytes
  EXPECT_DOUBLE_EQ(diversity::levenshtein_norm("", ""), 0.0);
  EXPECT_NEAR(diversity::levenshtein_norm("kitten", "sitting"), 3.0 / 7.0, 1e-15);
}

TEST(Levenshtein, MatchesRecursionOnRandomPairs) {
  std::mt19937_64 rng(11);
  const std::u32string alphabet = U"abcé";
  for (int trial = 0; trial < 200; ++trial) {
    std::u32string a, b;
    for (auto* s : {&a, &b}) {
      const auto len = rng() % 7;
      for (std::size_t i = 0; i < len; ++i) s->push_back(alphabet[rng() % alphabet.size()]);
    }
    EXPECT_EQ(diversity::levenshtein(synth::utf8(a), synth::utf8(b)), oracle::levenshtein(a, b));
  }
}

TEST(Levenshtein, MetricProperties) {
  std::mt19937_64 rng(5);
  const std::string alphabet = "xyz ";
  const auto rand_str = [&] {
    std::string s;
    for (std::size_t i = 0, n = rng() % 12; i < n; ++i) s.push_back(alphabet[rng() % alphabet.size()]);
    return s;
  };
  for (int i = 0; i < 200; ++i) {
    const auto a = rand_str(), b = rand_str(), c = rand_str();
    EXPECT_EQ(diversity::levenshtein(a, a), 0u);
    EXPECT_EQ(diversity::levenshtein(a, b), diversity::levenshtein(b, a));
    EXPECT_LE(diversity::levenshtein(a, c), diversity::levenshtein(a, b) + diversity::levenshtein(b, c));
    const double n = diversity::levenshtein_norm(a, b);
    EXPECT_GE(n, 0.0);
    EXPECT_LE(n, 1.0);
  }
}

// --- BLEU -----------------------------------------------------------------------

TEST(SelfBleu, IdenticalIsOne) {
  EXPECT_DOUBLE_EQ(diversity::self_bleu("Who wrote the novel?", "Who wrote the novel?"), 1.0);
}

TEST(SelfBleu, HandComputedSmoothedValue) {
  // Precisions 5/6, (3+1)/(5+1), (2+1)/(4+1), (1+1)/(3+1); equal lengths.
  const double expected = std::pow(1.0 / 6.0, 0.25);
  EXPECT_NEAR(diversity::self_bleu("the cat sat on the mat", "the cat sat on a mat"), expected, 1e-12);
}

TEST(SelfBleu, BrevityPenaltyAndZeroUnigrams) {
  // hypothesis "the cat" against 4 tokens: p1 = 1, p2 = 2/2, p3 = 1/1, p4 = 1/1, BP = e^(1-2).
  EXPECT_NEAR(diversity::self_bleu("the cat sat down", "the cat"), std::exp(-1.0), 1e-12);
  EXPECT_DOUBLE_EQ(diversity::self_bleu("alpha beta", "gamma delta"), 0.0);
  EXPECT_DOUBLE_EQ(diversity::self_bleu("alpha beta", ""), 0.0);
}

TEST(SelfBleu, TokenizationSplitsPunctuationAndLowercases) {
  EXPECT_EQ(diversity::bleu_tokens("Who, me?"), (std::vector<std::string>{"who", ",", "me", "?"}));
  EXPECT_DOUBLE_EQ(diversity::self_bleu("Who is it?", "who is it ?"), 1.0);
}

// --- semantic metrics against the mock -------------------------------------------

TEST(SemanticMetrics, CosineAndEquivalence) {
  EXPECT_NEAR(diversity::cosine(std::vector<double>{1, 0}, std::vector<double>{0, 2}), 0.0, 1e-15);
  EXPECT_NEAR(diversity::cosine(std::vector<double>{1, 2}, std::vector<double>{2, 4}), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(diversity::combine_entailment(0.5, 0.4, diversity::EquivalenceAggregation::Product), 0.2);
  EXPECT_DOUBLE_EQ(diversity::combine_entailment(0.5, 0.4, diversity::EquivalenceAggregation::Min), 0.4);

  auto client = cfood::testing::mock_client();
  EXPECT_NEAR(diversity::embedding_similarity("Who wrote it?", "Who wrote it?", client), 1.0, 1e-12);
  // Mock entailment is word overlap: all of {who, wrote} in both directions.
  EXPECT_NEAR(diversity::semantic_equivalence("Who wrote?", "wrote who", client, diversity::EquivalenceAggregation::Product), 1.0,
              1e-12);
}

TEST(SemanticMetrics, DerangementHasNoFixedPoints) {
  for (std::size_t n : {2u, 3u, 10u, 57u}) {
    const auto p = diversity::seeded_derangement(n, 99);
    ASSERT_EQ(p.size(), n);
    std::vector<bool> seen(n, false);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NE(p[i], i);
      EXPECT_FALSE(seen[p[i]]);
      seen[p[i]] = true;
    }
    EXPECT_EQ(p, diversity::seeded_derangement(n, 99));
  }
  EXPECT_THROW(diversity::seeded_derangement(1, 0), PreconditionError);
}

TEST(DiversityReport, RowsPerGeneratorPlusReference) {
  Dataset ds("d", {{"a", "Who built the bridge?", "Anna built the bridge.", {"Anna"}, {}, "d"},
                   {"b", "When did the war end?", "The war ended in 1945.", {"1945"}, {}, "d"},
                   {"c", "Where is the lake?", "The lake is in Peru.", {"Peru"}, {}, "d"}});
  CfStore store;
  for (const auto& ex : ds) {
    CounterfactualInstance cf;
    cf.id = ex.id + "#x";
    cf.source_id = ex.id;
    cf.generator_name = "gen";
    cf.context = ex.context;
    cf.question = ex.question + " exactly";
    cf.answer = ex.gold_answers.front();
    cf.status = CfStatus::Kept;
    store.push_back(cf);
  }
  store[2].status = CfStatus::NoiseDiscarded;  // not usable: ignored
  auto client = cfood::testing::mock_client();
  const auto rows = diversity::diversity_report(ds, store, client, {7, diversity::EquivalenceAggregation::Product, 1});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].label, "gen");
  EXPECT_EQ(rows[0].n_pairs, 2u);
  EXPECT_EQ(rows[1].label, "Reference");
  EXPECT_EQ(rows[1].n_pairs, 3u);
  EXPECT_GT(rows[0].self_bleu, rows[1].self_bleu);
  const auto csv = diversity::to_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "label,self_bleu,levenshtein,sbert_sim,sem_equiv,n_pairs");
}
