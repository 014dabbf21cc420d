#include <gtest/gtest.h>

#include <random>

#include "cfood/faithfulness.hpp"
#include "cfood/testing/mock_backend.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"

using namespace cfood;
using faithfulness::MaskMode;

TEST(Masking, RemoveTopMasksNearestTokensFirst) {
  std::mt19937_64 rng(1);
  auto client = cfood::testing::mock_client();
  const auto ex = synth::closed_form_example(11, 5, rng);
  const auto pred = client.answer(ex.question, ex.context);
  ASSERT_EQ(pred.answer, "Zed");
  const auto attr = client.attribute(ex.question, ex.context, AttributionMethod::Attention);
  // 10 eligible tokens; 20% = 2: the two neighbours of the answer.
  const auto v = faithfulness::masked_variant(ex.context, attr, pred, 0.2, MaskMode::RemoveTop);
  const auto q = features::context_indices(attr).front();
  EXPECT_EQ(v.masked, (std::vector<std::size_t>{q + 4, q + 6}));
  EXPECT_EQ(v.protected_tokens, (std::vector<std::size_t>{q + 5}));
  EXPECT_NE(v.text.find("[MASK] Zed [MASK]"), std::string::npos);
  EXPECT_NO_THROW(faithfulness::assert_protected(v, attr, pred));

  const auto keep = faithfulness::masked_variant(ex.context, attr, pred, 0.2, MaskMode::KeepTop);
  EXPECT_EQ(keep.masked.size(), 8u);
  EXPECT_NE(keep.text.find(" Zed "), std::string::npos);
}

TEST(Masking, CustomSymbolAndZeroFraction) {
  std::mt19937_64 rng(2);
  auto client = cfood::testing::mock_client();
  const auto ex = synth::closed_form_example(6, 0, rng);
  const auto pred = client.answer(ex.question, ex.context);
  const auto attr = client.attribute(ex.question, ex.context, AttributionMethod::Shap);
  const auto v = faithfulness::masked_variant(ex.context, attr, pred, 0.5, MaskMode::RemoveTop, "<m>");
  EXPECT_EQ(v.masked.size(), 3u);
  EXPECT_NE(v.text.find("<m>"), std::string::npos);
  EXPECT_EQ(v.text.rfind("Zed", 0), 0u);
  EXPECT_TRUE(faithfulness::masked_variant(ex.context, attr, pred, 0.0, MaskMode::RemoveTop).masked.empty());
  EXPECT_THROW(faithfulness::masked_variant(ex.context, attr, pred, 1.5, MaskMode::RemoveTop), PreconditionError);
}

TEST(Masking, TamperedVariantTripsAssertion) {
  std::mt19937_64 rng(3);
  auto client = cfood::testing::mock_client();
  const auto ex = synth::closed_form_example(8, 3, rng);
  const auto pred = client.answer(ex.question, ex.context);
  const auto attr = client.attribute(ex.question, ex.context, AttributionMethod::Attention);
  auto v = faithfulness::masked_variant(ex.context, attr, pred, 0.5, MaskMode::RemoveTop);
  const auto at = v.text.find("Zed");
  v.text.replace(at, 3, "[MASK]");
  EXPECT_THROW(faithfulness::assert_protected(v, attr, pred), faithfulness::ProtectedTokenViolation);
}

TEST(Masking, MisalignedAttributionRejected) {
  std::mt19937_64 rng(4);
  auto client = cfood::testing::mock_client();
  const auto ex = synth::closed_form_example(8, 3, rng);
  const auto pred = client.answer(ex.question, ex.context);
  auto attr = client.attribute(ex.question, ex.context, AttributionMethod::Attention);
  attr.tokens.back().char_end += 3;
  EXPECT_THROW(faithfulness::masked_variant(ex.context, attr, pred, 0.5, MaskMode::RemoveTop), PreconditionError);
}

TEST(Scores, ClosedFormUnderMockReader) {
  std::mt19937_64 rng(5);
  auto client = cfood::testing::mock_client();
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    const std::size_t a = rng() % n;
    const auto ex = synth::closed_form_example(n, a, rng);
    const auto pred = client.answer(ex.question, ex.context);
    ASSERT_DOUBLE_EQ(pred.prob, 0.2);
    const auto attr = client.attribute(ex.question, ex.context, AttributionMethod::Attention);
    for (int pct : {2, 10, 20, 50}) {
      const auto expect = oracle::mock_faithfulness(n, a, pct);
      EXPECT_NEAR(faithfulness::comprehensiveness(ex, attr, pred, pct / 100.0, client), expect.comprehensiveness, 1e-9)
          << "n=" << n << " a=" << a << " pct=" << pct;
      EXPECT_NEAR(faithfulness::sufficiency(ex, attr, pred, pct / 100.0, client), expect.sufficiency, 1e-9);
    }
  }
}

TEST(Scores, FuzzedNeverViolatesProtectionAndStaysInRange) {
  std::mt19937_64 rng(6);
  auto client = cfood::testing::mock_client();
  for (int i = 0; i < 200; ++i) {
    const auto ex = synth::fuzz_example(rng, "f" + std::to_string(i));
    const auto pred = client.answer(ex.question, ex.context);
    const auto m = kAllMethods[rng() % kAllMethods.size()];
    const auto attr = client.attribute(ex.question, ex.context, m);
    const double f = std::vector<double>{0.02, 0.1, 0.2, 0.5, 0.9}[rng() % 5];
    const double s = faithfulness::sufficiency(ex, attr, pred, f, client);
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    EXPECT_NO_THROW(faithfulness::comprehensiveness(ex, attr, pred, f, client)) << ex.context;
  }
}

TEST(Report, AveragesAndCsvLayout) {
  std::mt19937_64 rng(7);
  auto client = cfood::testing::mock_client();
  std::vector<QAExample> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(synth::closed_form_example(10 + i, 2 + i, rng, "e" + std::to_string(i)));
  const Dataset ds("synthetic", xs);
  std::vector<QAResult> preds;
  faithfulness::AttributionTable table;
  for (const auto& ex : ds) {
    preds.push_back(client.answer(ex.question, ex.context));
    for (auto m : kAllMethods) table[m].push_back(client.attribute(ex.question, ex.context, m));
  }
  faithfulness::FaithfulnessConfig cfg;
  const auto rep = faithfulness::faithfulness_report("run", ds, preds, table, cfg, client);
  ASSERT_EQ(rep.methods.size(), kAllMethods.size());
  const auto& att = rep.methods[0];
  ASSERT_EQ(att.per_fraction.size(), 4u);
  double mean = 0;
  for (const auto& fs : att.per_fraction) mean += fs.comprehensiveness / 4.0;
  EXPECT_NEAR(att.comprehensiveness, mean, 1e-12);
  // Nearest-first masking beats shuffled importances on comprehensiveness.
  EXPECT_GT(rep.methods[0].comprehensiveness, rep.methods[1].comprehensiveness);

  const auto csv = faithfulness::to_csv({rep});
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "label,dataset,attention_comp,attention_suff,scaled_attention_comp,scaled_attention_suff,input_x_grad_comp,"
            "input_x_grad_suff,integrated_gradients_comp,integrated_gradients_suff,shap_comp,shap_suff");
  EXPECT_NE(csv.find("\nrun,average,"), std::string::npos);
}

TEST(Report, RejectsGapsAndPreMaskedContexts) {
  std::mt19937_64 rng(8);
  auto client = cfood::testing::mock_client();
  const Dataset ds("s", {synth::closed_form_example(5, 1, rng, "a")});
  const std::vector<QAResult> preds{client.answer(ds[0].question, ds[0].context)};
  faithfulness::AttributionTable table;
  table[AttributionMethod::Attention].push_back(client.attribute(ds[0].question, ds[0].context, AttributionMethod::Attention));
  faithfulness::FaithfulnessConfig cfg;
  EXPECT_THROW(faithfulness::faithfulness_report("r", ds, preds, table, cfg, client), PreconditionError);
  cfg.methods = {AttributionMethod::Attention};
  EXPECT_NO_THROW(faithfulness::faithfulness_report("r", ds, preds, table, cfg, client));
  cfg.fractions = {0.0};
  EXPECT_THROW(faithfulness::faithfulness_report("r", ds, preds, table, cfg, client), PreconditionError);

  auto masked = ds[0];
  masked.context += " [MASK]";
  const Dataset bad("s", {masked});
  cfg.fractions = {0.1};
  EXPECT_THROW(faithfulness::faithfulness_report("r", bad, preds, table, cfg, client), PreconditionError);
}
