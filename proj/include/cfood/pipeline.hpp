#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cfood/calibrator.hpp"
#include "cfood/client.hpp"
#include "cfood/config.hpp"
#include "cfood/corpus.hpp"
#include "cfood/counterfactual.hpp"
#include "cfood/detail/hash.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/detail/parallel.hpp"
#include "cfood/diversity.hpp"
#include "cfood/faithfulness.hpp"
#include "cfood/features.hpp"
#include "cfood/filter.hpp"
#include "cfood/generator.hpp"
#include "cfood/prompts.hpp"
#include "cfood/report.hpp"

namespace cfood::pipeline {

using nlohmann::json;

enum class Stage { Generate, Filter, Diversity, Features, Calibrate, Faithfulness, Report };

inline constexpr std::array<Stage, 7> kAllStages{Stage::Generate, Stage::Filter,       Stage::Diversity, Stage::Features,
                                                 Stage::Calibrate, Stage::Faithfulness, Stage::Report};

inline std::string_view to_string(Stage s) noexcept {
  switch (s) {
    case Stage::Generate: return "generate";
    case Stage::Filter: return "filter";
    case Stage::Diversity: return "diversity";
    case Stage::Features: return "features";
    case Stage::Calibrate: return "calibrate";
    case Stage::Faithfulness: return "faithfulness";
    case Stage::Report: return "report";
  }
  return "generate";
}

inline Stage parse_stage(std::string_view s) {
  for (auto st : kAllStages) {
    if (to_string(st) == s) return st;
  }
  throw PreconditionError("unknown stage '" + std::string(s) + "'");
}

// Checkpoint file names inside the output directory.
namespace files {
inline constexpr std::string_view kCfStore = "cf_store.jsonl";
inline constexpr std::string_view kFiltered = "filtered_store.jsonl";
inline constexpr std::string_view kFilterSummary = "filter_summary.json";
inline constexpr std::string_view kDiversity = "diversity.csv";
inline constexpr std::string_view kFeatures = "features.jsonl";
inline constexpr std::string_view kExplanations = "explanations.jsonl";
inline constexpr std::string_view kEvalScores = "eval_scores.json";
inline constexpr std::string_view kLedger = "calibration_ledger.csv";
inline constexpr std::string_view kCalibration = "calibration.json";
inline constexpr std::string_view kFaithfulness = "faithfulness.csv";
inline constexpr std::string_view kReport = "report.md";
inline constexpr std::string_view kGood = "g_ood.csv";
inline constexpr std::string_view kManifest = "manifest.json";
inline constexpr std::string_view kRunLog = "run_log.json";
}  // namespace files

// Logical (non-file) inputs.
inline constexpr std::string_view kDatasetInput = "@dataset";
inline constexpr std::string_view kPromptsInput = "@prompts";
inline constexpr std::string_view kTable2Input = "@table2";

struct StageRecord {
  std::string name;
  std::map<std::string, std::string> inputs;   // name -> digest
  std::map<std::string, std::string> outputs;  // file name -> digest
};

struct RunManifest {
  int version = 1;
  std::string config_hash;
  json config;
  std::string content_revision;
  std::vector<StageRecord> stages;

  const StageRecord* find(std::string_view name) const {
    for (const auto& s : stages) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  void put(StageRecord rec) {
    for (auto& s : stages) {
      if (s.name == rec.name) {
        s = std::move(rec);
        return;
      }
    }
    stages.push_back(std::move(rec));
    std::stable_sort(stages.begin(), stages.end(), [](const StageRecord& a, const StageRecord& b) {
      return static_cast<int>(parse_stage(a.name)) < static_cast<int>(parse_stage(b.name));
    });
  }
};

inline json to_json(const RunManifest& m) {
  json stages = json::array();
  for (const auto& s : m.stages) stages.push_back({{"name", s.name}, {"inputs", s.inputs}, {"outputs", s.outputs}});
  return {{"version", m.version},
          {"config_hash", m.config_hash},
          {"config", m.config},
          {"content_revision", m.content_revision},
          {"stages", stages}};
}

inline RunManifest manifest_from_json(const json& j) {
  try {
    RunManifest m;
    m.version = j.at("version").get<int>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.content_revision = j.at("content_revision").get<std::string>();
    for (const auto& s : j.at("stages")) {
      m.stages.push_back({s.at("name").get<std::string>(), s.at("inputs").get<std::map<std::string, std::string>>(),
                          s.at("outputs").get<std::map<std::string, std::string>>()});
    }
    return m;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what());
  }
}

struct StageTiming {
  std::string name;
  bool executed = false;
  double seconds = 0.0;
};

/// Per-example evidence the features stage stores for the faithfulness stage.
struct Explanation {
  QAExample example;
  QAResult prediction;
  AttributionRecord attribution;
};

inline json to_json(const Explanation& e, std::string_view dataset) {
  return {{"example_id", e.example.id},       {"dataset", dataset},
          {"question", e.example.question},   {"context", e.example.context},
          {"gold_answers", e.example.gold_answers}, {"prediction", to_json(e.prediction)},
          {"attribution", to_json(e.attribution)}};
}

inline Explanation explanation_from_json(const json& j, std::size_t line) {
  try {
    Explanation e;
    e.example.id = j.at("example_id").get<std::string>();
    e.example.question = j.at("question").get<std::string>();
    e.example.context = j.at("context").get<std::string>();
    e.example.gold_answers = j.at("gold_answers").get<std::vector<std::string>>();
    e.example.dataset_name = j.value("dataset", std::string());
    e.prediction = protocol::qa_result(j.at("prediction"), e.example.question, e.example.context);
    const auto method = parse_method(j.at("attribution").at("method").get<std::string>());
    e.attribution = protocol::attribution(j.at("attribution"), method, e.example.question, e.example.context);
    return e;
  } catch (const json::exception& ex) {
    throw ParseError(std::string("malformed explanation: ") + ex.what(), line);
  } catch (const ProtocolError& ex) {
    throw ParseError(std::string("inconsistent explanation: ") + ex.what(), line);
  }
}

class Runner {
public:
  Runner(RunConfig config, ModelClient& client) : cfg_(std::move(config)), client_(client) {
    cfg_.validate();
    out_ = cfg_.out_path();
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const std::filesystem::path& output_dir() const noexcept { return out_; }
  const std::vector<StageTiming>& timings() const noexcept { return timings_; }

  /// Every stage in order; a stage whose inputs and outputs still match the
  /// previous manifest is skipped unless `force`.
  RunManifest run_all(bool force = false) {
    auto manifest = start();
    try {
      for (auto s : kAllStages) step(manifest, s, force);
    } catch (...) {
      finish();
      throw;
    }
    finish();
    return manifest;
  }

  /// Runs one stage unconditionally (its inputs must exist).
  RunManifest run_stage(Stage s) {
    auto manifest = start();
    try {
      step(manifest, s, true);
    } catch (...) {
      finish();
      throw;
    }
    finish();
    return manifest;
  }

  /// The pool the features and later stages evaluate: the dataset, then
  /// every usable counterfactual as an example whose gold is its answer.
  Dataset evaluation_pool(const Dataset& dataset, const CfStore& filtered) const {
    std::vector<QAExample> xs(dataset.begin(), dataset.end());
    if (cfg_.data.include_counterfactuals) {
      for (const auto& cf : filtered) {
        if (!is_usable(cf.status)) continue;
        xs.push_back({cf.id, cf.question, cf.context, {cf.answer}, {}, dataset.name()});
      }
    }
    return Dataset(dataset.name(), std::move(xs));
  }

private:
  std::filesystem::path file(std::string_view name) const { return out_ / name; }

  RunManifest start() {
    std::filesystem::create_directories(out_);
    timings_.clear();
    RunManifest m;
    m.config_hash = cfg_.hash();
    m.config = cfg_.canonical();
    m.content_revision = content_revision();
    if (std::filesystem::exists(file(files::kManifest))) {
      try {
        auto prior = manifest_from_json(json::parse(detail::read_file(file(files::kManifest))));
        if (prior.config_hash == m.config_hash) m.stages = std::move(prior.stages);
      } catch (const std::exception&) {
        // Unreadable manifest: treat as a fresh run.
      }
    }
    return m;
  }

  void finish() const {
    json stages = json::array();
    for (const auto& t : timings_) stages.push_back({{"name", t.name}, {"executed", t.executed}, {"seconds", t.seconds}});
    detail::write_file(file(files::kRunLog), json{{"stages", stages}}.dump(2) + "\n");
  }

  void write_manifest(const RunManifest& m) const { detail::write_file(file(files::kManifest), to_json(m).dump(2) + "\n"); }

  std::string prompts_digest() const {
    std::string all;
    for (auto n : kAllTemplates) {
      const auto p = cfg_.prompt_path() / (std::string(cfood::to_string(n)) + ".txt");
      all += std::string(cfood::to_string(n)) + "=" + (std::filesystem::exists(p) ? detail::file_digest(p) : "missing") + "\n";
    }
    return "sha256:" + detail::sha256_hex(all);
  }

  std::string content_revision() const {
    std::string all = "dataset=" + detail::file_digest(cfg_.resolve(cfg_.data.dataset)) + "\nprompts=" + prompts_digest() + "\n";
    if (!cfg_.report.table2.empty()) all += "table2=" + detail::file_digest(cfg_.resolve(cfg_.report.table2)) + "\n";
    return "sha256:" + detail::sha256_hex(all);
  }

  std::vector<std::string> inputs_of(Stage s) const {
    const std::string d(kDatasetInput), p(kPromptsInput);
    switch (s) {
      case Stage::Generate: return {d, p};
      case Stage::Filter: return {std::string(files::kCfStore), d, p};
      case Stage::Diversity: return {std::string(files::kFiltered), d};
      case Stage::Features: return {std::string(files::kFiltered), d};
      case Stage::Calibrate: return {std::string(files::kFeatures)};
      case Stage::Faithfulness: return {std::string(files::kExplanations)};
      case Stage::Report: {
        std::vector<std::string> in;
        for (auto n : report::kReportInputs) in.emplace_back(n);
        if (!cfg_.report.table2.empty()) in.emplace_back(kTable2Input);
        return in;
      }
    }
    return {};
  }

  std::vector<std::string> outputs_of(Stage s) const {
    switch (s) {
      case Stage::Generate: return {std::string(files::kCfStore)};
      case Stage::Filter: return {std::string(files::kFiltered), std::string(files::kFilterSummary)};
      case Stage::Diversity: return {std::string(files::kDiversity)};
      case Stage::Features:
        return {std::string(files::kFeatures), std::string(files::kExplanations), std::string(files::kEvalScores)};
      case Stage::Calibrate: return {std::string(files::kLedger), std::string(files::kCalibration)};
      case Stage::Faithfulness: return {std::string(files::kFaithfulness)};
      case Stage::Report: {
        std::vector<std::string> out{std::string(files::kReport)};
        if (!cfg_.report.table2.empty()) out.emplace_back(files::kGood);
        return out;
      }
    }
    return {};
  }

  std::string digest_of(const std::string& name) const {
    if (name == kDatasetInput) return detail::file_digest(cfg_.resolve(cfg_.data.dataset));
    if (name == kPromptsInput) return prompts_digest();
    if (name == kTable2Input) return detail::file_digest(cfg_.resolve(cfg_.report.table2));
    if (!std::filesystem::exists(file(name))) throw PreconditionError("missing input '" + name + "'; run the earlier stage first");
    return detail::file_digest(file(name));
  }

  bool up_to_date(const RunManifest& m, Stage s, const std::map<std::string, std::string>& inputs) const {
    const auto* prior = m.find(to_string(s));
    if (!prior || prior->inputs != inputs) return false;
    for (const auto& name : outputs_of(s)) {
      auto it = prior->outputs.find(name);
      if (it == prior->outputs.end() || !std::filesystem::exists(file(name)) || detail::file_digest(file(name)) != it->second) {
        return false;
      }
    }
    return true;
  }

  void step(RunManifest& m, Stage s, bool force) {
    std::map<std::string, std::string> inputs;
    for (const auto& name : inputs_of(s)) inputs[name] = digest_of(name);
    if (!force && up_to_date(m, s, inputs)) {
      timings_.push_back({std::string(to_string(s)), false, 0.0});
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    try {
      execute(s);
    } catch (...) {
      write_manifest(m);
      timings_.push_back({std::string(to_string(s)), true,
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
      throw;
    }
    StageRecord rec{std::string(to_string(s)), inputs, {}};
    for (const auto& name : outputs_of(s)) rec.outputs[name] = detail::file_digest(file(name));
    m.put(std::move(rec));
    write_manifest(m);
    timings_.push_back(
        {std::string(to_string(s)), true, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  }

  Dataset dataset() const { return load_dataset(cfg_.resolve(cfg_.data.dataset), cfg_.data.format); }

  void execute(Stage s) {
    switch (s) {
      case Stage::Generate: return generate();
      case Stage::Filter: return filter();
      case Stage::Diversity: return diversity();
      case Stage::Features: return features();
      case Stage::Calibrate: return calibrate();
      case Stage::Faithfulness: return faithfulness();
      case Stage::Report: return report();
    }
  }

  void generate() {
    const auto ds = dataset();
    const auto templates = TemplateSet::load(cfg_.prompt_path());
    client_.health();
    generation::GeneratorConfig g;
    g.approach = cfg_.generation.approach;
    g.solo_template = cfg_.generation.solo_template;
    g.settings = {cfg_.generation.generator_name, cfg_.generation.max_new_tokens, cfg_.generation.temperature};
    g.candidates = cfg_.generation.candidates;
    g.run_seed = cfg_.seed;
    g.workers = cfg_.workers;
    save_cf_store(generation::generate_counterfactuals(ds, client_, templates, g), file(files::kCfStore));
  }

  void filter() {
    const auto ds = dataset();
    const auto templates = TemplateSet::load(cfg_.prompt_path());
    const auto store = load_cf_store(file(files::kCfStore));
    client_.health();
    filtering::FilterConfig f;
    std::copy(cfg_.filter.ensemble_seeds.begin(), cfg_.filter.ensemble_seeds.end(), f.ensemble_seeds.begin());
    f.relevance_seed = detail::derive_seed(cfg_.seed, "relevance", 0);
    f.agreement = cfg_.filter.agreement;
    f.max_new_tokens = cfg_.generation.max_new_tokens;
    f.temperature = cfg_.generation.temperature;
    f.workers = cfg_.workers;
    const auto result = filtering::apply_filters(store, ds, client_, templates, f);
    save_cf_store(result.store, file(files::kFiltered));
    detail::write_file(file(files::kFilterSummary), result.summary.to_json().dump(2) + "\n");
  }

  void diversity() {
    const auto ds = dataset();
    const auto store = load_cf_store(file(files::kFiltered));
    client_.health();
    diversity::DiversityOptions o{detail::derive_seed(cfg_.seed, "reference", 0), cfg_.diversity.equivalence, cfg_.workers};
    detail::write_file(file(files::kDiversity), diversity::to_csv(diversity::diversity_report(ds, store, client_, o)));
  }

  features::DenseFeatureConfig dense_config() const {
    return {cfg_.features.context_fraction, cfg_.features.answer_fraction, cfg_.features.k_components, cfg_.features.aggregation};
  }

  void fill_pos_tags(AttributionRecord& attr) {
    for (auto seg : {Segment::Question, Segment::Context}) {
      std::vector<std::size_t> idx;
      std::vector<std::string> texts;
      for (std::size_t i = 0; i < attr.tokens.size(); ++i) {
        if (attr.tokens[i].segment == seg && attr.tokens[i].pos_tag.empty()) {
          idx.push_back(i);
          texts.push_back(attr.tokens[i].text);
        }
      }
      const auto tags = client_.pos_tag(texts);
      for (std::size_t k = 0; k < idx.size(); ++k) attr.tokens[idx[k]].pos_tag = tags[k];
    }
  }

  void features() {
    const auto ds = dataset();
    const auto pool = evaluation_pool(ds, load_cf_store(file(files::kFiltered)));
    client_.health();
    const auto& methods = cfg_.features.methods;
    const bool dense = std::find(cfg_.features.feature_sets.begin(), cfg_.features.feature_sets.end(),
                                 features::FeatureSet::Dense) != cfg_.features.feature_sets.end();
    const auto widest = dense ? features::FeatureSet::Dense : features::FeatureSet::Heuristic;

    // evidence[m][i]
    std::vector<std::vector<features::ExampleEvidence>> evidence(methods.size(), std::vector<features::ExampleEvidence>(pool.size()));
    detail::parallel_for(pool.size(), cfg_.workers, [&](std::size_t i) {
      const auto& ex = pool[i];
      const auto prediction = client_.answer(ex.question, ex.context);
      std::optional<HiddenStateMatrix> hidden;
      if (dense) hidden = client_.hidden_states(ex.question, ex.context);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        auto attr = client_.attribute(ex.question, ex.context, methods[m]);
        fill_pos_tags(attr);
        evidence[m][i] = {prediction, std::move(attr), hidden};
      }
    });

    std::string feature_lines, explanation_lines;
    for (std::size_t m = 0; m < methods.size(); ++m) {
      feature_lines += features::to_jsonl(features::assemble_records(pool, evidence[m], dense_config(), widest));
      for (std::size_t i = 0; i < pool.size(); ++i) {
        explanation_lines += to_json(Explanation{pool[i], evidence[m][i].prediction, evidence[m][i].attribution}, pool.name()).dump() + "\n";
      }
    }
    std::vector<std::string> predictions;
    for (std::size_t i = 0; i < ds.size(); ++i) predictions.push_back(evidence.front()[i].prediction.answer);
    const auto score = evaluate(ds, predictions);
    detail::write_file(file(files::kFeatures), feature_lines);
    detail::write_file(file(files::kExplanations), explanation_lines);
    detail::write_file(file(files::kEvalScores),
                       json{{"dataset", ds.name()}, {"n", score.n}, {"em", score.em}, {"f1", score.f1}}.dump(2) + "\n");
  }

  void calibrate() {
    const auto records = features::parse_feature_store(detail::read_file(file(files::kFeatures)));
    std::vector<calibration::CalibReport> reports;
    json skipped = json::array();
    for (auto method : cfg_.features.methods) {
      std::vector<features::CalibrationRecord> subset;
      for (const auto& r : records) {
        if (r.method == cfood::to_string(method)) subset.push_back(r);
      }
      for (auto set : cfg_.features.feature_sets) {
        calibration::CalibrationConfig c;
        c.n_train = cfg_.calibration.n_train;
        c.ece_bins = cfg_.calibration.ece_bins;
        c.binning = cfg_.calibration.binning;
        c.forest.n_estimators = cfg_.calibration.n_estimators ? cfg_.calibration.n_estimators : calibration::default_estimators(set);
        c.forest.max_depth = cfg_.calibration.max_depth;
        c.forest.seed = detail::derive_seed(cfg_.seed, "forest", 0);
        c.forest.workers = cfg_.workers;
        const std::string key = std::string(cfood::to_string(method)) + "/" + std::string(features::to_string(set));
        try {
          if (subset.empty()) throw PreconditionError("no feature records");
          reports.push_back(calibration::run_calibration(subset, set, detail::derive_seed(cfg_.seed, "split", 0), c));
        } catch (const PreconditionError& e) {
          skipped.push_back(key + ": " + e.what());
        }
      }
    }
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(calibration::to_json(r));
    detail::write_file(file(files::kLedger), calibration::to_ledger_csv(reports));
    detail::write_file(file(files::kCalibration), json{{"reports", arr}, {"skipped", skipped}}.dump(2) + "\n");
  }

  void faithfulness() {
    std::vector<Explanation> all;
    detail::for_each_line(detail::read_file(file(files::kExplanations)), [&](std::string_view line, std::size_t lineno) {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
      }
      all.push_back(explanation_from_json(j, lineno));
    });
    const std::string ds_name = all.empty() ? dataset().name() : all.front().example.dataset_name;
    std::vector<QAExample> order;
    std::map<std::string, std::size_t> index;
    std::vector<QAResult> predictions;
    faithfulness::AttributionTable table;
    for (auto& e : all) {
      if (!index.count(e.example.id)) {
        index[e.example.id] = order.size();
        order.push_back(e.example);
        predictions.push_back(e.prediction);
      }
      auto& recs = table[e.attribution.method];
      if (recs.size() != index.at(e.example.id)) throw ParseError("explanations are not in example order");
      recs.push_back(std::move(e.attribution));
    }
    const Dataset pool(ds_name, std::move(order));
    client_.health();
    faithfulness::FaithfulnessConfig f;
    f.fractions = cfg_.faithfulness.fractions;
    f.mask_symbol = cfg_.faithfulness.mask_symbol;
    f.methods = cfg_.features.methods;
    f.workers = cfg_.workers;
    const auto rep = faithfulness::faithfulness_report(cfg_.label, pool, predictions, table, f, client_);
    detail::write_file(file(files::kFaithfulness), faithfulness::to_csv({rep}));
  }

  void report() {
    report::ReportOptions o;
    o.title = cfg_.report.title;
    if (!cfg_.report.table2.empty()) o.table2 = cfg_.resolve(cfg_.report.table2);
    report::emit_report(out_, o);
  }

  RunConfig cfg_;
  ModelClient& client_;
  std::filesystem::path out_;
  std::vector<StageTiming> timings_;
};

inline RunManifest run_pipeline(const RunConfig& config, ModelClient& client, bool force = false) {
  return Runner(config, client).run_all(force);
}

}  // namespace cfood::pipeline
