#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <toml.hpp>

#include "cfood/calibrator.hpp"
#include "cfood/corpus.hpp"
#include "cfood/counterfactual.hpp"
#include "cfood/detail/io.hpp"
#include "cfood/diversity.hpp"
#include "cfood/error.hpp"
#include "cfood/features.hpp"
#include "cfood/filter.hpp"
#include "cfood/prompts.hpp"
#include "cfood/protocol.hpp"

namespace cfood {

/// Everything a run depends on. Paths are stored as written and resolved
/// against `base_dir` (the config file's directory).
struct RunConfig {
  std::string endpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string label = "run";
  std::string output_dir = "out";
  std::size_t workers = 1;
  std::filesystem::path base_dir = ".";

  struct Data {
    std::string dataset;
    DatasetFormat format = DatasetFormat::MrqaJsonl;
    std::string prompt_dir;  // empty = bundled templates
    bool include_counterfactuals = true;
  } data;

  struct Generation {
    Approach approach = Approach::DuoQag;
    TemplateName solo_template = TemplateName::SoloGptjtLlama;
    std::string generator_name = "llm";
    int max_new_tokens = 50;
    double temperature = 0.7;
    int candidates = 5;
  } generation;

  struct Filter {
    std::vector<std::uint64_t> ensemble_seeds{101, 202, 303};
    filtering::Agreement agreement = filtering::Agreement::ExactMatch;
  } filter;

  struct Diversity {
    diversity::EquivalenceAggregation equivalence = diversity::EquivalenceAggregation::Product;
  } diversity;

  struct Features {
    std::vector<AttributionMethod> methods{kAllMethods.begin(), kAllMethods.end()};
    std::vector<features::FeatureSet> feature_sets{features::FeatureSet::Conf, features::FeatureSet::Heuristic,
                                                   features::FeatureSet::Dense};
    double context_fraction = 0.10;
    double answer_fraction = 0.20;
    int k_components = 10;
    features::Aggregation aggregation = features::Aggregation::Absolute;
  } features;

  struct Calibration {
    std::size_t n_train = 500;
    int n_estimators = 0;  // 0 = 300 for heuristic inputs, 500 with dense
    int max_depth = 20;
    std::size_t ece_bins = 10;
    calibration::Binning binning = calibration::Binning::Rank;
  } calibration;

  struct Faithfulness {
    std::vector<double> fractions{0.02, 0.10, 0.20, 0.50};
    std::string mask_symbol = "[MASK]";
  } faithfulness;

  struct Report {
    std::string title = "Counterfactual augmentation report";
    std::string table2;  // optional CSV of published exact-match scores
  } report;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
  std::filesystem::path out_path() const { return resolve(output_dir); }
  std::filesystem::path prompt_path() const { return data.prompt_dir.empty() ? default_prompt_dir() : resolve(data.prompt_dir); }

  void validate() const {
    if (!seed_set) throw PreconditionError("config: 'seed' is required");
    if (data.dataset.empty()) throw PreconditionError("config: [data] dataset is required");
    if (!std::filesystem::exists(resolve(data.dataset))) {
      throw PreconditionError("config: dataset not found: " + resolve(data.dataset).string());
    }
    if (!std::filesystem::is_directory(prompt_path())) {
      throw PreconditionError("config: prompt directory not found: " + prompt_path().string());
    }
    if (!report.table2.empty() && !std::filesystem::exists(resolve(report.table2))) {
      throw PreconditionError("config: table2 file not found: " + resolve(report.table2).string());
    }
    if (workers < 1) throw PreconditionError("config: workers must be >= 1");
    if (filter.ensemble_seeds.size() != filtering::kEnsembleSize) throw PreconditionError("config: [filter] needs exactly 3 ensemble_seeds");
    if (features.methods.empty()) throw PreconditionError("config: [features] methods must not be empty");
    if (features.feature_sets.empty()) throw PreconditionError("config: [features] feature_sets must not be empty");
    if (generation.candidates < 1) throw PreconditionError("config: [generation] candidates must be >= 1");
    if (calibration.max_depth < 1) throw PreconditionError("config: [calibration] max_depth must be >= 1");
    if (calibration.n_estimators < 0) throw PreconditionError("config: [calibration] n_estimators must be >= 0");
    features::DenseFeatureConfig{features.context_fraction, features.answer_fraction, features.k_components, features.aggregation}
        .validate();
  }

  /// Every setting that can change results; where and how fast the run
  /// happens (endpoint, output_dir, base_dir, workers) is left out.
  nlohmann::json canonical() const {
    using nlohmann::json;
    json methods = json::array(), sets = json::array();
    for (auto m : features.methods) methods.push_back(to_string(m));
    for (auto s : features.feature_sets) sets.push_back(to_string(s));
    return {
        {"seed", seed},
        {"label", label},
        {"data",
         {{"dataset", data.dataset},
          {"format", to_string(data.format)},
          {"prompt_dir", data.prompt_dir},
          {"include_counterfactuals", data.include_counterfactuals}}},
        {"generation",
         {{"approach", to_string(generation.approach)},
          {"solo_template", to_string(generation.solo_template)},
          {"generator_name", generation.generator_name},
          {"max_new_tokens", generation.max_new_tokens},
          {"temperature", generation.temperature},
          {"candidates", generation.candidates}}},
        {"filter",
         {{"ensemble_seeds", filter.ensemble_seeds},
          {"agreement", filter.agreement == filtering::Agreement::ExactMatch ? "em" : "f1"}}},
        {"diversity", {{"equivalence", diversity.equivalence == diversity::EquivalenceAggregation::Product ? "product" : "min"}}},
        {"features",
         {{"methods", methods},
          {"feature_sets", sets},
          {"context_fraction", features.context_fraction},
          {"answer_fraction", features.answer_fraction},
          {"k_components", features.k_components},
          {"aggregation", features.aggregation == features::Aggregation::Absolute ? "abs" : "signed"}}},
        {"calibration",
         {{"n_train", calibration.n_train},
          {"n_estimators", calibration.n_estimators},
          {"max_depth", calibration.max_depth},
          {"ece_bins", calibration.ece_bins},
          {"binning", calibration.binning == calibration::Binning::Rank ? "rank" : "width"}}},
        {"faithfulness", {{"fractions", faithfulness.fractions}, {"mask_symbol", faithfulness.mask_symbol}}},
        {"report", {{"title", report.title}, {"table2", report.table2}}},
    };
  }

  std::string hash() const { return "sha256:" + detail::sha256_hex(canonical().dump()); }
};

namespace config_detail {

template <typename T>
T get(const toml::table& t, std::string_view key, T fallback) {
  const auto node = t[key];
  if (!node) return fallback;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node.value<bool>()) return *v;
  } else if constexpr (std::is_integral_v<T>) {
    if (node.is_integer()) {
      const auto v = *node.value<std::int64_t>();
      if (v < 0 && std::is_unsigned_v<T>) throw PreconditionError("config: '" + std::string(key) + "' must be non-negative");
      return static_cast<T>(v);
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (auto v = node.value<double>()) return *v;
  } else {
    if (auto v = node.value<std::string>()) return *v;
  }
  throw PreconditionError("config: '" + std::string(key) + "' has the wrong type");
}

inline const toml::table& section(const toml::table& root, std::string_view name) {
  static const toml::table empty;
  const auto* t = root[name].as_table();
  if (!root[name]) return empty;
  if (!t) throw PreconditionError("config: [" + std::string(name) + "] must be a table");
  return *t;
}

inline std::vector<std::string> strings(const toml::table& t, std::string_view key) {
  std::vector<std::string> out;
  const auto* arr = t[key].as_array();
  if (!arr) throw PreconditionError("config: '" + std::string(key) + "' must be an array of strings");
  for (const auto& el : *arr) {
    auto v = el.value<std::string>();
    if (!v) throw PreconditionError("config: '" + std::string(key) + "' must be an array of strings");
    out.push_back(*v);
  }
  return out;
}

template <typename T>
std::vector<T> numbers(const toml::table& t, std::string_view key) {
  std::vector<T> out;
  const auto* arr = t[key].as_array();
  if (!arr) throw PreconditionError("config: '" + std::string(key) + "' must be an array of numbers");
  for (const auto& el : *arr) {
    auto v = el.value<T>();
    if (!v) throw PreconditionError("config: '" + std::string(key) + "' must be an array of numbers");
    out.push_back(*v);
  }
  return out;
}

}  // namespace config_detail

inline RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = ".") {
  using namespace config_detail;
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    throw ParseError(std::string("config: ") + std::string(e.description()), e.source().begin.line);
  }
  RunConfig c;
  c.base_dir = base_dir;
  c.endpoint = get<std::string>(root, "endpoint", "");
  if (root["seed"]) {
    c.seed = get<std::uint64_t>(root, "seed", 0);
    c.seed_set = true;
  }
  c.label = get<std::string>(root, "label", c.label);
  c.output_dir = get<std::string>(root, "output_dir", c.output_dir);
  c.workers = get<std::size_t>(root, "workers", c.workers);

  const auto& data = section(root, "data");
  c.data.dataset = get<std::string>(data, "dataset", "");
  c.data.format = parse_dataset_format(get<std::string>(data, "format", to_string(c.data.format)));
  c.data.prompt_dir = get<std::string>(data, "prompt_dir", "");
  c.data.include_counterfactuals = get<bool>(data, "include_counterfactuals", c.data.include_counterfactuals);

  const auto& gen = section(root, "generation");
  c.generation.approach = parse_approach(get<std::string>(gen, "approach", std::string(to_string(c.generation.approach))));
  c.generation.solo_template = parse_template_name(get<std::string>(gen, "solo_template", std::string(to_string(c.generation.solo_template))));
  c.generation.generator_name = get<std::string>(gen, "generator_name", c.generation.generator_name);
  c.generation.max_new_tokens = get<int>(gen, "max_new_tokens", c.generation.max_new_tokens);
  c.generation.temperature = get<double>(gen, "temperature", c.generation.temperature);
  c.generation.candidates = get<int>(gen, "candidates", c.generation.candidates);

  const auto& flt = section(root, "filter");
  if (flt["ensemble_seeds"]) c.filter.ensemble_seeds = numbers<std::uint64_t>(flt, "ensemble_seeds");
  c.filter.agreement = filtering::parse_agreement(get<std::string>(flt, "agreement", "em"));

  const auto& div = section(root, "diversity");
  c.diversity.equivalence = diversity::parse_equivalence(get<std::string>(div, "equivalence", "product"));

  const auto& feat = section(root, "features");
  if (feat["methods"]) {
    c.features.methods.clear();
    for (const auto& m : strings(feat, "methods")) c.features.methods.push_back(parse_method(m));
  }
  if (feat["feature_sets"]) {
    c.features.feature_sets.clear();
    for (const auto& s : strings(feat, "feature_sets")) c.features.feature_sets.push_back(features::parse_feature_set(s));
  }
  c.features.context_fraction = get<double>(feat, "context_fraction", c.features.context_fraction);
  c.features.answer_fraction = get<double>(feat, "answer_fraction", c.features.answer_fraction);
  c.features.k_components = get<int>(feat, "k_components", c.features.k_components);
  c.features.aggregation = features::parse_aggregation(get<std::string>(feat, "aggregation", "abs"));

  const auto& cal = section(root, "calibration");
  c.calibration.n_train = get<std::size_t>(cal, "n_train", c.calibration.n_train);
  c.calibration.n_estimators = get<int>(cal, "n_estimators", c.calibration.n_estimators);
  c.calibration.max_depth = get<int>(cal, "max_depth", c.calibration.max_depth);
  c.calibration.ece_bins = get<std::size_t>(cal, "ece_bins", c.calibration.ece_bins);
  c.calibration.binning = calibration::parse_binning(get<std::string>(cal, "binning", "rank"));

  const auto& fth = section(root, "faithfulness");
  if (fth["fractions"]) c.faithfulness.fractions = numbers<double>(fth, "fractions");
  c.faithfulness.mask_symbol = get<std::string>(fth, "mask_symbol", c.faithfulness.mask_symbol);

  const auto& rep = section(root, "report");
  c.report.title = get<std::string>(rep, "title", c.report.title);
  c.report.table2 = get<std::string>(rep, "table2", "");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw PreconditionError("config file not found: " + path.string());
  auto dir = path.parent_path();
  if (dir.empty()) dir = ".";
  return parse_config(detail::read_file(path), dir);
}

/// Endpoint precedence: explicit value (CLI), then config, then CFOOD_ENDPOINT.
inline std::string resolve_endpoint(const RunConfig& c, const std::optional<std::string>& cli = std::nullopt) {
  if (cli && !cli->empty()) return *cli;
  if (!c.endpoint.empty()) return c.endpoint;
  if (const char* env = std::getenv("CFOOD_ENDPOINT"); env && *env) return env;
  throw PreconditionError("no model endpoint: pass --endpoint, set 'endpoint' in the config, or set CFOOD_ENDPOINT");
}

}  // namespace cfood
