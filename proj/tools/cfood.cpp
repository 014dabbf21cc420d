// cfood: run the counterfactual augmentation pipeline, or one stage of it.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfood/pipeline.hpp"

namespace {

struct Overrides {
  std::string config;
  std::string endpoint;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<std::size_t> workers;
  std::string approach;
  std::vector<std::string> methods;
  std::vector<std::string> feature_sets;
  bool force = false;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "Run configuration (TOML)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--endpoint", o.endpoint, "Model server base URL (overrides config and CFOOD_ENDPOINT)");
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--workers", o.workers, "Concurrent requests / training threads")->check(CLI::PositiveNumber);
  cmd->add_option("--approach", o.approach, "Generation approach (duo|solo)");
  cmd->add_option("--method", o.methods, "Attribution method (repeatable)");
  cmd->add_option("--feature-set", o.feature_sets, "Calibration feature set (repeatable)");
}

cfood::RunConfig configure(const Overrides& o) {
  auto cfg = cfood::load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.seed_set = true;
  }
  if (!o.out.empty()) {
    // Relative to the working directory, not to the config file.
    cfg.output_dir = std::filesystem::absolute(o.out).string();
  }
  if (o.workers) cfg.workers = *o.workers;
  if (!o.approach.empty()) cfg.generation.approach = cfood::parse_approach(o.approach);
  if (!o.methods.empty()) {
    cfg.features.methods.clear();
    for (const auto& m : o.methods) cfg.features.methods.push_back(cfood::parse_method(m));
  }
  if (!o.feature_sets.empty()) {
    cfg.features.feature_sets.clear();
    for (const auto& s : o.feature_sets) cfg.features.feature_sets.push_back(cfood::features::parse_feature_set(s));
  }
  cfg.validate();
  return cfg;
}

bool needs_model(std::optional<cfood::pipeline::Stage> stage) {
  using cfood::pipeline::Stage;
  return !stage || (*stage != Stage::Calibrate && *stage != Stage::Report);
}

void print_timings(const cfood::pipeline::Runner& r) {
  for (const auto& t : r.timings()) {
    std::fprintf(stderr, "%-13s %s %.2fs\n", t.name.c_str(), t.executed ? "ran    " : "skipped", t.seconds);
  }
}

int run(const Overrides& o, std::optional<cfood::pipeline::Stage> stage) {
  const auto cfg = configure(o);
  std::string url;
  try {
    url = cfood::resolve_endpoint(cfg, o.endpoint.empty() ? std::nullopt : std::optional<std::string>(o.endpoint));
  } catch (const cfood::PreconditionError&) {
    if (needs_model(stage)) throw;
    url = "http://127.0.0.1:1";  // never contacted
  }
  cfood::ClientOptions copts;
  copts.max_in_flight = static_cast<std::ptrdiff_t>(std::max<std::size_t>(cfg.workers, 1));
  auto client = cfood::ModelClient::http(url, copts);
  cfood::pipeline::Runner runner(cfg, client);
  if (stage) {
    runner.run_stage(*stage);
  } else {
    runner.run_all(o.force);
  }
  print_timings(runner);
  std::cout << runner.output_dir().string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual augmentation, calibration and explanation pipeline"};
  app.require_subcommand(1);

  Overrides o;
  auto* all = app.add_subcommand("pipeline", "Run every stage, skipping those that are up to date");
  add_common(all, o);
  all->add_flag("--force", o.force, "Rerun every stage");

  std::vector<std::pair<CLI::App*, cfood::pipeline::Stage>> stages;
  const std::pair<cfood::pipeline::Stage, const char*> help[] = {
      {cfood::pipeline::Stage::Generate, "Generate counterfactual candidates"},
      {cfood::pipeline::Stage::Filter, "Apply the relevance and noise filters"},
      {cfood::pipeline::Stage::Diversity, "Score lexical and semantic diversity"},
      {cfood::pipeline::Stage::Features, "Collect predictions, attributions and calibration features"},
      {cfood::pipeline::Stage::Calibrate, "Train and evaluate calibrators"},
      {cfood::pipeline::Stage::Faithfulness, "Score attribution faithfulness"},
      {cfood::pipeline::Stage::Report, "Render report.md from stage outputs"},
  };
  for (const auto& [s, text] : help) {
    auto* cmd = app.add_subcommand(std::string(cfood::pipeline::to_string(s)), text);
    add_common(cmd, o);
    stages.emplace_back(cmd, s);
  }

  std::string table;
  std::string base = "Base";
  auto* good = app.add_subcommand("g-ood", "Out-of-domain gain from a table of exact-match scores");
  good->add_option("table", table, "CSV with a label column and one column per dataset")->required()->check(CLI::ExistingFile);
  good->add_option("--base", base, "Label of the baseline row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help exits 0; every usage error exits like a bad config.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*good) {
      for (const auto& row : cfood::report::g_ood_table(cfood::report::load_score_table(table), base)) {
        std::cout << row.label << "," << cfood::detail::fmt_fixed(row.g_ood, 4) << "\n";
      }
      return 0;
    }
    if (*all) return run(o, std::nullopt);
    for (const auto& [cmd, s] : stages) {
      if (*cmd) return run(o, s);
    }
  } catch (const cfood::ParseError& e) {
    std::cerr << "cfood: parse error: " << e.what() << "\n";
    return 2;
  } catch (const cfood::PreconditionError& e) {
    std::cerr << "cfood: " << e.what() << "\n";
    return 2;
  } catch (const cfood::TransportError& e) {
    std::cerr << "cfood: model server unreachable: " << e.what() << "\n";
    return 3;
  } catch (const cfood::ServerError& e) {
    std::cerr << "cfood: model server error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "cfood: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
