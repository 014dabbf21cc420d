#pragma once

// Scratch directories and the bundled mini corpus for end-to-end tests.

#include <filesystem>
#include <random>
#include <set>
#include <string>

#include "cfood/config.hpp"
#include "cfood/corpus.hpp"

namespace fixtures {

inline const std::filesystem::path kSourceDir = CFOOD_SOURCE_DIR;

/// Removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag = "cfood") {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline std::filesystem::path mini_config_path() { return kSourceDir / "configs" / "mini.toml"; }

/// The bundled mini config, writing to `out`.
inline cfood::RunConfig mini_config(const std::filesystem::path& out) {
  auto c = cfood::load_config(mini_config_path());
  c.output_dir = out.string();
  return c;
}

/// Unique contexts of the mini corpus: the mock retrieval corpus.
inline std::vector<std::string> mini_paragraphs() {
  const auto ds = cfood::load_dataset(kSourceDir / "data" / "mini" / "mini_squad.jsonl", cfood::DatasetFormat::MrqaJsonl);
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& ex : ds) {
    if (seen.insert(ex.context).second) out.push_back(ex.context);
  }
  return out;
}

inline std::string slurp(const std::filesystem::path& p) { return cfood::detail::read_file(p); }

}  // namespace fixtures
