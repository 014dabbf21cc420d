// Serves the deterministic mock model protocol over loopback HTTP.

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>

#include "cfood/corpus.hpp"
#include "cfood/testing/fixture_server.hpp"

namespace {
std::atomic<bool> g_stop{false};
void on_signal(int) { g_stop = true; }
}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mock model server for local runs and tests"};
  std::string host = "127.0.0.1";
  int port = 0;
  std::string corpus;
  std::string format = "mrqa-jsonl";
  app.add_option("--host", host, "Bind address");
  app.add_option("--port", port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  app.add_option("--corpus", corpus, "Dataset whose contexts form the retrieval corpus")->check(CLI::ExistingFile);
  app.add_option("--format", format, "Corpus format (mrqa-jsonl|squad-json)");
  CLI11_PARSE(app, argc, argv);

  try {
    std::vector<std::string> paragraphs;
    if (!corpus.empty()) {
      std::set<std::string> seen;
      for (const auto& ex : cfood::load_dataset(corpus, cfood::parse_dataset_format(format))) {
        if (seen.insert(ex.context).second) paragraphs.push_back(ex.context);
      }
    }
    cfood::testing::FixtureServer server(std::make_shared<const cfood::testing::MockBackend>(std::move(paragraphs)), host, port);
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::cout << server.url() << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
  } catch (const std::exception& e) {
    std::cerr << "cfood-fixture-server: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
