#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "derived_fixtures.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Recompute derived fixtures from their oracles and report differences"};
  std::filesystem::path root = "fixtures";
  bool write = false;
  app.add_option("--root", root, "fixtures directory")->check(CLI::ExistingDirectory);
  app.add_flag("--write", write, "overwrite stored expectations instead of checking");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto report = oracle::regenerate_derived_fixtures(root, write);
    std::cout << report.text();
    return report.diffs.empty() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
