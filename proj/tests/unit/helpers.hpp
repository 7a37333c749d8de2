#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>

#include <json.hpp>

#include "capdpo/dpo.hpp"
#include "capdpo/error.hpp"
#include "oracles.hpp"

namespace testutil {

inline std::filesystem::path source_dir() { return CAPDPO_SOURCE_DIR; }
inline std::filesystem::path fixture(const std::string& rel) { return source_dir() / "fixtures" / rel; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline nlohmann::json load_json(const std::filesystem::path& p) { return nlohmann::json::parse(slurp(p)); }

// Fresh scratch directory, removed on scope exit.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("capdpo_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline oracle::Table to_table(const capdpo::dpo::ToyPolicy& p) {
  const auto& s = p.shape();
  const auto v = p.logits().values();
  return {s.n_contexts, s.seq_len, s.vocab, std::vector<double>(v.begin(), v.end())};
}

inline capdpo::dpo::ToyPolicy from_table(const nlohmann::json& j) {
  capdpo::dpo::Shape s{j.at("contexts").get<std::size_t>(), j.at("positions").get<std::size_t>(),
                       j.at("vocab").get<std::size_t>()};
  return capdpo::dpo::ToyPolicy(capdpo::dpo::LogitTensor(s, j.at("logits").get<std::vector<double>>()));
}

inline std::vector<oracle::Example> to_oracle(const std::vector<capdpo::dpo::DpoExample>& batch) {
  std::vector<oracle::Example> out;
  for (const auto& e : batch) out.push_back({e.context, e.chosen, e.rejected});
  return out;
}

template <typename Fn>
capdpo::Errc error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const capdpo::Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected a capdpo::Error");
}

}  // namespace testutil
