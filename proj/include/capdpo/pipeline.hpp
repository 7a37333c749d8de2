#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capdpo/analytics.hpp"
#include "capdpo/dpo.hpp"
#include "capdpo/judge.hpp"
#include "capdpo/qa_gen.hpp"
#include "capdpo/sampler.hpp"

namespace capdpo::pipeline {

inline constexpr const char* kToolVersion = "capdpo 0.1.0";

// Exit-code contract shared by every subcommand.
enum ExitCode : int { kOk = 0, kFatal = 1, kPartial = 2, kUsage = 64 };

struct BackendSettings {
  std::string kind = "mock";  // mock | http
  std::string endpoint;
  std::string model;
  int timeout_ms = 60000;
  int retries = 3;
  bool multimodal = false;
  // mock generator
  double noise_rate = 0.5;
  // mock frame judge
  double bias = 0.5;
  double spread = 1.0;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  // Captions kept per source; empty keeps everything.
  std::map<std::string, std::size_t> per_source_quota;
  // Instruction pairs drawn for candidate sampling; 0 keeps all.
  std::size_t question_subset = 0;
  sampler::SamplingConfig sampling;
  dpo::DpoConfig dpo;
  int threshold = 3;
  BackendSettings judge;
  BackendSettings frame_judge;
  BackendSettings generator;
  std::size_t max_concurrency = 8;
  analytics::TieRule tie_rule = analytics::TieRule::kEither;
  // Toy tokenizer: 0 sizes seq_len to the longest training text.
  std::size_t seq_len = 0;
  std::size_t vocab = 128;
  std::vector<int> best_of_n = {1, 4, 16, 64};
  int best_of_n_trials = 5;
  std::string prompt_dir;
  // Judge audit log name inside the output directory; empty disables it.
  std::string audit_log = "audit.jsonl";

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Keys present in `doc` override the fields of `base`.
  static PipelineConfig from_json(const nlohmann::json& doc, PipelineConfig base);
  static PipelineConfig from_json(const nlohmann::json& doc);
  static PipelineConfig load(const std::filesystem::path& path, PipelineConfig base);
  static PipelineConfig load(const std::filesystem::path& path);
  std::string hash() const;
};

// Maps text to fixed-length token ids for the toy policy: lowercased
// whitespace words hashed into 1..vocab-1, padded with 0.
class Tokenizer {
 public:
  Tokenizer(std::size_t seq_len, std::size_t vocab);
  std::vector<int> encode(std::string_view text) const;
  std::size_t seq_len() const { return seq_len_; }
  std::size_t vocab() const { return vocab_; }

 private:
  std::size_t seq_len_;
  std::size_t vocab_;
};

struct StageResult {
  int exit_code = kOk;
  std::string message;
};

struct GenQaPaths {
  std::filesystem::path captions;
  std::filesystem::path out;
  std::filesystem::path rejects;  // default: <out dir>/qa_rejects.jsonl
};
StageResult run_gen_qa(const PipelineConfig& cfg, const GenQaPaths& paths);

struct SamplePaths {
  std::filesystem::path qa;
  std::filesystem::path captions;  // optional; supplies frame references
  std::filesystem::path out;
};
StageResult run_sample(const PipelineConfig& cfg, const SamplePaths& paths);

struct ScorePaths {
  std::filesystem::path captions;
  std::filesystem::path qa;
  std::filesystem::path candidates;
  std::filesystem::path out;
};
StageResult run_score(const PipelineConfig& cfg, const ScorePaths& paths);

struct BuildPairsPaths {
  std::filesystem::path qa;
  std::filesystem::path candidates;
  std::filesystem::path judgments;
  std::filesystem::path out;
  std::filesystem::path stats;  // default: <out dir>/pairs_stats.json
};
StageResult run_build_pairs(const PipelineConfig& cfg, const BuildPairsPaths& paths);

enum class TrainMode { kDpo, kSelfPlay };

struct TrainPaths {
  std::filesystem::path pairs;       // dpo mode
  std::filesystem::path qa;          // selfplay mode
  std::filesystem::path candidates;  // selfplay mode
  std::filesystem::path out_dir;
};
StageResult run_train_dpo(const PipelineConfig& cfg, TrainMode mode, const TrainPaths& paths);

struct EvalPaths {
  std::filesystem::path judgments;
  std::filesystem::path out;
};
StageResult run_eval(const PipelineConfig& cfg, const EvalPaths& paths);

struct CrossJudgePaths {
  std::filesystem::path captions;
  std::filesystem::path qa;
  std::filesystem::path pairs;
  std::filesystem::path out;
};
StageResult run_cross_judge(const PipelineConfig& cfg, const CrossJudgePaths& paths);

struct AgreementPaths {
  std::filesystem::path paired;
  std::filesystem::path out;
  std::filesystem::path tsv;  // default: out with .tsv extension
};
StageResult run_agreement(const PipelineConfig& cfg, const AgreementPaths& paths);

struct BestOfNPaths {
  std::filesystem::path qa;
  std::filesystem::path model_dir;  // holds policy.bin and policy_meta.json
  std::filesystem::path out;
};
StageResult run_best_of_n(const PipelineConfig& cfg, const BestOfNPaths& paths);

// Builtin synthetic caption corpus: `per_source` records for each of
// activitynet, webvid and vidal, with ten frame references each.
std::vector<qa_gen::CaptionRecord> synthetic_captions(std::uint64_t seed, std::size_t per_source);

// Defaults for `demo`: production constants with quotas scaled by 1/1000.
PipelineConfig demo_config(std::uint64_t seed);

// Every stage end to end with mock backends; never touches the network.
StageResult run_demo(const PipelineConfig& cfg, const std::filesystem::path& out_dir);

}  // namespace capdpo::pipeline
