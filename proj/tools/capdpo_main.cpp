#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "capdpo/error.hpp"
#include "capdpo/pipeline.hpp"

namespace {

using namespace capdpo;
using pipeline::PipelineConfig;

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threshold;
  std::optional<int> n_candidates;
  std::optional<double> temperature;
  std::optional<double> beta;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<std::size_t> batch;
  std::optional<std::size_t> concurrency;
  std::optional<std::size_t> question_subset;
  std::optional<std::string> tie_rule;
  std::optional<std::string> prompt_dir;
  std::optional<std::string> judge_kind;
  std::optional<std::string> judge_endpoint;
  std::optional<std::string> judge_model;
  std::optional<std::string> frame_judge_kind;
  std::optional<std::string> frame_judge_endpoint;
  std::optional<std::string> frame_judge_model;
  std::optional<std::string> generator_kind;
  std::optional<std::string> generator_endpoint;
  std::optional<std::string> generator_model;

  void add_to(CLI::App& app) {
    const PipelineConfig d;
    auto def = [](std::string help, const auto& value) {
      std::ostringstream os;
      os << value;
      return help + " [default: " + os.str() + "]";
    };
    app.add_option("--config", config, "JSON config file; flags override it")->check(CLI::ExistingFile);
    app.add_option("--seed", seed, def("Top-level seed", d.seed));
    app.add_option("--threshold", threshold, def("Pass threshold on the 1-5 scale", d.threshold));
    app.add_option("--n-candidates", n_candidates, def("Candidates sampled per question", d.sampling.n_candidates));
    app.add_option("--temperature", temperature, def("Sampling temperature", d.sampling.temperature));
    app.add_option("--beta", beta, def("DPO beta", d.dpo.beta));
    app.add_option("--lr", lr, def("DPO learning rate (toy policy)", d.dpo.learning_rate));
    app.add_option("--epochs", epochs, def("DPO epochs", d.dpo.epochs));
    app.add_option("--batch-size", batch, def("DPO batch size", d.dpo.batch_size));
    app.add_option("--max-concurrency", concurrency, def("Parallel backend calls", d.max_concurrency));
    app.add_option("--question-subset", question_subset,
                   def("Questions drawn for sampling, 0 keeps all", d.question_subset));
    app.add_option("--tie-rule", tie_rule, def("Preference tie rule: either | reference", "either"));
    app.add_option("--prompt-dir", prompt_dir, def("Directory of <id>.prompt overrides", "(builtin)"));
    app.add_option("--judge", judge_kind, def("Text judge backend: mock | http", d.judge.kind));
    app.add_option("--judge-endpoint", judge_endpoint, def("Chat-completions URL for the text judge", "(none)"));
    app.add_option("--judge-model", judge_model, def("Model name for the text judge", "(none)"));
    app.add_option("--frame-judge", frame_judge_kind, def("Frame judge backend: mock | http", d.frame_judge.kind));
    app.add_option("--frame-judge-endpoint", frame_judge_endpoint,
                   def("Chat-completions URL for the frame judge", "(none)"));
    app.add_option("--frame-judge-model", frame_judge_model, def("Model name for the frame judge", "(none)"));
    app.add_option("--generator", generator_kind, def("Candidate generator backend: mock | http", d.generator.kind));
    app.add_option("--generator-endpoint", generator_endpoint,
                   def("Chat-completions URL for the generator", "(none)"));
    app.add_option("--generator-model", generator_model, def("Model name for the generator", "(none)"));
  }

  PipelineConfig resolve(PipelineConfig base = {}) const {
    PipelineConfig cfg = config.empty() ? base : PipelineConfig::load(config, base);
    if (seed) cfg.seed = *seed;
    if (threshold) cfg.threshold = *threshold;
    if (n_candidates) cfg.sampling.n_candidates = *n_candidates;
    if (temperature) cfg.sampling.temperature = *temperature;
    if (beta) cfg.dpo.beta = *beta;
    if (lr) cfg.dpo.learning_rate = *lr;
    if (epochs) cfg.dpo.epochs = *epochs;
    if (batch) cfg.dpo.batch_size = *batch;
    if (concurrency) cfg.max_concurrency = *concurrency;
    if (question_subset) cfg.question_subset = *question_subset;
    if (tie_rule) cfg.tie_rule = analytics::parse_tie_rule(*tie_rule);
    if (prompt_dir) cfg.prompt_dir = *prompt_dir;
    if (judge_kind) cfg.judge.kind = *judge_kind;
    if (judge_endpoint) cfg.judge.endpoint = *judge_endpoint;
    if (judge_model) cfg.judge.model = *judge_model;
    if (frame_judge_kind) cfg.frame_judge.kind = *frame_judge_kind;
    if (frame_judge_endpoint) cfg.frame_judge.endpoint = *frame_judge_endpoint;
    if (frame_judge_model) cfg.frame_judge.model = *frame_judge_model;
    if (generator_kind) cfg.generator.kind = *generator_kind;
    if (generator_endpoint) cfg.generator.endpoint = *generator_endpoint;
    if (generator_model) cfg.generator.model = *generator_model;
    cfg.sampling.seed = cfg.seed;
    cfg.dpo.seed = cfg.seed;
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capdpo: caption-evidence judging, preference pairs and DPO on a toy policy"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(pipeline::kToolVersion));

  Overrides ov;
  pipeline::StageResult result;
  std::function<pipeline::StageResult()> action;

  auto sub = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    ov.add_to(*s);
    return s;
  };

  pipeline::GenQaPaths gen_qa;
  auto* c_gen = sub("gen-qa", "Generate three QA pairs per caption");
  c_gen->add_option("--captions", gen_qa.captions, "captions.jsonl")->required();
  c_gen->add_option("--out", gen_qa.out, "qa.jsonl")->required();
  c_gen->add_option("--rejects", gen_qa.rejects, "rejects.jsonl (default: next to --out)");
  c_gen->callback([&] { action = [&] { return pipeline::run_gen_qa(ov.resolve(), gen_qa); }; });

  pipeline::SamplePaths sample;
  auto* c_sample = sub("sample", "Sample candidate answers per question");
  c_sample->add_option("--qa", sample.qa, "qa.jsonl")->required();
  c_sample->add_option("--captions", sample.captions, "captions.jsonl supplying frame references");
  c_sample->add_option("--out", sample.out, "candidates.jsonl")->required();
  c_sample->callback([&] { action = [&] { return pipeline::run_sample(ov.resolve(), sample); }; });

  pipeline::ScorePaths score;
  auto* c_score = sub("score", "Judge candidates with the caption as evidence");
  c_score->add_option("--captions", score.captions, "captions.jsonl")->required();
  c_score->add_option("--qa", score.qa, "qa.jsonl")->required();
  c_score->add_option("--candidates", score.candidates, "candidates.jsonl")->required();
  c_score->add_option("--out", score.out, "judgments.jsonl")->required();
  c_score->callback([&] { action = [&] { return pipeline::run_score(ov.resolve(), score); }; });

  pipeline::BuildPairsPaths pairs;
  auto* c_pairs = sub("build-pairs", "Build preference pairs from judged candidates");
  c_pairs->add_option("--qa", pairs.qa, "qa.jsonl")->required();
  c_pairs->add_option("--candidates", pairs.candidates, "candidates.jsonl")->required();
  c_pairs->add_option("--judgments", pairs.judgments, "judgments.jsonl")->required();
  c_pairs->add_option("--out", pairs.out, "pairs.jsonl")->required();
  c_pairs->add_option("--stats", pairs.stats, "stats JSON (default: next to --out)");
  c_pairs->callback([&] { action = [&] { return pipeline::run_build_pairs(ov.resolve(), pairs); }; });

  pipeline::TrainPaths train;
  std::string mode = "dpo";
  auto* c_train = sub("train-dpo", "Train the toy policy with DPO");
  c_train->add_option("--mode", mode, "dpo | selfplay [default: dpo]")->check(CLI::IsMember({"dpo", "selfplay"}));
  c_train->add_option("--pairs", train.pairs, "pairs.jsonl (dpo mode)");
  c_train->add_option("--qa", train.qa, "qa.jsonl (selfplay mode)");
  c_train->add_option("--candidates", train.candidates, "candidates.jsonl (selfplay mode)");
  c_train->add_option("--out-dir", train.out_dir, "model output directory")->required();
  c_train->callback([&] {
    action = [&] {
      return pipeline::run_train_dpo(ov.resolve(),
                                     mode == "dpo" ? pipeline::TrainMode::kDpo : pipeline::TrainMode::kSelfPlay, train);
    };
  });

  pipeline::EvalPaths eval;
  auto* c_eval = sub("eval", "Benchmark accuracy and mean score from judgments");
  c_eval->add_option("--judgments", eval.judgments, "judgments.jsonl")->required();
  c_eval->add_option("--out", eval.out, "report JSON")->required();
  c_eval->callback([&] { action = [&] { return pipeline::run_eval(ov.resolve(), eval); }; });

  pipeline::CrossJudgePaths cross;
  auto* c_cross = sub("cross-judge", "Re-score chosen and rejected answers with the frame judge");
  c_cross->add_option("--captions", cross.captions, "captions.jsonl")->required();
  c_cross->add_option("--qa", cross.qa, "qa.jsonl")->required();
  c_cross->add_option("--pairs", cross.pairs, "pairs.jsonl")->required();
  c_cross->add_option("--out", cross.out, "paired_judgments.jsonl")->required();
  c_cross->callback([&] { action = [&] { return pipeline::run_cross_judge(ov.resolve(), cross); }; });

  pipeline::AgreementPaths agree;
  auto* c_agree = sub("agreement", "Evaluator agreement between two judges");
  c_agree->add_option("--paired", agree.paired, "paired_judgments.jsonl")->required();
  c_agree->add_option("--out", agree.out, "report JSON")->required();
  c_agree->add_option("--tsv", agree.tsv, "one-line TSV (default: --out with .tsv)");
  c_agree->callback([&] { action = [&] { return pipeline::run_agreement(ov.resolve(), agree); }; });

  pipeline::BestOfNPaths bon;
  auto* c_bon = sub("best-of-n", "Rerank sampled candidates with the trained policy");
  c_bon->add_option("--qa", bon.qa, "qa.jsonl")->required();
  c_bon->add_option("--model-dir", bon.model_dir, "directory written by train-dpo")->required();
  c_bon->add_option("--out", bon.out, "report JSON")->required();
  c_bon->callback([&] { action = [&] { return pipeline::run_best_of_n(ov.resolve(), bon); }; });

  std::filesystem::path demo_out;
  std::uint64_t demo_seed = 0;
  auto* c_demo = app.add_subcommand("demo", "Run every stage offline with mock backends");
  c_demo->add_option("--seed", demo_seed, "Seed")->required();
  c_demo->add_option("--out", demo_out, "Output directory")->required();
  c_demo->callback([&] {
    action = [&] { return pipeline::run_demo(pipeline::demo_config(demo_seed), demo_out); };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? pipeline::kOk : pipeline::kUsage;
  }

  try {
    result = action();
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pipeline::kFatal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pipeline::kFatal;
  }
  std::cout << result.message;
  if (!result.message.empty() && result.message.back() != '\n') std::cout << "\n";
  return result.exit_code;
}
