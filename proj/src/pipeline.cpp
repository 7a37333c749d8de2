#include "capdpo/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "capdpo/digest.hpp"
#include "capdpo/error.hpp"
#include "capdpo/http_backend.hpp"
#include "capdpo/pref_builder.hpp"
#include "capdpo/prompts.hpp"
#include "capdpo/rng.hpp"
#include "capdpo/store.hpp"
#include "parallel.hpp"

namespace capdpo::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::json;
using OJson = nlohmann::ordered_json;

// ---- config ----

void PipelineConfig::validate() const {
  sampling.validate();
  dpo.validate();
  require(threshold >= 1 && threshold <= 5, Errc::kConfig, "threshold must lie in 1..5");
  require(max_concurrency >= 1, Errc::kConfig, "max_concurrency must be positive");
  require(vocab >= 2, Errc::kConfig, "vocab must be at least 2");
  require(best_of_n_trials >= 1, Errc::kConfig, "best_of_n_trials must be positive");
  require(!best_of_n.empty(), Errc::kConfig, "best_of_n needs at least one N");
  for (int n : best_of_n) require(n >= 1, Errc::kConfig, "best_of_n entries must be positive");
  for (const auto* b : {&judge, &frame_judge, &generator}) {
    require(b->kind == "mock" || b->kind == "http", Errc::kConfig, "backend kind must be 'mock' or 'http'");
    require(b->retries >= 1, Errc::kConfig, "retries must be at least 1");
    require(b->timeout_ms > 0, Errc::kConfig, "timeout_ms must be positive");
    require(b->noise_rate >= 0.0 && b->noise_rate <= 1.0, Errc::kConfig, "noise_rate must lie in [0, 1]");
  }
}

namespace {

OJson backend_json(const BackendSettings& b) {
  return {{"kind", b.kind},   {"endpoint", b.endpoint},     {"model", b.model},   {"timeout_ms", b.timeout_ms},
          {"retries", b.retries}, {"multimodal", b.multimodal}, {"noise_rate", b.noise_rate}, {"bias", b.bias},
          {"spread", b.spread}};
}

template <typename T>
void take(const Json& doc, const char* key, T& out) {
  if (auto it = doc.find(key); it != doc.end()) out = it->get<T>();
}

void check_keys(const Json& doc, const std::set<std::string>& allowed, const std::string& where) {
  if (!doc.is_object()) fail(Errc::kConfig, where + " must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!allowed.count(key)) fail(Errc::kConfig, "unknown config key '" + where + key + "'");
  }
}

BackendSettings backend_from_json(const Json& doc, BackendSettings b, const std::string& where) {
  check_keys(doc, {"kind", "endpoint", "model", "timeout_ms", "retries", "multimodal", "noise_rate", "bias", "spread"},
             where);
  take(doc, "kind", b.kind);
  take(doc, "endpoint", b.endpoint);
  take(doc, "model", b.model);
  take(doc, "timeout_ms", b.timeout_ms);
  take(doc, "retries", b.retries);
  take(doc, "multimodal", b.multimodal);
  take(doc, "noise_rate", b.noise_rate);
  take(doc, "bias", b.bias);
  take(doc, "spread", b.spread);
  return b;
}

}  // namespace

OJson PipelineConfig::to_json() const {
  OJson quota = OJson::object();
  for (const auto& [k, v] : per_source_quota) quota[k] = v;
  return {{"seed", seed},
          {"per_source_quota", quota},
          {"question_subset", question_subset},
          {"sampling", {{"n_candidates", sampling.n_candidates}, {"temperature", sampling.temperature}}},
          {"dpo",
           {{"beta", dpo.beta},
            {"learning_rate", dpo.learning_rate},
            {"epochs", dpo.epochs},
            {"batch_size", dpo.batch_size}}},
          {"threshold", threshold},
          {"judge", backend_json(judge)},
          {"frame_judge", backend_json(frame_judge)},
          {"generator", backend_json(generator)},
          {"max_concurrency", max_concurrency},
          {"tie_rule", analytics::tie_rule_name(tie_rule)},
          {"seq_len", seq_len},
          {"vocab", vocab},
          {"best_of_n", best_of_n},
          {"best_of_n_trials", best_of_n_trials},
          {"prompt_dir", prompt_dir},
          {"audit_log", audit_log}};
}

PipelineConfig PipelineConfig::from_json(const Json& doc, PipelineConfig c) {
  try {
    check_keys(doc,
               {"seed", "per_source_quota", "question_subset", "sampling", "dpo", "threshold", "judge", "frame_judge",
                "generator", "max_concurrency", "tie_rule", "seq_len", "vocab", "best_of_n", "best_of_n_trials",
                "prompt_dir", "audit_log"},
               "");
    take(doc, "seed", c.seed);
    if (auto it = doc.find("per_source_quota"); it != doc.end()) {
      c.per_source_quota = it->get<std::map<std::string, std::size_t>>();
    }
    take(doc, "question_subset", c.question_subset);
    if (auto it = doc.find("sampling"); it != doc.end()) {
      check_keys(*it, {"n_candidates", "temperature"}, "sampling.");
      take(*it, "n_candidates", c.sampling.n_candidates);
      take(*it, "temperature", c.sampling.temperature);
    }
    if (auto it = doc.find("dpo"); it != doc.end()) {
      check_keys(*it, {"beta", "learning_rate", "epochs", "batch_size"}, "dpo.");
      take(*it, "beta", c.dpo.beta);
      take(*it, "learning_rate", c.dpo.learning_rate);
      take(*it, "epochs", c.dpo.epochs);
      take(*it, "batch_size", c.dpo.batch_size);
    }
    take(doc, "threshold", c.threshold);
    if (auto it = doc.find("judge"); it != doc.end()) c.judge = backend_from_json(*it, c.judge, "judge.");
    if (auto it = doc.find("frame_judge"); it != doc.end()) {
      c.frame_judge = backend_from_json(*it, c.frame_judge, "frame_judge.");
    }
    if (auto it = doc.find("generator"); it != doc.end()) {
      c.generator = backend_from_json(*it, c.generator, "generator.");
    }
    take(doc, "max_concurrency", c.max_concurrency);
    if (auto it = doc.find("tie_rule"); it != doc.end()) c.tie_rule = analytics::parse_tie_rule(it->get<std::string>());
    take(doc, "seq_len", c.seq_len);
    take(doc, "vocab", c.vocab);
    take(doc, "best_of_n", c.best_of_n);
    take(doc, "best_of_n_trials", c.best_of_n_trials);
    take(doc, "prompt_dir", c.prompt_dir);
    take(doc, "audit_log", c.audit_log);
  } catch (const Json::exception& e) {
    fail(Errc::kConfig, std::string("bad config value: ") + e.what());
  }
  c.sampling.seed = c.seed;
  c.dpo.seed = c.seed;
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.code() != Errc::kConfig) fail(Errc::kConfig, e.what());
    throw;
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path, PipelineConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kConfig, "cannot open config " + path.string());
  Json doc;
  try {
    doc = Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail(Errc::kConfig, path.string() + ": " + e.what());
  }
  return from_json(doc, std::move(base));
}

PipelineConfig PipelineConfig::from_json(const Json& doc) { return from_json(doc, PipelineConfig{}); }

PipelineConfig PipelineConfig::load(const fs::path& path) { return load(path, PipelineConfig{}); }

std::string PipelineConfig::hash() const { return sha256_hex(to_json().dump()); }

// ---- tokenizer ----

Tokenizer::Tokenizer(std::size_t seq_len, std::size_t vocab) : seq_len_(seq_len), vocab_(vocab) {
  require(seq_len_ >= 1, Errc::kInvalidArgument, "tokenizer seq_len must be positive");
  require(vocab_ >= 2, Errc::kInvalidArgument, "tokenizer vocab must be at least 2");
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids(seq_len_, 0);
  const auto words = judge::word_tokens(text);
  for (std::size_t t = 0; t < seq_len_ && t < words.size(); ++t) {
    ids[t] = 1 + static_cast<int>(StableHasher(0x746f6b).add(words[t]).finish() % (vocab_ - 1));
  }
  return ids;
}

// ---- stage plumbing ----

namespace {

fs::path dir_of(const fs::path& file) {
  const auto parent = file.parent_path();
  return parent.empty() ? fs::path(".") : parent;
}

void require_input(const fs::path& path, const char* flag) {
  if (path.empty()) fail(Errc::kIo, std::string("missing required input ") + flag);
  if (!fs::exists(path)) fail(Errc::kIo, std::string(flag) + " file not found: " + path.string());
}

// One stage invocation: owns the output directory lock and its manifest.
class StageRun {
 public:
  StageRun(const PipelineConfig& cfg, std::string stage, fs::path out_dir)
      : cfg_(cfg), stage_(std::move(stage)), dir_(std::move(out_dir)), lock_(dir_) {
    manifest_ = store::load_manifest(dir_);
    manifest_.seed = cfg.seed;
    manifest_.config_hash = cfg.hash();
    manifest_.run_id = "run-" + sha256_hex(std::to_string(cfg.seed) + ":" + manifest_.config_hash).substr(0, 16);
    manifest_.tool_version = kToolVersion;
    if (!cfg.prompt_dir.empty()) registry_ = prompts::Registry::with_overrides(cfg.prompt_dir);
    if (cfg.judge.kind == "mock" && cfg.frame_judge.kind == "mock" && cfg.generator.kind == "mock") {
      judge::net::set_forbidden(true);
    }
  }

  void input(const fs::path& path) { store::check_input(manifest_, dir_, path); }

  void output(const std::string& name, const fs::path& path, std::size_t records) {
    store::record_output(manifest_, dir_, stage_ + "/" + name, path, records);
  }

  const prompts::Registry& registry() const { return registry_ ? *registry_ : prompts::Registry::builtin(); }

  judge::CallContext call(std::size_t order, std::string key = {}) {
    judge::CallContext ctx;
    ctx.registry = &registry();
    ctx.audit = &audit_;
    ctx.order = order;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "-%06zu", order);
    ctx.request_id = stage_ + buf;
    ctx.key = std::move(key);
    return ctx;
  }

  void finish() {
    if (!cfg_.audit_log.empty() && audit_.size() > 0) {
      const auto stem = fs::path(cfg_.audit_log).stem().string();
      const auto path = dir_ / (stem + "." + stage_ + ".jsonl");
      const auto n = store::write(path, audit_.entries());
      output("audit", path, n);
    }
    store::save_manifest(dir_, manifest_);
  }

  const fs::path& dir() const { return dir_; }

 private:
  const PipelineConfig& cfg_;
  std::string stage_;
  fs::path dir_;
  store::DirLock lock_;
  store::RunManifest manifest_;
  std::optional<prompts::Registry> registry_;
  judge::AuditLog audit_;
};

judge::BackendPtr http_backend(const BackendSettings& s, bool multimodal) {
  judge::HttpBackendConfig hc;
  hc.endpoint = s.endpoint;
  hc.model = s.model;
  hc.timeout = std::chrono::milliseconds(s.timeout_ms);
  hc.multimodal = multimodal || s.multimodal;
  judge::RetryPolicy policy;
  policy.max_attempts = s.retries;
  return std::make_shared<judge::RetryingBackend>(std::make_shared<judge::HttpBackend>(hc), policy);
}

judge::BackendPtr make_text_judge(const PipelineConfig& cfg) {
  if (cfg.judge.kind == "mock") return judge::mock_judge(cfg.seed);
  return http_backend(cfg.judge, false);
}

judge::BackendPtr make_frame_judge(const PipelineConfig& cfg, std::map<std::string, std::string> answers) {
  if (cfg.frame_judge.kind == "mock") {
    return judge::mock_frame_judge(StableHasher(cfg.seed).add("frame-judge").finish(), std::move(answers),
                                   cfg.frame_judge.bias, cfg.frame_judge.spread);
  }
  return http_backend(cfg.frame_judge, true);
}

judge::BackendPtr make_generator(const PipelineConfig& cfg, const std::vector<qa_gen::QAPair>& qa) {
  if (cfg.generator.kind == "mock") {
    std::map<std::string, std::string> answers;
    for (const auto& q : qa) answers[sampler::candidate_key(q.video_id, q.pair_index)] = q.answer;
    return sampler::mock_generator(StableHasher(cfg.seed).add("generator").finish(), cfg.generator.noise_rate,
                                   std::move(answers));
  }
  return http_backend(cfg.generator, cfg.generator.multimodal);
}

std::string frame_key(std::string_view video_id, std::string_view question) {
  return std::string(video_id) + "\n" + std::string(question);
}

bool is_reject(Errc code) {
  return code == Errc::kMalformedQAOutput || code == Errc::kTransport || code == Errc::kBackendRejected ||
         code == Errc::kNoScoreFound || code == Errc::kScoreOutOfRange || code == Errc::kNonIntegerScore ||
         code == Errc::kEmptyGeneration;
}

std::map<std::string, qa_gen::CaptionRecord> captions_by_id(const std::vector<qa_gen::CaptionRecord>& captions) {
  std::map<std::string, qa_gen::CaptionRecord> out;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (!out.emplace(captions[i].video_id, captions[i]).second) {
      throw Error(Errc::kSchemaViolation, "duplicate video_id '" + captions[i].video_id + "'")
          .with_detail("video_id")
          .with_line(i + 1);
    }
  }
  return out;
}

using GroupKey = std::pair<std::string, int>;

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

// ---- gen-qa ----

StageResult run_gen_qa(const PipelineConfig& cfg, const GenQaPaths& paths) {
  cfg.validate();
  require_input(paths.captions, "--captions");
  StageRun run(cfg, "gen-qa", dir_of(paths.out));
  run.input(paths.captions);

  auto captions = store::read<qa_gen::CaptionRecord>(paths.captions);
  captions_by_id(captions);
  if (!cfg.per_source_quota.empty()) captions = qa_gen::apply_source_quota(captions, cfg.per_source_quota, cfg.seed);

  auto backend = make_text_judge(cfg);
  std::vector<std::vector<qa_gen::QAPair>> results(captions.size());
  std::vector<std::string> errors(captions.size());
  detail::parallel_for(captions.size(), cfg.max_concurrency, [&](std::size_t i) {
    try {
      results[i] = qa_gen::generate_qa(captions[i], *backend, run.call(i, captions[i].video_id));
    } catch (const Error& e) {
      if (!is_reject(e.code())) throw;
      errors[i] = std::string(errc_name(e.code()));
    }
  });

  std::vector<qa_gen::QAPair> qa;
  std::vector<store::RejectRecord> rejects;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (!errors[i].empty()) {
      rejects.push_back({captions[i].video_id, errors[i]});
    } else {
      qa.insert(qa.end(), results[i].begin(), results[i].end());
    }
  }
  const auto rejects_path = paths.rejects.empty() ? dir_of(paths.out) / "qa_rejects.jsonl" : paths.rejects;
  run.output("qa", paths.out, store::write(paths.out, qa));
  run.output("rejects", rejects_path, store::write(rejects_path, rejects));
  run.finish();
  const std::string msg = std::to_string(captions.size()) + " caption(s) -> " + std::to_string(qa.size()) +
                          " QA pair(s), " + std::to_string(rejects.size()) + " reject(s)";
  return {rejects.empty() ? kOk : kPartial, msg};
}

// ---- sample ----

StageResult run_sample(const PipelineConfig& cfg, const SamplePaths& paths) {
  cfg.validate();
  require_input(paths.qa, "--qa");
  StageRun run(cfg, "sample", dir_of(paths.out));
  run.input(paths.qa);
  auto qa = store::read<qa_gen::QAPair>(paths.qa);

  std::map<std::string, std::vector<std::string>> frames;
  if (!paths.captions.empty()) {
    require_input(paths.captions, "--captions");
    run.input(paths.captions);
    for (const auto& c : store::read<qa_gen::CaptionRecord>(paths.captions)) frames[c.video_id] = c.frame_refs;
  }

  if (cfg.question_subset > 0 && cfg.question_subset < qa.size()) {
    std::vector<std::size_t> idx(qa.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng(cfg.seed).split("question-subset").shuffle(idx);
    idx.resize(cfg.question_subset);
    std::sort(idx.begin(), idx.end());
    std::vector<qa_gen::QAPair> subset;
    for (auto i : idx) subset.push_back(qa[i]);
    qa = std::move(subset);
  }

  auto gen = make_generator(cfg, qa);
  sampler::SamplingConfig sc = cfg.sampling;
  sc.seed = StableHasher(cfg.seed).add("sample").finish();
  std::vector<std::vector<sampler::CandidateResponse>> results(qa.size());
  detail::parallel_for(qa.size(), cfg.max_concurrency, [&](std::size_t i) {
    static const std::vector<std::string> kNone;
    auto it = frames.find(qa[i].video_id);
    results[i] = sampler::sample_candidates(qa[i], it == frames.end() ? kNone : it->second, sc, *gen);
  });
  std::vector<sampler::CandidateResponse> out;
  for (auto& r : results) out.insert(out.end(), r.begin(), r.end());
  run.output("candidates", paths.out, store::write(paths.out, out));
  run.finish();
  return {kOk, std::to_string(qa.size()) + " question(s) -> " + std::to_string(out.size()) + " candidate(s)"};
}

// ---- score ----

StageResult run_score(const PipelineConfig& cfg, const ScorePaths& paths) {
  cfg.validate();
  require_input(paths.captions, "--captions");
  require_input(paths.qa, "--qa");
  require_input(paths.candidates, "--candidates");
  StageRun run(cfg, "score", dir_of(paths.out));
  for (const auto* p : {&paths.captions, &paths.qa, &paths.candidates}) run.input(*p);

  const auto captions = captions_by_id(store::read<qa_gen::CaptionRecord>(paths.captions));
  std::map<GroupKey, qa_gen::QAPair> qa;
  for (auto& q : store::read<qa_gen::QAPair>(paths.qa)) qa[{q.video_id, q.pair_index}] = q;
  const auto candidates = store::read<sampler::CandidateResponse>(paths.candidates);

  auto backend = make_text_judge(cfg);
  std::vector<std::optional<judge::Judgment>> results(candidates.size());
  std::vector<std::string> errors(candidates.size());
  detail::parallel_for(candidates.size(), cfg.max_concurrency, [&](std::size_t i) {
    const auto& c = candidates[i];
    auto cap = captions.find(c.video_id);
    auto q = qa.find({c.video_id, c.pair_index});
    if (cap == captions.end()) fail(Errc::kInvalidArgument, "no caption for video " + c.video_id);
    if (q == qa.end()) fail(Errc::kInvalidArgument, "no QA pair for " + sampler::candidate_key(c.video_id, c.pair_index));
    try {
      results[i] = judge::score_qa(cap->second.caption, q->second.question, q->second.answer, c.text, *backend,
                                   run.call(i, sampler::candidate_key(c.video_id, c.pair_index)));
    } catch (const Error& e) {
      if (!is_reject(e.code())) throw;
      errors[i] = sampler::candidate_key(c.video_id, c.pair_index) + "/" + std::to_string(c.sample_index) + ": " +
                  e.what();
    }
  });

  std::vector<store::JudgmentRecord> out;
  std::vector<store::RejectRecord> rejects;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& c = candidates[i];
    if (results[i]) {
      out.push_back({c.video_id, c.pair_index, c.sample_index, *results[i]});
    } else {
      rejects.push_back({c.video_id, errors[i]});
    }
  }
  const auto rejects_path = dir_of(paths.out) / "score_rejects.jsonl";
  run.output("judgments", paths.out, store::write(paths.out, out));
  run.output("rejects", rejects_path, store::write(rejects_path, rejects));
  run.finish();
  return {rejects.empty() ? kOk : kPartial, std::to_string(out.size()) + " judgment(s), " +
                                                std::to_string(rejects.size()) + " reject(s)"};
}

// ---- build-pairs ----

StageResult run_build_pairs(const PipelineConfig& cfg, const BuildPairsPaths& paths) {
  cfg.validate();
  require_input(paths.qa, "--qa");
  require_input(paths.candidates, "--candidates");
  require_input(paths.judgments, "--judgments");
  StageRun run(cfg, "build-pairs", dir_of(paths.out));
  for (const auto* p : {&paths.qa, &paths.candidates, &paths.judgments}) run.input(*p);

  std::map<GroupKey, std::string> questions;
  for (auto& q : store::read<qa_gen::QAPair>(paths.qa)) questions[{q.video_id, q.pair_index}] = q.question;
  std::map<std::tuple<std::string, int, int>, judge::Judgment> judged;
  for (auto& j : store::read<store::JudgmentRecord>(paths.judgments)) {
    judged[{j.video_id, j.pair_index, j.sample_index}] = j.judgment;
  }

  std::vector<pref_builder::CandidateGroup> groups;
  std::map<GroupKey, std::size_t> group_of;
  for (auto& c : store::read<sampler::CandidateResponse>(paths.candidates)) {
    const GroupKey key{c.video_id, c.pair_index};
    auto [it, inserted] = group_of.emplace(key, groups.size());
    if (inserted) {
      auto q = questions.find(key);
      if (q == questions.end()) fail(Errc::kInvalidArgument, "no QA pair for " + sampler::candidate_key(c.video_id, c.pair_index));
      groups.push_back({c.video_id, c.pair_index, q->second, {}});
    }
    auto j = judged.find({c.video_id, c.pair_index, c.sample_index});
    if (j == judged.end()) continue;
    groups[it->second].candidates.push_back({c, j->second});
  }
  for (const auto& g : groups) {
    if (g.candidates.size() < 2) {
      fail(Errc::kInvalidArgument, "group " + sampler::candidate_key(g.video_id, g.pair_index) + " has " +
                                       std::to_string(g.candidates.size()) +
                                       " judged candidate(s); a preference pair needs at least 2");
    }
  }

  const auto result = pref_builder::build_pairs(groups, cfg.threshold, StableHasher(cfg.seed).add("pairs").finish());
  const auto& st = result.stats;
  OJson hist = OJson::object();
  for (std::size_t s = 0; s < st.score_histogram.size(); ++s) hist[std::to_string(s + 1)] = st.score_histogram[s];
  const OJson stats{{"groups", groups.size()},
                    {"kept", st.kept},
                    {"excluded_all_high", st.excluded_all_high},
                    {"excluded_all_low", st.excluded_all_low},
                    {"score_histogram", hist},
                    {"degenerate_text_pairs", st.degenerate_text_pairs},
                    {"threshold", cfg.threshold}};
  const auto stats_path = paths.stats.empty() ? dir_of(paths.out) / "pairs_stats.json" : paths.stats;
  run.output("pairs", paths.out, store::write(paths.out, result.pairs));
  store::write_json(stats_path, stats);
  run.output("stats", stats_path, 1);
  run.finish();
  return {kOk, std::to_string(groups.size()) + " group(s): kept " + std::to_string(st.kept) + ", all-high " +
                   std::to_string(st.excluded_all_high) + ", all-low " + std::to_string(st.excluded_all_low)};
}

// ---- train-dpo ----

namespace {

struct TextPair {
  std::string video_id;
  std::string question;
  std::string chosen;
  std::string rejected;
};

}  // namespace

StageResult run_train_dpo(const PipelineConfig& cfg, TrainMode mode, const TrainPaths& paths) {
  cfg.validate();
  if (paths.out_dir.empty()) fail(Errc::kIo, "missing required --out-dir");
  StageRun run(cfg, mode == TrainMode::kDpo ? "train-dpo" : "train-selfplay", paths.out_dir);

  std::vector<TextPair> pairs;
  if (mode == TrainMode::kDpo) {
    require_input(paths.pairs, "--pairs");
    run.input(paths.pairs);
    for (auto& p : store::read<pref_builder::PreferencePair>(paths.pairs)) {
      pairs.push_back({p.video_id, p.question, p.chosen, p.rejected});
    }
  } else {
    require_input(paths.qa, "--qa");
    require_input(paths.candidates, "--candidates");
    run.input(paths.qa);
    run.input(paths.candidates);
    std::map<GroupKey, qa_gen::QAPair> qa;
    for (auto& q : store::read<qa_gen::QAPair>(paths.qa)) qa[{q.video_id, q.pair_index}] = q;
    std::map<GroupKey, std::vector<std::string>> samples;
    std::vector<GroupKey> order;
    for (auto& c : store::read<sampler::CandidateResponse>(paths.candidates)) {
      const GroupKey key{c.video_id, c.pair_index};
      if (!samples.count(key)) order.push_back(key);
      samples[key].push_back(c.text);
    }
    // Ground truth is chosen; one sampled response per question is rejected.
    for (const auto& key : order) {
      auto q = qa.find(key);
      if (q == qa.end()) fail(Errc::kInvalidArgument, "no QA pair for " + sampler::candidate_key(key.first, key.second));
      const auto& texts = samples[key];
      Rng rng(StableHasher(cfg.seed).add("selfplay").add(key.first).add(key.second).finish());
      pairs.push_back({key.first, q->second.question, q->second.answer, texts[rng.uniform_index(texts.size())]});
    }
  }
  if (pairs.empty()) fail(Errc::kEmptyInput, "no preference pairs to train on");

  std::map<std::pair<std::string, std::string>, std::size_t> context_of;
  for (const auto& p : pairs) context_of.emplace(std::pair{p.video_id, p.question}, 0);
  std::size_t next = 0;
  for (auto& [key, idx] : context_of) idx = next++;

  std::size_t seq_len = cfg.seq_len;
  if (seq_len == 0) {
    for (const auto& p : pairs) {
      seq_len = std::max({seq_len, judge::word_tokens(p.chosen).size(), judge::word_tokens(p.rejected).size()});
    }
    seq_len = std::max<std::size_t>(seq_len, 1);
  }
  const Tokenizer tok(seq_len, cfg.vocab);
  std::vector<dpo::DpoExample> data;
  for (const auto& p : pairs) {
    data.push_back({context_of.at({p.video_id, p.question}), tok.encode(p.chosen), tok.encode(p.rejected)});
  }

  const dpo::ToyPolicy theta0(dpo::Shape{context_of.size(), seq_len, cfg.vocab});
  dpo::DpoConfig dc = cfg.dpo;
  dc.seed = StableHasher(cfg.seed).add("train").finish();
  const auto initial_loss = dpo::dpo_loss(theta0, theta0, data, dc.beta);
  const auto trained = dpo::train(theta0, data, dc);
  const auto final_loss = dpo::dpo_loss(trained.policy, theta0, data, dc.beta);
  std::size_t positive = 0;
  for (const auto& ex : data) positive += dpo::preference_margin(trained.policy, theta0, ex, dc.beta) > 0.0;

  const auto& dir = paths.out_dir;
  dpo::save_checkpoint(dir / "policy.bin", trained.policy);
  run.output("policy", dir / "policy.bin", trained.policy.shape().size());
  OJson contexts = OJson::array();
  for (const auto& [key, idx] : context_of) contexts.push_back({{"video_id", key.first}, {"question", key.second}});
  const OJson meta{{"seq_len", seq_len},
                   {"vocab", cfg.vocab},
                   {"beta", dc.beta},
                   {"reference", "uniform"},
                   {"contexts", contexts}};
  store::write_json(dir / "policy_meta.json", meta);
  run.output("meta", dir / "policy_meta.json", context_of.size());
  dpo::write_loss_csv(dir / "loss.csv", trained.loss_trace);
  run.output("loss", dir / "loss.csv", trained.loss_trace.size());
  const OJson report{{"mode", mode == TrainMode::kDpo ? "dpo" : "selfplay"},
                     {"n_pairs", data.size()},
                     {"n_contexts", context_of.size()},
                     {"seq_len", seq_len},
                     {"vocab", cfg.vocab},
                     {"beta", dc.beta},
                     {"learning_rate", dc.learning_rate},
                     {"epochs", dc.epochs},
                     {"batch_size", dc.batch_size},
                     {"steps", trained.loss_trace.size()},
                     {"initial_loss", initial_loss},
                     {"final_loss", final_loss},
                     {"positive_margin_fraction", static_cast<double>(positive) / static_cast<double>(data.size())}};
  store::write_json(dir / "train_report.json", report);
  run.output("report", dir / "train_report.json", 1);
  run.finish();
  return {kOk, std::to_string(data.size()) + " pair(s), " + std::to_string(trained.loss_trace.size()) +
                   " step(s), loss " + fmt(initial_loss) + " -> " + fmt(final_loss)};
}

// ---- eval ----

StageResult run_eval(const PipelineConfig& cfg, const EvalPaths& paths) {
  cfg.validate();
  require_input(paths.judgments, "--judgments");
  StageRun run(cfg, "eval", dir_of(paths.out));
  run.input(paths.judgments);
  std::vector<judge::Judgment> js;
  for (auto& r : store::read<store::JudgmentRecord>(paths.judgments)) js.push_back(std::move(r.judgment));
  const auto b = analytics::benchmark_score(js, cfg.threshold);
  store::write_json(paths.out, OJson{{"n", b.n}, {"threshold", cfg.threshold}, {"accuracy", b.accuracy},
                                     {"avg_score", b.avg_score}});
  run.output("report", paths.out, 1);
  run.finish();
  return {kOk, "accuracy " + fmt(b.accuracy, 4) + ", average score " + fmt(b.avg_score, 4) + " over " +
                   std::to_string(b.n)};
}

// ---- cross-judge ----

StageResult run_cross_judge(const PipelineConfig& cfg, const CrossJudgePaths& paths) {
  cfg.validate();
  require_input(paths.captions, "--captions");
  require_input(paths.qa, "--qa");
  require_input(paths.pairs, "--pairs");
  StageRun run(cfg, "cross-judge", dir_of(paths.out));
  for (const auto* p : {&paths.captions, &paths.qa, &paths.pairs}) run.input(*p);

  const auto captions = captions_by_id(store::read<qa_gen::CaptionRecord>(paths.captions));
  std::map<std::string, std::string> answers;
  for (auto& q : store::read<qa_gen::QAPair>(paths.qa)) answers[frame_key(q.video_id, q.question)] = q.answer;
  const auto pairs = store::read<pref_builder::PreferencePair>(paths.pairs);

  auto backend = make_frame_judge(cfg, answers);
  std::vector<int> frame_scores(pairs.size() * 2);
  detail::parallel_for(pairs.size() * 2, cfg.max_concurrency, [&](std::size_t i) {
    const auto& p = pairs[i / 2];
    auto cap = captions.find(p.video_id);
    if (cap == captions.end()) fail(Errc::kInvalidArgument, "no caption for video " + p.video_id);
    const auto& text = i % 2 == 0 ? p.chosen : p.rejected;
    frame_scores[i] = judge::score_qa_frames(cap->second.frame_refs, p.question, text, *backend,
                                             run.call(i, frame_key(p.video_id, p.question)))
                          .score;
  });

  std::vector<analytics::PairedJudgment> out;
  for (std::size_t g = 0; g < pairs.size(); ++g) {
    char gid[32];
    std::snprintf(gid, sizeof(gid), "g%05zu", g);
    out.push_back({std::string(gid) + "-0", gid, 0, pairs[g].chosen_score, frame_scores[2 * g]});
    out.push_back({std::string(gid) + "-1", gid, 1, pairs[g].rejected_score, frame_scores[2 * g + 1]});
  }
  run.output("paired_judgments", paths.out, store::write(paths.out, out));
  run.finish();
  return {kOk, std::to_string(out.size()) + " paired judgment(s)"};
}

// ---- agreement ----

StageResult run_agreement(const PipelineConfig& cfg, const AgreementPaths& paths) {
  cfg.validate();
  require_input(paths.paired, "--paired");
  StageRun run(cfg, "agreement", dir_of(paths.out));
  run.input(paths.paired);
  const auto records = store::read<analytics::PairedJudgment>(paths.paired);
  const auto r = analytics::agreement_report(records, cfg.tie_rule);

  OJson hist = OJson::object();
  for (std::size_t i = 0; i < r.diff_histogram.size(); ++i) hist[std::to_string(static_cast<int>(i) - 4)] = r.diff_histogram[i];
  const OJson doc{{"n", r.n},
                  {"mean_a", r.mean_a},
                  {"mean_b", r.mean_b},
                  {"pcc", r.pcc ? OJson(*r.pcc) : OJson(nullptr)},
                  {"sigma_diff", r.sigma_diff},
                  {"frac_within_1sigma", r.frac_within_1sigma},
                  {"diff_histogram", hist},
                  {"pref_agreement", r.pref_agreement ? OJson(*r.pref_agreement) : OJson(nullptr)},
                  {"n_groups", r.n_groups},
                  {"n_ties_excluded", r.n_ties_excluded},
                  {"tie_rule", analytics::tie_rule_name(r.tie_rule)}};
  store::write_json(paths.out, doc);
  run.output("report", paths.out, 1);

  auto cell = [](const std::optional<double>& v) { return v ? OJson(*v).dump() : std::string("NA"); };
  std::string tsv = std::to_string(r.n) + "\t" + OJson(r.mean_a).dump() + "\t" + OJson(r.mean_b).dump() + "\t" +
                    cell(r.pcc) + "\t" + OJson(r.sigma_diff).dump() + "\t" + OJson(r.frac_within_1sigma).dump() +
                    "\t" + cell(r.pref_agreement) + "\t" + std::to_string(r.n_ties_excluded) + "\n";
  auto tsv_path = paths.tsv;
  if (tsv_path.empty()) tsv_path = fs::path(paths.out).replace_extension(".tsv");
  store::write_text(tsv_path, tsv);
  run.output("tsv", tsv_path, 1);
  run.finish();
  return {kOk, "pcc " + (r.pcc ? fmt(*r.pcc, 4) : std::string("n/a")) + ", preference agreement " +
                   (r.pref_agreement ? fmt(*r.pref_agreement, 4) : std::string("n/a"))};
}

// ---- best-of-n ----

StageResult run_best_of_n(const PipelineConfig& cfg, const BestOfNPaths& paths) {
  cfg.validate();
  require_input(paths.qa, "--qa");
  require_input(paths.model_dir / "policy.bin", "--model-dir");
  require_input(paths.model_dir / "policy_meta.json", "--model-dir");
  StageRun run(cfg, "best-of-n", dir_of(paths.out));
  run.input(paths.qa);
  run.input(paths.model_dir / "policy.bin");

  const auto qa = store::read<qa_gen::QAPair>(paths.qa);
  std::map<std::pair<std::string, std::string>, qa_gen::QAPair> qa_by_text;
  for (const auto& q : qa) qa_by_text[{q.video_id, q.question}] = q;
  const auto theta = dpo::load_checkpoint(paths.model_dir / "policy.bin");
  const auto meta = store::read_json(paths.model_dir / "policy_meta.json");
  const dpo::ToyPolicy ref(theta.shape());
  const double beta = meta.at("beta").get<double>();
  const Tokenizer tok(meta.at("seq_len").get<std::size_t>(), meta.at("vocab").get<std::size_t>());
  if (tok.seq_len() != theta.shape().seq_len || tok.vocab() != theta.shape().vocab) {
    fail(Errc::kShapeMismatch, "policy_meta.json does not match policy.bin");
  }
  std::vector<qa_gen::QAPair> contexts;
  for (const auto& c : meta.at("contexts")) {
    auto it = qa_by_text.find({c.at("video_id").get<std::string>(), c.at("question").get<std::string>()});
    if (it == qa_by_text.end()) fail(Errc::kInvalidArgument, "policy context missing from --qa");
    contexts.push_back(it->second);
  }

  auto gen = make_generator(cfg, qa);
  auto judge_backend = make_text_judge(cfg);
  std::map<std::string, std::string> caption_stub;
  const int max_n = *std::max_element(cfg.best_of_n.begin(), cfg.best_of_n.end());
  const std::size_t trials = static_cast<std::size_t>(cfg.best_of_n_trials);
  const std::size_t tasks = contexts.size() * trials;
  // selected_scores[task][k] = judged score of the candidate picked for best_of_n[k]
  std::vector<std::vector<int>> selected_scores(tasks);
  detail::parallel_for(tasks, cfg.max_concurrency, [&](std::size_t task) {
    const std::size_t c = task / trials;
    const std::size_t trial = task % trials;
    const auto& q = contexts[c];
    sampler::SamplingConfig sc = cfg.sampling;
    sc.n_candidates = max_n;
    sc.seed = StableHasher(cfg.seed).add("best-of-n").add(static_cast<std::uint64_t>(trial)).finish();
    const auto cands = sampler::sample_candidates(q, {}, sc, *gen);
    std::vector<std::vector<int>> tokens;
    for (const auto& cand : cands) tokens.push_back(tok.encode(cand.text));
    std::map<std::size_t, int> judged;
    for (int n : cfg.best_of_n) {
      const std::vector<std::vector<int>> head(tokens.begin(), tokens.begin() + n);
      const auto best = dpo::rank_best_of_n(theta, ref, c, head, beta).best_index;
      auto it = judged.find(best);
      if (it == judged.end()) {
        // The caption is evidence for real judges; the mock reads only answer and prediction.
        const auto j = judge::score_qa(q.answer, q.question, q.answer, cands[best].text, *judge_backend);
        it = judged.emplace(best, j.score).first;
      }
      selected_scores[task].push_back(it->second);
    }
  });

  OJson results = OJson::array();
  for (std::size_t k = 0; k < cfg.best_of_n.size(); ++k) {
    std::vector<int> scores;
    for (const auto& s : selected_scores) scores.push_back(s[k]);
    const auto b = analytics::benchmark_score(scores, cfg.threshold);
    results.push_back({{"n", cfg.best_of_n[k]}, {"mean_score", b.avg_score}, {"accuracy", b.accuracy},
                       {"selections", b.n}});
  }
  store::write_json(paths.out, OJson{{"contexts", contexts.size()}, {"trials", trials}, {"results", results}});
  run.output("report", paths.out, cfg.best_of_n.size());
  run.finish();
  std::string msg;
  for (const auto& r : results) {
    msg += "N=" + std::to_string(r.at("n").get<int>()) + ":" + fmt(r.at("mean_score").get<double>(), 3) + " ";
  }
  return {kOk, msg};
}

// ---- demo ----

std::vector<qa_gen::CaptionRecord> synthetic_captions(std::uint64_t seed, std::size_t per_source) {
  static const std::vector<std::string> kSubjects = {
      "a man in a red jacket", "a young woman with a backpack", "two children", "an elderly couple",
      "a chef in a white apron", "a golden retriever", "a cyclist in a yellow helmet", "a group of teenagers",
      "a street musician", "a farmer", "a gymnast", "a fisherman in a small boat"};
  static const std::vector<std::string> kActions = {
      "walks slowly", "runs", "dances", "carries a wooden crate", "rides a bicycle", "plays a guitar",
      "throws a frisbee", "paints a fence", "climbs a rope", "waters potted plants", "kneads dough",
      "practices a routine"};
  static const std::vector<std::string> kSettings = {
      "along a snowy mountain path", "across a crowded city square", "inside a bright kitchen",
      "beside a calm lake", "on a sandy beach at sunset", "in a narrow alley", "through a green park",
      "inside a wooden barn", "on a rooftop terrace", "near a busy harbor"};
  static const std::vector<std::string> kDetails = {
      "stops to wave at a passing neighbor", "picks up a blue umbrella", "laughs at a small dog",
      "checks a silver wristwatch", "ties a loose shoelace", "drinks from a green bottle",
      "points at a flock of birds", "adjusts a striped scarf", "sets a basket on the ground"};
  static const std::vector<std::string> kCamera = {
      "The camera pans left", "The camera zooms in slowly", "The view shifts to a wide shot",
      "The camera follows from behind", "The frame tilts upward"};
  static const std::vector<std::string> kEvents = {
      "rain begins to fall", "a bus drives past", "the lights flicker on", "a crowd gathers nearby",
      "the wind lifts some leaves", "a bell rings in the distance"};
  static const std::vector<std::string> kEndings = {
      "a close view of the empty path", "the subject smiling at the camera", "a slow fade to black",
      "a wide shot of the skyline"};
  static const std::vector<std::string> kSources = {"activitynet", "webvid", "vidal"};

  auto cap = [](std::string s) {
    if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  };
  std::vector<qa_gen::CaptionRecord> out;
  Rng rng(StableHasher(seed).add("synthetic-captions").finish());
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& { return v[rng.uniform_index(v.size())]; };
  for (const auto& source : kSources) {
    for (std::size_t i = 0; i < per_source; ++i) {
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%04zu", source.c_str(), i);
      const auto& subject = pick(kSubjects);
      std::string caption = cap(subject) + " " + pick(kActions) + " " + pick(kSettings) + ". ";
      caption += cap(subject) + " then " + pick(kDetails) + ". ";
      caption += pick(kCamera) + " as " + pick(kEvents) + ". ";
      caption += "The clip ends with " + pick(kEndings) + ".";
      std::vector<std::string> frames;
      for (int f = 0; f < 10; ++f) {
        char ref[96];
        std::snprintf(ref, sizeof(ref), "frames/%s/%02d.jpg", id, f);
        frames.emplace_back(ref);
      }
      out.push_back({id, source, caption, std::move(frames)});
    }
  }
  return out;
}

PipelineConfig demo_config(std::uint64_t seed) {
  PipelineConfig cfg;
  cfg.seed = seed;
  cfg.per_source_quota = {{"activitynet", 20}, {"webvid", 30}, {"vidal", 30}};
  cfg.question_subset = 20;
  cfg.sampling.n_candidates = 6;
  cfg.sampling.temperature = 1.0;
  cfg.sampling.seed = seed;
  cfg.dpo.seed = seed;
  return cfg;
}

StageResult run_demo(const PipelineConfig& in_cfg, const fs::path& out_dir) {
  PipelineConfig cfg = in_cfg;
  cfg.judge.kind = "mock";
  cfg.frame_judge.kind = "mock";
  cfg.generator.kind = "mock";
  cfg.validate();
  judge::net::set_forbidden(true);
  fs::create_directories(out_dir);

  const auto p = [&](const char* name) { return out_dir / name; };
  {
    store::DirLock lock(out_dir);
    store::write(p("captions.jsonl"), synthetic_captions(cfg.seed, 40));
  }
  std::vector<std::string> lines;
  auto step = [&](const char* name, const StageResult& r) {
    lines.push_back(std::string(name) + ": " + r.message);
    if (r.exit_code == kFatal) fail(Errc::kIo, std::string("demo stage ") + name + " failed: " + r.message);
  };
  step("gen-qa", run_gen_qa(cfg, {p("captions.jsonl"), p("qa.jsonl"), {}}));
  step("sample", run_sample(cfg, {p("qa.jsonl"), p("captions.jsonl"), p("candidates.jsonl")}));
  step("score", run_score(cfg, {p("captions.jsonl"), p("qa.jsonl"), p("candidates.jsonl"), p("judgments.jsonl")}));
  step("build-pairs",
       run_build_pairs(cfg, {p("qa.jsonl"), p("candidates.jsonl"), p("judgments.jsonl"), p("pairs.jsonl"), {}}));
  step("train-dpo", run_train_dpo(cfg, TrainMode::kDpo, {p("pairs.jsonl"), {}, {}, p("model")}));
  step("eval", run_eval(cfg, {p("judgments.jsonl"), p("eval_sft.json")}));
  step("cross-judge", run_cross_judge(cfg, {p("captions.jsonl"), p("qa.jsonl"), p("pairs.jsonl"),
                                            p("paired_judgments.jsonl")}));
  step("agreement", run_agreement(cfg, {p("paired_judgments.jsonl"), p("agreement.json"), {}}));
  step("best-of-n", run_best_of_n(cfg, {p("qa.jsonl"), p("model"), p("best_of_n.json")}));

  const auto train = store::read_json(p("model") / "train_report.json");
  const auto bon = store::read_json(p("best_of_n.json"));
  std::ostringstream s;
  s << "capdpo demo, seed " << cfg.seed << "\n\n";
  for (const auto& l : lines) s << l << "\n";
  s << "\nDPO training: " << train.at("steps").get<std::size_t>() << " steps, loss "
    << fmt(train.at("initial_loss").get<double>()) << " -> " << fmt(train.at("final_loss").get<double>())
    << " (ln 2 = " << fmt(std::log(2.0)) << ")\n";
  s << "\nBest-of-N with the DPO ranker (mean judged score of the selected candidate):\n";
  for (const auto& r : bon.at("results")) {
    s << "  N=" << r.at("n").get<int>() << "  mean_score=" << fmt(r.at("mean_score").get<double>(), 4)
      << "  accuracy=" << fmt(r.at("accuracy").get<double>(), 4) << "\n";
  }
  store::write_text(p("summary.txt"), s.str());
  return {kOk, s.str()};
}

}  // namespace capdpo::pipeline
