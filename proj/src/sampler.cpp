#include "capdpo/sampler.hpp"

#include "capdpo/error.hpp"
#include "capdpo/rng.hpp"
#include "text_util.hpp"

namespace capdpo::sampler {

void SamplingConfig::validate() const {
  require(n_candidates >= 1, Errc::kInvalidArgument, "n_candidates must be positive");
  require(temperature >= 0.0, Errc::kInvalidArgument, "sampling temperature must be >= 0");
}

std::string candidate_key(std::string_view video_id, int pair_index) {
  return std::string(video_id) + "#" + std::to_string(pair_index);
}

std::uint64_t derive_sample_seed(std::uint64_t seed, std::string_view video_id, int pair_index, int sample_index) {
  return StableHasher(seed).add(video_id).add(pair_index).add(sample_index).finish();
}

std::vector<CandidateResponse> sample_candidates(const qa_gen::QAPair& qa, const std::vector<std::string>& frame_refs,
                                                 const SamplingConfig& cfg, judge::Backend& gen) {
  cfg.validate();
  std::vector<CandidateResponse> out;
  out.reserve(static_cast<std::size_t>(cfg.n_candidates));
  for (int s = 0; s < cfg.n_candidates; ++s) {
    judge::JudgeRequest req;
    req.prompt = qa.question;
    req.temperature = cfg.temperature;
    req.backend_id = gen.id();
    req.seed = derive_sample_seed(cfg.seed, qa.video_id, qa.pair_index, s);
    req.key = candidate_key(qa.video_id, qa.pair_index);
    if (gen.accepts_attachments()) req.attachments = frame_refs;
    std::string text = gen.submit(req);
    if (detail::trim(text).empty()) {
      throw Error(Errc::kEmptyGeneration, "empty generation for " + req.key + " sample " + std::to_string(s))
          .with_detail(req.key);
    }
    out.push_back({qa.video_id, qa.pair_index, s, std::move(text)});
  }
  return out;
}

const std::vector<std::string>& distractor_vocabulary() {
  static const std::vector<std::string> kWords = {
      "blorf",   "zindle", "quappo",  "snerk",   "vrimble", "tazzle", "glimp",   "frobin",
      "wuxtle",  "plonz",  "drizzat", "kwombel", "yurpy",   "sklint", "mubbo",   "trenzik",
      "flazzor", "grunce", "hopplix", "jibbet",  "nurfle",  "oxtrum", "prindle", "quorbz",
      "rizzum",  "sploot", "thwimp",  "umbrix",  "vexlor",  "wimzy",  "xandrel", "zorfle",
  };
  return kWords;
}

namespace {

class MockGenerator final : public judge::Backend {
 public:
  MockGenerator(std::uint64_t seed, double noise_rate, std::map<std::string, std::string> answers)
      : seed_(seed), noise_rate_(noise_rate), answers_(std::move(answers)) {
    require(noise_rate_ >= 0.0 && noise_rate_ <= 1.0, Errc::kInvalidArgument, "noise_rate must lie in [0, 1]");
  }

  std::string submit(const judge::JudgeRequest& request) override {
    request.validate();
    auto it = answers_.find(request.key);
    if (it == answers_.end()) fail(Errc::kBackendRejected, "mock generator has no answer for key '" + request.key + "'");
    Rng rng(StableHasher(seed_).add(request.seed.value_or(0)).add(request.prompt).finish());
    const auto& vocab = distractor_vocabulary();
    std::string out;
    std::string_view answer = it->second;
    std::size_t pos = 0;
    while (pos < answer.size()) {
      while (pos < answer.size() && detail::is_space(answer[pos])) ++pos;
      if (pos >= answer.size()) break;
      std::size_t end = pos;
      while (end < answer.size() && !detail::is_space(answer[end])) ++end;
      // Two draws per token regardless of outcome keep streams aligned across noise rates.
      const double u = rng.uniform01();
      const auto pick = rng.uniform_index(vocab.size());
      if (!out.empty()) out += ' ';
      if (u < noise_rate_) {
        out += vocab[pick];
      } else {
        out += answer.substr(pos, end - pos);
      }
      pos = end;
    }
    return out;
  }

  std::string id() const override { return "mock-generator"; }

 private:
  std::uint64_t seed_;
  double noise_rate_;
  std::map<std::string, std::string> answers_;
};

}  // namespace

judge::BackendPtr mock_generator(std::uint64_t seed, double noise_rate,
                                 std::map<std::string, std::string> answers_by_key) {
  return std::make_shared<MockGenerator>(seed, noise_rate, std::move(answers_by_key));
}

}  // namespace capdpo::sampler
