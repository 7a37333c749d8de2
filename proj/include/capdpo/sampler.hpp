#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "capdpo/judge.hpp"
#include "capdpo/qa_gen.hpp"

namespace capdpo::sampler {

struct SamplingConfig {
  int n_candidates = 6;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct CandidateResponse {
  std::string video_id;
  int pair_index = 0;
  int sample_index = 0;
  std::string text;

  bool operator==(const CandidateResponse&) const = default;
};

// Correlation key carried on generation requests: "<video_id>#<pair_index>".
std::string candidate_key(std::string_view video_id, int pair_index);

std::uint64_t derive_sample_seed(std::uint64_t seed, std::string_view video_id, int pair_index, int sample_index);

// Exactly cfg.n_candidates responses, sample_index 0..n-1 in call order.
// Frame references are attached only when the backend accepts them.
std::vector<CandidateResponse> sample_candidates(const qa_gen::QAPair& qa, const std::vector<std::string>& frame_refs,
                                                 const SamplingConfig& cfg, judge::Backend& gen);

// Words the mock generator substitutes for answer tokens. None of them can
// appear in ordinary English text.
const std::vector<std::string>& distractor_vocabulary();

// Deterministic generation backend: replies with the ground-truth answer for
// the request key, each whitespace token independently swapped for a
// distractor with probability noise_rate, driven by the request seed.
judge::BackendPtr mock_generator(std::uint64_t seed, double noise_rate,
                                 std::map<std::string, std::string> answers_by_key);

}  // namespace capdpo::sampler
