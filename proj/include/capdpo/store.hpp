#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "capdpo/analytics.hpp"
#include "capdpo/judge.hpp"
#include "capdpo/pref_builder.hpp"
#include "capdpo/qa_gen.hpp"
#include "capdpo/sampler.hpp"

namespace capdpo::store {

using Record = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;

enum class FieldType { kString, kNonEmptyString, kInt, kNumber, kStringArray, kNullableInt };

struct Field {
  std::string name;
  FieldType type;
};

struct Schema {
  std::string id;
  std::vector<Field> fields;  // declaration order; `_v` is implicit and first
};

// captions, qa, rejects, candidates, judgments, pairs, paired_judgments, audit
const Schema& schema(std::string_view id);
std::vector<std::string> schema_ids();

// Throws SchemaViolation (detail = field) when `record` does not match.
void validate(const Record& record, const Schema& schema, std::size_t line);

// One JSON object per line in schema key order, LF endings, trailing newline.
std::size_t write_records(const std::filesystem::path& path, const std::vector<Record>& records,
                          std::string_view schema_id);
std::vector<Record> read_records(const std::filesystem::path& path, std::string_view schema_id);

// Typed views of the stage records.
struct JudgmentRecord {
  std::string video_id;
  int pair_index = 0;
  int sample_index = 0;
  judge::Judgment judgment;

  bool operator==(const JudgmentRecord&) const = default;
};

struct RejectRecord {
  std::string video_id;
  std::string error;

  bool operator==(const RejectRecord&) const = default;
};

template <typename T>
struct Codec;

#define CAPDPO_DECLARE_CODEC(Type, SchemaId)        \
  template <>                                       \
  struct Codec<Type> {                              \
    static constexpr std::string_view kSchema = SchemaId; \
    static Record encode(const Type& value);        \
    static Type decode(const Record& record);       \
  };

CAPDPO_DECLARE_CODEC(qa_gen::CaptionRecord, "captions")
CAPDPO_DECLARE_CODEC(qa_gen::QAPair, "qa")
CAPDPO_DECLARE_CODEC(RejectRecord, "rejects")
CAPDPO_DECLARE_CODEC(sampler::CandidateResponse, "candidates")
CAPDPO_DECLARE_CODEC(JudgmentRecord, "judgments")
CAPDPO_DECLARE_CODEC(pref_builder::PreferencePair, "pairs")
CAPDPO_DECLARE_CODEC(analytics::PairedJudgment, "paired_judgments")
CAPDPO_DECLARE_CODEC(judge::AuditEntry, "audit")

#undef CAPDPO_DECLARE_CODEC

template <typename T>
std::size_t write(const std::filesystem::path& path, const std::vector<T>& values) {
  std::vector<Record> records;
  records.reserve(values.size());
  for (const auto& v : values) records.push_back(Codec<T>::encode(v));
  return write_records(path, records, Codec<T>::kSchema);
}

template <typename T>
std::vector<T> read(const std::filesystem::path& path) {
  std::vector<T> out;
  for (const auto& r : read_records(path, Codec<T>::kSchema)) out.push_back(Codec<T>::decode(r));
  return out;
}

// Pretty-printed JSON document with a trailing newline.
void write_json(const std::filesystem::path& path, const Record& doc);
Record read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

struct StageOutput {
  // Relative to the manifest's directory.
  std::string path;
  std::size_t records = 0;
  std::string digest;

  bool operator==(const StageOutput&) const = default;
};

struct RunManifest {
  std::string run_id;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string tool_version;
  std::map<std::string, StageOutput> stage_outputs;

  bool operator==(const RunManifest&) const = default;
};

// Loads `<dir>/manifest.json`, or returns an empty manifest if absent.
RunManifest load_manifest(const std::filesystem::path& dir);
void save_manifest(const std::filesystem::path& dir, const RunManifest& manifest);

// Records (or replaces) the entry for `key`, hashing the file now.
void record_output(RunManifest& manifest, const std::filesystem::path& dir, const std::string& key,
                   const std::filesystem::path& file, std::size_t records);

// Keys whose file is missing or whose digest no longer matches.
std::vector<std::string> verify_manifest(const RunManifest& manifest, const std::filesystem::path& dir);

// When `file` is listed in the manifest, throws DigestMismatch if its
// content changed since it was recorded.
void check_input(const RunManifest& manifest, const std::filesystem::path& dir, const std::filesystem::path& file);

// Exclusive ownership of an output directory via `<dir>/.lock`.
class DirLock {
 public:
  explicit DirLock(const std::filesystem::path& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace capdpo::store
