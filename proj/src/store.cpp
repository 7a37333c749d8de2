#include "capdpo/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fstream>
#include <set>
#include <sstream>

#include "capdpo/digest.hpp"
#include "capdpo/error.hpp"

namespace capdpo::store {

namespace fs = std::filesystem;

namespace {

const std::vector<Schema>& all_schemas() {
  using enum FieldType;
  static const std::vector<Schema> kSchemas = {
      {"captions", {{"video_id", kNonEmptyString}, {"source", kString}, {"caption", kNonEmptyString},
                    {"frame_refs", kStringArray}}},
      {"qa", {{"video_id", kNonEmptyString}, {"pair_index", kInt}, {"question", kNonEmptyString},
              {"answer", kNonEmptyString}}},
      {"rejects", {{"video_id", kString}, {"error", kString}}},
      {"candidates", {{"video_id", kNonEmptyString}, {"pair_index", kInt}, {"sample_index", kInt},
                      {"text", kString}}},
      {"judgments", {{"video_id", kNonEmptyString}, {"pair_index", kInt}, {"sample_index", kInt},
                     {"judge_id", kString}, {"scale_min", kInt}, {"scale_max", kInt}, {"score", kInt},
                     {"explanation", kString}, {"raw", kString}}},
      {"pairs", {{"video_id", kNonEmptyString}, {"question", kString}, {"chosen", kString}, {"rejected", kString},
                 {"chosen_score", kInt}, {"rejected_score", kInt}}},
      {"paired_judgments", {{"example_id", kNonEmptyString}, {"group_id", kNonEmptyString}, {"answer_index", kInt},
                            {"judge_a_score", kInt}, {"judge_b_score", kInt}}},
      {"audit", {{"request_id", kString}, {"template_id", kString}, {"prompt_hash", kString}, {"raw", kString},
                 {"score", kNullableInt}}},
  };
  return kSchemas;
}

[[noreturn]] void violation(std::size_t line, const std::string& field, const std::string& what) {
  throw Error(Errc::kSchemaViolation, "line " + std::to_string(line) + ", field '" + field + "': " + what)
      .with_detail(field)
      .with_line(line);
}

bool type_matches(const Record& v, FieldType type) {
  switch (type) {
    case FieldType::kString: return v.is_string();
    case FieldType::kNonEmptyString: return v.is_string() && !v.get_ref<const std::string&>().empty();
    case FieldType::kInt: return v.is_number_integer();
    case FieldType::kNumber: return v.is_number();
    case FieldType::kNullableInt: return v.is_null() || v.is_number_integer();
    case FieldType::kStringArray:
      if (!v.is_array()) return false;
      for (const auto& e : v) {
        if (!e.is_string()) return false;
      }
      return true;
  }
  return false;
}

const char* type_name(FieldType type) {
  switch (type) {
    case FieldType::kString: return "string";
    case FieldType::kNonEmptyString: return "non-empty string";
    case FieldType::kInt: return "integer";
    case FieldType::kNumber: return "number";
    case FieldType::kNullableInt: return "integer or null";
    case FieldType::kStringArray: return "array of strings";
  }
  return "?";
}

Record normalized(const Record& record, const Schema& s) {
  Record out;
  out["_v"] = kSchemaVersion;
  for (const auto& f : s.fields) out[f.name] = record.at(f.name);
  return out;
}

}  // namespace

const Schema& schema(std::string_view id) {
  for (const auto& s : all_schemas()) {
    if (s.id == id) return s;
  }
  fail(Errc::kInvalidArgument, "unknown schema '" + std::string(id) + "'");
}

std::vector<std::string> schema_ids() {
  std::vector<std::string> out;
  for (const auto& s : all_schemas()) out.push_back(s.id);
  return out;
}

void validate(const Record& record, const Schema& s, std::size_t line) {
  if (!record.is_object()) violation(line, "", "record is not a JSON object");
  auto v = record.find("_v");
  if (v == record.end()) violation(line, "_v", "missing schema version");
  if (!v->is_number_integer() || v->get<long long>() != kSchemaVersion) {
    violation(line, "_v", "unsupported schema version");
  }
  std::set<std::string> known{"_v"};
  for (const auto& f : s.fields) {
    known.insert(f.name);
    auto it = record.find(f.name);
    if (it == record.end()) violation(line, f.name, "missing required field");
    if (!type_matches(*it, f.type)) violation(line, f.name, std::string("expected ") + type_name(f.type));
  }
  for (const auto& [key, value] : record.items()) {
    if (!known.count(key)) violation(line, key, "unknown field for schema " + s.id);
  }
}

std::size_t write_records(const fs::path& path, const std::vector<Record>& records, std::string_view schema_id) {
  const auto& s = schema(schema_id);
  std::string out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    validate(records[i], s, i + 1);
    out += normalized(records[i], s).dump();
    out += '\n';
  }
  write_text(path, out);
  return records.size();
}

std::vector<Record> read_records(const fs::path& path, std::string_view schema_id) {
  const auto& s = schema(schema_id);
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kIo, "cannot open " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      throw Error(Errc::kMalformedLine, path.string() + ": line " + std::to_string(lineno) + " is blank")
          .with_line(lineno);
    }
    Record rec;
    try {
      rec = Record::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(Errc::kMalformedLine, path.string() + ": line " + std::to_string(lineno) + ": " + e.what())
          .with_line(lineno);
    }
    validate(rec, s, lineno);
    out.push_back(std::move(rec));
  }
  return out;
}

void write_text(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::kIo, "cannot write " + path.string());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) fail(Errc::kIo, "failed writing " + path.string());
}

void write_json(const fs::path& path, const Record& doc) { write_text(path, doc.dump(2) + "\n"); }

Record read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::kIo, "cannot open " + path.string());
  try {
    return Record::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(Errc::kMalformedLine, path.string() + ": " + e.what());
  }
}

// ---- codecs ----

Record Codec<qa_gen::CaptionRecord>::encode(const qa_gen::CaptionRecord& v) {
  return {{"_v", kSchemaVersion}, {"video_id", v.video_id}, {"source", v.source}, {"caption", v.caption},
          {"frame_refs", v.frame_refs}};
}
qa_gen::CaptionRecord Codec<qa_gen::CaptionRecord>::decode(const Record& r) {
  return {r.at("video_id").get<std::string>(), r.at("source").get<std::string>(), r.at("caption").get<std::string>(),
          r.at("frame_refs").get<std::vector<std::string>>()};
}

Record Codec<qa_gen::QAPair>::encode(const qa_gen::QAPair& v) {
  return {{"_v", kSchemaVersion}, {"video_id", v.video_id}, {"pair_index", v.pair_index}, {"question", v.question},
          {"answer", v.answer}};
}
qa_gen::QAPair Codec<qa_gen::QAPair>::decode(const Record& r) {
  return {r.at("video_id").get<std::string>(), r.at("pair_index").get<int>(), r.at("question").get<std::string>(),
          r.at("answer").get<std::string>()};
}

Record Codec<RejectRecord>::encode(const RejectRecord& v) {
  return {{"_v", kSchemaVersion}, {"video_id", v.video_id}, {"error", v.error}};
}
RejectRecord Codec<RejectRecord>::decode(const Record& r) {
  return {r.at("video_id").get<std::string>(), r.at("error").get<std::string>()};
}

Record Codec<sampler::CandidateResponse>::encode(const sampler::CandidateResponse& v) {
  return {{"_v", kSchemaVersion}, {"video_id", v.video_id}, {"pair_index", v.pair_index},
          {"sample_index", v.sample_index}, {"text", v.text}};
}
sampler::CandidateResponse Codec<sampler::CandidateResponse>::decode(const Record& r) {
  return {r.at("video_id").get<std::string>(), r.at("pair_index").get<int>(), r.at("sample_index").get<int>(),
          r.at("text").get<std::string>()};
}

Record Codec<JudgmentRecord>::encode(const JudgmentRecord& v) {
  return {{"_v", kSchemaVersion},
          {"video_id", v.video_id},
          {"pair_index", v.pair_index},
          {"sample_index", v.sample_index},
          {"judge_id", v.judgment.judge_id},
          {"scale_min", v.judgment.rubric.scale_min},
          {"scale_max", v.judgment.rubric.scale_max},
          {"score", v.judgment.score},
          {"explanation", v.judgment.explanation},
          {"raw", v.judgment.raw}};
}
JudgmentRecord Codec<JudgmentRecord>::decode(const Record& r) {
  JudgmentRecord out;
  out.video_id = r.at("video_id").get<std::string>();
  out.pair_index = r.at("pair_index").get<int>();
  out.sample_index = r.at("sample_index").get<int>();
  out.judgment.judge_id = r.at("judge_id").get<std::string>();
  out.judgment.rubric.scale_min = r.at("scale_min").get<int>();
  out.judgment.rubric.scale_max = r.at("scale_max").get<int>();
  if (out.judgment.rubric == judge::JudgeRubric{1, 5, std::nullopt}) out.judgment.rubric = judge::JudgeRubric::qa();
  out.judgment.score = r.at("score").get<int>();
  out.judgment.explanation = r.at("explanation").get<std::string>();
  out.judgment.raw = r.at("raw").get<std::string>();
  return out;
}

Record Codec<pref_builder::PreferencePair>::encode(const pref_builder::PreferencePair& v) {
  return {{"_v", kSchemaVersion},      {"video_id", v.video_id},         {"question", v.question},
          {"chosen", v.chosen},        {"rejected", v.rejected},         {"chosen_score", v.chosen_score},
          {"rejected_score", v.rejected_score}};
}
pref_builder::PreferencePair Codec<pref_builder::PreferencePair>::decode(const Record& r) {
  return {r.at("video_id").get<std::string>(), r.at("question").get<std::string>(),
          r.at("chosen").get<std::string>(),   r.at("rejected").get<std::string>(),
          r.at("chosen_score").get<int>(),     r.at("rejected_score").get<int>()};
}

Record Codec<analytics::PairedJudgment>::encode(const analytics::PairedJudgment& v) {
  return {{"_v", kSchemaVersion},          {"example_id", v.example_id},       {"group_id", v.group_id},
          {"answer_index", v.answer_index}, {"judge_a_score", v.judge_a_score}, {"judge_b_score", v.judge_b_score}};
}
analytics::PairedJudgment Codec<analytics::PairedJudgment>::decode(const Record& r) {
  return {r.at("example_id").get<std::string>(), r.at("group_id").get<std::string>(), r.at("answer_index").get<int>(),
          r.at("judge_a_score").get<int>(), r.at("judge_b_score").get<int>()};
}

Record Codec<judge::AuditEntry>::encode(const judge::AuditEntry& v) {
  Record r{{"_v", kSchemaVersion},
           {"request_id", v.request_id},
           {"template_id", v.template_id},
           {"prompt_hash", v.prompt_hash},
           {"raw", v.raw}};
  r["score"] = v.score ? Record(*v.score) : Record(nullptr);
  return r;
}
judge::AuditEntry Codec<judge::AuditEntry>::decode(const Record& r) {
  judge::AuditEntry e{r.at("request_id").get<std::string>(), r.at("template_id").get<std::string>(),
                      r.at("prompt_hash").get<std::string>(), r.at("raw").get<std::string>(), std::nullopt};
  if (!r.at("score").is_null()) e.score = r.at("score").get<int>();
  return e;
}

// ---- manifest ----

RunManifest load_manifest(const fs::path& dir) {
  RunManifest m;
  const auto path = dir / "manifest.json";
  if (!fs::exists(path)) return m;
  const auto doc = read_json(path);
  try {
    m.run_id = doc.at("run_id").get<std::string>();
    m.seed = doc.at("seed").get<std::uint64_t>();
    m.config_hash = doc.at("config_hash").get<std::string>();
    m.tool_version = doc.at("tool_version").get<std::string>();
    for (const auto& [key, entry] : doc.at("stage_outputs").items()) {
      m.stage_outputs[key] = {entry.at("path").get<std::string>(), entry.at("records").get<std::size_t>(),
                              entry.at("digest").get<std::string>()};
    }
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::kSchemaViolation, path.string() + ": " + e.what());
  }
  return m;
}

void save_manifest(const fs::path& dir, const RunManifest& m) {
  Record doc;
  doc["run_id"] = m.run_id;
  doc["seed"] = m.seed;
  doc["config_hash"] = m.config_hash;
  doc["tool_version"] = m.tool_version;
  Record outputs = Record::object();
  for (const auto& [key, entry] : m.stage_outputs) {
    outputs[key] = {{"path", entry.path}, {"records", entry.records}, {"digest", entry.digest}};
  }
  doc["stage_outputs"] = outputs;
  write_json(dir / "manifest.json", doc);
}

namespace {
std::string relative_to(const fs::path& file, const fs::path& dir) {
  const auto rel = fs::weakly_canonical(file).lexically_relative(fs::weakly_canonical(dir));
  return rel.empty() ? file.generic_string() : rel.generic_string();
}
}  // namespace

void record_output(RunManifest& m, const fs::path& dir, const std::string& key, const fs::path& file,
                   std::size_t records) {
  m.stage_outputs[key] = {relative_to(file, dir), records, sha256_file(file)};
}

std::vector<std::string> verify_manifest(const RunManifest& m, const fs::path& dir) {
  std::vector<std::string> bad;
  for (const auto& [key, entry] : m.stage_outputs) {
    const auto path = dir / entry.path;
    if (!fs::exists(path) || sha256_file(path) != entry.digest) bad.push_back(key);
  }
  return bad;
}

void check_input(const RunManifest& m, const fs::path& dir, const fs::path& file) {
  const auto rel = relative_to(file, dir);
  for (const auto& [key, entry] : m.stage_outputs) {
    if (entry.path != rel) continue;
    if (sha256_file(file) != entry.digest) {
      throw Error(Errc::kDigestMismatch, file.string() + " changed since stage '" + key + "' wrote it")
          .with_detail(key);
    }
  }
}

DirLock::DirLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) fail(Errc::kLocked, "output directory is locked: " + path_.string());
  ::close(fd);
}

DirLock::~DirLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

}  // namespace capdpo::store
