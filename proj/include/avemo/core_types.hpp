#pragma once

// Dialogue data model and the JSON-lines manifest that carries it.
//
// Manifest layout: the first line is a header object
//   {"avemo_manifest": 1, "split": "train" | "valid" | "test"}
// and every following non-empty line is one record:
//   {"kind": "dialogue", "id": ..., "tasks": [...], "turns": [utterance, ...]}
//   {"kind": "utterance", "id": ..., "tasks": [...], "utterance": utterance}
// Media paths inside utterances are relative to the manifest's directory.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "avemo/error.hpp"

namespace avemo {

using json = nlohmann::json;

class EmotionVocabulary {
 public:
  EmotionVocabulary(std::vector<std::string> labels, std::string default_label)
      : labels_(std::move(labels)), default_label_(std::move(default_label)) {
    if (labels_.empty()) fail(ErrorCode::kInvariantViolation, "emotion vocabulary is empty");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i].empty()) fail(ErrorCode::kInvariantViolation, "empty emotion label");
      for (char c : labels_[i]) {
        if (c >= 'A' && c <= 'Z') fail(ErrorCode::kInvariantViolation, "emotion labels must be lowercase");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (labels_[i] == labels_[j]) fail(ErrorCode::kInvariantViolation, "duplicate emotion label " + labels_[i]);
      }
    }
    if (!contains(default_label_)) fail(ErrorCode::kInvariantViolation, "default label not in vocabulary");
  }

  /// happy, sad, surprised, fearful, disgusted, angry, neutral (fallback).
  static EmotionVocabulary standard() {
    return {{"happy", "sad", "surprised", "fearful", "disgusted", "angry", "neutral"}, "neutral"};
  }

  const std::vector<std::string>& labels() const { return labels_; }
  const std::string& default_label() const { return default_label_; }
  std::size_t size() const { return labels_.size(); }
  bool contains(std::string_view s) const { return std::find(labels_.begin(), labels_.end(), s) != labels_.end(); }
  std::optional<std::size_t> index_of(std::string_view s) const {
    auto it = std::find(labels_.begin(), labels_.end(), s);
    if (it == labels_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - labels_.begin());
  }

  bool operator==(const EmotionVocabulary&) const = default;

 private:
  std::vector<std::string> labels_;
  std::string default_label_;
};

enum class Intensity { kLow, kMedium, kHigh, kUnspecified };

inline std::string_view to_string(Intensity i) {
  switch (i) {
    case Intensity::kLow: return "low";
    case Intensity::kMedium: return "medium";
    case Intensity::kHigh: return "high";
    case Intensity::kUnspecified: return "unspecified";
  }
  return "unspecified";
}

inline std::optional<Intensity> parse_intensity(std::string_view s) {
  if (s == "low") return Intensity::kLow;
  if (s == "medium") return Intensity::kMedium;
  if (s == "high") return Intensity::kHigh;
  if (s == "unspecified") return Intensity::kUnspecified;
  return std::nullopt;
}

struct SpeakerMetadata {
  std::optional<std::string> emotion;
  std::optional<Intensity> emotion_intensity;
  std::optional<std::string> emotion_description;
  std::optional<std::string> gender;
  std::optional<int> age;
  std::optional<std::string> ethnicity;

  bool empty() const {
    return !emotion && !emotion_intensity && !emotion_description && !gender && !age && !ethnicity;
  }
  bool operator==(const SpeakerMetadata&) const = default;
};

enum class Speaker { kUser, kAi };

struct UtteranceRecord {
  Speaker speaker = Speaker::kUser;
  std::string transcript;
  std::string emotion;
  std::optional<std::string> audio_ref;
  std::optional<std::string> video_ref;
  SpeakerMetadata metadata;
  std::optional<std::string> facial_description;

  bool operator==(const UtteranceRecord&) const = default;
};

struct Dialogue {
  std::string dialogue_id;
  std::vector<UtteranceRecord> turns;

  std::size_t rounds() const { return turns.size() / 2; }
  bool operator==(const Dialogue&) const = default;
};

enum class Task { kAsr, kSer, kEmr, kEmd, kDialogue };
enum class Split { kTrain, kValid, kTest };

inline std::string_view to_string(Task t) {
  switch (t) {
    case Task::kAsr: return "asr";
    case Task::kSer: return "ser";
    case Task::kEmr: return "emr";
    case Task::kEmd: return "emd";
    case Task::kDialogue: return "dialogue";
  }
  return "";
}
inline std::optional<Task> parse_task(std::string_view s) {
  for (Task t : {Task::kAsr, Task::kSer, Task::kEmr, Task::kEmd, Task::kDialogue}) {
    if (to_string(t) == s) return t;
  }
  return std::nullopt;
}
inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "";
}
inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  return std::nullopt;
}

struct ManifestRecord {
  std::string id;
  std::vector<Task> tasks;
  std::variant<Dialogue, UtteranceRecord> content;

  bool has_task(Task t) const { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); }
  const Dialogue* dialogue() const { return std::get_if<Dialogue>(&content); }
  const UtteranceRecord* utterance() const { return std::get_if<UtteranceRecord>(&content); }
  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  Split split = Split::kTrain;
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;  // media paths resolve against this

  std::filesystem::path resolve(const std::string& ref) const {
    std::filesystem::path p(ref);
    return p.is_absolute() ? p : base_dir / p;
  }
  bool operator==(const DatasetManifest& o) const { return split == o.split && records == o.records; }
};

// One round of a dialogue: the turns before it, the user turn, the AI reply.
struct RoundView {
  std::span<const UtteranceRecord> history;
  const UtteranceRecord* user;
  const UtteranceRecord* ai;
};

/// R rounds; round r (0-based) sees a history of 2r turns.
inline std::vector<RoundView> split_rounds(const Dialogue& d) {
  std::vector<RoundView> out;
  std::span<const UtteranceRecord> turns(d.turns);
  for (std::size_t r = 0; 2 * r + 1 < turns.size(); ++r) {
    out.push_back({turns.first(2 * r), &turns[2 * r], &turns[2 * r + 1]});
  }
  return out;
}

enum class ValidationMode { kStrict, kLenient };

// ---------------------------------------------------------------------------
// JSON mapping

inline json to_json(const SpeakerMetadata& m) {
  json j = json::object();
  if (m.emotion) j["emotion"] = *m.emotion;
  if (m.emotion_intensity) j["emotion_intensity"] = std::string(to_string(*m.emotion_intensity));
  if (m.emotion_description) j["emotion_description"] = *m.emotion_description;
  if (m.gender) j["gender"] = *m.gender;
  if (m.age) j["age"] = *m.age;
  if (m.ethnicity) j["ethnicity"] = *m.ethnicity;
  return j;
}

inline json to_json(const UtteranceRecord& u) {
  json j;
  j["speaker"] = u.speaker == Speaker::kUser ? "user" : "ai";
  j["transcript"] = u.transcript;
  j["emotion"] = u.emotion;
  if (u.audio_ref) j["audio"] = *u.audio_ref;
  if (u.video_ref) j["video"] = *u.video_ref;
  if (!u.metadata.empty()) j["metadata"] = to_json(u.metadata);
  if (u.facial_description) j["facial_description"] = *u.facial_description;
  return j;
}

inline json to_json(const ManifestRecord& r) {
  json j;
  j["id"] = r.id;
  json tasks = json::array();
  for (Task t : r.tasks) tasks.push_back(std::string(to_string(t)));
  j["tasks"] = tasks;
  if (const auto* d = r.dialogue()) {
    j["kind"] = "dialogue";
    json turns = json::array();
    for (const auto& u : d->turns) turns.push_back(to_json(u));
    j["turns"] = turns;
  } else {
    j["kind"] = "utterance";
    j["utterance"] = to_json(*r.utterance());
  }
  return j;
}

/// Serialized manifest text (header line + one record per line).
inline std::string serialize_manifest(const DatasetManifest& m) {
  std::string out = json{{"avemo_manifest", 1}, {"split", std::string(to_string(m.split))}}.dump() + "\n";
  for (const auto& r : m.records) out += to_json(r).dump() + "\n";
  return out;
}

namespace detail {

struct RecordContext {
  std::size_t index;
  std::string where;
};

[[noreturn]] inline void malformed(const RecordContext& ctx, const std::string& what) {
  fail(ErrorCode::kMalformedManifest, "record " + std::to_string(ctx.index) + " (" + ctx.where + "): " + what);
}
[[noreturn]] inline void violation(const RecordContext& ctx, const std::string& field, const std::string& what) {
  fail(ErrorCode::kInvariantViolation,
       "record " + std::to_string(ctx.index) + " field '" + field + "' (" + ctx.where + "): " + what);
}

inline std::optional<std::string> opt_string(const json& j, const char* key, const RecordContext& ctx) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_string()) malformed(ctx, std::string(key) + " must be a string");
  return j[key].get<std::string>();
}

inline SpeakerMetadata metadata_from_json(const json& j, const RecordContext& ctx) {
  if (!j.is_object()) malformed(ctx, "metadata must be an object");
  SpeakerMetadata m;
  m.emotion = opt_string(j, "emotion", ctx);
  if (auto s = opt_string(j, "emotion_intensity", ctx)) {
    m.emotion_intensity = parse_intensity(*s);
    if (!m.emotion_intensity) violation(ctx, "metadata.emotion_intensity", "unknown intensity '" + *s + "'");
  }
  m.emotion_description = opt_string(j, "emotion_description", ctx);
  m.gender = opt_string(j, "gender", ctx);
  if (j.contains("age") && !j["age"].is_null()) {
    if (!j["age"].is_number_integer()) malformed(ctx, "age must be an integer");
    m.age = j["age"].get<int>();
  }
  m.ethnicity = opt_string(j, "ethnicity", ctx);
  return m;
}

inline UtteranceRecord utterance_from_json(const json& j, const RecordContext& ctx) {
  if (!j.is_object()) malformed(ctx, "utterance must be an object");
  UtteranceRecord u;
  const auto speaker = opt_string(j, "speaker", ctx);
  if (!speaker) violation(ctx, "speaker", "missing");
  if (*speaker == "user") {
    u.speaker = Speaker::kUser;
  } else if (*speaker == "ai") {
    u.speaker = Speaker::kAi;
  } else {
    violation(ctx, "speaker", "must be 'user' or 'ai'");
  }
  u.transcript = opt_string(j, "transcript", ctx).value_or("");
  const auto emo = opt_string(j, "emotion", ctx);
  if (!emo) violation(ctx, "emotion", "missing");
  u.emotion = *emo;
  u.audio_ref = opt_string(j, "audio", ctx);
  u.video_ref = opt_string(j, "video", ctx);
  if (j.contains("metadata")) u.metadata = metadata_from_json(j["metadata"], ctx);
  u.facial_description = opt_string(j, "facial_description", ctx);
  return u;
}

}  // namespace detail

/// Parses manifest text without touching the filesystem or checking
/// invariants beyond syntax. `base_dir` anchors relative media paths.
inline DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& base_dir) {
  DatasetManifest m;
  m.base_dir = base_dir;
  std::istringstream in(text);
  std::string line;
  bool header = false;
  std::size_t index = 0;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(ErrorCode::kMalformedManifest, "line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!header) {
      if (!j.is_object() || !j.contains("avemo_manifest"))
        fail(ErrorCode::kMalformedManifest, "line 1 must be the manifest header");
      if (j["avemo_manifest"] != 1) fail(ErrorCode::kMalformedManifest, "unsupported manifest version");
      const auto split = j.contains("split") && j["split"].is_string() ? parse_split(j["split"].get<std::string>())
                                                                        : std::nullopt;
      if (!split) fail(ErrorCode::kMalformedManifest, "header split must be train, valid or test");
      m.split = *split;
      header = true;
      continue;
    }
    detail::RecordContext ctx{index, "line " + std::to_string(line_no)};
    if (!j.is_object()) detail::malformed(ctx, "record must be an object");
    ManifestRecord r;
    r.id = detail::opt_string(j, "id", ctx).value_or("");
    if (r.id.empty()) detail::violation(ctx, "id", "missing");
    if (!j.contains("tasks") || !j["tasks"].is_array()) detail::malformed(ctx, "tasks must be an array");
    for (const auto& t : j["tasks"]) {
      if (!t.is_string()) detail::malformed(ctx, "task tags must be strings");
      auto task = parse_task(t.get<std::string>());
      if (!task) detail::violation(ctx, "tasks", "unknown task '" + t.get<std::string>() + "'");
      r.tasks.push_back(*task);
    }
    const auto kind = detail::opt_string(j, "kind", ctx).value_or("");
    if (kind == "dialogue") {
      Dialogue d;
      d.dialogue_id = r.id;
      if (!j.contains("turns") || !j["turns"].is_array()) detail::malformed(ctx, "turns must be an array");
      for (const auto& t : j["turns"]) d.turns.push_back(detail::utterance_from_json(t, ctx));
      r.content = std::move(d);
    } else if (kind == "utterance") {
      if (!j.contains("utterance")) detail::malformed(ctx, "missing utterance");
      r.content = detail::utterance_from_json(j["utterance"], ctx);
    } else {
      detail::violation(ctx, "kind", "must be 'dialogue' or 'utterance'");
    }
    m.records.push_back(std::move(r));
    ++index;
  }
  if (!header) fail(ErrorCode::kMalformedManifest, "empty manifest");
  return m;
}

namespace detail {

inline void check_emotion(std::string& label, const EmotionVocabulary& vocab, ValidationMode mode,
                          const RecordContext& ctx, const std::string& field) {
  if (vocab.contains(label)) return;
  if (mode == ValidationMode::kStrict) violation(ctx, field, "unknown emotion '" + label + "'");
  spdlog::warn("record {} field '{}': unknown emotion '{}' mapped to '{}'", ctx.index, field, label,
               vocab.default_label());
  label = vocab.default_label();
}

inline void check_utterance(UtteranceRecord& u, const EmotionVocabulary& vocab, ValidationMode mode,
                            const RecordContext& ctx, const std::string& prefix) {
  check_emotion(u.emotion, vocab, mode, ctx, prefix + "emotion");
  if (u.metadata.emotion) check_emotion(*u.metadata.emotion, vocab, mode, ctx, prefix + "metadata.emotion");
  if (u.speaker == Speaker::kAi && (u.audio_ref || u.video_ref))
    violation(ctx, prefix + "audio", "ai utterances carry no media");
  for (const auto* s : {&u.metadata.gender, &u.metadata.ethnicity, &u.metadata.emotion_description}) {
    if (*s && (*s)->empty()) violation(ctx, prefix + "metadata", "present fields must be non-empty");
  }
  if (u.metadata.age && *u.metadata.age < 0) violation(ctx, prefix + "metadata.age", "negative age");
}

}  // namespace detail

/// Checks every manifest invariant in place; unknown emotions are fatal in
/// strict mode and mapped to the fallback label in lenient mode.
inline void validate_records(DatasetManifest& m, const EmotionVocabulary& vocab, ValidationMode mode,
                             bool check_media = true) {
  namespace fs = std::filesystem;
  std::vector<std::string> missing;
  auto need_media = [&](const std::optional<std::string>& ref) {
    if (check_media && ref && !fs::exists(m.resolve(*ref))) missing.push_back(m.resolve(*ref).string());
  };
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    auto& r = m.records[i];
    detail::RecordContext ctx{i, r.id};
    auto check_task_media = [&](const UtteranceRecord& u, const std::string& prefix) {
      if ((r.has_task(Task::kAsr) || r.has_task(Task::kSer)) && !u.audio_ref)
        detail::violation(ctx, prefix + "audio", "asr/ser records need audio");
      if ((r.has_task(Task::kEmr) || r.has_task(Task::kEmd)) && !u.video_ref)
        detail::violation(ctx, prefix + "video", "emr/emd records need video");
      if (r.has_task(Task::kEmd) && !u.facial_description)
        detail::violation(ctx, prefix + "facial_description", "emd records need a facial description");
    };
    if (auto* d = std::get_if<Dialogue>(&r.content)) {
      if (d->turns.empty() || d->turns.size() % 2 != 0)
        detail::violation(ctx, "turns", "dialogue needs an even, non-zero number of turns");
      for (std::size_t t = 0; t < d->turns.size(); ++t) {
        auto& u = d->turns[t];
        const std::string prefix = "turns[" + std::to_string(t) + "].";
        const Speaker expected = t % 2 == 0 ? Speaker::kUser : Speaker::kAi;
        if (u.speaker != expected)
          detail::violation(ctx, prefix + "speaker", t == 0 ? "first turn must be user" : "turns must alternate");
        detail::check_utterance(u, vocab, mode, ctx, prefix);
        if (u.speaker == Speaker::kUser) {
          if (r.has_task(Task::kDialogue) && !u.audio_ref)
            detail::violation(ctx, prefix + "audio", "dialogue user turns need audio");
          check_task_media(u, prefix);
          need_media(u.audio_ref);
          need_media(u.video_ref);
        } else if (u.transcript.empty()) {
          detail::violation(ctx, prefix + "transcript", "ai turns need a response text");
        }
      }
    } else {
      auto& u = std::get<UtteranceRecord>(r.content);
      if (r.has_task(Task::kDialogue)) detail::violation(ctx, "tasks", "standalone utterances cannot be dialogue");
      detail::check_utterance(u, vocab, mode, ctx, "utterance.");
      check_task_media(u, "utterance.");
      if (r.has_task(Task::kAsr) && u.transcript.empty())
        detail::violation(ctx, "utterance.transcript", "asr records need a transcript");
      need_media(u.audio_ref);
      need_media(u.video_ref);
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& p : missing) list += (list.empty() ? "" : ", ") + p;
    fail(ErrorCode::kMissingMedia, list);
  }
}

/// Loads and fully validates a manifest file, including media existence.
inline DatasetManifest validate_manifest(const std::filesystem::path& path, const EmotionVocabulary& vocab,
                                         ValidationMode mode = ValidationMode::kStrict) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kMalformedManifest, "cannot open manifest " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), {});
  auto m = parse_manifest(text, path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
  validate_records(m, vocab, mode);
  return m;
}

}  // namespace avemo
