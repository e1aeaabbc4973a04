#pragma once

// Stage prompts, speaker-metadata rendering, and the AI output grammar
//   <|emo|>LABEL<|/emo|>RESPONSE
// which is what the decoder is trained to emit (followed by <|eos|>).

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "avemo/core_types.hpp"
#include "avemo/hash.hpp"
#include "avemo/tensor.hpp"
#include "avemo/tokenizer.hpp"

namespace avemo {

/// Must stay byte-identical to assets/prompts.txt.
inline constexpr std::string_view kDefaultPromptSet =
    "# avemo prompt set\n"
    "version = 1\n"
    "[speech_understanding.asr]\n"
    "Transcribe the audio.\n"
    "[speech_understanding.asr_ser]\n"
    "Transcribe the audio and name the emotion.\n"
    "[face_video_understanding.emr]\n"
    "Name the emotion on the face.\n"
    "[face_video_understanding.emr_emd]\n"
    "Name the emotion on the face and describe it.\n"
    "[audio_visual_dialogue]\n"
    "Reply to the user with an emotion and a response.\n";

/// Versioned prompt texts keyed by section name; the hash of the source text
/// is recorded in checkpoints.
class PromptSet {
 public:
  static PromptSet parse(std::string_view text) {
    PromptSet ps;
    ps.hash_ = sha256_hex(text);
    std::istringstream in{std::string(text)};
    std::string line, section;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      if (line.front() == '[' && line.back() == ']') {
        section = line.substr(1, line.size() - 2);
        ps.texts_[section];
        continue;
      }
      if (section.empty()) {
        if (line.rfind("version", 0) == 0) {
          const auto eq = line.find('=');
          if (eq != std::string::npos) ps.version_ = std::stoi(line.substr(eq + 1));
        }
        continue;
      }
      auto& t = ps.texts_[section];
      t += (t.empty() ? "" : "\n") + line;
    }
    for (const char* key : {"speech_understanding.asr", "speech_understanding.asr_ser", "face_video_understanding.emr",
                            "face_video_understanding.emr_emd", "audio_visual_dialogue"}) {
      if (!ps.texts_.count(key)) fail(ErrorCode::kConfigError, std::string("prompt set lacks section ") + key);
    }
    return ps;
  }

  static PromptSet standard() { return parse(kDefaultPromptSet); }
  static PromptSet load(const std::filesystem::path& p) { return parse(read_file(p)); }

  const std::string& text(const std::string& key) const {
    auto it = texts_.find(key);
    if (it == texts_.end()) fail(ErrorCode::kConfigError, "unknown prompt " + key);
    return it->second;
  }
  const std::string& hash() const { return hash_; }
  int version() const { return version_; }

 private:
  std::map<std::string, std::string> texts_;
  std::string hash_;
  int version_ = 0;
};

/// Clauses for the metadata fields that are present, in a fixed order.
inline std::string render_metadata(const SpeakerMetadata& md) {
  std::vector<std::string> clauses;
  if (md.emotion) {
    std::string c = "emotion: " + *md.emotion;
    if (md.emotion_intensity) c += " (intensity: " + std::string(to_string(*md.emotion_intensity)) + ")";
    clauses.push_back(std::move(c));
  } else if (md.emotion_intensity) {
    clauses.push_back("intensity: " + std::string(to_string(*md.emotion_intensity)));
  }
  if (md.emotion_description) clauses.push_back("description: " + *md.emotion_description);
  if (md.gender) clauses.push_back("gender: " + *md.gender);
  if (md.age) clauses.push_back("age: " + std::to_string(*md.age));
  if (md.ethnicity) clauses.push_back("ethnicity: " + *md.ethnicity);
  std::string out;
  for (const auto& c : clauses) out += (out.empty() ? "" : "; ") + c;
  return out;
}

enum class PromptStage { kSpeechUnderstanding, kFaceVideoUnderstanding, kAudioVisualDialogue };
enum class Stage1Task { kAsr, kAsrSer };
enum class Stage2Task { kEmr, kEmrEmd };

enum class SegmentKind {
  kText,    // plain prompt text, never loss-bearing
  kAudio,   // audio feature span of `round`
  kVideo,   // video feature span of `round`
  kTarget,  // plain target text + eos
  kAiTurn,  // formatted AI output (markers become special tokens) + eos
};

struct PromptSegment {
  SegmentKind kind = SegmentKind::kText;
  std::string text;
  int round = 0;
  bool loss = false;

  bool operator==(const PromptSegment&) const = default;
};

/// A rendered hard prompt: the stage's instruction plus the ordered segments
/// (instruction, history, metadata, audio span, video span, target). Empty
/// optional slots are simply absent from `segments`.
struct PromptTemplate {
  PromptStage stage = PromptStage::kSpeechUnderstanding;
  std::string system_text;
  std::vector<std::string> slot_order;
  std::vector<PromptSegment> segments;

  /// Human-readable text with feature spans shown as markers.
  std::string render() const {
    std::string out;
    for (const auto& s : segments) {
      switch (s.kind) {
        case SegmentKind::kText: out += s.text; break;
        case SegmentKind::kAudio: out += "<|audio|>[audio " + std::to_string(s.round) + "]<|/audio|>"; break;
        case SegmentKind::kVideo: out += "<|video|>[video " + std::to_string(s.round) + "]<|/video|>"; break;
        case SegmentKind::kTarget:
        case SegmentKind::kAiTurn: out += s.text + "<|eos|>"; break;
      }
    }
    return out;
  }
};

/// Stage-1 target text: transcript, plus the emotion clause for asr+ser.
/// With full_metadata the whole metadata sentence is appended instead.
inline std::string stage1_target(const UtteranceRecord& rec, Stage1Task task, bool full_metadata = false) {
  if (task == Stage1Task::kAsr) return rec.transcript;
  SpeakerMetadata md;
  if (full_metadata) {
    md = rec.metadata;
  } else {
    md.emotion_intensity = rec.metadata.emotion_intensity;
  }
  md.emotion = rec.emotion;
  return rec.transcript + " | " + render_metadata(md);
}

/// Stage-2 target text: the label, plus the description for emr+emd.
inline std::string stage2_target(const UtteranceRecord& rec, Stage2Task task) {
  if (task == Stage2Task::kEmr) return rec.emotion;
  return rec.emotion + ". " + rec.facial_description.value_or("");
}

inline PromptTemplate build_stage1_prompt(const PromptSet& ps, Stage1Task task) {
  PromptTemplate t;
  t.stage = PromptStage::kSpeechUnderstanding;
  t.system_text = ps.text(task == Stage1Task::kAsr ? "speech_understanding.asr" : "speech_understanding.asr_ser");
  t.slot_order = {"system", "audio", "target"};
  t.segments = {{SegmentKind::kText, t.system_text + "\n", 0, false}, {SegmentKind::kAudio, "", 0, false},
                {SegmentKind::kText, "\n", 0, false}};
  return t;
}

inline PromptTemplate build_stage2_prompt(const PromptSet& ps, Stage2Task task) {
  PromptTemplate t;
  t.stage = PromptStage::kFaceVideoUnderstanding;
  t.system_text =
      ps.text(task == Stage2Task::kEmr ? "face_video_understanding.emr" : "face_video_understanding.emr_emd");
  t.slot_order = {"system", "video", "target"};
  t.segments = {{SegmentKind::kText, t.system_text + "\n", 0, false}, {SegmentKind::kVideo, "", 0, false},
                {SegmentKind::kText, "\n", 0, false}};
  return t;
}

/// What the dialogue prompt knows about one earlier (or the current) user turn.
struct UserTurnView {
  bool audio = true;
  bool video = true;
  std::optional<std::string> transcript;  // text-only path
  std::string metadata_text;              // rendered metadata, usually empty
};

struct AiTurnView {
  std::string formatted;  // format_ai_target output
};

/// Audio-visual dialogue prompt: instruction, then each earlier round as a
/// user span and the AI's tagged reply, then the current user span and the
/// "AI: " cue. With `history_loss` the earlier AI replies are loss-bearing
/// (training); otherwise they are context only.
inline PromptTemplate build_stage3_prompt(const PromptSet& ps, const std::vector<std::pair<UserTurnView, AiTurnView>>& history,
                                          const UserTurnView& current, bool history_loss = false) {
  PromptTemplate t;
  t.stage = PromptStage::kAudioVisualDialogue;
  t.system_text = ps.text("audio_visual_dialogue");
  t.slot_order = {"system", "history", "metadata", "audio", "video", "target"};
  t.segments.push_back({SegmentKind::kText, t.system_text + "\n", 0, false});
  auto user_span = [&](const UserTurnView& u, int round) {
    t.segments.push_back({SegmentKind::kText, "User: ", round, false});
    if (u.transcript) t.segments.push_back({SegmentKind::kText, *u.transcript, round, false});
    if (!u.metadata_text.empty()) t.segments.push_back({SegmentKind::kText, "(" + u.metadata_text + ") ", round, false});
    if (u.audio) t.segments.push_back({SegmentKind::kAudio, "", round, false});
    if (u.video) t.segments.push_back({SegmentKind::kVideo, "", round, false});
    t.segments.push_back({SegmentKind::kText, "\nAI: ", round, false});
  };
  int round = 0;
  for (const auto& [user, ai] : history) {
    user_span(user, round);
    t.segments.push_back({SegmentKind::kAiTurn, ai.formatted, round, history_loss});
    t.segments.push_back({SegmentKind::kText, "\n", round, false});
    ++round;
  }
  user_span(current, round);
  return t;
}

/// <|emo|>label<|/emo|>text
inline std::string format_ai_target(const std::string& emotion, const std::string& text,
                                    const EmotionVocabulary& vocab) {
  if (!vocab.contains(emotion)) fail(ErrorCode::kUnknownEmotion, "'" + emotion + "' is not in the vocabulary");
  if (text.empty()) fail(ErrorCode::kPrecondition, "AI response text is empty");
  return std::string(Tokenizer::marker(Tokenizer::kEmoBegin)) + emotion +
         std::string(Tokenizer::marker(Tokenizer::kEmoEnd)) + text;
}

struct ParsedAiOutput {
  std::string emotion;
  std::string text;
  bool warning = false;
};

/// Inverse of format_ai_target. Strict mode demands the exact grammar with a
/// known label; lenient mode falls back to (default label, text without
/// markers) and sets `warning`.
inline ParsedAiOutput parse_ai_output(const std::string& s, ValidationMode mode, const EmotionVocabulary& vocab) {
  const std::string open(Tokenizer::marker(Tokenizer::kEmoBegin)), close(Tokenizer::marker(Tokenizer::kEmoEnd));
  auto strip_markers = [](std::string text) {
    for (auto m : Tokenizer::kMarkers) {
      for (auto p = text.find(m); p != std::string::npos; p = text.find(m)) text.erase(p, m.size());
    }
    return text;
  };
  auto fallback = [&](const std::string& why, std::string text) -> ParsedAiOutput {
    if (mode == ValidationMode::kStrict) fail(ErrorCode::kParseError, why);
    return {vocab.default_label(), std::move(text), true};
  };
  if (s.rfind(open, 0) != 0) return fallback("missing emotion tag", strip_markers(s));
  const auto end = s.find(close, open.size());
  if (end == std::string::npos) return fallback("unterminated emotion tag", strip_markers(s.substr(open.size())));
  const std::string label = s.substr(open.size(), end - open.size());
  std::string text = s.substr(end + close.size());
  if (!vocab.contains(label)) return fallback("unknown emotion '" + label + "'", strip_markers(text));
  if (mode == ValidationMode::kStrict && text.empty()) fail(ErrorCode::kParseError, "empty response text");
  return {label, std::move(text), false};
}

/// Facial descriptions are expected to be two sentences; returns the number
/// of sentence terminators so callers can warn on deviations.
inline int description_sentence_count(const std::string& d) {
  int n = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if ((d[i] == '.' || d[i] == '!' || d[i] == '?') && (i + 1 == d.size() || d[i + 1] == ' ')) ++n;
  }
  return n;
}

}  // namespace avemo
