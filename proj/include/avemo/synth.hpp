#pragma once

// Deterministic synthetic audio-visual dialogue corpus.
//
// Emotion is carried redundantly: in audio as the fundamental pitch of a
// harmonic tone (140 Hz + 40 Hz per label index), and in video as the hue
// and drift direction of a disc. The transcript's two grammar slots are
// carried by two band tones, one per half of the clip, and intensity by the
// loudness. AI replies depend only on the user's emotion.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "avemo/audio.hpp"
#include "avemo/core_types.hpp"
#include "avemo/video.hpp"

namespace avemo {

struct SynthConfig {
  std::uint64_t seed = 0;
  int n_dialogues = 8;
  int rounds_per_dialogue = 2;
  double clip_seconds = 1.0;
  int sample_rate_hz = 16000;
  int frames_per_clip = 30;
  int frame_size = 112;
  Split split = Split::kTrain;
};

namespace synth {

inline constexpr double kBasePitchHz = 140.0;
inline constexpr double kPitchStepHz = 40.0;

inline double pitch_hz(std::size_t emotion_index) { return kBasePitchHz + kPitchStepHz * static_cast<double>(emotion_index); }

inline const std::vector<std::string>& subjects() {
  static const std::vector<std::string> v{"I visited", "We watched", "They found", "You missed"};
  return v;
}
inline const std::vector<std::string>& objects() {
  static const std::vector<std::string> v{"the old park", "a big game", "my new car", "the last train"};
  return v;
}
inline double subject_tone_hz(int a) { return 1500.0 + 300.0 * a; }
inline double object_tone_hz(int b) { return 3000.0 + 600.0 * b; }

struct Reply {
  std::string emotion;
  std::string text;
};

inline Reply reply_for(const std::string& user_emotion, const EmotionVocabulary& vocab) {
  static const std::vector<std::pair<std::string, Reply>> table{
      {"happy", {"happy", "That is wonderful news!"}},
      {"sad", {"sad", "I am sorry to hear that."}},
      {"surprised", {"surprised", "Wow, that is unexpected!"}},
      {"fearful", {"neutral", "Stay calm, you are safe."}},
      {"disgusted", {"neutral", "That does sound unpleasant."}},
      {"angry", {"neutral", "I understand your frustration."}},
      {"neutral", {"neutral", "I see, tell me more."}},
  };
  for (const auto& [k, r] : table) {
    if (k == user_emotion && vocab.contains(r.emotion)) return r;
  }
  return {vocab.default_label(), "I hear that you feel " + user_emotion + "."};
}

inline std::string description_for(const std::string& emotion) {
  static const std::vector<std::pair<std::string, std::string>> table{
      {"happy", "The cheeks rise into a broad smile. The eyes crinkle as the joy grows."},
      {"sad", "The mouth corners droop and the brows pull up. The gaze lowers as the sadness deepens."},
      {"surprised", "The brows shoot up and the eyes widen. The jaw drops open for a moment."},
      {"fearful", "The eyes widen and the brows draw together. The lips stretch back in a tense line."},
      {"disgusted", "The nose wrinkles and the upper lip curls. The head pulls slightly away."},
      {"angry", "The brows lower and pull together tightly. The lips press into a hard line."},
      {"neutral", "The face stays relaxed and still. The gaze remains steady throughout."},
  };
  for (const auto& [k, d] : table) {
    if (k == emotion) return d;
  }
  return "The face shows " + emotion + ". The expression holds steady throughout.";
}

inline void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  const double c = v * s, hp = h * 6.0, x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  rgb[0] = static_cast<float>(r + m);
  rgb[1] = static_cast<float>(g + m);
  rgb[2] = static_cast<float>(b + m);
}

inline Waveform make_audio(std::size_t emotion, std::size_t n_emotions, int a, int b, Intensity intensity,
                           const SynthConfig& cfg, std::mt19937_64& rng) {
  (void)n_emotions;
  const auto n = static_cast<std::size_t>(cfg.clip_seconds * cfg.sample_rate_hz);
  std::uniform_real_distribution<double> phase(0.0, 2 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 0.004);
  const double gain = intensity == Intensity::kLow ? 0.25 : intensity == Intensity::kHigh ? 0.75 : 0.5;
  const double f0 = pitch_hz(emotion);
  const double p0 = phase(rng), p1 = phase(rng), p2 = phase(rng);
  Waveform w;
  w.sample_rate_hz = cfg.sample_rate_hz;
  w.samples.resize(n);
  const double two_pi = 2 * std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / cfg.sample_rate_hz;
    double s = 0.6 * std::sin(two_pi * f0 * t + p0) + 0.3 * std::sin(two_pi * 2 * f0 * t + p1) +
               0.15 * std::sin(two_pi * 3 * f0 * t + p2);
    const double slot = i < n / 2 ? subject_tone_hz(a) : object_tone_hz(b);
    s += 0.35 * std::sin(two_pi * slot * t);
    w.samples[i] = static_cast<float>(gain * s / 1.6 + noise(rng));
  }
  return w;
}

inline std::vector<Image> make_video(std::size_t emotion, std::size_t n_emotions, const SynthConfig& cfg,
                                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> jitter(-6.0, 6.0);
  std::uniform_real_distribution<double> shade(0.08, 0.18);
  const double bg = shade(rng);
  const double hue = static_cast<double>(emotion) / static_cast<double>(n_emotions);
  const double angle = 2 * std::numbers::pi * static_cast<double>(emotion) / static_cast<double>(n_emotions);
  float rgb[3];
  hsv_to_rgb(hue, 0.9, 0.95, rgb);
  const double cx0 = cfg.frame_size / 2.0 + jitter(rng), cy0 = cfg.frame_size / 2.0 + jitter(rng);
  const double speed = 0.9, radius = cfg.frame_size / 6.0;
  std::vector<Image> frames;
  for (int f = 0; f < cfg.frames_per_clip; ++f) {
    Image im(cfg.frame_size, cfg.frame_size, 3, static_cast<float>(bg));
    const double cx = cx0 + speed * f * std::cos(angle), cy = cy0 + speed * f * std::sin(angle);
    for (int y = 0; y < im.height; ++y) {
      for (int x = 0; x < im.width; ++x) {
        const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
        if (d <= radius) {
          for (int c = 0; c < 3; ++c) im.at(x, y, c) = rgb[c];
        }
      }
    }
    frames.push_back(std::move(im));
  }
  return frames;
}

}  // namespace synth

/// Writes media under out_dir/media and the manifest to out_dir/manifest.jsonl;
/// returns the manifest (already validated). Identical config gives
/// byte-identical output.
inline DatasetManifest generate_synthetic_corpus(const SynthConfig& cfg, const EmotionVocabulary& vocab,
                                                 const std::filesystem::path& out_dir) {
  namespace fs = std::filesystem;
  if (cfg.n_dialogues < 1) fail(ErrorCode::kConfigError, "n_dialogues must be >= 1");
  if (cfg.rounds_per_dialogue < 1) fail(ErrorCode::kConfigError, "rounds_per_dialogue must be >= 1");
  fs::create_directories(out_dir / "media");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick_emotion(0, vocab.size() - 1);
  std::uniform_int_distribution<int> pick_slot(0, 3);
  std::uniform_int_distribution<int> pick_intensity(0, 2);
  std::uniform_int_distribution<int> pick_age(20, 69);
  std::uniform_int_distribution<int> pick_gender(0, 1);

  DatasetManifest m;
  m.split = cfg.split;
  m.base_dir = out_dir;
  char id_buf[32];
  for (int d = 0; d < cfg.n_dialogues; ++d) {
    std::snprintf(id_buf, sizeof id_buf, "d%04d", d);
    Dialogue dlg;
    dlg.dialogue_id = id_buf;
    for (int r = 0; r < cfg.rounds_per_dialogue; ++r) {
      const std::size_t emo = pick_emotion(rng);
      const int a = pick_slot(rng), b = pick_slot(rng);
      const auto intensity = static_cast<Intensity>(pick_intensity(rng));
      const std::string stem = std::string(id_buf) + "_r" + std::to_string(r);

      UtteranceRecord user;
      user.speaker = Speaker::kUser;
      user.transcript = synth::subjects()[a] + " " + synth::objects()[b] + ".";
      user.emotion = vocab.labels()[emo];
      user.metadata.emotion = user.emotion;
      user.metadata.emotion_intensity = intensity;
      user.metadata.gender = pick_gender(rng) ? "female" : "male";
      user.metadata.age = pick_age(rng);
      user.facial_description = synth::description_for(user.emotion);
      user.audio_ref = "media/" + stem + ".wav";
      user.video_ref = "media/" + stem;

      write_wav(out_dir / *user.audio_ref, synth::make_audio(emo, vocab.size(), a, b, intensity, cfg, rng));
      const auto frames = synth::make_video(emo, vocab.size(), cfg, rng);
      fs::create_directories(out_dir / *user.video_ref);
      for (std::size_t f = 0; f < frames.size(); ++f) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%04zu.png", f);
        write_png(out_dir / *user.video_ref / name, frames[f]);
      }

      const auto reply = synth::reply_for(user.emotion, vocab);
      UtteranceRecord ai;
      ai.speaker = Speaker::kAi;
      ai.emotion = reply.emotion;
      ai.transcript = reply.text;
      dlg.turns.push_back(std::move(user));
      dlg.turns.push_back(std::move(ai));
    }
    ManifestRecord rec;
    rec.id = dlg.dialogue_id;
    rec.tasks = {Task::kDialogue, Task::kAsr, Task::kSer, Task::kEmr, Task::kEmd};
    rec.content = std::move(dlg);
    m.records.push_back(std::move(rec));
  }
  validate_records(m, vocab, ValidationMode::kStrict);
  atomic_write(out_dir / "manifest.jsonl", serialize_manifest(m));
  return m;
}

}  // namespace avemo
