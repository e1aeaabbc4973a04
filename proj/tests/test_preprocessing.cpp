#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "avemo/preprocess.hpp"
#include "avemo/synth.hpp"

namespace fs = std::filesystem;
using namespace avemo;

namespace {

Waveform silence(double seconds) {
  Waveform w;
  w.samples.assign(static_cast<std::size_t>(seconds * 16000), 0.0f);
  return w;
}

fs::path temp_dir(const std::string& tag) {
  auto d = fs::temp_directory_path() / ("avemo_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(LogMel, OneSecondOfSilence) {
  auto mel = compute_log_mel(silence(1.0));
  ASSERT_EQ(mel.rows(), 100);
  ASSERT_EQ(mel.cols(), 80);
  const float expected = static_cast<float>(std::log(1e-10));
  for (Eigen::Index i = 0; i < mel.size(); ++i) EXPECT_EQ(mel.data()[i], expected);
}

TEST(LogMel, TwoSecondsGiveTwoHundredFrames) { EXPECT_EQ(compute_log_mel(silence(2.0)).rows(), 200); }

TEST(LogMel, Errors) {
  Waveform empty;
  try {
    compute_log_mel(empty);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyAudio);
  }
  Waveform w = silence(0.1);
  w.sample_rate_hz = 8000;
  try {
    compute_log_mel(w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSampleRateMismatch);
  }
}

TEST(LogMel, FrameCountIsFloorOfLengthOverHop) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t len = 1 + rng() % 9000;
    Waveform a;
    a.samples.assign(len, 0.1f);
    Waveform b;
    b.samples.assign(2 * len, 0.1f);
    const auto fa = compute_log_mel(a).rows(), fb = compute_log_mel(b).rows();
    EXPECT_EQ(fa, static_cast<Eigen::Index>(len / 160));
    EXPECT_EQ(fb, static_cast<Eigen::Index>(2 * len / 160));
    EXPECT_LE(std::abs(fb - 2 * fa), 1);
  }
}

TEST(LogMel, ToneEnergyPeaksNearItsFrequency) {
  Waveform w = silence(0.5);
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = 0.5f * static_cast<float>(std::sin(2 * std::numbers::pi * 1000.0 * i / 16000.0));
  auto mel = compute_log_mel(w);
  const MatD fb = mel_filterbank(MelConfig{});
  Eigen::Index best = 0;
  mel.row(25).maxCoeff(&best);
  // Filter whose peak frequency is closest to 1 kHz.
  Eigen::Index peak_bin = 0;
  fb.col(static_cast<Eigen::Index>(1000.0 * 400 / 16000)).maxCoeff(&peak_bin);
  EXPECT_LE(std::abs(best - peak_bin), 1);
}

TEST(Wav, RoundTripsSixteenBitPcm) {
  Waveform w;
  w.sample_rate_hz = 16000;
  for (int i = 0; i < 300; ++i) w.samples.push_back(static_cast<float>(std::sin(i * 0.1)) * 0.8f);
  const auto bytes = encode_wav(w);
  auto back = decode_wav({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  ASSERT_EQ(back.samples.size(), w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i) EXPECT_NEAR(back.samples[i], w.samples[i], 1.0 / 16384);
}

TEST(Wav, CorruptBytesAreDecodeError) {
  const std::string junk = "RIFF0000WAVEjunk";
  try {
    decode_wav({reinterpret_cast<const std::uint8_t*>(junk.data()), junk.size()}, "junk.wav");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDecodeError);
    EXPECT_NE(std::string(e.what()).find("junk.wav"), std::string::npos);
  }
}

TEST(SampleFrames, Examples) {
  auto idx = sample_frames(95, 10);
  EXPECT_EQ(idx, (std::vector<int>{0, 10, 20, 30, 40, 50, 60, 70, 80, 90}));
  EXPECT_EQ(sample_frames(10, 10), std::vector<int>{0});
  EXPECT_EQ(sample_frames(1, 7), std::vector<int>{0});
  try {
    sample_frames(0, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyVideo);
  }
}

TEST(SampleFrames, CountIsCeilingForAllLengths) {
  for (int stride : {1, 5, 10}) {
    for (int n = 1; n <= 1000; ++n) {
      auto idx = sample_frames(n, stride);
      ASSERT_EQ(static_cast<int>(idx.size()), (n + stride - 1) / stride) << n << " " << stride;
      ASSERT_EQ(idx.front(), 0);
      ASSERT_LT(idx.back(), n);
    }
  }
}

namespace {

class BoxDetector final : public FaceDetector {
 public:
  explicit BoxDetector(Box b) : b_(b) {}
  std::optional<Box> detect(const Image&) const override { return b_; }

 private:
  Box b_;
};

}  // namespace

TEST(CropFace, DetectorBoxIsCroppedAndResized) {
  Image frame(256, 256, 3, 0.0f);
  for (int y = 96; y < 160; ++y)
    for (int x = 96; x < 160; ++x) frame.at(x, y, 0) = 1.0f;
  auto out = crop_face(frame, BoxDetector({96, 96, 64, 64}));
  EXPECT_EQ(out.width, 96);
  EXPECT_EQ(out.height, 96);
  for (float v : {out.at(0, 0, 0), out.at(48, 48, 0), out.at(95, 95, 0)}) EXPECT_FLOAT_EQ(v, 1.0f);
}

TEST(CropFace, NoDetectionFallsBackToCenter) {
  Image frame(200, 100, 3, 0.0f);
  for (int y = 0; y < 100; ++y)
    for (int x = 50; x < 150; ++x) frame.at(x, y, 1) = 1.0f;
  std::atomic<int> fallbacks{0};
  auto out = crop_face(frame, NullFaceDetector(), &fallbacks);
  EXPECT_EQ(fallbacks.load(), 1);
  EXPECT_EQ(out.width, 96);
  EXPECT_FLOAT_EQ(out.at(0, 0, 1), 1.0f);
  EXPECT_FLOAT_EQ(out.at(95, 95, 1), 1.0f);
}

TEST(CropFace, SmallFrameIsUpscaled) {
  Image frame(64, 64, 3, 0.25f);
  auto out = crop_face(frame, CenterFaceDetector());
  EXPECT_EQ(out.width, 96);
  EXPECT_EQ(out.height, 96);
  EXPECT_FLOAT_EQ(out.at(50, 50, 2), 0.25f);
}

TEST(Png, RoundTrip) {
  Image im(5, 4, 3);
  for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = static_cast<float>(i % 256) / 255.0f;
  const auto bytes = encode_png(im);
  auto back = decode_png({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  ASSERT_EQ(back.pixels.size(), im.pixels.size());
  for (std::size_t i = 0; i < im.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], im.pixels[i], 1e-6);
}

TEST(FrameArchive, TarOfPngsDecodesInFrameOrder) {
  std::vector<std::pair<std::string, std::string>> members;
  for (int f : {2, 0, 1}) {
    Image im(8, 8, 3, static_cast<float>(f) / 4.0f);
    members.emplace_back("clip/frame_" + std::to_string(f) + ".png", encode_png(im));
  }
  members.emplace_back("clip/fps", "25");
  const auto tar = make_tar(members);
  auto v = FrameArchiveDecoder().decode_bytes({reinterpret_cast<const std::uint8_t*>(tar.data()), tar.size()}, "upload");
  ASSERT_EQ(v.frames.size(), 3u);
  EXPECT_DOUBLE_EQ(v.fps, 25.0);
  for (int f = 0; f < 3; ++f) EXPECT_NEAR(v.frames[f].at(0, 0, 0), f / 4.0, 1.0 / 255);
}

class CacheFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = temp_dir("cache");
    SynthConfig cfg;
    cfg.n_dialogues = 1;
    cfg.rounds_per_dialogue = 1;
    manifest_ = generate_synthetic_corpus(cfg, EmotionVocabulary::standard(), dir_ / "corpus");
  }
  void TearDown() override { fs::remove_all(dir_); }

  const UtteranceRecord& user() const { return manifest_.records[0].dialogue()->turns[0]; }

  fs::path dir_;
  DatasetManifest manifest_;
};

TEST_F(CacheFixture, AudioOnlyRecordWritesMelCacheOnly) {
  auto rec = user();
  rec.video_ref.reset();
  PreprocessStats stats;
  auto f = preprocess_utterance(rec, manifest_, PreprocessConfig{}, dir_ / "cache", &stats);
  EXPECT_TRUE(f.mel.has_value());
  EXPECT_FALSE(f.face.has_value());
  EXPECT_EQ(stats.computed, 1);
  EXPECT_TRUE(fs::exists(dir_ / "cache" / "mel"));
  EXPECT_FALSE(fs::exists(dir_ / "cache" / "face"));
}

TEST_F(CacheFixture, AudioVideoRecordWritesBothAndRerunIsNoOp) {
  PreprocessStats first, second;
  auto a = preprocess_utterance(user(), manifest_, PreprocessConfig{}, dir_ / "cache", &first);
  EXPECT_EQ(first.computed, 2);
  auto times = [&] {
    std::vector<fs::file_time_type> t;
    for (auto& e : fs::recursive_directory_iterator(dir_ / "cache"))
      if (e.is_regular_file()) t.push_back(e.last_write_time());
    return t;
  };
  const auto before = times();
  auto b = preprocess_utterance(user(), manifest_, PreprocessConfig{}, dir_ / "cache", &second);
  EXPECT_EQ(second.computed, 0);
  EXPECT_EQ(second.cached, 2);
  EXPECT_EQ(times(), before);
  EXPECT_EQ(*a.mel, *b.mel);
  ASSERT_EQ(a.face->size(), b.face->size());
  EXPECT_EQ(a.face->source_frame_indices, b.face->source_frame_indices);
  EXPECT_EQ(a.face->crops[0].pixels, b.face->crops[0].pixels);
  b.face->validate();
  EXPECT_EQ(b.face->size(), 3u);  // 30 frames, every 10th
}

TEST_F(CacheFixture, CorruptMediaIsDecodeErrorNamingFile) {
  auto rec = user();
  rec.video_ref.reset();
  const auto path = manifest_.resolve(*rec.audio_ref);
  std::ofstream(path, std::ios::trunc) << "garbage";
  try {
    preprocess_utterance(rec, manifest_, PreprocessConfig{}, dir_ / "cache");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDecodeError);
    EXPECT_NE(std::string(e.what()).find(path.filename().string()), std::string::npos);
  }
}

TEST_F(CacheFixture, MissingMedia) {
  auto rec = user();
  rec.audio_ref = "media/none.wav";
  try {
    preprocess_utterance(rec, manifest_, PreprocessConfig{}, dir_ / "cache");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingMedia);
  }
}

TEST_F(CacheFixture, ChangingOneSampleChangesCacheKey) {
  const auto path = manifest_.resolve(*user().audio_ref);
  auto w = read_wav(path);
  const auto key_before = mel_cache_key(media_content_hash(path), MelConfig{});
  w.samples[1234] += 0.01f;
  write_wav(path, w);
  const auto key_after = mel_cache_key(media_content_hash(path), MelConfig{});
  EXPECT_NE(key_before, key_after);
  MelConfig other;
  other.n_mels = 40;
  EXPECT_NE(mel_cache_key(media_content_hash(path), other), key_after);
}

TEST(Synth, EightDialoguesTwoRounds) {
  auto dir = temp_dir("synth8");
  SynthConfig cfg;
  auto m = generate_synthetic_corpus(cfg, EmotionVocabulary::standard(), dir);
  ASSERT_EQ(m.records.size(), 8u);
  int media_pairs = 0;
  for (const auto& r : m.records) {
    ASSERT_EQ(r.dialogue()->rounds(), 2u);
    for (const auto& t : r.dialogue()->turns) {
      if (t.speaker == Speaker::kUser && t.audio_ref && t.video_ref) ++media_pairs;
    }
  }
  EXPECT_EQ(media_pairs, 16);
  EXPECT_NO_THROW(validate_manifest(dir / "manifest.jsonl", EmotionVocabulary::standard()));
  fs::remove_all(dir);
}

TEST(Synth, SameSeedIsByteIdentical) {
  auto a = temp_dir("synth_a"), b = temp_dir("synth_b");
  SynthConfig cfg;
  cfg.n_dialogues = 3;
  generate_synthetic_corpus(cfg, EmotionVocabulary::standard(), a);
  generate_synthetic_corpus(cfg, EmotionVocabulary::standard(), b);
  EXPECT_EQ(read_file(a / "manifest.jsonl"), read_file(b / "manifest.jsonl"));
  EXPECT_EQ(read_file(a / "media/d0001_r1.wav"), read_file(b / "media/d0001_r1.wav"));
  EXPECT_EQ(media_content_hash(a / "media/d0002_r0"), media_content_hash(b / "media/d0002_r0"));
  cfg.seed = 1;
  auto c = temp_dir("synth_c");
  generate_synthetic_corpus(cfg, EmotionVocabulary::standard(), c);
  EXPECT_NE(read_file(a / "manifest.jsonl"), read_file(c / "manifest.jsonl"));
  for (auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Synth, AdjacentEmotionPitchesSeparatedByAtLeast20Hz) {
  const auto vocab = EmotionVocabulary::standard();
  for (std::size_t i = 0; i + 1 < vocab.size(); ++i) EXPECT_GE(synth::pitch_hz(i + 1) - synth::pitch_hz(i), 20.0);
}

TEST(Synth, PitchIsRecoverableFromWaveform) {
  // Among all label pitches, the clip carries the most energy at its own.
  SynthConfig cfg;
  std::mt19937_64 rng(9);
  auto energy_at = [](const Waveform& w, double hz) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      const double a = 2 * std::numbers::pi * hz * static_cast<double>(i) / w.sample_rate_hz;
      re += w.samples[i] * std::cos(a);
      im += w.samples[i] * std::sin(a);
    }
    return re * re + im * im;
  };
  for (std::size_t e = 0; e < 7; ++e) {
    auto w = synth::make_audio(e, 7, static_cast<int>(e % 4), 3, Intensity::kMedium, cfg, rng);
    std::size_t best = 0;
    double best_energy = -1;
    for (std::size_t c = 0; c < 7; ++c) {
      const double en = energy_at(w, synth::pitch_hz(c));
      if (en > best_energy) best_energy = en, best = c;
    }
    EXPECT_EQ(best, e);
  }
}
