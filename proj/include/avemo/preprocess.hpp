#pragma once

// Media -> model-ready features, with a content-addressed on-disk cache.
//
// Cache layout under the cache root:
//   mel/<key>.arr        frames x n_mels log-mel matrix
//   face/<key>.arr       N x 96 x 96 x 3 crop stack
//   face/<key>.idx.arr   N x 2 rows of (source frame index, fps)
// <key> is SHA-256 over the media bytes and the feature config hash, so any
// change to either yields a new entry. Entries are written with an atomic
// rename, which makes concurrent writers safe.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "avemo/audio.hpp"
#include "avemo/core_types.hpp"
#include "avemo/hash.hpp"
#include "avemo/tensor.hpp"
#include "avemo/video.hpp"

namespace avemo {

struct PreprocessConfig {
  MelConfig mel;
  int frame_stride = 10;
  std::shared_ptr<const FaceDetector> detector = std::make_shared<CenterFaceDetector>();
  std::shared_ptr<const VideoDecoder> decoder = std::make_shared<FrameArchiveDecoder>();
  std::string detector_name = "center";

  std::string face_hash() const {
    return Sha256().update("face-v1").update_pod(frame_stride).update(detector_name).hex();
  }
};

struct UtteranceFeatures {
  std::optional<MatF> mel;
  std::optional<FaceCropSequence> face;
};

struct PreprocessStats {
  int computed = 0;
  int cached = 0;
};

/// Hash of the media a reference points at: file bytes, or for a frame
/// directory the sorted (name, bytes) pairs of its entries.
inline std::string media_content_hash(const std::filesystem::path& p) {
  namespace fs = std::filesystem;
  if (!fs::exists(p)) fail(ErrorCode::kMissingMedia, p.string());
  if (!fs::is_directory(p)) return sha256_file(p);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Sha256 h;
  for (const auto& f : files) h.update(f.filename().string()).update(sha256_file(f));
  return h.hex();
}

inline std::string mel_cache_key(const std::string& content_hash, const MelConfig& cfg) {
  return Sha256().update("mel").update(content_hash).update(cfg.hash()).hex();
}
inline std::string face_cache_key(const std::string& content_hash, const PreprocessConfig& cfg) {
  return Sha256().update("face").update(content_hash).update(cfg.face_hash()).hex();
}

namespace detail {

inline ArrayFile crops_to_array(const FaceCropSequence& seq, const std::string& cfg_hash) {
  ArrayFile f;
  f.shape = {seq.size(), kFaceCropSize, kFaceCropSize, 3};
  f.config_hash = cfg_hash;
  for (const auto& c : seq.crops) f.data.insert(f.data.end(), c.pixels.begin(), c.pixels.end());
  return f;
}

inline FaceCropSequence crops_from_arrays(const ArrayFile& crops, const ArrayFile& idx) {
  FaceCropSequence seq;
  if (crops.shape.size() != 4 || idx.shape.size() != 2 || idx.shape[0] != crops.shape[0])
    fail(ErrorCode::kDecodeError, "face cache entry has unexpected shape");
  const std::size_t per = static_cast<std::size_t>(crops.shape[1] * crops.shape[2] * crops.shape[3]);
  for (std::size_t i = 0; i < crops.shape[0]; ++i) {
    Image im(static_cast<int>(crops.shape[2]), static_cast<int>(crops.shape[1]), static_cast<int>(crops.shape[3]));
    std::copy_n(crops.data.begin() + static_cast<long>(i * per), per, im.pixels.begin());
    seq.crops.push_back(std::move(im));
    seq.source_frame_indices.push_back(static_cast<int>(idx.data[2 * i]));
    seq.fps = idx.data[2 * i + 1];
  }
  return seq;
}

}  // namespace detail

inline MatF mel_from_file(const std::filesystem::path& p, const MelConfig& cfg) {
  if (!std::filesystem::exists(p)) fail(ErrorCode::kMissingMedia, p.string());
  return compute_log_mel(read_wav(p), cfg);
}

inline FaceCropSequence crops_from_path(const std::filesystem::path& p, const PreprocessConfig& cfg) {
  auto video = cfg.decoder->decode_path(p);
  return face_crops(video, *cfg.detector, cfg.frame_stride);
}

/// Computes (or loads from cache) the features of one utterance's media.
/// With an empty cache_root nothing is written.
inline UtteranceFeatures preprocess_utterance(const UtteranceRecord& rec, const DatasetManifest& manifest,
                                              const PreprocessConfig& cfg, const std::filesystem::path& cache_root,
                                              PreprocessStats* stats = nullptr) {
  namespace fs = std::filesystem;
  UtteranceFeatures out;
  const bool use_cache = !cache_root.empty();
  if (rec.audio_ref) {
    const fs::path media = manifest.resolve(*rec.audio_ref);
    const std::string key = mel_cache_key(media_content_hash(media), cfg.mel);
    const fs::path entry = cache_root / "mel" / (key + ".arr");
    if (use_cache && fs::exists(entry)) {
      out.mel = ArrayFile::parse(read_file(entry)).to_matrix();
      if (stats) ++stats->cached;
    } else {
      out.mel = mel_from_file(media, cfg.mel);
      if (use_cache) atomic_write(entry, ArrayFile::from_matrix(*out.mel, cfg.mel.hash()).serialize());
      if (stats) ++stats->computed;
    }
  }
  if (rec.video_ref) {
    const fs::path media = manifest.resolve(*rec.video_ref);
    const std::string key = face_cache_key(media_content_hash(media), cfg);
    const fs::path entry = cache_root / "face" / (key + ".arr");
    const fs::path idx_entry = cache_root / "face" / (key + ".idx.arr");
    if (use_cache && fs::exists(entry) && fs::exists(idx_entry)) {
      out.face = detail::crops_from_arrays(ArrayFile::parse(read_file(entry)), ArrayFile::parse(read_file(idx_entry)));
      if (stats) ++stats->cached;
    } else {
      out.face = crops_from_path(media, cfg);
      if (use_cache) {
        ArrayFile idx;
        idx.shape = {out.face->size(), 2};
        idx.config_hash = cfg.face_hash();
        for (std::size_t i = 0; i < out.face->size(); ++i) {
          idx.data.push_back(static_cast<float>(out.face->source_frame_indices[i]));
          idx.data.push_back(static_cast<float>(out.face->fps));
        }
        // Index file first: readers require both, and the crop file is the
        // one whose presence they check last.
        atomic_write(idx_entry, idx.serialize());
        atomic_write(entry, detail::crops_to_array(*out.face, cfg.face_hash()).serialize());
      }
      if (stats) ++stats->computed;
    }
  }
  return out;
}

/// Memoizing front for training and evaluation: features per media path.
class FeatureStore {
 public:
  FeatureStore(const DatasetManifest& manifest, PreprocessConfig cfg, std::filesystem::path cache_root = {})
      : manifest_(manifest), cfg_(std::move(cfg)), cache_root_(std::move(cache_root)) {}

  const MatF& mel(const UtteranceRecord& rec) {
    if (!rec.audio_ref) fail(ErrorCode::kMissingField, "utterance has no audio");
    std::lock_guard lock(mu_);
    auto it = mel_.find(*rec.audio_ref);
    if (it != mel_.end()) return it->second;
    UtteranceRecord audio_only = rec;
    audio_only.video_ref.reset();
    auto f = preprocess_utterance(audio_only, manifest_, cfg_, cache_root_);
    return mel_.emplace(*rec.audio_ref, std::move(*f.mel)).first->second;
  }

  const FaceCropSequence& face(const UtteranceRecord& rec) {
    if (!rec.video_ref) fail(ErrorCode::kMissingField, "utterance has no video");
    std::lock_guard lock(mu_);
    auto it = face_.find(*rec.video_ref);
    if (it != face_.end()) return it->second;
    UtteranceRecord video_only = rec;
    video_only.audio_ref.reset();
    auto f = preprocess_utterance(video_only, manifest_, cfg_, cache_root_);
    return face_.emplace(*rec.video_ref, std::move(*f.face)).first->second;
  }

  void forget(const std::string& media_ref) {
    std::lock_guard lock(mu_);
    mel_.erase(media_ref);
    face_.erase(media_ref);
  }

  const PreprocessConfig& config() const { return cfg_; }

 private:
  const DatasetManifest& manifest_;
  PreprocessConfig cfg_;
  std::filesystem::path cache_root_;
  std::mutex mu_;
  std::map<std::string, MatF> mel_;
  std::map<std::string, FaceCropSequence> face_;
};

}  // namespace avemo
