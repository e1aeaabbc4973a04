#pragma once

// Frame images, PNG/frame-archive decoding, frame sampling and face cropping.

#include <png.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "avemo/error.hpp"
#include "avemo/tensor.hpp"

namespace avemo {

/// HWC float image with values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, int c = 3, float fill = 0.0f)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  float& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  float at(int x, int y, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool empty() const { return width <= 0 || height <= 0; }
};

inline Image decode_png(std::span<const std::uint8_t> bytes, const std::string& what = "png") {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    fail(ErrorCode::kDecodeError, what + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    fail(ErrorCode::kDecodeError, what + ": " + img.message);
  }
  Image out(static_cast<int>(img.width), static_cast<int>(img.height), 3);
  for (std::size_t i = 0; i < buf.size(); ++i) out.pixels[i] = static_cast<float>(buf[i]) / 255.0f;
  return out;
}

inline Image read_png(const std::filesystem::path& p) {
  const std::string bytes = read_file(p);
  return decode_png({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()}, p.string());
}

inline std::string encode_png(const Image& im) {
  if (im.channels != 3) fail(ErrorCode::kShapeMismatch, "encode_png expects RGB");
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(im.width);
  img.height = static_cast<png_uint_32>(im.height);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> raw(im.pixels.size());
  for (std::size_t i = 0; i < raw.size(); ++i)
    raw[i] = static_cast<std::uint8_t>(std::lround(std::clamp(im.pixels[i], 0.0f, 1.0f) * 255.0f));
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, raw.data(), 0, nullptr))
    fail(ErrorCode::kIoError, std::string("png size query: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, raw.data(), 0, nullptr))
    fail(ErrorCode::kIoError, std::string("png encode: ") + img.message);
  out.resize(size);
  return out;
}

inline void write_png(const std::filesystem::path& p, const Image& im) { atomic_write(p, encode_png(im)); }

/// Bilinear resize with half-pixel centres.
inline Image resize_bilinear(const Image& src, int w, int h) {
  Image dst(w, h, src.channels);
  const double sx = static_cast<double>(src.width) / w, sy = static_cast<double>(src.height) / h;
  for (int y = 0; y < h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, src.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, src.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < src.channels; ++c) {
        const double top = src.at(x0, y0, c) * (1 - wx) + src.at(x1, y0, c) * wx;
        const double bot = src.at(x0, y1, c) * (1 - wx) + src.at(x1, y1, c) * wx;
        dst.at(x, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, int x0, int y0, int w, int h) {
  Image out(w, h, src.channels);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < src.channels; ++c) out.at(x, y, c) = src.at(x0 + x, y0 + y, c);
  return out;
}

struct VideoFrames {
  std::vector<Image> frames;
  double fps = 30.0;
};

/// Indices 0, stride, 2*stride, ... below n_frames; ceil(n_frames / stride) of them.
inline std::vector<int> sample_frames(int n_frames, int stride = 10) {
  if (n_frames < 1) fail(ErrorCode::kEmptyVideo, "video has no frames");
  if (stride < 1) fail(ErrorCode::kConfigError, "frame stride must be >= 1");
  std::vector<int> idx;
  for (int i = 0; i < n_frames; i += stride) idx.push_back(i);
  return idx;
}

struct Box {
  int x = 0, y = 0, width = 0, height = 0;
};

/// Face localisation is pluggable; implementations return nothing when no
/// face is found.
class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  virtual std::optional<Box> detect(const Image& frame) const = 0;
};

/// Default detector: the largest centred square. Needs no model weights.
class CenterFaceDetector final : public FaceDetector {
 public:
  std::optional<Box> detect(const Image& frame) const override {
    const int side = std::min(frame.width, frame.height);
    return Box{(frame.width - side) / 2, (frame.height - side) / 2, side, side};
  }
};

/// Never finds a face; exercises the fallback path.
class NullFaceDetector final : public FaceDetector {
 public:
  std::optional<Box> detect(const Image&) const override { return std::nullopt; }
};

inline constexpr int kFaceCropSize = 96;

/// Square crop around the detector's box, resized to 96x96. When the detector
/// finds nothing, the centred square is used and `fallbacks` is incremented.
inline Image crop_face(const Image& frame, const FaceDetector& detector, std::atomic<int>* fallbacks = nullptr) {
  if (frame.empty()) fail(ErrorCode::kDecodeError, "frame has no pixels");
  auto box = detector.detect(frame);
  if (!box || box->width <= 0 || box->height <= 0) {
    if (fallbacks) ++*fallbacks;
    box = CenterFaceDetector().detect(frame);
  }
  const int side = std::min({std::max(box->width, box->height), frame.width, frame.height});
  const int cx = box->x + box->width / 2, cy = box->y + box->height / 2;
  const int x0 = std::clamp(cx - side / 2, 0, frame.width - side);
  const int y0 = std::clamp(cy - side / 2, 0, frame.height - side);
  return resize_bilinear(crop(frame, x0, y0, side, side), kFaceCropSize, kFaceCropSize);
}

struct FaceCropSequence {
  std::vector<Image> crops;
  std::vector<int> source_frame_indices;
  double fps = 30.0;
  int fallback_count = 0;

  std::size_t size() const { return crops.size(); }

  void validate() const {
    if (crops.empty()) fail(ErrorCode::kEmptyVideo, "no face crops");
    if (crops.size() != source_frame_indices.size())
      fail(ErrorCode::kInvariantViolation, "crop/index count mismatch");
    for (std::size_t i = 0; i < crops.size(); ++i) {
      if (crops[i].width != kFaceCropSize || crops[i].height != kFaceCropSize)
        fail(ErrorCode::kInvariantViolation, "crop is not 96x96");
      if (i > 0 && source_frame_indices[i] <= source_frame_indices[i - 1])
        fail(ErrorCode::kInvariantViolation, "frame indices must be strictly increasing");
    }
  }
};

inline FaceCropSequence face_crops(const VideoFrames& video, const FaceDetector& detector, int stride = 10) {
  FaceCropSequence seq;
  seq.fps = video.fps;
  std::atomic<int> fallbacks{0};
  for (int i : sample_frames(static_cast<int>(video.frames.size()), stride)) {
    seq.crops.push_back(crop_face(video.frames[static_cast<std::size_t>(i)], detector, &fallbacks));
    seq.source_frame_indices.push_back(i);
  }
  seq.fallback_count = fallbacks.load();
  return seq;
}

namespace detail {

inline bool is_png_name(const std::string& name) {
  return name.size() > 4 && (name.ends_with(".png") || name.ends_with(".PNG"));
}

/// Sort key: the last run of digits in the file name (frame number).
inline long frame_number(const std::string& name) {
  long value = -1;
  std::size_t i = name.size();
  while (i > 0 && !std::isdigit(static_cast<unsigned char>(name[i - 1]))) --i;
  std::size_t end = i;
  while (i > 0 && std::isdigit(static_cast<unsigned char>(name[i - 1]))) --i;
  if (i < end) value = std::stol(name.substr(i, end - i));
  return value;
}

}  // namespace detail

/// Decodes media referenced by a manifest or uploaded to the service.
class VideoDecoder {
 public:
  virtual ~VideoDecoder() = default;
  virtual VideoFrames decode_path(const std::filesystem::path& p) const = 0;
  virtual VideoFrames decode_bytes(std::span<const std::uint8_t> bytes, const std::string& what) const = 0;
};

/// Directory of numbered PNG frames, or a tar archive of them. An optional
/// `fps` file in the directory (or archive) overrides the 30 fps default.
/// MP4 needs an external decoder behind the same interface.
class FrameArchiveDecoder final : public VideoDecoder {
 public:
  VideoFrames decode_path(const std::filesystem::path& p) const override {
    namespace fs = std::filesystem;
    if (!fs::exists(p)) fail(ErrorCode::kMissingMedia, p.string());
    if (!fs::is_directory(p)) {
      const std::string bytes = read_file(p);
      return decode_bytes({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()}, p.string());
    }
    std::vector<std::pair<long, fs::path>> files;
    for (const auto& e : fs::directory_iterator(p)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && detail::is_png_name(name)) files.emplace_back(detail::frame_number(name), e.path());
    }
    std::sort(files.begin(), files.end());
    VideoFrames v;
    if (fs::exists(p / "fps")) v.fps = std::stod(read_file(p / "fps"));
    for (const auto& [n, f] : files) v.frames.push_back(read_png(f));
    if (v.frames.empty()) fail(ErrorCode::kDecodeError, p.string() + ": no PNG frames");
    return v;
  }

  VideoFrames decode_bytes(std::span<const std::uint8_t> bytes, const std::string& what) const override {
    if (bytes.size() >= 12 && std::memcmp(bytes.data() + 4, "ftyp", 4) == 0)
      fail(ErrorCode::kDecodeError, what + ": MP4 input needs an external video decoder");
    std::vector<std::pair<long, Image>> frames;
    VideoFrames v;
    std::size_t pos = 0;
    while (pos + 512 <= bytes.size()) {
      const auto* h = bytes.data() + pos;
      if (std::all_of(h, h + 512, [](std::uint8_t b) { return b == 0; })) break;
      std::string name(reinterpret_cast<const char*>(h), strnlen(reinterpret_cast<const char*>(h), 100));
      const std::string size_field(reinterpret_cast<const char*>(h + 124), 12);
      std::size_t size = 0;
      for (char c : size_field) {
        if (c >= '0' && c <= '7') size = size * 8 + static_cast<std::size_t>(c - '0');
      }
      const char type = static_cast<char>(h[156]);
      const std::size_t body = pos + 512;
      if (body + size > bytes.size()) fail(ErrorCode::kDecodeError, what + ": truncated tar member " + name);
      const auto base = name.substr(name.find_last_of('/') == std::string::npos ? 0 : name.find_last_of('/') + 1);
      if (type == '0' || type == '\0') {
        if (detail::is_png_name(base)) {
          frames.emplace_back(detail::frame_number(base), decode_png(bytes.subspan(body, size), what + ":" + name));
        } else if (base == "fps") {
          v.fps = std::stod(std::string(reinterpret_cast<const char*>(bytes.data() + body), size));
        }
      }
      pos = body + (size + 511) / 512 * 512;
    }
    if (frames.empty()) fail(ErrorCode::kDecodeError, what + ": no PNG frames in archive");
    std::stable_sort(frames.begin(), frames.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [n, im] : frames) v.frames.push_back(std::move(im));
    return v;
  }
};

/// Builds an uncompressed ustar archive; used by tests and clients.
inline std::string make_tar(const std::vector<std::pair<std::string, std::string>>& members) {
  std::string out;
  for (const auto& [name, data] : members) {
    std::string h(512, '\0');
    std::memcpy(h.data(), name.data(), std::min<std::size_t>(name.size(), 99));
    std::snprintf(h.data() + 100, 8, "%07o", 0644);
    std::snprintf(h.data() + 108, 8, "%07o", 0);
    std::snprintf(h.data() + 116, 8, "%07o", 0);
    std::snprintf(h.data() + 124, 12, "%011lo", static_cast<unsigned long>(data.size()));
    std::snprintf(h.data() + 136, 12, "%011o", 0);
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 5);
    std::memcpy(h.data() + 263, "00", 2);
    std::memset(h.data() + 148, ' ', 8);
    unsigned sum = 0;
    for (unsigned char c : h) sum += c;
    std::snprintf(h.data() + 148, 8, "%06o", sum);
    out += h;
    out += data;
    out.append((512 - data.size() % 512) % 512, '\0');
  }
  out.append(1024, '\0');
  return out;
}

}  // namespace avemo
