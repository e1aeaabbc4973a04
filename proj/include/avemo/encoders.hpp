#pragma once

// Speech and face encoders.
//
// Speech: log-mel frames -> two 1-D convolutions (the second with stride 2,
// so T_a = ceil(frames / 2)) -> sinusoidal positions -> bidirectional
// transformer blocks -> f_a (T_a x d_audio).
//
// Face: each 96x96 crop is average-pooled to a coarse colour grid and mapped
// by a per-frame MLP (frame-local by construction). The temporal encoder then
// lets a fixed set of learnable queries cross-attend to the position-encoded
// frame features, refining the queries block by block, so f_v always has
// n_queries rows whatever the clip length.
//
// Both encoders also accept an external backbone behind a narrow interface;
// such backbones are treated as frozen feature extractors.

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "avemo/nn.hpp"
#include "avemo/video.hpp"

namespace avemo {

enum class Backbone { kTinyBuiltin, kExternalAdapter };

/// Full-scale speech backbone (e.g. a pretrained encoder) wrapped to map a
/// log-mel matrix to a feature matrix.
class SpeechBackboneAdapter {
 public:
  virtual ~SpeechBackboneAdapter() = default;
  virtual MatF encode(const MatF& mel) const = 0;
  virtual int width() const = 0;
};

/// Full-scale per-frame image backbone: one feature row per crop.
class FrameBackboneAdapter {
 public:
  virtual ~FrameBackboneAdapter() = default;
  virtual MatF encode(const std::vector<Image>& crops) const = 0;
  virtual int width() const = 0;
};

struct SpeechEncoderConfig {
  int n_mels = 80;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_audio = 64;
  Backbone backbone = Backbone::kTinyBuiltin;

  void validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      fail(ErrorCode::kConfigError, "speech encoder d_model must be divisible by n_heads");
    if (n_layers < 0 || d_audio < 1 || n_mels < 1) fail(ErrorCode::kConfigError, "bad speech encoder config");
  }
};

struct FaceEncoderConfig {
  Backbone frame_backbone = Backbone::kTinyBuiltin;
  int d_frame = 64;
  int n_queries = 128;
  int d_visual = 64;
  int temporal_layers = 6;
  int temporal_heads = 8;
  int pool_grid = 8;  // builtin frame backbone pools each crop to grid x grid x 3
  bool positional_encoding = true;

  void validate() const {
    if (n_queries < 1) fail(ErrorCode::kConfigError, "n_queries must be >= 1");
    if (d_visual < 1 || temporal_heads < 1 || d_visual % temporal_heads != 0)
      fail(ErrorCode::kConfigError, "d_visual must be divisible by temporal_heads");
    if (kFaceCropSize % pool_grid != 0) fail(ErrorCode::kConfigError, "pool_grid must divide 96");
    if (temporal_layers < 0 || d_frame < 1) fail(ErrorCode::kConfigError, "bad face encoder config");
  }
};

template <class T>
class SpeechEncoder {
 public:
  SpeechEncoder() = default;
  SpeechEncoder(const SpeechEncoderConfig& cfg, std::mt19937_64& rng,
                std::shared_ptr<const SpeechBackboneAdapter> external = nullptr)
      : cfg_(cfg), external_(std::move(external)) {
    cfg_.validate();
    if (cfg_.backbone == Backbone::kExternalAdapter) {
      if (!external_) fail(ErrorCode::kConfigError, "external speech backbone requested but none supplied");
      out_ = nn::Linear<T>("speech_encoder.out", external_->width(), cfg_.d_audio, rng);
      return;
    }
    conv1_ = nn::Linear<T>("speech_encoder.conv1", 3 * cfg_.n_mels, cfg_.d_model, rng);
    conv2_ = nn::Linear<T>("speech_encoder.conv2", 3 * cfg_.d_model, cfg_.d_model, rng);
    for (int i = 0; i < cfg_.n_layers; ++i)
      blocks_.emplace_back("speech_encoder.block" + std::to_string(i), cfg_.d_model, cfg_.n_heads, rng);
    ln_ = nn::LayerNorm<T>("speech_encoder.ln_out", cfg_.d_model);
    out_ = nn::Linear<T>("speech_encoder.out", cfg_.d_model, cfg_.d_audio, rng);
  }

  /// Number of feature rows produced for `frames` input frames.
  static Eigen::Index output_length(Eigen::Index frames) { return (frames + 1) / 2; }

  ag::Var<T> operator()(ag::Tape<T>& tape, const Mat<T>& mel) const {
    if (mel.rows() == 0) fail(ErrorCode::kEmptyInput, "speech encoder got no frames");
    if (cfg_.backbone == Backbone::kExternalAdapter) {
      auto feats = ag::constant<T>(external_->encode(mel.template cast<float>()).template cast<T>());
      return out_(tape, feats);
    }
    if (mel.cols() != cfg_.n_mels) fail(ErrorCode::kShapeMismatch, "mel width does not match n_mels");
    // Log-mel values span roughly [-23, 5]; a fixed scale keeps the first
    // layer's pre-activations O(1).
    auto x = ag::constant<T>(mel * T(0.125));
    auto h = ag::gelu(conv1_(tape, ag::stack_windows(x, 3, 1, 1)));
    h = ag::gelu(conv2_(tape, ag::stack_windows(h, 3, 2, 1)));
    h = ag::add(h, ag::constant<T>(nn::sinusoid<T>(h.rows(), h.cols())));
    for (const auto& b : blocks_) h = b(tape, h, false);
    return out_(tape, ln_(tape, h));
  }

  const SpeechEncoderConfig& config() const { return cfg_; }
  bool trainable() const { return trainable_; }

  template <class F>
  void for_each_param(F&& f) {
    if (cfg_.backbone == Backbone::kTinyBuiltin) {
      conv1_.for_each_param(f);
      conv2_.for_each_param(f);
      for (auto& b : blocks_) b.for_each_param(f);
      ln_.for_each_param(f);
    }
    out_.for_each_param(f);
  }

  /// Frozen parameters never receive gradients, so no optimizer moves them.
  void set_trainable(bool flag) {
    trainable_ = flag;
    for_each_param([flag](ag::Parameter<T>& p) { p.trainable = flag; });
  }

 private:
  SpeechEncoderConfig cfg_;
  std::shared_ptr<const SpeechBackboneAdapter> external_;
  nn::Linear<T> conv1_, conv2_;
  std::vector<nn::SelfBlock<T>> blocks_;
  nn::LayerNorm<T> ln_;
  nn::Linear<T> out_;
  bool trainable_ = true;
};

/// Average-pools a crop into a (grid * grid * 3) row.
template <class T>
Mat<T> pool_crops(const std::vector<Image>& crops, int grid) {
  const int cell = kFaceCropSize / grid;
  Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(crops.size()), grid * grid * 3);
  for (std::size_t n = 0; n < crops.size(); ++n) {
    const Image& im = crops[n];
    if (im.width != kFaceCropSize || im.height != kFaceCropSize || im.channels != 3)
      fail(ErrorCode::kShapeMismatch, "face crops must be 96x96x3");
    for (int y = 0; y < kFaceCropSize; ++y) {
      for (int x = 0; x < kFaceCropSize; ++x) {
        const int col = ((y / cell) * grid + x / cell) * 3;
        for (int c = 0; c < 3; ++c) out(static_cast<Eigen::Index>(n), col + c) += static_cast<T>(im.at(x, y, c));
      }
    }
  }
  return out / static_cast<T>(cell * cell);
}

template <class T>
class FaceEncoder {
 public:
  FaceEncoder() = default;
  FaceEncoder(const FaceEncoderConfig& cfg, std::mt19937_64& rng,
              std::shared_ptr<const FrameBackboneAdapter> external = nullptr)
      : cfg_(cfg), external_(std::move(external)) {
    cfg_.validate();
    const int in_width = cfg_.frame_backbone == Backbone::kExternalAdapter
                             ? (external_ ? external_->width() : 0)
                             : cfg_.pool_grid * cfg_.pool_grid * 3;
    if (cfg_.frame_backbone == Backbone::kExternalAdapter && !external_)
      fail(ErrorCode::kConfigError, "external frame backbone requested but none supplied");
    frame1_ = nn::Linear<T>("face_encoder.frame.fc1", in_width, cfg_.d_frame, rng);
    frame2_ = nn::Linear<T>("face_encoder.frame.fc2", cfg_.d_frame, cfg_.d_frame, rng);
    in_proj_ = nn::Linear<T>("face_encoder.temporal.in_proj", cfg_.d_frame, cfg_.d_visual, rng);
    for (int i = 0; i < cfg_.temporal_layers; ++i)
      blocks_.emplace_back("face_encoder.temporal.block" + std::to_string(i), cfg_.d_visual, cfg_.temporal_heads,
                           rng);
    ln_ = nn::LayerNorm<T>("face_encoder.temporal.ln_out", cfg_.d_visual);
    queries_ = ag::Parameter<T>(
        "face_encoder.queries",
        nn::random_normal<T>(cfg_.n_queries, cfg_.d_visual, 1.0 / std::sqrt(static_cast<double>(cfg_.d_visual)), rng),
        ag::ParamKind::kQuery);
  }

  /// One feature row per crop; row i depends on crop i alone.
  ag::Var<T> encode_frames(ag::Tape<T>& tape, const FaceCropSequence& seq) const {
    if (seq.crops.empty()) fail(ErrorCode::kEmptyInput, "no face crops");
    auto x = cfg_.frame_backbone == Backbone::kExternalAdapter
                 ? ag::constant<T>(external_->encode(seq.crops).template cast<T>())
                 : ag::constant<T>(pool_crops<T>(seq.crops, cfg_.pool_grid));
    return frame2_(tape, ag::gelu(frame1_(tape, x)));
  }

  /// Learnable-query pooling: n_queries x d_visual for any number of frames.
  ag::Var<T> temporal_pool(ag::Tape<T>& tape, const ag::Var<T>& frame_features) const {
    if (frame_features.rows() == 0) fail(ErrorCode::kEmptyInput, "temporal pooling needs at least one frame");
    auto mem = in_proj_(tape, frame_features);
    if (cfg_.positional_encoding) mem = ag::add(mem, ag::constant<T>(nn::sinusoid<T>(mem.rows(), mem.cols())));
    auto q = tape(queries_);
    for (const auto& b : blocks_) q = b(tape, q, mem);
    return ln_(tape, q);
  }

  ag::Var<T> operator()(ag::Tape<T>& tape, const FaceCropSequence& seq) const {
    return temporal_pool(tape, encode_frames(tape, seq));
  }

  const FaceEncoderConfig& config() const { return cfg_; }
  bool trainable() const { return trainable_; }
  ag::Parameter<T>& queries() { return queries_; }

  template <class F>
  void for_each_frame_param(F&& f) {
    frame1_.for_each_param(f);
    frame2_.for_each_param(f);
  }
  template <class F>
  void for_each_temporal_param(F&& f) {
    in_proj_.for_each_param(f);
    for (auto& b : blocks_) b.for_each_param(f);
    ln_.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) {
    for_each_frame_param(f);
    for_each_temporal_param(f);
    f(queries_);
  }

  void set_trainable(bool flag) {
    trainable_ = flag;
    for_each_param([flag](ag::Parameter<T>& p) { p.trainable = flag; });
  }

 private:
  FaceEncoderConfig cfg_;
  std::shared_ptr<const FrameBackboneAdapter> external_;
  nn::Linear<T> frame1_, frame2_;
  nn::Linear<T> in_proj_;
  std::vector<nn::CrossBlock<T>> blocks_;
  nn::LayerNorm<T> ln_;
  ag::Parameter<T> queries_;
  bool trainable_ = true;
};

}  // namespace avemo
