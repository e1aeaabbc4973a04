#pragma once

// The full model bundle (encoders, projections, decoder) and its checkpoint
// directory:
//
//   config.json     format version, model config, prompt-set hash, stage
//                   provenance, config hash
//   base.bin        every non-adapter parameter (biases/norms at their
//                   pre-adapter values)
//   adapters.bin    LoRA A/B plus the tuned biases/norms, only when attached
//   manifest.json   name, group and shape of every stored tensor
//   tokenizer.json  tokenizer spec
//   prompts.txt     the prompt set the checkpoint was trained with

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "avemo/encoders.hpp"
#include "avemo/language_model.hpp"
#include "avemo/prompts.hpp"

namespace avemo {

inline constexpr int kCheckpointFormat = 1;

inline const char* to_string(Backbone b) { return b == Backbone::kTinyBuiltin ? "tiny_builtin" : "external_adapter"; }
inline Backbone parse_backbone(const std::string& s) {
  if (s == "tiny_builtin") return Backbone::kTinyBuiltin;
  if (s == "external_adapter") return Backbone::kExternalAdapter;
  fail(ErrorCode::kConfigError, "unknown backbone " + s);
}

struct ModelConfig {
  SpeechEncoderConfig speech;
  FaceEncoderConfig face;
  DecoderConfig decoder;
  LoraConfig lora;
  bool audio_first = true;
  std::uint64_t seed = 0;
  std::vector<std::string> emotions = EmotionVocabulary::standard().labels();
  std::string default_emotion = "neutral";

  EmotionVocabulary vocabulary() const { return {emotions, default_emotion}; }
  AssembleOptions assemble_options() const { return {decoder.context_len, audio_first, true}; }

  /// Small enough for CPU overfitting runs in seconds to minutes.
  static ModelConfig tiny() {
    ModelConfig c;
    c.speech.d_model = 64;
    c.speech.n_layers = 1;
    c.speech.n_heads = 4;
    c.speech.d_audio = 64;
    c.face.d_frame = 32;
    c.face.d_visual = 32;
    c.face.n_queries = 16;
    c.face.temporal_layers = 2;
    c.face.temporal_heads = 4;
    c.decoder.d_model = 96;
    c.decoder.n_layers = 3;
    c.decoder.n_heads = 4;
    return c;
  }

  void validate() const {
    speech.validate();
    face.validate();
    decoder.validate();
    if (lora.rank < 1) fail(ErrorCode::kConfigError, "lora rank must be >= 1");
    (void)vocabulary();
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["speech"] = {{"n_mels", c.speech.n_mels},     {"d_model", c.speech.d_model}, {"n_layers", c.speech.n_layers},
                 {"n_heads", c.speech.n_heads},   {"d_audio", c.speech.d_audio},
                 {"backbone", to_string(c.speech.backbone)}};
  j["face"] = {{"frame_backbone", to_string(c.face.frame_backbone)},
               {"d_frame", c.face.d_frame},
               {"n_queries", c.face.n_queries},
               {"d_visual", c.face.d_visual},
               {"temporal_layers", c.face.temporal_layers},
               {"temporal_heads", c.face.temporal_heads},
               {"pool_grid", c.face.pool_grid},
               {"positional_encoding", c.face.positional_encoding}};
  j["decoder"] = {{"d_model", c.decoder.d_model},       {"n_layers", c.decoder.n_layers},
                  {"n_heads", c.decoder.n_heads},       {"vocab_size", c.decoder.vocab_size},
                  {"context_len", c.decoder.context_len}, {"backbone", "tiny_builtin"}};
  j["lora"] = {{"rank", c.lora.rank},
               {"alpha", c.lora.alpha},
               {"targets", std::vector<std::string>(c.lora.targets.begin(), c.lora.targets.end())},
               {"train_bias_and_norm", c.lora.train_bias_and_norm}};
  j["audio_first"] = c.audio_first;
  j["seed"] = c.seed;
  j["emotions"] = c.emotions;
  j["default_emotion"] = c.default_emotion;
  return j;
}

/// Missing keys keep the defaults of `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c = {}) {
  try {
    if (auto s = j.find("speech"); s != j.end()) {
      c.speech.n_mels = s->value("n_mels", c.speech.n_mels);
      c.speech.d_model = s->value("d_model", c.speech.d_model);
      c.speech.n_layers = s->value("n_layers", c.speech.n_layers);
      c.speech.n_heads = s->value("n_heads", c.speech.n_heads);
      c.speech.d_audio = s->value("d_audio", c.speech.d_audio);
      if (s->contains("backbone")) c.speech.backbone = parse_backbone((*s)["backbone"]);
    }
    if (auto f = j.find("face"); f != j.end()) {
      if (f->contains("frame_backbone")) c.face.frame_backbone = parse_backbone((*f)["frame_backbone"]);
      c.face.d_frame = f->value("d_frame", c.face.d_frame);
      c.face.n_queries = f->value("n_queries", c.face.n_queries);
      c.face.d_visual = f->value("d_visual", c.face.d_visual);
      c.face.temporal_layers = f->value("temporal_layers", c.face.temporal_layers);
      c.face.temporal_heads = f->value("temporal_heads", c.face.temporal_heads);
      c.face.pool_grid = f->value("pool_grid", c.face.pool_grid);
      c.face.positional_encoding = f->value("positional_encoding", c.face.positional_encoding);
    }
    if (auto d = j.find("decoder"); d != j.end()) {
      c.decoder.d_model = d->value("d_model", c.decoder.d_model);
      c.decoder.n_layers = d->value("n_layers", c.decoder.n_layers);
      c.decoder.n_heads = d->value("n_heads", c.decoder.n_heads);
      c.decoder.vocab_size = d->value("vocab_size", c.decoder.vocab_size);
      c.decoder.context_len = d->value("context_len", c.decoder.context_len);
      if (d->value("backbone", std::string("tiny_builtin")) != "tiny_builtin")
        c.decoder.backbone = DecoderBackbone::kExternalAdapter;
    }
    if (auto l = j.find("lora"); l != j.end()) {
      c.lora.rank = l->value("rank", c.lora.rank);
      c.lora.alpha = l->value("alpha", c.lora.alpha);
      if (l->contains("targets")) {
        c.lora.targets.clear();
        for (const auto& t : (*l)["targets"]) c.lora.targets.insert(t.get<std::string>());
      }
      c.lora.train_bias_and_norm = l->value("train_bias_and_norm", c.lora.train_bias_and_norm);
    }
    c.audio_first = j.value("audio_first", c.audio_first);
    c.seed = j.value("seed", c.seed);
    if (j.contains("emotions")) c.emotions = j["emotions"].get<std::vector<std::string>>();
    c.default_emotion = j.value("default_emotion", c.default_emotion);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfigError, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Named parameter groups used for freezing and checkpoint manifests.
namespace group {
inline constexpr const char* kSpeechEncoder = "speech_encoder";
inline constexpr const char* kAudioProjection = "projections.audio";
inline constexpr const char* kFaceFrame = "face_encoder.frame";
inline constexpr const char* kFaceTemporal = "face_encoder.temporal";
inline constexpr const char* kFaceQueries = "face_encoder.queries";
inline constexpr const char* kVisualProjection = "projections.visual";
inline constexpr const char* kDecoderBase = "decoder.base";
inline constexpr const char* kDecoderBiasNorm = "decoder.bias_norm";
inline constexpr const char* kDecoderLora = "decoder.lora";
inline const std::vector<std::string>& all() {
  static const std::vector<std::string> g{kSpeechEncoder, kAudioProjection,  kFaceFrame,
                                          kFaceTemporal,  kFaceQueries,      kVisualProjection,
                                          kDecoderBase,   kDecoderBiasNorm,  kDecoderLora};
  return g;
}
}  // namespace group

template <class T = float>
class AvEmoModel {
 public:
  AvEmoModel() : AvEmoModel(ModelConfig{}) {}
  explicit AvEmoModel(const ModelConfig& cfg, std::string prompt_text = std::string(kDefaultPromptSet))
      : cfg_(cfg), vocab_(cfg.vocabulary()), prompts_(PromptSet::parse(prompt_text)), prompt_source_(prompt_text) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    speech_ = SpeechEncoder<T>(cfg_.speech, rng);
    face_ = FaceEncoder<T>(cfg_.face, rng);
    audio_proj_ = Projection<T>(FeatureKind::kAudio, cfg_.speech.d_audio, cfg_.decoder.d_model, rng);
    visual_proj_ = Projection<T>(FeatureKind::kVisual, cfg_.face.d_visual, cfg_.decoder.d_model, rng);
    decoder_ = Decoder<T>(cfg_.decoder, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const EmotionVocabulary& vocabulary() const { return vocab_; }
  const Tokenizer& tokenizer() const { return tok_; }
  const PromptSet& prompts() const { return prompts_; }
  SpeechEncoder<T>& speech() { return speech_; }
  const SpeechEncoder<T>& speech() const { return speech_; }
  FaceEncoder<T>& face() { return face_; }
  const FaceEncoder<T>& face() const { return face_; }
  Projection<T>& audio_projection() { return audio_proj_; }
  const Projection<T>& audio_projection() const { return audio_proj_; }
  Projection<T>& visual_projection() { return visual_proj_; }
  const Projection<T>& visual_projection() const { return visual_proj_; }
  Decoder<T>& decoder() { return decoder_; }
  const Decoder<T>& decoder() const { return decoder_; }
  nlohmann::json& provenance() { return provenance_; }
  const nlohmann::json& provenance() const { return provenance_; }

  /// Projected audio embeddings (T_a x d_model).
  ag::Var<T> encode_audio(ag::Tape<T>& tape, const MatF& mel) const {
    return audio_proj_(tape, speech_(tape, mel.template cast<T>()));
  }
  /// Projected visual embeddings (n_queries x d_model).
  ag::Var<T> encode_video(ag::Tape<T>& tape, const FaceCropSequence& crops) const {
    return visual_proj_(tape, face_(tape, crops));
  }

  Eigen::Index audio_rows(Eigen::Index mel_frames) const {
    return cfg_.speech.backbone == Backbone::kTinyBuiltin ? SpeechEncoder<T>::output_length(mel_frames) : -1;
  }
  Eigen::Index video_rows() const { return cfg_.face.n_queries; }

  template <class F>
  void for_each_group_param(const std::string& g, F&& f) {
    if (g == group::kSpeechEncoder) {
      speech_.for_each_param(f);
    } else if (g == group::kAudioProjection) {
      audio_proj_.for_each_param(f);
    } else if (g == group::kFaceFrame) {
      face_.for_each_frame_param(f);
    } else if (g == group::kFaceTemporal) {
      face_.for_each_temporal_param(f);
    } else if (g == group::kFaceQueries) {
      f(face_.queries());
    } else if (g == group::kVisualProjection) {
      visual_proj_.for_each_param(f);
    } else if (g == group::kDecoderBase || g == group::kDecoderBiasNorm || g == group::kDecoderLora) {
      decoder_.for_each_param([&](ag::Parameter<T>& p) {
        if (group_of_decoder_param(p) == g) f(p);
      });
    } else {
      fail(ErrorCode::kConfigError, "unknown parameter group " + g);
    }
  }

  template <class F>
  void for_each_param(F&& f) {
    for (const auto& g : group::all()) for_each_group_param(g, f);
  }

  std::vector<ag::Parameter<T>*> group_params(const std::string& g) {
    std::vector<ag::Parameter<T>*> out;
    for_each_group_param(g, [&](ag::Parameter<T>& p) { out.push_back(&p); });
    return out;
  }

  std::string group_checksum(const std::string& g) {
    std::vector<const Mat<T>*> mats;
    for_each_group_param(g, [&](ag::Parameter<T>& p) { mats.push_back(&p.value); });
    return checksum(mats);
  }

  /// Only the listed groups stay trainable.
  void set_trainable_groups(const std::set<std::string>& groups) {
    for (const auto& g : group::all()) {
      const bool on = groups.count(g) != 0;
      for_each_group_param(g, [on](ag::Parameter<T>& p) { p.trainable = on; });
    }
  }

  /// Stable digest of the whole parameter state plus configuration.
  std::string checkpoint_hash() {
    Sha256 h;
    h.update(to_json(cfg_).dump());
    for (const auto& g : group::all()) h.update(group_checksum(g));
    return h.hex();
  }

  // --- checkpoint directory ------------------------------------------------

  void save(const std::filesystem::path& dir) {
    const auto targets = decoder_.lora_targets({"q", "k", "v", "o"});
    if (std::any_of(targets.begin(), targets.end(), [](auto* l) { return l->merged(); }))
      fail(ErrorCode::kPrecondition, "unmerge adapters before saving");
    std::filesystem::create_directories(dir);
    TensorBundle base, adapters;
    nlohmann::json manifest = nlohmann::json::array();
    const auto& snapshot = decoder_.bias_norm_snapshot();
    for (const auto& g : group::all()) {
      for_each_group_param(g, [&](ag::Parameter<T>& p) {
        const MatF v = p.value.template cast<float>();
        if (g == group::kDecoderLora) {
          adapters.put(p.name, v);
        } else if (g == group::kDecoderBiasNorm && decoder_.lora()) {
          adapters.put(p.name, v);
          base.put(p.name, snapshot.at(p.name).template cast<float>());
        } else {
          base.put(p.name, v);
        }
        manifest.push_back({{"name", p.name}, {"group", g}, {"shape", {p.value.rows(), p.value.cols()}}});
      });
    }
    nlohmann::json cfg;
    cfg["format_version"] = kCheckpointFormat;
    cfg["model"] = to_json(cfg_);
    cfg["config_hash"] = sha256_hex(to_json(cfg_).dump());
    cfg["prompt_set_hash"] = prompts_.hash();
    cfg["prompt_set_version"] = prompts_.version();
    cfg["provenance"] = provenance_;
    cfg["adapters_attached"] = decoder_.lora().has_value();
    cfg["checkpoint_hash"] = checkpoint_hash();
    atomic_write(dir / "base.bin", base.serialize());
    if (decoder_.lora()) {
      atomic_write(dir / "adapters.bin", adapters.serialize());
    } else {
      std::filesystem::remove(dir / "adapters.bin");
    }
    atomic_write(dir / "manifest.json", manifest.dump(1));
    atomic_write(dir / "tokenizer.json", tok_.spec().dump(1));
    atomic_write(dir / "prompts.txt", prompt_source_);
    atomic_write(dir / "config.json", cfg.dump(2));
  }

  static AvEmoModel load(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "config.json"))
      fail(ErrorCode::kIoError, "no checkpoint at " + dir.string());
    nlohmann::json cfg;
    try {
      cfg = nlohmann::json::parse(read_file(dir / "config.json"));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kDecodeError, std::string("checkpoint config: ") + e.what());
    }
    if (cfg.value("format_version", 0) != kCheckpointFormat)
      fail(ErrorCode::kDecodeError, "unsupported checkpoint format version");
    const std::string prompt_text = std::filesystem::exists(dir / "prompts.txt") ? read_file(dir / "prompts.txt")
                                                                                 : std::string(kDefaultPromptSet);
    AvEmoModel m(model_config_from_json(cfg["model"]), prompt_text);
    if (m.prompts_.hash() != cfg.value("prompt_set_hash", std::string()))
      fail(ErrorCode::kDecodeError, "checkpoint prompt set does not match its recorded hash");
    m.provenance_ = cfg.value("provenance", nlohmann::json::array());
    const auto base = TensorBundle::parse(read_file(dir / "base.bin"));
    auto assign = [](ag::Parameter<T>& p, const MatF& v) {
      if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
        fail(ErrorCode::kShapeMismatch, "checkpoint tensor " + p.name + " has the wrong shape");
      p.value = v.template cast<T>();
    };
    m.for_each_param([&](ag::Parameter<T>& p) { assign(p, base.get(p.name)); });
    if (cfg.value("adapters_attached", false)) {
      const auto adapters = TensorBundle::parse(read_file(dir / "adapters.bin"));
      m.decoder_.restore_lora(m.cfg_.lora);
      m.for_each_group_param(group::kDecoderLora, [&](ag::Parameter<T>& p) { assign(p, adapters.get(p.name)); });
      m.for_each_group_param(group::kDecoderBiasNorm,
                             [&](ag::Parameter<T>& p) { assign(p, adapters.get(p.name)); });
    }
    return m;
  }

 private:
  static std::string group_of_decoder_param(const ag::Parameter<T>& p) {
    switch (p.kind) {
      case ag::ParamKind::kLora: return group::kDecoderLora;
      case ag::ParamKind::kBias:
      case ag::ParamKind::kNorm: return group::kDecoderBiasNorm;
      default: return group::kDecoderBase;
    }
  }

  ModelConfig cfg_;
  EmotionVocabulary vocab_;
  Tokenizer tok_;
  PromptSet prompts_;
  std::string prompt_source_;
  SpeechEncoder<T> speech_;
  FaceEncoder<T> face_;
  Projection<T> audio_proj_, visual_proj_;
  Decoder<T> decoder_;
  nlohmann::json provenance_ = nlohmann::json::array();
};

}  // namespace avemo
