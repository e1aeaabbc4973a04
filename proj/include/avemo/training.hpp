#pragma once

// Staged curriculum.
//
//   stage 0  text-only language-model warm-up of the builtin decoder (it has
//            no pretrained weights); encoders untouched
//   stage 1  speech encoder + audio projection on asr / asr+ser targets,
//            decoder frozen
//   stage 2  face encoder + visual projection on emr / emr+emd targets,
//            decoder frozen
//   stage 3  LoRA adapters (+ decoder biases and norms) on whole dialogues,
//            everything else frozen
//
// Frozen groups are checksummed before training and re-checked every
// eval_every steps.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "avemo/model.hpp"
#include "avemo/optim.hpp"
#include "avemo/preprocess.hpp"

namespace avemo {

enum class Objective { kAsr, kSer, kEmr, kEmd, kDialogue, kText };
enum class LossReduction { kMeanPerToken, kSumPerRound };

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::kAsr: return "asr";
    case Objective::kSer: return "ser";
    case Objective::kEmr: return "emr";
    case Objective::kEmd: return "emd";
    case Objective::kDialogue: return "dialogue";
    case Objective::kText: return "text";
  }
  return "";
}
inline Objective parse_objective(std::string_view s) {
  for (Objective o : {Objective::kAsr, Objective::kSer, Objective::kEmr, Objective::kEmd, Objective::kDialogue,
                      Objective::kText})
    if (to_string(o) == s) return o;
  fail(ErrorCode::kConfigError, "unknown objective " + std::string(s));
}

/// Which user-turn channels a dialogue example carries. `text` replaces the
/// feature spans with the transcript.
struct Modality {
  bool audio = true;
  bool video = true;
  bool text = false;

  static Modality parse(std::string_view s) {
    Modality m{false, false, false};
    for (char c : s) {
      switch (c) {
        case 'a': case 'A': m.audio = true; break;
        case 'v': case 'V': m.video = true; break;
        case 't': case 'T': m.text = true; break;
        case '+': case ',': break;
        default: fail(ErrorCode::kConfigError, "modality letters are a, v, t");
      }
    }
    if (!m.audio && !m.video && !m.text) fail(ErrorCode::kConfigError, "empty modality set");
    return m;
  }
  std::string str() const { return std::string(audio ? "a" : "") + (video ? "v" : "") + (text ? "t" : ""); }
};

struct StageConfig {
  int stage = 1;
  std::set<Objective> objectives;
  std::set<std::string> trainable;
  OptimizerConfig optimizer;
  int batch_size = 32;
  int max_steps = 500;
  int eval_every = 50;
  LossReduction loss_reduction = LossReduction::kMeanPerToken;
  Modality modality;
  bool full_metadata = false;  // stage-1 ser targets carry the whole metadata sentence
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> metrics_log;
  /// Stop early once the smoothed loss falls below this (0 disables).
  double target_loss = 0;

  static std::set<std::string> default_groups(int stage, bool bias_and_norm = true) {
    switch (stage) {
      case 0: return {group::kDecoderBase, group::kDecoderBiasNorm};
      case 1: return {group::kSpeechEncoder, group::kAudioProjection};
      case 2: return {group::kFaceFrame, group::kFaceTemporal, group::kFaceQueries, group::kVisualProjection};
      case 3:
        return bias_and_norm ? std::set<std::string>{group::kDecoderLora, group::kDecoderBiasNorm}
                             : std::set<std::string>{group::kDecoderLora};
      default: fail(ErrorCode::kConfigError, "stage must be 0..3");
    }
  }

  static StageConfig defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    c.trainable = default_groups(stage);
    switch (stage) {
      case 0: c.objectives = {Objective::kText}; break;
      case 1: c.objectives = {Objective::kAsr, Objective::kSer}; break;
      case 2: c.objectives = {Objective::kEmr, Objective::kEmd}; break;
      case 3: c.objectives = {Objective::kDialogue}; break;
      default: fail(ErrorCode::kConfigError, "stage must be 0..3");
    }
    c.optimizer.warmup_steps = 20;
    c.optimizer.peak_lr = stage == 3 ? 3e-3 : 1e-3;
    c.optimizer.min_lr = c.optimizer.peak_lr * 0.1;
    return c;
  }

  void validate() const {
    if (stage < 0 || stage > 3) fail(ErrorCode::kConfigError, "stage must be 0..3");
    if (objectives.empty()) fail(ErrorCode::kConfigError, "no objectives");
    const std::map<int, std::set<Objective>> allowed{{0, {Objective::kText}},
                                                      {1, {Objective::kAsr, Objective::kSer}},
                                                      {2, {Objective::kEmr, Objective::kEmd}},
                                                      {3, {Objective::kDialogue}}};
    for (auto o : objectives)
      if (!allowed.at(stage).count(o))
        fail(ErrorCode::kConfigError, "objective " + std::string(to_string(o)) + " does not belong to stage " +
                                          std::to_string(stage));
    if (stage == 1 && !objectives.count(Objective::kAsr))
      fail(ErrorCode::kConfigError, "stage 1 always trains asr; ser is the optional addition");
    if (stage == 2 && !objectives.count(Objective::kEmr))
      fail(ErrorCode::kConfigError, "stage 2 always trains emr; emd is the optional addition");
    if (batch_size < 1 || max_steps < 0 || eval_every < 1) fail(ErrorCode::kConfigError, "bad step settings");
    if (trainable.empty()) fail(ErrorCode::kConfigError, "no trainable groups");
    const auto permitted = default_groups(stage);
    for (const auto& g : trainable)
      if (!permitted.count(g)) fail(ErrorCode::kConfigError, "group " + g + " is frozen in stage " + std::to_string(stage));
    optimizer.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["stage"] = stage;
    for (auto o : objectives) j["objectives"].push_back(std::string(to_string(o)));
    j["trainable"] = std::vector<std::string>(trainable.begin(), trainable.end());
    j["optimizer"] = {{"kind", "adamw"},
                      {"peak_lr", optimizer.peak_lr},
                      {"min_lr", optimizer.min_lr},
                      {"weight_decay", optimizer.weight_decay},
                      {"warmup_steps", optimizer.warmup_steps},
                      {"schedule", "cosine"},
                      {"max_grad_norm", optimizer.max_grad_norm}};
    j["batch_size"] = batch_size;
    j["max_steps"] = max_steps;
    j["eval_every"] = eval_every;
    j["loss_reduction"] = loss_reduction == LossReduction::kMeanPerToken ? "mean_per_token" : "sum_per_round";
    j["modality"] = modality.str();
    j["full_metadata"] = full_metadata;
    j["seed"] = seed;
    j["target_loss"] = target_loss;
    return j;
  }
  std::string hash() const { return sha256_hex(to_json().dump()); }
};

/// Feature source of one span in an example.
struct SpanSource {
  FeatureKind kind = FeatureKind::kAudio;
  const UtteranceRecord* record = nullptr;
};

struct TrainingExample {
  std::string id;
  MixedSequence seq;
  std::vector<SpanSource> sources;  // parallel to seq.spans
  int rounds = 1;
};

/// Loss over the positions selected by `mask`; rows are log-probabilities.
template <class T>
T masked_nll(const Mat<T>& logprob, std::span<const int> targets, const std::vector<bool>& mask,
             LossReduction reduction) {
  return ag::masked_nll(ag::constant<T>(logprob), targets, mask, reduction == LossReduction::kMeanPerToken)
      .value()(0, 0);
}

namespace detail {

inline std::function<Eigen::Index(FeatureKind, int)> row_counter(const ModelConfig& cfg, FeatureStore& store,
                                                                  std::map<std::pair<FeatureKind, int>, SpanSource>& src) {
  return [&cfg, &store, &src](FeatureKind kind, int round) -> Eigen::Index {
    const auto it = src.find({kind, round});
    if (it == src.end()) fail(ErrorCode::kInvariantViolation, "span without a source");
    if (kind == FeatureKind::kVisual) {
      (void)store.face(*it->second.record);  // decodes and validates the clip
      return cfg.face.n_queries;
    }
    return SpeechEncoder<float>::output_length(store.mel(*it->second.record).rows());
  };
}

inline TrainingExample finish(std::string id, const PromptTemplate& prompt, const ModelConfig& cfg, FeatureStore& store,
                              std::map<std::pair<FeatureKind, int>, SpanSource> src, int rounds) {
  TrainingExample ex;
  ex.id = std::move(id);
  ex.rounds = rounds;
  ex.seq = assemble_input(prompt, row_counter(cfg, store, src), Tokenizer{}, cfg.assemble_options());
  for (const auto& sp : ex.seq.spans) ex.sources.push_back(src.at({sp.kind, sp.round}));
  return ex;
}

}  // namespace detail

inline TrainingExample build_stage1_example(const UtteranceRecord& rec, Stage1Task task, const ModelConfig& cfg,
                                            const PromptSet& ps, FeatureStore& store, bool full_metadata = false,
                                            std::string id = {}) {
  if (!rec.audio_ref) fail(ErrorCode::kMissingField, "stage-1 example needs audio");
  if (task == Stage1Task::kAsrSer && rec.emotion.empty()) fail(ErrorCode::kMissingField, "ser target needs an emotion");
  auto p = build_stage1_prompt(ps, task);
  p.segments.push_back({SegmentKind::kTarget, stage1_target(rec, task, full_metadata), 0, true});
  return detail::finish(std::move(id), p, cfg, store, {{{FeatureKind::kAudio, 0}, {FeatureKind::kAudio, &rec}}}, 1);
}

inline TrainingExample build_stage2_example(const UtteranceRecord& rec, Stage2Task task, const ModelConfig& cfg,
                                            const PromptSet& ps, FeatureStore& store, std::string id = {}) {
  if (!rec.video_ref) fail(ErrorCode::kMissingField, "stage-2 example needs video");
  if (rec.emotion.empty()) fail(ErrorCode::kMissingField, "emr target needs an emotion");
  if (task == Stage2Task::kEmrEmd && !rec.facial_description)
    fail(ErrorCode::kMissingField, "emd target needs a facial description");
  auto p = build_stage2_prompt(ps, task);
  p.segments.push_back({SegmentKind::kTarget, stage2_target(rec, task), 0, true});
  return detail::finish(std::move(id), p, cfg, store, {{{FeatureKind::kVisual, 0}, {FeatureKind::kVisual, &rec}}}, 1);
}

/// Dialogue prompt: `history` rounds with their true AI replies, then the
/// `current` user turn and the AI cue.
struct DialogueContext {
  PromptTemplate prompt;
  std::map<std::pair<FeatureKind, int>, SpanSource> sources;
};

/// With `require_media` false a turn simply omits media it does not have.
inline DialogueContext dialogue_context(std::span<const RoundView> history, const UtteranceRecord& current,
                                        const Modality& mod, const ModelConfig& cfg, const PromptSet& ps,
                                        bool history_loss, bool require_media = true) {
  const auto vocab = cfg.vocabulary();
  DialogueContext ctx;
  auto user_view = [&](const UtteranceRecord& u, int r) {
    UserTurnView v;
    v.audio = mod.audio && (require_media || u.audio_ref);
    v.video = mod.video && (require_media || u.video_ref);
    if (v.audio && !u.audio_ref) fail(ErrorCode::kMissingField, "user turn lacks audio for the requested modality");
    if (v.video && !u.video_ref) fail(ErrorCode::kMissingField, "user turn lacks video for the requested modality");
    if (mod.text) v.transcript = u.transcript;
    if (v.audio) ctx.sources[{FeatureKind::kAudio, r}] = {FeatureKind::kAudio, &u};
    if (v.video) ctx.sources[{FeatureKind::kVisual, r}] = {FeatureKind::kVisual, &u};
    return v;
  };
  std::vector<std::pair<UserTurnView, AiTurnView>> turns;
  int r = 0;
  for (const auto& rv : history) {
    auto v = user_view(*rv.user, r++);
    turns.push_back({std::move(v), {format_ai_target(rv.ai->emotion, rv.ai->transcript, vocab)}});
  }
  ctx.prompt = build_stage3_prompt(ps, turns, user_view(current, r), history_loss);
  return ctx;
}

/// All rounds of a dialogue in one sequence with every AI reply as a target.
/// `first_round` drops earlier rounds (the overflow policy).
inline TrainingExample build_stage3_example(const Dialogue& d, const Modality& mod, const ModelConfig& cfg,
                                            const PromptSet& ps, FeatureStore& store, std::size_t first_round = 0) {
  const auto rounds = split_rounds(d);
  if (rounds.empty()) fail(ErrorCode::kMissingField, "dialogue has no complete round");
  if (first_round >= rounds.size()) fail(ErrorCode::kContextOverflow, "no rounds left after truncation");
  const auto& last = rounds.back();
  auto ctx = dialogue_context(std::span(rounds).subspan(first_round, rounds.size() - 1 - first_round), *last.user, mod,
                              cfg, ps, true);
  const int r = static_cast<int>(rounds.size() - 1 - first_round);
  ctx.prompt.segments.push_back(
      {SegmentKind::kAiTurn, format_ai_target(last.ai->emotion, last.ai->transcript, cfg.vocabulary()), r, true});
  return detail::finish(d.dialogue_id, ctx.prompt, cfg, store, std::move(ctx.sources),
                        static_cast<int>(rounds.size() - first_round));
}

/// Generation prefix for replying to `current` after `history`. Oldest rounds
/// are dropped until the prefix plus `reserve` tokens fits the context.
inline TrainingExample build_reply_prefix(std::span<const RoundView> history, const UtteranceRecord& current,
                                          const Modality& mod, const ModelConfig& cfg, const PromptSet& ps,
                                          FeatureStore& store, int reserve, std::string id = {}) {
  auto opt = cfg.assemble_options();
  opt.context_len -= reserve;
  if (opt.context_len <= 0) fail(ErrorCode::kContextOverflow, "generation budget exceeds the context");
  for (std::size_t first = 0;; ++first) {
    auto ctx = dialogue_context(history.subspan(first), current, mod, cfg, ps, false);
    std::map<std::pair<FeatureKind, int>, SpanSource> src = ctx.sources;
    try {
      TrainingExample ex;
      ex.id = id;
      ex.rounds = static_cast<int>(history.size() - first + 1);
      ex.seq = assemble_input(ctx.prompt, detail::row_counter(cfg, store, src), Tokenizer{}, opt);
      for (const auto& sp : ex.seq.spans) ex.sources.push_back(src.at({sp.kind, sp.round}));
      return ex;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kContextOverflow || first >= history.size()) throw;
    }
  }
}

/// Drops the oldest whole rounds until the dialogue fits the context.
inline TrainingExample build_stage3_example_fitted(const Dialogue& d, const Modality& mod, const ModelConfig& cfg,
                                                   const PromptSet& ps, FeatureStore& store) {
  const std::size_t n = split_rounds(d).size();
  for (std::size_t first = 0;; ++first) {
    try {
      return build_stage3_example(d, mod, cfg, ps, store, first);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kContextOverflow || first + 1 >= n) throw;
      spdlog::warn("dialogue {} overflows the context; dropping round {}", d.dialogue_id, first);
    }
  }
}

/// Text-only warm-up sequences: each stage target after its instruction,
/// plus dialogues with transcripts standing in for the user media. SER and
/// EMR targets are written once per vocabulary label, so the decoder learns
/// the label format without learning which label goes with which transcript;
/// without media that pairing is noise it would otherwise memorize.
inline std::vector<TrainingExample> build_text_examples(const DatasetManifest& m, const ModelConfig& cfg,
                                                        const PromptSet& ps, FeatureStore& store) {
  const auto labels = cfg.vocabulary().labels();
  std::vector<TrainingExample> out;
  auto add = [&](std::string id, const std::string& instruction, const std::string& target) {
    PromptTemplate p;
    p.segments = {{SegmentKind::kText, instruction + "\n", 0, false}, {SegmentKind::kTarget, target, 0, true}};
    out.push_back(detail::finish(std::move(id), p, cfg, store, {}, 1));
  };
  auto utterance = [&](const UtteranceRecord& u, const std::string& id) {
    if (u.speaker != Speaker::kUser) return;
    if (!u.transcript.empty()) {
      add(id + "/asr", ps.text("speech_understanding.asr"), stage1_target(u, Stage1Task::kAsr));
      if (!u.emotion.empty())
        for (const auto& e : labels) {
          UtteranceRecord alt = u;
          alt.emotion = e;
          if (alt.metadata.emotion) alt.metadata.emotion = e;
          add(id + "/ser/" + e, ps.text("speech_understanding.asr_ser"), stage1_target(alt, Stage1Task::kAsrSer));
        }
    }
    if (!u.emotion.empty()) {
      for (const auto& e : labels) {
        UtteranceRecord alt = u;
        alt.emotion = e;
        add(id + "/emr/" + e, ps.text("face_video_understanding.emr"), stage2_target(alt, Stage2Task::kEmr));
      }
      if (u.facial_description)
        add(id + "/emd", ps.text("face_video_understanding.emr_emd"), stage2_target(u, Stage2Task::kEmrEmd));
    }
  };
  for (const auto& rec : m.records) {
    if (const auto* u = rec.utterance()) utterance(*u, rec.id);
    if (const auto* d = rec.dialogue()) {
      for (std::size_t i = 0; i < d->turns.size(); ++i) utterance(d->turns[i], rec.id + "/" + std::to_string(i));
      out.push_back(build_stage3_example(*d, Modality{false, false, true}, cfg, ps, store));
      out.back().id = rec.id + "/dialogue";
    }
  }
  return out;
}

/// Examples for a stage, in manifest order.
inline std::vector<TrainingExample> build_stage_examples(const StageConfig& sc, const DatasetManifest& m,
                                                         const ModelConfig& cfg, const PromptSet& ps,
                                                         FeatureStore& store) {
  if (sc.stage == 0) return build_text_examples(m, cfg, ps, store);
  std::vector<TrainingExample> out;
  auto has = [&](Objective o) { return sc.objectives.count(o) != 0; };
  auto utterance = [&](const ManifestRecord& rec, const UtteranceRecord& u, const std::string& id) {
    if (u.speaker != Speaker::kUser) return;
    if (sc.stage == 1 && u.audio_ref) {
      if (has(Objective::kAsr) && rec.has_task(Task::kAsr))
        out.push_back(build_stage1_example(u, Stage1Task::kAsr, cfg, ps, store, false, id + "/asr"));
      if (has(Objective::kSer) && rec.has_task(Task::kSer))
        out.push_back(build_stage1_example(u, Stage1Task::kAsrSer, cfg, ps, store, sc.full_metadata, id + "/ser"));
    }
    if (sc.stage == 2 && u.video_ref) {
      if (has(Objective::kEmr) && rec.has_task(Task::kEmr))
        out.push_back(build_stage2_example(u, Stage2Task::kEmr, cfg, ps, store, id + "/emr"));
      if (has(Objective::kEmd) && rec.has_task(Task::kEmd)) {
        if (u.facial_description && description_sentence_count(*u.facial_description) != 2)
          spdlog::warn("{}: facial description is not two sentences", id);
        out.push_back(build_stage2_example(u, Stage2Task::kEmrEmd, cfg, ps, store, id + "/emd"));
      }
    }
  };
  for (const auto& rec : m.records) {
    if (const auto* u = rec.utterance()) utterance(rec, *u, rec.id);
    if (const auto* d = rec.dialogue()) {
      if (sc.stage == 3) {
        if (rec.has_task(Task::kDialogue)) out.push_back(build_stage3_example_fitted(*d, sc.modality, cfg, ps, store));
      } else {
        for (std::size_t i = 0; i < d->turns.size(); ++i) utterance(rec, d->turns[i], rec.id + "/" + std::to_string(i));
      }
    }
  }
  return out;
}

/// Manifest must carry at least one record tagged for each stage objective.
inline void check_manifest_tags(const StageConfig& sc, const DatasetManifest& m) {
  auto tagged = [&](Task t) {
    return std::any_of(m.records.begin(), m.records.end(), [t](const ManifestRecord& r) { return r.has_task(t); });
  };
  for (auto o : sc.objectives) {
    std::optional<Task> t;
    switch (o) {
      case Objective::kAsr: t = Task::kAsr; break;
      case Objective::kSer: t = Task::kSer; break;
      case Objective::kEmr: t = Task::kEmr; break;
      case Objective::kEmd: t = Task::kEmd; break;
      case Objective::kDialogue: t = Task::kDialogue; break;
      case Objective::kText: break;
    }
    if (t && !tagged(*t))
      fail(ErrorCode::kPrecondition, "manifest has no record tagged '" + std::string(to_string(*t)) + "' for stage " +
                                         std::to_string(sc.stage));
  }
}

/// Projected feature embeddings for example spans. Features produced only by
/// frozen parameters are computed once and reused as constants.
template <class T>
class FeatureEmbedder {
 public:
  FeatureEmbedder(AvEmoModel<T>& model, FeatureStore& store) : model_(model), store_(store) {}

  ag::Var<T> operator()(ag::Tape<T>& tape, const SpanSource& s) {
    const bool live = tape.grad_enabled() && trainable(s.kind);
    if (!live) {
      const auto& ref = s.kind == FeatureKind::kAudio ? s.record->audio_ref : s.record->video_ref;
      const auto key = std::make_pair(s.kind, ref.value_or(""));
      auto it = cache_.find(key);
      if (it == cache_.end()) {
        ag::Tape<T> frozen(false);
        it = cache_.emplace(key, compute(frozen, s).value()).first;
      }
      return ag::constant<T>(it->second);
    }
    return compute(tape, s);
  }

  void invalidate() { cache_.clear(); }
  void forget(const std::string& media_ref) {
    cache_.erase({FeatureKind::kAudio, media_ref});
    cache_.erase({FeatureKind::kVisual, media_ref});
  }

 private:
  bool trainable(FeatureKind kind) {
    bool any = false;
    auto check = [&any](ag::Parameter<T>& p) { any |= p.trainable; };
    if (kind == FeatureKind::kAudio) {
      model_.for_each_group_param(group::kSpeechEncoder, check);
      model_.for_each_group_param(group::kAudioProjection, check);
    } else {
      for (const char* g : {group::kFaceFrame, group::kFaceTemporal, group::kFaceQueries, group::kVisualProjection})
        model_.for_each_group_param(g, check);
    }
    return any;
  }
  ag::Var<T> compute(ag::Tape<T>& tape, const SpanSource& s) {
    return s.kind == FeatureKind::kAudio ? model_.encode_audio(tape, store_.mel(*s.record))
                                         : model_.encode_video(tape, store_.face(*s.record));
  }

  AvEmoModel<T>& model_;
  FeatureStore& store_;
  std::map<std::pair<FeatureKind, std::string>, Mat<T>> cache_;  // keyed by media reference
};

/// Log-probability rows for an example (L - 1 rows, row t predicts t + 1).
template <class T>
ag::Var<T> example_logprob(ag::Tape<T>& tape, AvEmoModel<T>& model, const TrainingExample& ex,
                           FeatureEmbedder<T>& feats) {
  std::size_t i = 0;
  auto x = model.decoder().embed(tape, ex.seq, [&](const FeatureSpan&) { return feats(tape, ex.sources.at(i++)); });
  auto lp = model.decoder().score(tape, x);
  return ag::slice_rows(lp, 0, lp.rows() - 1);
}

template <class T>
ag::Var<T> example_loss(ag::Tape<T>& tape, AvEmoModel<T>& model, const TrainingExample& ex, FeatureEmbedder<T>& feats,
                        LossReduction reduction) {
  const auto targets = ex.seq.shifted_targets();
  return ag::masked_nll(example_logprob(tape, model, ex, feats), std::span<const int>(targets), ex.seq.shifted_mask(),
                        reduction == LossReduction::kMeanPerToken);
}

struct StepRecord {
  int step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  double final_loss = 0;
  double seconds = 0;
  std::size_t examples = 0;
};

/// Runs one stage in place on `model`.
template <class T>
TrainResult train_stage(const StageConfig& sc, AvEmoModel<T>& model, const DatasetManifest& manifest,
                        FeatureStore& store, const std::function<void(int)>& after_step = {}) {
  sc.validate();
  check_manifest_tags(sc, manifest);
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(sc.seed);

  if (sc.stage == 3 && !model.decoder().lora()) model.decoder().attach_lora(model.config().lora, rng);
  if (sc.stage != 3 && model.decoder().lora())
    fail(ErrorCode::kPrecondition, "adapters are attached; stages 0-2 train the base model");
  model.set_trainable_groups(sc.trainable);

  auto examples = build_stage_examples(sc, manifest, model.config(), model.prompts(), store);
  if (examples.empty()) fail(ErrorCode::kPrecondition, "no training examples for stage " + std::to_string(sc.stage));

  std::map<std::string, std::string> frozen;
  for (const auto& g : group::all())
    if (!sc.trainable.count(g)) frozen[g] = model.group_checksum(g);
  auto check_frozen = [&] {
    for (const auto& [g, sum] : frozen)
      if (model.group_checksum(g) != sum) fail(ErrorCode::kFrozenGroupViolation, "frozen group " + g + " changed");
  };

  std::vector<ag::Parameter<T>*> params;
  model.for_each_param([&](ag::Parameter<T>& p) { params.push_back(&p); });
  AdamW<T> opt(sc.optimizer);
  FeatureEmbedder<T> feats(model, store);

  std::ofstream log;
  if (sc.metrics_log) {
    if (sc.metrics_log->has_parent_path()) std::filesystem::create_directories(sc.metrics_log->parent_path());
    log.open(*sc.metrics_log, std::ios::app);
    if (!log) fail(ErrorCode::kIoError, "cannot open metrics log " + sc.metrics_log->string());
  }

  TrainResult res;
  res.examples = examples.size();
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  double smoothed = -1;
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(sc.batch_size), examples.size());
  for (int step = 0; step < sc.max_steps; ++step) {
    for (auto* p : params) p->zero_grad();
    double total = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const auto& ex = examples[order[cursor++]];
      ag::Tape<T> tape;
      auto loss = example_loss(tape, model, ex, feats, sc.loss_reduction);
      const double v = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(v)) fail(ErrorCode::kNonFiniteLoss, "non-finite loss at step " + std::to_string(step));
      total += v;
      tape.backward(ag::scale(loss, static_cast<T>(1.0 / static_cast<double>(batch))));
    }
    const double lr = learning_rate(sc.optimizer, step, sc.max_steps);
    const double gnorm = opt.step(params, lr);
    if (!std::isfinite(gnorm)) fail(ErrorCode::kNonFiniteLoss, "non-finite gradient at step " + std::to_string(step));
    const double mean = total / static_cast<double>(batch);
    res.steps.push_back({step, mean, lr, gnorm});
    if (log) {
      log << nlohmann::json{{"stage", sc.stage}, {"step", step}, {"loss", mean}, {"lr", lr}, {"grad_norm", gnorm}}.dump()
          << "\n";
      log.flush();
    }
    if (after_step) after_step(step);
    smoothed = smoothed < 0 ? mean : 0.8 * smoothed + 0.2 * mean;
    if ((step + 1) % sc.eval_every == 0) {
      check_frozen();
      spdlog::info("stage {} step {} loss {:.4f} lr {:.2e}", sc.stage, step + 1, mean, lr);
    }
    if (sc.target_loss > 0 && smoothed < sc.target_loss && mean < sc.target_loss) break;
  }
  check_frozen();
  res.final_loss = res.steps.empty() ? 0 : res.steps.back().loss;
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  auto j = sc.to_json();
  j["config_hash"] = sc.hash();
  j["steps_run"] = res.steps.size();
  j["final_loss"] = res.final_loss;
  j["examples"] = res.examples;
  model.provenance().push_back(j);
  return res;
}

}  // namespace avemo
