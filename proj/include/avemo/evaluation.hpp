#pragma once

// Corpus evaluation: sample assistant turns per dialogue, regenerate them
// with the true history as context, and score the replies.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "avemo/metrics.hpp"
#include "avemo/training.hpp"

namespace avemo {

struct EvalConfig {
  int turns_per_dialogue = 4;
  std::uint64_t seed = 0;
  DecodeConfig decode;
  Modality modality;

  nlohmann::json to_json() const {
    return {{"turns_per_dialogue", turns_per_dialogue},
            {"seed", seed},
            {"decode",
             {{"kind", decode.kind == DecodeConfig::Kind::kGreedy ? "greedy" : "top_p"},
              {"top_p", decode.top_p},
              {"temperature", decode.temperature},
              {"seed", decode.seed},
              {"max_new", decode.max_new}}},
            {"modality", modality.str()},
            {"metric_tokenizer", kMetricTokenizerVersion}};
  }
  std::string hash() const { return sha256_hex(to_json().dump()); }
};

/// Round indices to evaluate, ascending. min(k, rounds) rounds are drawn;
/// the draw depends only on the seed and the dialogue id.
inline std::vector<std::size_t> sample_turns(std::size_t rounds, int k, std::uint64_t seed, const std::string& dialogue_id) {
  if (k < 1) fail(ErrorCode::kConfigError, "turns_per_dialogue must be >= 1");
  std::vector<std::size_t> all(rounds), out;
  std::iota(all.begin(), all.end(), 0);
  const auto h = sha256_hex(dialogue_id);
  std::mt19937_64 rng(seed ^ std::stoull(h.substr(0, 15), nullptr, 16));
  std::sample(all.begin(), all.end(), std::back_inserter(out), static_cast<std::size_t>(k), rng);
  std::sort(out.begin(), out.end());
  return out;
}

/// Raw decoded text generated after `prefix`.
template <class T>
std::string generate_reply(AvEmoModel<T>& model, FeatureEmbedder<T>& feats, const TrainingExample& prefix,
                           const DecodeConfig& dc) {
  ag::Tape<T> tape(false);
  std::size_t i = 0;
  auto x = model.decoder().embed(tape, prefix.seq,
                                 [&](const FeatureSpan&) { return feats(tape, prefix.sources.at(i++)); });
  return sanitize_utf8(Tokenizer{}.decode(model.decoder().generate(x, dc)));
}

/// Scores text with the model's own decoder, text only: bos, bytes, eos.
template <class T>
class DecoderScorer : public LmScorer {
 public:
  explicit DecoderScorer(const Decoder<T>& dec) : dec_(dec) {}

  std::vector<double> token_logprobs(const std::string& response) const override {
    std::vector<int> ids{Tokenizer::kBos};
    for (int id : Tokenizer{}.encode_text(response)) ids.push_back(id);
    ids.push_back(Tokenizer::kEos);
    ag::Tape<T> tape(false);
    const Mat<T> lp = dec_.score(tape, dec_.embed_tokens(tape, ids)).value();
    std::vector<double> out;
    for (std::size_t t = 1; t < ids.size(); ++t) out.push_back(static_cast<double>(lp(static_cast<Eigen::Index>(t - 1), ids[t])));
    return out;
  }
  std::string name() const override { return "avemo-decoder"; }

 private:
  const Decoder<T>& dec_;
};

struct EvalSample {
  std::string dialogue_id;
  std::size_t round = 0;
  std::string reference_emotion;
  std::string reference_text;
  std::string raw_output;
  std::string emotion;
  std::string text;
  bool parse_warning = false;
  double emotion_similarity = 0;
  bool similarity_zero_vector = false;
};

struct MetricReport {
  double bleu1 = 0, bleu4 = 0, rouge_l = 0, meteor = 0, distinct1 = 0, emobert = 0, ppl = 0;
  int n_samples = 0;
  int emotion_correct = 0;
  int parse_warnings = 0;
  int similarity_zero_vectors = 0;
  EvalConfig config;
  std::string split;
  std::string checkpoint_hash;
  std::string manifest_hash;
  std::string scorer;
  std::string embedder;
  std::vector<EvalSample> samples;

  double emotion_accuracy() const { return n_samples ? static_cast<double>(emotion_correct) / n_samples : 0.0; }

  nlohmann::json to_json() const {
    nlohmann::json s = nlohmann::json::array();
    for (const auto& x : samples)
      s.push_back({{"dialogue_id", x.dialogue_id},
                   {"round", x.round},
                   {"reference_emotion", x.reference_emotion},
                   {"reference_text", x.reference_text},
                   {"raw_output", x.raw_output},
                   {"emotion", x.emotion},
                   {"text", x.text},
                   {"parse_warning", x.parse_warning},
                   {"emotion_similarity", x.emotion_similarity},
                   {"similarity_zero_vector", x.similarity_zero_vector}});
    return {{"metrics",
             {{"bleu1", bleu1},
              {"bleu4", bleu4},
              {"rouge_l", rouge_l},
              {"meteor", meteor},
              {"ppl", ppl},
              {"emobert", emobert},
              {"distinct1", distinct1}}},
            {"n_samples", n_samples},
            {"emotion_accuracy", emotion_accuracy()},
            {"parse_warnings", parse_warnings},
            {"similarity_zero_vectors", similarity_zero_vectors},
            {"protocol", {{"turns_per_dialogue", config.turns_per_dialogue}, {"seed", config.seed}}},
            {"eval_config", config.to_json()},
            {"hashes",
             {{"eval_config", config.hash()}, {"checkpoint", checkpoint_hash}, {"manifest", manifest_hash}}},
            {"split", split},
            {"ppl_scorer", scorer},
            {"ppl_note", "perplexity is relative to the scorer model and not comparable across scorers"},
            {"emotion_embedder", embedder},
            {"samples", s}};
  }

  /// One header row and one value row, columns in the usual dialogue-table
  /// order.
  std::string table() const {
    std::ostringstream o;
    o << fmt::format("| {:>7} | {:>7} | {:>7} | {:>7} | {:>9} | {:>7} | {:>7} |\n", "BLEU-1", "BLEU-4", "ROUGE",
                     "METEOR", "PPL", "EmoBERT", "Dist-1");
    o << fmt::format("| {:>7.4f} | {:>7.4f} | {:>7.4f} | {:>7.4f} | {:>9.3f} | {:>7.4f} | {:>7.4f} |\n", bleu1, bleu4,
                     rouge_l, meteor, ppl, emobert, distinct1);
    return o.str();
  }
};

/// Regenerates sampled assistant turns and scores them. Replies are parsed
/// leniently; unparseable output falls back to the default emotion.
template <class T>
MetricReport evaluate_corpus(AvEmoModel<T>& model, const DatasetManifest& manifest, FeatureStore& store,
                             const EvalConfig& cfg, const LmScorer* scorer = nullptr,
                             const EmotionEmbedder* embedder = nullptr) {
  if (manifest.split != Split::kTest)
    spdlog::warn("evaluating on the '{}' split rather than test", to_string(manifest.split));
  const LexiconEmbedder lexicon;
  const EmotionEmbedder& emb = embedder ? *embedder : lexicon;
  const DecoderScorer<T> own(model.decoder());
  const LmScorer& sc = scorer ? *scorer : own;
  const auto vocab = model.config().vocabulary();

  MetricReport rep;
  rep.config = cfg;
  rep.split = std::string(to_string(manifest.split));
  rep.checkpoint_hash = model.checkpoint_hash();
  rep.manifest_hash = sha256_hex(serialize_manifest(manifest));
  rep.scorer = sc.name();
  rep.embedder = embedder ? "custom" : "lexicon-7d";

  FeatureEmbedder<T> feats(model, store);
  for (const auto& rec : manifest.records) {
    const auto* d = rec.dialogue();
    if (!d || !rec.has_task(Task::kDialogue)) continue;
    const auto rounds = split_rounds(*d);
    if (rounds.empty()) continue;
    for (std::size_t r : sample_turns(rounds.size(), cfg.turns_per_dialogue, cfg.seed, d->dialogue_id)) {
      const auto prefix = build_reply_prefix(std::span(rounds).first(r), *rounds[r].user, cfg.modality, model.config(),
                                             model.prompts(), store, cfg.decode.max_new, d->dialogue_id);
      EvalSample s;
      s.dialogue_id = d->dialogue_id;
      s.round = r;
      s.reference_emotion = rounds[r].ai->emotion;
      s.reference_text = rounds[r].ai->transcript;
      s.raw_output = generate_reply(model, feats, prefix, cfg.decode);
      const auto parsed = parse_ai_output(s.raw_output, ValidationMode::kLenient, vocab);
      s.emotion = parsed.emotion;
      s.text = parsed.text;
      s.parse_warning = parsed.warning;
      const auto sim = emotion_similarity(emb, s.text, s.reference_text);
      s.emotion_similarity = sim.score;
      s.similarity_zero_vector = sim.zero_vector;
      rep.samples.push_back(std::move(s));
    }
  }
  if (rep.samples.empty()) fail(ErrorCode::kEmptyCorpus, "manifest has no dialogue turns to evaluate");

  std::vector<Tokens> hyps, refs;
  std::vector<std::string> texts;
  double rl = 0, met = 0, emo = 0;
  for (const auto& s : rep.samples) {
    hyps.push_back(metric_tokenize(s.text));
    refs.push_back(metric_tokenize(s.reference_text));
    texts.push_back(s.text);
    rl += rouge_l(hyps.back(), refs.back());
    met += meteor(hyps.back(), refs.back());
    emo += s.emotion_similarity;
    rep.emotion_correct += s.emotion == s.reference_emotion;
    rep.parse_warnings += s.parse_warning;
    rep.similarity_zero_vectors += s.similarity_zero_vector;
  }
  const double n = static_cast<double>(rep.samples.size());
  rep.n_samples = static_cast<int>(rep.samples.size());
  rep.bleu1 = corpus_bleu(hyps, refs, 1);
  rep.bleu4 = corpus_bleu(hyps, refs, 4);
  rep.rouge_l = rl / n;
  rep.meteor = met / n;
  rep.emobert = emo / n;
  const bool any_token = std::any_of(hyps.begin(), hyps.end(), [](const Tokens& t) { return !t.empty(); });
  rep.distinct1 = any_token ? distinct_1(hyps) : 0.0;
  rep.ppl = perplexity(sc, texts);
  return rep;
}

inline void write_report(const MetricReport& rep, const std::filesystem::path& json_path) {
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  atomic_write(json_path, rep.to_json().dump(2) + "\n");
  auto table = json_path;
  table.replace_extension(".table.txt");
  atomic_write(table, rep.table());
}

struct AccuracyResult {
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

namespace detail {

/// Index of the candidate example with the highest summed target log-prob.
template <class T>
std::size_t most_likely(AvEmoModel<T>& model, FeatureEmbedder<T>& feats, const std::vector<TrainingExample>& cands) {
  std::size_t best = 0;
  double best_lp = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cands.size(); ++c) {
    ag::Tape<T> tape(false);
    const auto targets = cands[c].seq.shifted_targets();
    const double lp = -static_cast<double>(
        ag::masked_nll(example_logprob(tape, model, cands[c], feats), std::span<const int>(targets),
                       cands[c].seq.shifted_mask(), false)
            .value()(0, 0));
    if (lp > best_lp) {
      best_lp = lp;
      best = c;
    }
  }
  return best;
}

template <class Fn>
void for_each_user_turn(const DatasetManifest& m, Fn&& fn) {
  for (const auto& rec : m.records) {
    if (const auto* u = rec.utterance(); u && u->speaker == Speaker::kUser) fn(*u);
    if (const auto* d = rec.dialogue())
      for (const auto& t : d->turns)
        if (t.speaker == Speaker::kUser) fn(t);
  }
}

}  // namespace detail

/// User-emotion recognition from speech: under the ASR+SER instruction, every
/// vocabulary label is slotted into the true target and the most likely one
/// is the prediction.
template <class T>
AccuracyResult speech_emotion_accuracy(AvEmoModel<T>& model, const DatasetManifest& m, FeatureStore& store) {
  AccuracyResult res;
  FeatureEmbedder<T> feats(model, store);
  const auto labels = model.config().vocabulary().labels();
  detail::for_each_user_turn(m, [&](const UtteranceRecord& u) {
    if (!u.audio_ref || u.emotion.empty()) return;
    std::vector<TrainingExample> cands;
    for (const auto& e : labels) {
      UtteranceRecord alt = u;
      alt.emotion = e;
      if (alt.metadata.emotion) alt.metadata.emotion = e;
      cands.push_back(build_stage1_example(alt, Stage1Task::kAsrSer, model.config(), model.prompts(), store));
      for (auto& s : cands.back().sources) s.record = &u;
    }
    res.correct += labels[detail::most_likely(model, feats, cands)] == u.emotion;
    ++res.total;
  });
  if (res.total == 0) fail(ErrorCode::kEmptyCorpus, "no user turns with audio and an emotion label");
  return res;
}

/// Facial emotion recognition under the EMR instruction, ranked the same way.
template <class T>
AccuracyResult face_emotion_accuracy(AvEmoModel<T>& model, const DatasetManifest& m, FeatureStore& store) {
  AccuracyResult res;
  FeatureEmbedder<T> feats(model, store);
  const auto labels = model.config().vocabulary().labels();
  detail::for_each_user_turn(m, [&](const UtteranceRecord& u) {
    if (!u.video_ref || u.emotion.empty()) return;
    std::vector<TrainingExample> cands;
    for (const auto& e : labels) {
      UtteranceRecord alt = u;
      alt.emotion = e;
      cands.push_back(build_stage2_example(alt, Stage2Task::kEmr, model.config(), model.prompts(), store));
      for (auto& s : cands.back().sources) s.record = &u;
    }
    res.correct += labels[detail::most_likely(model, feats, cands)] == u.emotion;
    ++res.total;
  });
  if (res.total == 0) fail(ErrorCode::kEmptyCorpus, "no user turns with video and an emotion label");
  return res;
}

}  // namespace avemo
