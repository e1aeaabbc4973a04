#pragma once

// Decoder side: mixed text/feature sequences, feature projections into the
// decoder's embedding space, the tiny causal decoder itself, and its LoRA
// adapters.
//
// A MixedSequence always starts with <|bos|>. Feature rows sit between
// <|audio|>..<|/audio|> or <|video|>..<|/video|> delimiter tokens and enter
// the decoder as soft embeddings. target_mask[t] marks positions whose token
// is a training target; row t - 1 of the score matrix predicts it.

#include <chrono>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "avemo/nn.hpp"
#include "avemo/prompts.hpp"
#include "avemo/tokenizer.hpp"

namespace avemo {

inline constexpr int kDefaultContextLen = 4096;

enum class FeatureKind { kAudio, kVisual };

struct FeatureSpan {
  FeatureKind kind = FeatureKind::kAudio;
  int round = 0;
  Eigen::Index start = 0;  // first feature row position
  Eigen::Index length = 0;

  bool operator==(const FeatureSpan&) const = default;
};

struct MixedSequence {
  static constexpr int kFeatureRow = -1;

  std::vector<int> tokens;  // kFeatureRow at feature positions
  std::vector<bool> target_mask;
  std::vector<FeatureSpan> spans;

  Eigen::Index total_len() const { return static_cast<Eigen::Index>(tokens.size()); }
  std::size_t target_count() const { return static_cast<std::size_t>(std::count(target_mask.begin(), target_mask.end(), true)); }

  void push_token(int id, bool target) {
    tokens.push_back(id);
    target_mask.push_back(target);
  }

  /// Targets aligned with score rows 0..L-2.
  std::vector<int> shifted_targets() const {
    std::vector<int> out;
    for (std::size_t t = 1; t < tokens.size(); ++t) out.push_back(std::max(tokens[t], 0));
    return out;
  }
  std::vector<bool> shifted_mask() const {
    return target_mask.empty() ? std::vector<bool>{} : std::vector<bool>(target_mask.begin() + 1, target_mask.end());
  }

  void validate() const {
    if (tokens.size() != target_mask.size()) fail(ErrorCode::kInvariantViolation, "mask length differs from sequence");
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      if (target_mask[t] && tokens[t] == kFeatureRow)
        fail(ErrorCode::kInvariantViolation, "target mask covers a feature row");
    }
  }
};

struct AssembleOptions {
  int context_len = kDefaultContextLen;
  bool audio_first = true;
  bool bos = true;
};

/// Lays out a prompt as a MixedSequence. `feature_rows(kind, round)` gives
/// the number of rows the corresponding feature matrix has.
inline MixedSequence assemble_input(const PromptTemplate& prompt,
                                    const std::function<Eigen::Index(FeatureKind, int)>& feature_rows,
                                    const Tokenizer& tok, const AssembleOptions& opt = {}) {
  if (prompt.segments.empty()) fail(ErrorCode::kPrecondition, "prompt has no segments");
  std::vector<PromptSegment> segs = prompt.segments;
  if (!opt.audio_first) {
    for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
      if (segs[i].kind == SegmentKind::kAudio && segs[i + 1].kind == SegmentKind::kVideo &&
          segs[i].round == segs[i + 1].round)
        std::swap(segs[i], segs[i + 1]);
    }
  }
  MixedSequence seq;
  if (opt.bos) seq.push_token(Tokenizer::kBos, false);
  auto feature = [&](FeatureKind kind, int round, int open, int close) {
    const Eigen::Index n = feature_rows(kind, round);
    if (n < 1) fail(ErrorCode::kEmptyInput, "feature span has no rows");
    seq.push_token(open, false);
    seq.spans.push_back({kind, round, seq.total_len(), n});
    for (Eigen::Index i = 0; i < n; ++i) seq.push_token(MixedSequence::kFeatureRow, false);
    seq.push_token(close, false);
  };
  for (const auto& s : segs) {
    switch (s.kind) {
      case SegmentKind::kText:
        for (int id : tok.encode_text(s.text)) seq.push_token(id, false);
        break;
      case SegmentKind::kAudio: feature(FeatureKind::kAudio, s.round, Tokenizer::kAudioBegin, Tokenizer::kAudioEnd); break;
      case SegmentKind::kVideo: feature(FeatureKind::kVisual, s.round, Tokenizer::kVideoBegin, Tokenizer::kVideoEnd); break;
      case SegmentKind::kTarget:
      case SegmentKind::kAiTurn: {
        auto ids = s.kind == SegmentKind::kTarget ? tok.encode_text(s.text) : tok.encode_with_specials(s.text);
        ids.push_back(Tokenizer::kEos);
        for (int id : ids) seq.push_token(id, s.loss);
        break;
      }
    }
  }
  if (seq.total_len() > opt.context_len)
    fail(ErrorCode::kContextOverflow, "sequence needs " + std::to_string(seq.total_len()) + " positions, context is " +
                                          std::to_string(opt.context_len));
  return seq;
}

/// Learned affine map from encoder features to decoder embeddings.
template <class T>
class Projection {
 public:
  Projection() = default;
  Projection(FeatureKind kind, Eigen::Index d_in, Eigen::Index d_model, std::mt19937_64& rng)
      : kind_(kind), lin_(kind == FeatureKind::kAudio ? "projections.audio" : "projections.visual", d_in, d_model, rng) {}

  ag::Var<T> operator()(ag::Tape<T>& tape, const ag::Var<T>& f) const {
    if (f.rows() == 0) fail(ErrorCode::kEmptyInput, "nothing to project");
    if (f.cols() != lin_.d_in()) fail(ErrorCode::kShapeMismatch, "feature width does not match projection");
    return lin_(tape, f);
  }

  FeatureKind kind() const { return kind_; }
  nn::Linear<T>& linear() { return lin_; }

  template <class F>
  void for_each_param(F&& f) {
    lin_.for_each_param(f);
  }

 private:
  FeatureKind kind_ = FeatureKind::kAudio;
  nn::Linear<T> lin_;
};

enum class DecoderBackbone { kTinyBuiltin, kExternalAdapter };

struct DecoderConfig {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int vocab_size = Tokenizer::kVocabSize;
  int context_len = kDefaultContextLen;
  DecoderBackbone backbone = DecoderBackbone::kTinyBuiltin;

  void validate() const {
    if (backbone != DecoderBackbone::kTinyBuiltin)
      fail(ErrorCode::kConfigError, "only the builtin decoder is available in this build");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      fail(ErrorCode::kConfigError, "decoder d_model must be divisible by n_heads");
    if (n_layers < 1 || context_len < 1 || vocab_size < Tokenizer::kVocabSize)
      fail(ErrorCode::kConfigError, "bad decoder config");
  }
};

struct LoraConfig {
  int rank = 16;
  double alpha = 16;
  std::set<std::string> targets{"q", "k", "v", "o"};
  bool train_bias_and_norm = true;
};

struct DecodeConfig {
  enum class Kind { kGreedy, kTopP };
  Kind kind = Kind::kGreedy;
  double top_p = 0.9;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  int max_new = 160;
  std::optional<std::chrono::milliseconds> timeout;
};

/// Tiny causal transformer decoder with learned token embeddings, fixed
/// sinusoidal positions, pre-norm blocks and a biased LM head.
template <class T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    embed_ = ag::Parameter<T>("decoder.embed", nn::random_normal<T>(cfg_.vocab_size, cfg_.d_model, 0.1, rng),
                              ag::ParamKind::kEmbedding);
    for (int i = 0; i < cfg_.n_layers; ++i)
      blocks_.emplace_back("decoder.block" + std::to_string(i), cfg_.d_model, cfg_.n_heads, rng);
    ln_ = nn::LayerNorm<T>("decoder.ln_out", cfg_.d_model);
    head_ = nn::Linear<T>("decoder.lm_head", cfg_.d_model, cfg_.vocab_size, rng);
  }

  const DecoderConfig& config() const { return cfg_; }

  ag::Var<T> embed_tokens(ag::Tape<T>& tape, const std::vector<int>& ids) const {
    for (int id : ids)
      if (id < 0 || id >= cfg_.vocab_size) fail(ErrorCode::kShapeMismatch, "token id out of range");
    return ag::gather_rows(tape(embed_), ids);
  }

  /// Input embeddings for a sequence: token rows from the table, feature rows
  /// from `features(span)` (already projected to d_model).
  ag::Var<T> embed(ag::Tape<T>& tape, const MixedSequence& seq,
                   const std::function<ag::Var<T>(const FeatureSpan&)>& features) const {
    std::vector<ag::Var<T>> parts;
    std::vector<int> run;
    auto flush = [&] {
      if (!run.empty()) parts.push_back(embed_tokens(tape, run));
      run.clear();
    };
    std::size_t span_i = 0;
    for (Eigen::Index t = 0; t < seq.total_len();) {
      if (seq.tokens[static_cast<std::size_t>(t)] != MixedSequence::kFeatureRow) {
        run.push_back(seq.tokens[static_cast<std::size_t>(t)]);
        ++t;
        continue;
      }
      flush();
      if (span_i >= seq.spans.size() || seq.spans[span_i].start != t)
        fail(ErrorCode::kInvariantViolation, "feature rows without a matching span");
      const auto& sp = seq.spans[span_i++];
      auto f = features(sp);
      if (f.rows() != sp.length || f.cols() != cfg_.d_model)
        fail(ErrorCode::kShapeMismatch, "feature rows do not fit their span");
      parts.push_back(f);
      t += sp.length;
    }
    flush();
    return parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
  }

  /// Final hidden states (L x d_model) for input embeddings x.
  ag::Var<T> hidden(ag::Tape<T>& tape, const ag::Var<T>& x) const {
    if (x.rows() > cfg_.context_len) fail(ErrorCode::kContextOverflow, "input longer than the context");
    auto h = ag::add(x, ag::constant<T>(nn::sinusoid<T>(x.rows(), x.cols())));
    for (const auto& b : blocks_) h = b(tape, h, true);
    return ln_(tape, h);
  }

  ag::Var<T> logits(ag::Tape<T>& tape, const ag::Var<T>& h) const { return head_(tape, h); }

  /// Log-probability rows; row t conditions on positions <= t only.
  ag::Var<T> score(ag::Tape<T>& tape, const ag::Var<T>& x) const {
    return ag::log_softmax_rows(logits(tape, hidden(tape, x)));
  }

  /// Autoregressive continuation of the prefix embeddings. Stops after eos
  /// (not included in the output) or max_new tokens.
  std::vector<int> generate(const ag::Var<T>& prefix, const DecodeConfig& dc) const {
    std::vector<int> out;
    if (dc.max_new <= 0) return out;
    if (prefix.rows() + dc.max_new > cfg_.context_len)
      fail(ErrorCode::kContextOverflow, "prefix plus generation budget exceeds the context");
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(dc.seed);
    ag::Tape<T> tape(false);
    auto x = prefix;
    for (int step = 0; step < dc.max_new; ++step) {
      if (dc.timeout && std::chrono::steady_clock::now() - t0 > *dc.timeout)
        fail(ErrorCode::kGenerationTimeout, "generation exceeded its time limit");
      auto h = hidden(tape, x);
      const Mat<T> row = logits(tape, ag::slice_rows(h, h.rows() - 1, 1)).value();
      const int next = pick(row, dc, rng);
      if (next == Tokenizer::kEos) break;
      out.push_back(next);
      x = ag::concat_rows(std::vector<ag::Var<T>>{x, embed_tokens(tape, {next})});
    }
    return out;
  }

  // --- LoRA -----------------------------------------------------------------

  std::vector<nn::LoraLinear<T>*> lora_targets(const std::set<std::string>& which) {
    std::vector<nn::LoraLinear<T>*> out;
    for (auto& b : blocks_) {
      auto proj = b.attention().projections();
      const char* names[] = {"q", "k", "v", "o"};
      for (int i = 0; i < 4; ++i)
        if (which.count(names[i])) out.push_back(proj[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  /// Fresh adapters (B = 0) on the configured projections; the current
  /// biases and norm parameters are snapshotted so detach can restore them.
  void attach_lora(const LoraConfig& lc, std::mt19937_64& rng) {
    if (lora_) fail(ErrorCode::kPrecondition, "adapters already attached");
    if (lc.targets.empty()) fail(ErrorCode::kConfigError, "no LoRA targets");
    for (const auto& t : lc.targets)
      if (t != "q" && t != "k" && t != "v" && t != "o") fail(ErrorCode::kConfigError, "unknown LoRA target " + t);
    snapshot_.clear();
    for_each_param([&](ag::Parameter<T>& p) {
      if (p.kind == ag::ParamKind::kBias || p.kind == ag::ParamKind::kNorm) snapshot_[p.name] = p.value;
    });
    for (auto* l : lora_targets(lc.targets)) l->attach(lc.rank, static_cast<T>(lc.alpha), rng);
    lora_ = lc;
  }

  /// Removes adapters and restores the biases/norms captured at attach time,
  /// giving back the exact pre-adapter decoder.
  void detach_lora() {
    if (!lora_) return;
    for (auto* l : lora_targets({"q", "k", "v", "o"})) l->detach();
    for_each_param([&](ag::Parameter<T>& p) {
      auto it = snapshot_.find(p.name);
      if (it != snapshot_.end()) p.value = it->second;
    });
    snapshot_.clear();
    lora_.reset();
  }

  void merge_lora() {
    if (!lora_) fail(ErrorCode::kPrecondition, "no adapters attached");
    for (auto* l : lora_targets(lora_->targets)) l->merge();
  }
  void unmerge_lora() {
    for (auto* l : lora_targets({"q", "k", "v", "o"})) l->unmerge();
  }

  const std::optional<LoraConfig>& lora() const { return lora_; }
  const std::map<std::string, Mat<T>>& bias_norm_snapshot() const { return snapshot_; }
  void set_bias_norm_snapshot(std::map<std::string, Mat<T>> s) { snapshot_ = std::move(s); }

  /// Restores adapter state recorded elsewhere (checkpoint loading).
  void restore_lora(const LoraConfig& lc) {
    std::mt19937_64 rng(0);
    attach_lora(lc, rng);
  }

  template <class F>
  void for_each_param(F&& f) {
    f(embed_);
    for (auto& b : blocks_) b.for_each_param(f);
    ln_.for_each_param(f);
    head_.for_each_param(f);
  }

  ag::Parameter<T>& embedding() { return embed_; }
  nn::Linear<T>& lm_head() { return head_; }

 private:
  static int pick(const Mat<T>& logits, const DecodeConfig& dc, std::mt19937_64& rng) {
    Eigen::Index best = 0;
    if (dc.kind == DecodeConfig::Kind::kGreedy) {
      logits.row(0).maxCoeff(&best);
      return static_cast<int>(best);
    }
    const double temp = dc.temperature > 0 ? dc.temperature : 1.0;
    std::vector<std::pair<double, int>> probs;
    const double mx = static_cast<double>(logits.maxCoeff());
    double z = 0;
    for (Eigen::Index i = 0; i < logits.cols(); ++i) {
      const double p = std::exp((static_cast<double>(logits(0, i)) - mx) / temp);
      probs.emplace_back(p, static_cast<int>(i));
      z += p;
    }
    std::sort(probs.begin(), probs.end(), [](auto& a, auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    double cum = 0;
    std::size_t keep = 0;
    while (keep < probs.size()) {
      cum += probs[keep++].first / z;
      if (cum >= dc.top_p) break;
    }
    std::vector<double> w;
    for (std::size_t i = 0; i < keep; ++i) w.push_back(probs[i].first);
    std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
    return probs[dist(rng)].second;
  }

  DecoderConfig cfg_;
  ag::Parameter<T> embed_;
  std::vector<nn::SelfBlock<T>> blocks_;
  nn::LayerNorm<T> ln_;
  nn::Linear<T> head_;
  std::optional<LoraConfig> lora_;
  std::map<std::string, Mat<T>> snapshot_;
};

}  // namespace avemo
