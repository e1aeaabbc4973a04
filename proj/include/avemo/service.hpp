#pragma once

// Turn-based dialogue sessions over a loaded checkpoint. Each turn's media is
// written under the service's media directory, encoded, and answered with the
// stage-3 prompt built from the session's retained history.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <openssl/rand.h>
#include <spdlog/spdlog.h>

#include "avemo/evaluation.hpp"

namespace avemo {

inline constexpr int kDefaultGenerationReserve = 256;

/// Index of the first round to keep. `round_tokens` lists the token cost of
/// each round, oldest first, with the current turn last; the newest rounds
/// whose total fits in `context - reserve` are kept, never splitting a round.
inline std::size_t truncate_history(std::span<const std::size_t> round_tokens, int reserve,
                                    int context = kDefaultContextLen) {
  if (round_tokens.empty()) fail(ErrorCode::kPrecondition, "no current turn");
  if (reserve < 0 || reserve >= context) fail(ErrorCode::kConfigError, "generation reserve must be in [0, context)");
  const auto budget = static_cast<std::size_t>(context - reserve);
  if (round_tokens.back() > budget)
    fail(ErrorCode::kTurnTooLarge, "turn needs " + std::to_string(round_tokens.back()) + " tokens; budget is " +
                                       std::to_string(budget));
  std::size_t total = 0, first = round_tokens.size();
  while (first > 0 && total + round_tokens[first - 1] <= budget) total += round_tokens[--first];
  return first;
}

struct ServiceConfig {
  std::filesystem::path media_dir = std::filesystem::temp_directory_path() / "avemo-media";
  int generation_reserve = kDefaultGenerationReserve;
  DecodeConfig decode;
  std::chrono::milliseconds generation_timeout{60000};
  std::chrono::seconds session_ttl{3600};
  std::optional<std::filesystem::path> snapshot_dir;
  int max_queue = 8;  // requests waiting for the model beyond this are refused

  void validate() const {
    if (generation_reserve < 1 || generation_reserve >= kDefaultContextLen)
      fail(ErrorCode::kConfigError, "generation_reserve must be in [1, 4096)");
    if (decode.max_new > generation_reserve)
      fail(ErrorCode::kConfigError, "decode.max_new exceeds the generation reserve");
    if (max_queue < 1) fail(ErrorCode::kConfigError, "max_queue must be >= 1");
  }
};

struct TurnResult {
  std::string emotion;
  std::string text;
  int round_index = 0;  // 1-based
  std::vector<std::string> warnings;
  std::size_t sequence_length = 0;  // prompt plus generated tokens
  int rounds_in_context = 0;
};

class DialogueService {
 public:
  using Clock = std::chrono::system_clock;

  explicit DialogueService(ServiceConfig cfg) : cfg_(std::move(cfg)), store_(media_manifest_, PreprocessConfig{}) {
    cfg_.validate();
    std::filesystem::create_directories(cfg_.media_dir);
  }

  void load(std::unique_ptr<AvEmoModel<float>> model) {
    std::lock_guard lock(model_mu_);
    model_ = std::move(model);
    feats_ = std::make_unique<FeatureEmbedder<float>>(*model_, store_);
    checkpoint_hash_ = model_->checkpoint_hash();
  }
  bool ready() const {
    std::lock_guard lock(model_mu_);
    return model_ != nullptr;
  }

  nlohmann::json health() const {
    std::lock_guard lock(model_mu_);
    if (!model_) return {{"status", "not_ready"}};
    return {{"status", "ok"}, {"checkpoint_hash", checkpoint_hash_}, {"prompt_set_hash", model_->prompts().hash()}};
  }

  std::string create_session(std::optional<DecodeConfig> decode = std::nullopt) {
    if (!ready()) fail(ErrorCode::kServerNotReady, "no checkpoint loaded");
    evict_idle();
    auto s = std::make_shared<Session>();
    s->decode = decode.value_or(cfg_.decode);
    if (s->decode.max_new > cfg_.generation_reserve)
      fail(ErrorCode::kConfigError, "max_new exceeds the generation reserve");
    s->created_at = s->last_active = Clock::now();
    std::lock_guard lock(registry_mu_);
    do s->id = random_id();
    while (sessions_.count(s->id));
    sessions_[s->id] = s;
    return s->id;
  }

  /// Answers one user turn. Nothing about the session changes unless the
  /// whole turn succeeds.
  TurnResult post_turn(const std::string& session_id, const std::string& wav_bytes,
                       const std::optional<std::string>& video_bytes = std::nullopt) {
    if (!ready()) fail(ErrorCode::kServerNotReady, "no checkpoint loaded");
    auto s = find(session_id);
    std::lock_guard session_lock(s->mu);
    if (s->deleted) fail(ErrorCode::kUnknownSession, session_id);

    const auto dir = cfg_.media_dir / s->id;
    std::filesystem::create_directories(dir);
    const std::string stem = std::to_string(s->rounds.size() + 1) + "-" + random_id().substr(0, 8);
    UtteranceRecord user;
    user.speaker = Speaker::kUser;
    user.audio_ref = (dir / (stem + ".wav")).string();
    std::vector<std::filesystem::path> written{*user.audio_ref};
    auto cleanup = [&] {
      std::error_code ec;
      for (const auto& p : written) std::filesystem::remove(p, ec);
    };
    try {
      atomic_write(*user.audio_ref, wav_bytes);
      if (video_bytes) {
        user.video_ref = (dir / (stem + ".video")).string();
        written.push_back(*user.video_ref);
        atomic_write(*user.video_ref, *video_bytes);
      }
      std::size_t drop_upto = 0;
      auto result = answer(*s, user, drop_upto);
      Round r;
      r.user = std::move(user);
      r.ai.speaker = Speaker::kAi;
      r.ai.emotion = result.emotion;
      r.ai.transcript = result.text;
      r.warnings = result.warnings;
      r.at = Clock::now();
      for (std::size_t i = 0; i < drop_upto; ++i) s->rounds[i].dropped = true;
      s->rounds.push_back(std::move(r));
      s->last_active = Clock::now();
      result.round_index = static_cast<int>(s->rounds.size());
      snapshot(*s);
      return result;
    } catch (...) {
      cleanup();
      throw;
    }
  }

  nlohmann::json get_transcript(const std::string& session_id) {
    auto s = find(session_id);
    std::lock_guard lock(s->mu);
    return transcript_json(*s);
  }

  bool delete_session(const std::string& session_id) {
    std::shared_ptr<Session> s;
    {
      std::lock_guard lock(registry_mu_);
      auto it = sessions_.find(session_id);
      if (it == sessions_.end()) fail(ErrorCode::kUnknownSession, session_id);
      s = it->second;
      sessions_.erase(it);
    }
    std::lock_guard lock(s->mu);
    s->deleted = true;
    discard(*s);
    return true;
  }

  /// Removes sessions idle for longer than the TTL; returns how many.
  std::size_t evict_idle(Clock::time_point now = Clock::now()) {
    std::vector<std::shared_ptr<Session>> gone;
    {
      std::lock_guard lock(registry_mu_);
      for (auto it = sessions_.begin(); it != sessions_.end();) {
        std::unique_lock slock(it->second->mu, std::try_to_lock);
        if (slock && now - it->second->last_active > cfg_.session_ttl) {
          it->second->deleted = true;
          gone.push_back(it->second);
          it = sessions_.erase(it);
        } else {
          ++it;
        }
      }
    }
    for (auto& s : gone) {
      std::lock_guard lock(s->mu);
      discard(*s);
    }
    return gone.size();
  }

  /// Reloads sessions written by an earlier process with snapshots enabled.
  std::size_t restore_snapshots() {
    if (!cfg_.snapshot_dir || !std::filesystem::exists(*cfg_.snapshot_dir)) return 0;
    std::size_t n = 0;
    for (const auto& e : std::filesystem::directory_iterator(*cfg_.snapshot_dir)) {
      if (e.path().extension() != ".json") continue;
      try {
        auto s = session_from_json(nlohmann::json::parse(read_file(e.path())));
        std::lock_guard lock(registry_mu_);
        sessions_[s->id] = s;
        ++n;
      } catch (const std::exception& ex) {
        spdlog::warn("skipping session snapshot {}: {}", e.path().string(), ex.what());
      }
    }
    return n;
  }

  std::size_t session_count() const {
    std::lock_guard lock(registry_mu_);
    return sessions_.size();
  }
  const ServiceConfig& config() const { return cfg_; }

 private:
  struct Round {
    UtteranceRecord user;
    UtteranceRecord ai;
    std::vector<std::string> warnings;
    Clock::time_point at;
    bool dropped = false;
  };
  struct Session {
    std::string id;
    std::vector<Round> rounds;
    DecodeConfig decode;
    Clock::time_point created_at, last_active;
    std::mutex mu;
    bool deleted = false;
  };

  static std::string random_id() {
    unsigned char b[16];
    if (RAND_bytes(b, sizeof b) != 1) fail(ErrorCode::kIoError, "no randomness for session ids");
    static const char* hex = "0123456789abcdef";
    std::string s;
    for (unsigned char c : b) {
      s += hex[c >> 4];
      s += hex[c & 15];
    }
    return s;
  }

  std::shared_ptr<Session> find(const std::string& id) {
    evict_idle();
    std::lock_guard lock(registry_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) fail(ErrorCode::kUnknownSession, id);
    return it->second;
  }

  /// Holds a slot in the bounded model queue for the caller's lifetime.
  class QueueSlot {
   public:
    explicit QueueSlot(DialogueService& svc) : svc_(svc) {
      if (svc_.waiting_.fetch_add(1) >= svc_.cfg_.max_queue) {
        svc_.waiting_.fetch_sub(1);
        fail(ErrorCode::kServerBusy, "too many requests waiting for the model");
      }
    }
    ~QueueSlot() { svc_.waiting_.fetch_sub(1); }

   private:
    DialogueService& svc_;
  };

  // Runs with the session locked and leaves it untouched. Rounds before
  // `drop_upto` are to be marked dropped once the turn commits.
  TurnResult answer(Session& s, const UtteranceRecord& user, std::size_t& drop_upto) {
    QueueSlot slot(*this);
    std::lock_guard lock(model_mu_);
    const auto& mcfg = model_->config();
    const Modality mod{true, true, false};

    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < s.rounds.size(); ++i)
      if (!s.rounds[i].dropped) active.push_back(i);
    std::vector<RoundView> history;
    for (std::size_t i : active) history.push_back({{}, &s.rounds[i].user, &s.rounds[i].ai});

    // Token cost of each retained round: the difference in assembled length
    // when that round is included. The current turn carries the system text.
    auto opt = mcfg.assemble_options();
    opt.context_len = std::numeric_limits<int>::max();
    auto length_from = [&](std::size_t first) {
      auto ctx = dialogue_context(std::span<const RoundView>(history).subspan(first), user, mod, mcfg,
                                  model_->prompts(), false, false);
      return static_cast<std::size_t>(
          assemble_input(ctx.prompt, detail::row_counter(mcfg, store_, ctx.sources), Tokenizer{}, opt).total_len());
    };
    std::vector<std::size_t> sizes(history.size() + 1);
    std::size_t next = length_from(history.size());
    sizes.back() = next;
    for (std::size_t k = history.size(); k-- > 0;) {
      const std::size_t here = length_from(k);
      sizes[k] = here - next;
      next = here;
    }
    const std::size_t keep = truncate_history(sizes, cfg_.generation_reserve, mcfg.decoder.context_len);

    auto ctx = dialogue_context(std::span<const RoundView>(history).subspan(keep), user, mod, mcfg,
                                model_->prompts(), false, false);
    TrainingExample prefix;
    prefix.seq = assemble_input(ctx.prompt, detail::row_counter(mcfg, store_, ctx.sources), Tokenizer{},
                                mcfg.assemble_options());
    for (const auto& sp : prefix.seq.spans) prefix.sources.push_back(ctx.sources.at({sp.kind, sp.round}));

    DecodeConfig dc = s.decode;
    dc.timeout = cfg_.generation_timeout;
    const std::string raw = generate_reply(*model_, *feats_, prefix, dc);
    const auto parsed = parse_ai_output(raw, ValidationMode::kLenient, mcfg.vocabulary());

    TurnResult res;
    res.emotion = parsed.emotion;
    res.text = parsed.text;
    if (parsed.warning) res.warnings.push_back("reply did not follow the emotion-tag format; emotion defaulted");
    if (keep > 0) res.warnings.push_back(std::to_string(keep) + " oldest round(s) dropped to fit the context");
    if (!user.video_ref) res.warnings.push_back("audio-only turn");
    res.sequence_length = prefix.seq.total_len() + Tokenizer{}.encode_with_specials(raw).size();
    res.rounds_in_context = static_cast<int>(history.size() - keep) + 1;
    drop_upto = keep == 0 ? 0 : active[keep - 1] + 1;
    return res;
  }

  static nlohmann::json time_json(Clock::time_point t) {
    return std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  }

  nlohmann::json transcript_json(const Session& s) const {
    nlohmann::json rounds = nlohmann::json::array();
    int dropped = 0;
    for (std::size_t i = 0; i < s.rounds.size(); ++i) {
      const auto& r = s.rounds[i];
      dropped += r.dropped;
      rounds.push_back({{"round_index", i + 1},
                        {"emotion", r.ai.emotion},
                        {"text", r.ai.transcript},
                        {"has_video", r.user.video_ref.has_value()},
                        {"warnings", r.warnings},
                        {"timestamp_ms", time_json(r.at)},
                        {"dropped", r.dropped}});
    }
    return {{"session_id", s.id},
            {"created_at_ms", time_json(s.created_at)},
            {"last_active_ms", time_json(s.last_active)},
            {"dropped_rounds", dropped},
            {"rounds", rounds}};
  }

  void snapshot(const Session& s) const {
    if (!cfg_.snapshot_dir) return;
    auto j = transcript_json(s);
    nlohmann::json media = nlohmann::json::array();
    for (const auto& r : s.rounds)
      media.push_back({{"audio", r.user.audio_ref.value_or("")}, {"video", r.user.video_ref.value_or("")}});
    j["media"] = media;
    j["decode"] = {{"kind", s.decode.kind == DecodeConfig::Kind::kGreedy ? "greedy" : "top_p"},
                   {"top_p", s.decode.top_p},
                   {"temperature", s.decode.temperature},
                   {"seed", s.decode.seed},
                   {"max_new", s.decode.max_new}};
    std::filesystem::create_directories(*cfg_.snapshot_dir);
    atomic_write(*cfg_.snapshot_dir / (s.id + ".json"), j.dump());
  }

  std::shared_ptr<Session> session_from_json(const nlohmann::json& j) const {
    auto s = std::make_shared<Session>();
    s->id = j.at("session_id").get<std::string>();
    s->created_at = Clock::time_point(std::chrono::milliseconds(j.at("created_at_ms").get<long long>()));
    s->last_active = Clock::now();
    const auto& d = j.at("decode");
    s->decode.kind = d.at("kind") == "greedy" ? DecodeConfig::Kind::kGreedy : DecodeConfig::Kind::kTopP;
    s->decode.top_p = d.at("top_p");
    s->decode.temperature = d.at("temperature");
    s->decode.seed = d.at("seed");
    s->decode.max_new = d.at("max_new");
    const auto& rounds = j.at("rounds");
    const auto& media = j.at("media");
    for (std::size_t i = 0; i < rounds.size(); ++i) {
      Round r;
      r.user.speaker = Speaker::kUser;
      r.user.audio_ref = media[i].at("audio").get<std::string>();
      if (const auto v = media[i].at("video").get<std::string>(); !v.empty()) r.user.video_ref = v;
      r.ai.speaker = Speaker::kAi;
      r.ai.emotion = rounds[i].at("emotion");
      r.ai.transcript = rounds[i].at("text");
      r.warnings = rounds[i].at("warnings").get<std::vector<std::string>>();
      r.at = Clock::time_point(std::chrono::milliseconds(rounds[i].at("timestamp_ms").get<long long>()));
      r.dropped = rounds[i].at("dropped");
      s->rounds.push_back(std::move(r));
    }
    return s;
  }

  void discard(const Session& s) {
    {
      std::lock_guard lock(model_mu_);
      for (const auto& r : s.rounds)
        for (const auto& ref : {r.user.audio_ref, r.user.video_ref})
          if (ref) {
            store_.forget(*ref);
            if (feats_) feats_->forget(*ref);
          }
    }
    std::error_code ec;
    std::filesystem::remove_all(cfg_.media_dir / s.id, ec);
    if (cfg_.snapshot_dir) std::filesystem::remove(*cfg_.snapshot_dir / (s.id + ".json"), ec);
  }

  ServiceConfig cfg_;
  DatasetManifest media_manifest_;  // empty; uploads use absolute paths
  FeatureStore store_;
  mutable std::mutex model_mu_;
  std::unique_ptr<AvEmoModel<float>> model_;
  std::unique_ptr<FeatureEmbedder<float>> feats_;
  std::string checkpoint_hash_;
  std::atomic<int> waiting_{0};
  mutable std::mutex registry_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

}  // namespace avemo
