#include <gtest/gtest.h>

#include <filesystem>
#include <thread>

#include "avemo/http.hpp"
#include "avemo/synth.hpp"

using namespace avemo;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) { return read_file(p); }

std::string frames_tar(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<std::pair<std::string, std::string>> members;
  for (const auto& f : files) members.push_back({f.filename().string(), read_bytes(f)});
  return make_tar(members);
}

class Service : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / "avemo_service_test";
    fs::remove_all(root_);
    SynthConfig sc;
    sc.n_dialogues = 2;
    sc.rounds_per_dialogue = 2;
    const auto m = generate_synthetic_corpus(sc, EmotionVocabulary::standard(), root_ / "corpus");
    for (const auto& rec : m.records)
      for (const auto& t : rec.dialogue()->turns) {
        if (t.speaker != Speaker::kUser) continue;
        wavs_.push_back(read_bytes(m.resolve(*t.audio_ref)));
        videos_.push_back(frames_tar(m.resolve(*t.video_ref)));
      }
  }
  static void TearDownTestSuite() { fs::remove_all(root_); }

  static ModelConfig model_config(int context = kDefaultContextLen) {
    auto c = ModelConfig::tiny();
    c.decoder.d_model = 32;
    c.decoder.n_layers = 1;
    c.face.n_queries = 8;
    c.decoder.context_len = context;
    return c;
  }

  static ServiceConfig service_config(const std::string& name) {
    ServiceConfig sc;
    sc.media_dir = root_ / name / "media";
    sc.decode.max_new = 12;
    return sc;
  }

  static std::unique_ptr<DialogueService> make(const std::string& name, ServiceConfig sc, int context = kDefaultContextLen) {
    auto svc = std::make_unique<DialogueService>(std::move(sc));
    svc->load(std::make_unique<AvEmoModel<float>>(model_config(context)));
    (void)name;
    return svc;
  }

  static fs::path root_;
  static std::vector<std::string> wavs_, videos_;
};
fs::path Service::root_;
std::vector<std::string> Service::wavs_, Service::videos_;

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an avemo::Error";
  return ErrorCode::kInvariantViolation;
}

}  // namespace

TEST(TruncateHistory, KeepsNewestRoundsThatFit) {
  const std::vector<std::size_t> five(5, 1200);
  EXPECT_EQ(truncate_history(five, 256), 2u);  // keep 3: 3600 <= 3840
  const std::vector<std::size_t> small{100, 200, 300};
  EXPECT_EQ(truncate_history(small, 256), 0u);
  EXPECT_EQ(code_of([] { truncate_history(std::vector<std::size_t>{5000}, 256); }), ErrorCode::kTurnTooLarge);
  // Exactly at the budget is allowed; one more token drops a whole round.
  EXPECT_EQ(truncate_history(std::vector<std::size_t>{1000, 3840 - 1000}, 256), 0u);
  EXPECT_EQ(truncate_history(std::vector<std::size_t>{1000, 3841 - 1000}, 256), 1u);
}

TEST(TruncateHistory, RandomCasesAgreeWithDefinition) {
  std::mt19937 rng(11);
  std::uniform_int_distribution<std::size_t> size(1, 1500), count(1, 9);
  for (int i = 0; i < 500; ++i) {
    std::vector<std::size_t> r(count(rng));
    for (auto& x : r) x = size(rng);
    const auto keep = truncate_history(r, 256);
    std::size_t kept = 0;
    for (std::size_t k = keep; k < r.size(); ++k) kept += r[k];
    EXPECT_LE(kept, 3840u);
    if (keep > 0) EXPECT_GT(kept + r[keep - 1], 3840u);
  }
}

TEST_F(Service, CreateNeedsALoadedModel) {
  DialogueService svc(service_config("notready"));
  EXPECT_EQ(code_of([&] { svc.create_session(); }), ErrorCode::kServerNotReady);
  EXPECT_EQ(svc.health()["status"], "not_ready");
  svc.load(std::make_unique<AvEmoModel<float>>(model_config()));
  const auto a = svc.create_session(), b = svc.create_session();
  EXPECT_NE(a, b);
  EXPECT_TRUE(svc.get_transcript(a)["rounds"].empty());
  EXPECT_EQ(svc.health()["status"], "ok");
}

TEST_F(Service, TurnsAppendRoundsAndParseIntoTheVocabulary) {
  auto svc = make("turns", service_config("turns"));
  const auto id = svc->create_session();
  const auto r1 = svc->post_turn(id, wavs_[0], videos_[0]);
  EXPECT_EQ(r1.round_index, 1);
  EXPECT_TRUE(EmotionVocabulary::standard().contains(r1.emotion));
  EXPECT_LE(r1.sequence_length, static_cast<std::size_t>(kDefaultContextLen));
  const auto r2 = svc->post_turn(id, wavs_[1]);
  EXPECT_EQ(r2.round_index, 2);
  EXPECT_NE(std::find(r2.warnings.begin(), r2.warnings.end(), "audio-only turn"), r2.warnings.end());
  const auto t = svc->get_transcript(id);
  ASSERT_EQ(t["rounds"].size(), 2u);
  EXPECT_TRUE(t["rounds"][0]["has_video"].get<bool>());
  EXPECT_FALSE(t["rounds"][1]["has_video"].get<bool>());
  EXPECT_EQ(t["rounds"][1]["emotion"], r2.emotion);
  EXPECT_EQ(code_of([&] { svc->get_transcript("nope"); }), ErrorCode::kUnknownSession);
  EXPECT_EQ(code_of([&] { svc->post_turn("nope", wavs_[0]); }), ErrorCode::kUnknownSession);
}

TEST_F(Service, FailedTurnLeavesHistoryByteIdentical) {
  auto svc = make("atomic", service_config("atomic"));
  const auto id = svc->create_session();
  svc->post_turn(id, wavs_[0], videos_[0]);
  const auto before = svc->get_transcript(id).dump();
  const auto media_before = std::distance(fs::directory_iterator(root_ / "atomic" / "media" / id), {});
  EXPECT_EQ(code_of([&] { svc->post_turn(id, "RIFF-not-really-a-wav"); }), ErrorCode::kDecodeError);
  EXPECT_EQ(code_of([&] { svc->post_turn(id, wavs_[1], std::string("garbage video")); }), ErrorCode::kDecodeError);
  EXPECT_EQ(svc->get_transcript(id).dump(), before);
  EXPECT_EQ(std::distance(fs::directory_iterator(root_ / "atomic" / "media" / id), {}), media_before);
  const auto r = svc->post_turn(id, wavs_[1], videos_[1]);
  EXPECT_EQ(r.round_index, 2);
}

TEST_F(Service, LongSessionsDropOldestRoundsAndStayInBudget) {
  auto sc = service_config("budget");
  sc.generation_reserve = 16;
  auto svc = make("budget", sc, 320);
  const auto id = svc->create_session();
  int max_in_context = 0;
  for (int i = 0; i < 6; ++i) {
    const auto r = svc->post_turn(id, wavs_[static_cast<std::size_t>(i) % wavs_.size()],
                                  videos_[static_cast<std::size_t>(i) % videos_.size()]);
    EXPECT_LE(r.sequence_length, 320u);
    max_in_context = std::max(max_in_context, r.rounds_in_context);
  }
  const auto t = svc->get_transcript(id);
  EXPECT_EQ(t["rounds"].size(), 6u);
  EXPECT_GT(t["dropped_rounds"].get<int>(), 0);
  EXPECT_TRUE(t["rounds"][0]["dropped"].get<bool>());
  EXPECT_FALSE(t["rounds"][5]["dropped"].get<bool>());
  EXPECT_LT(max_in_context, 6);
}

TEST_F(Service, TurnLargerThanTheContextIsRejected) {
  auto sc = service_config("toolarge");
  sc.generation_reserve = 16;
  auto svc = make("toolarge", sc, 64);
  const auto id = svc->create_session();
  EXPECT_EQ(code_of([&] { svc->post_turn(id, wavs_[0], videos_[0]); }), ErrorCode::kTurnTooLarge);
  EXPECT_TRUE(svc->get_transcript(id)["rounds"].empty());
}

TEST_F(Service, InterleavedSessionsMatchSerialRuns) {
  auto shared = make("iso", service_config("iso"));
  const auto a = shared->create_session(), b = shared->create_session();
  std::vector<std::string> ia, ib;
  std::thread ta([&] {
    for (int i = 0; i < 2; ++i) ia.push_back(shared->post_turn(a, wavs_[static_cast<std::size_t>(i)], videos_[static_cast<std::size_t>(i)]).text);
  });
  std::thread tb([&] {
    for (int i = 2; i < 4; ++i) ib.push_back(shared->post_turn(b, wavs_[static_cast<std::size_t>(i)], videos_[static_cast<std::size_t>(i)]).text);
  });
  ta.join();
  tb.join();

  auto solo = make("iso_solo", service_config("iso_solo"));
  const auto sa = solo->create_session();
  const auto sb = solo->create_session();
  std::vector<std::string> xa, xb;
  for (int i = 0; i < 2; ++i) xa.push_back(solo->post_turn(sa, wavs_[static_cast<std::size_t>(i)], videos_[static_cast<std::size_t>(i)]).text);
  for (int i = 2; i < 4; ++i) xb.push_back(solo->post_turn(sb, wavs_[static_cast<std::size_t>(i)], videos_[static_cast<std::size_t>(i)]).text);
  EXPECT_EQ(ia, xa);
  EXPECT_EQ(ib, xb);
}

TEST_F(Service, IdleSessionsAreEvicted) {
  auto sc = service_config("ttl");
  sc.session_ttl = std::chrono::seconds(60);
  auto svc = make("ttl", sc);
  const auto id = svc->create_session();
  EXPECT_EQ(svc->evict_idle(), 0u);
  EXPECT_EQ(svc->evict_idle(DialogueService::Clock::now() + std::chrono::seconds(61)), 1u);
  EXPECT_EQ(code_of([&] { svc->get_transcript(id); }), ErrorCode::kUnknownSession);
}

TEST_F(Service, SnapshotsSurviveARestart) {
  auto sc = service_config("snap");
  sc.snapshot_dir = root_ / "snap" / "sessions";
  std::string id, before;
  {
    auto svc = make("snap", sc);
    id = svc->create_session();
    svc->post_turn(id, wavs_[0], videos_[0]);
    before = svc->get_transcript(id)["rounds"].dump();
  }
  auto again = make("snap", sc);
  EXPECT_EQ(again->restore_snapshots(), 1u);
  EXPECT_EQ(again->get_transcript(id)["rounds"].dump(), before);
  EXPECT_EQ(again->post_turn(id, wavs_[1], videos_[1]).round_index, 2);
  EXPECT_TRUE(again->delete_session(id));
  EXPECT_FALSE(fs::exists(*sc.snapshot_dir / (id + ".json")));
}

TEST_F(Service, HttpApi) {
  auto svc = make("http", service_config("http"));
  HttpServer server(*svc);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);

  auto health = cli.Get("/v1/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  const auto hj = nlohmann::json::parse(health->body);
  EXPECT_EQ(hj["status"], "ok");
  EXPECT_EQ(hj["prompt_set_hash"], PromptSet::standard().hash());
  EXPECT_EQ(hj["checkpoint_hash"].get<std::string>().size(), 64u);

  auto created = cli.Post("/v1/sessions", "", "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const auto id = nlohmann::json::parse(created->body)["session_id"].get<std::string>();

  httplib::MultipartFormDataItems items{{"audio", wavs_[0], "turn.wav", "audio/wav"},
                                        {"video", videos_[0], "turn.tar", "application/x-tar"}};
  auto turn = cli.Post("/v1/sessions/" + id + "/turns", items);
  ASSERT_TRUE(turn);
  EXPECT_EQ(turn->status, 200) << turn->body;
  const auto tj = nlohmann::json::parse(turn->body);
  EXPECT_EQ(tj["round_index"], 1);
  EXPECT_TRUE(EmotionVocabulary::standard().contains(tj["emotion"].get<std::string>()));
  EXPECT_TRUE(tj.contains("text") && tj.contains("warnings"));

  httplib::MultipartFormDataItems bad{{"audio", std::string("not a wav"), "x.wav", "audio/wav"}};
  auto failed = cli.Post("/v1/sessions/" + id + "/turns", bad);
  ASSERT_TRUE(failed);
  EXPECT_EQ(failed->status, 400);
  EXPECT_EQ(nlohmann::json::parse(failed->body)["code"], "DecodeError");

  httplib::MultipartFormDataItems no_audio{{"video", videos_[0], "turn.tar", "application/x-tar"}};
  auto missing = cli.Post("/v1/sessions/" + id + "/turns", no_audio);
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 400);
  EXPECT_EQ(nlohmann::json::parse(missing->body)["code"], "MissingField");

  auto transcript = cli.Get("/v1/sessions/" + id);
  ASSERT_TRUE(transcript);
  EXPECT_EQ(nlohmann::json::parse(transcript->body)["rounds"].size(), 1u);

  auto unknown = cli.Get("/v1/sessions/doesnotexist");
  ASSERT_TRUE(unknown);
  EXPECT_EQ(unknown->status, 404);
  EXPECT_EQ(nlohmann::json::parse(unknown->body)["code"], "UnknownSession");

  auto del = cli.Delete("/v1/sessions/" + id);
  ASSERT_TRUE(del);
  EXPECT_EQ(nlohmann::json::parse(del->body)["deleted"], true);
  EXPECT_EQ(cli.Get("/v1/sessions/" + id)->status, 404);
  server.stop();
}

TEST_F(Service, HttpBearerToken) {
  auto svc = make("token", service_config("token"));
  HttpServer server(*svc, std::string("s3cret"));
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  EXPECT_EQ(cli.Get("/v1/health")->status, 200);
  auto denied = cli.Post("/v1/sessions", "", "application/json");
  ASSERT_TRUE(denied);
  EXPECT_EQ(denied->status, 401);
  EXPECT_EQ(nlohmann::json::parse(denied->body)["code"], "Unauthorized");
  httplib::Headers auth{{"Authorization", "Bearer s3cret"}};
  auto ok = cli.Post("/v1/sessions", auth, "", "application/json");
  ASSERT_TRUE(ok);
  EXPECT_EQ(ok->status, 201);
  server.stop();
}
