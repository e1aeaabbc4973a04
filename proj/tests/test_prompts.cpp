#include <gtest/gtest.h>

#include <random>

#include "avemo/prompts.hpp"

using namespace avemo;

TEST(Tokenizer, SpecialsAreDistinctAndNeverFromPlainText) {
  Tokenizer tok;
  std::set<std::string_view> markers(Tokenizer::kMarkers.begin(), Tokenizer::kMarkers.end());
  EXPECT_EQ(markers.size(), 9u);
  const std::string tricky = "<|emo|>happy<|/emo|>hi <|eos|>";
  for (int id : tok.encode_text(tricky)) EXPECT_LT(id, 256);
  auto ids = tok.encode_with_specials(tricky);
  EXPECT_EQ(ids.front(), Tokenizer::kEmoBegin);
  EXPECT_EQ(ids.back(), Tokenizer::kEos);
  EXPECT_EQ(tok.decode(ids), tricky);
  EXPECT_EQ(tok.decode(tok.encode_text("caf\xc3\xa9")), "caf\xc3\xa9");
  EXPECT_THROW(tok.decode({400}), Error);
  EXPECT_EQ(tok.spec()["vocab_size"], 265);
}

TEST(Prompts, AssetFileMatchesBuiltinSet) {
  const auto asset = PromptSet::load(std::filesystem::path(AVEMO_ASSET_DIR) / "prompts.txt");
  EXPECT_EQ(asset.hash(), PromptSet::standard().hash());
  EXPECT_EQ(asset.version(), 1);
  EXPECT_THROW(PromptSet::parse("version = 1\n[speech_understanding.asr]\nx\n"), Error);
}

TEST(Prompts, RenderMetadata) {
  SpeakerMetadata md;
  EXPECT_EQ(render_metadata(md), "");
  md.emotion = "happy";
  md.emotion_intensity = Intensity::kHigh;
  EXPECT_EQ(render_metadata(md), "emotion: happy (intensity: high)");
  SpeakerMetadata age;
  age.age = 34;
  EXPECT_EQ(render_metadata(age), "age: 34");
}

TEST(Prompts, MetadataClausesAreMonotone) {
  std::mt19937_64 rng(11);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    SpeakerMetadata md;
    if (coin(rng)) md.emotion = "sad";
    if (coin(rng)) md.emotion_intensity = Intensity::kLow;
    if (coin(rng)) md.emotion_description = "Brows lowered.";
    if (coin(rng)) md.gender = "female";
    if (coin(rng)) md.age = 40;
    SpeakerMetadata more = md;
    switch (trial % 6) {
      case 0: more.emotion = "sad"; break;
      case 1: more.emotion_intensity = Intensity::kLow; break;
      case 2: more.emotion_description = "Brows lowered."; break;
      case 3: more.gender = "female"; break;
      case 4: more.age = 40; break;
      default: more.ethnicity = "asian"; break;
    }
    const std::string before = render_metadata(md), after = render_metadata(more);
    // Every clause of the smaller rendering survives; an added emotion may
    // fold the bare intensity clause into "(intensity: ...)".
    std::string rest = before;
    for (std::size_t p; !rest.empty(); rest = p == std::string::npos ? "" : rest.substr(p + 2)) {
      p = rest.find("; ");
      const std::string clause = rest.substr(0, p);
      const bool kept = after.find(clause) != std::string::npos;
      const bool folded = clause.rfind("intensity: ", 0) == 0 && after.find("(" + clause + ")") != std::string::npos;
      EXPECT_TRUE(kept || folded) << before << " -> " << after;
    }
  }
}

TEST(Prompts, StagePromptsFollowTheirTasks) {
  const auto ps = PromptSet::standard();
  auto asr = build_stage1_prompt(ps, Stage1Task::kAsr);
  auto ser = build_stage1_prompt(ps, Stage1Task::kAsrSer);
  EXPECT_EQ(asr.system_text, "Transcribe the audio.");
  EXPECT_NE(ser.system_text.find("emotion"), std::string::npos);
  EXPECT_EQ(asr.render(), build_stage1_prompt(ps, Stage1Task::kAsr).render());
  auto emd = build_stage2_prompt(ps, Stage2Task::kEmrEmd);
  EXPECT_NE(emd.system_text.find("describe"), std::string::npos);
  int videos = 0;
  for (const auto& s : emd.segments) videos += s.kind == SegmentKind::kVideo;
  EXPECT_EQ(videos, 1);

  auto empty = build_stage3_prompt(ps, {}, UserTurnView{});
  int audio = 0, video = 0, ai = 0;
  for (const auto& s : empty.segments) {
    audio += s.kind == SegmentKind::kAudio;
    video += s.kind == SegmentKind::kVideo;
    ai += s.kind == SegmentKind::kAiTurn;
  }
  EXPECT_EQ(audio, 1);
  EXPECT_EQ(video, 1);
  EXPECT_EQ(ai, 0);
  EXPECT_EQ(empty.render(), ps.text("audio_visual_dialogue") +
                                "\nUser: <|audio|>[audio 0]<|/audio|><|video|>[video 0]<|/video|>\nAI: ");

  const auto vocab = EmotionVocabulary::standard();
  std::vector<std::pair<UserTurnView, AiTurnView>> hist{{UserTurnView{}, {format_ai_target("sad", "Oh no.", vocab)}}};
  UserTurnView audio_only;
  audio_only.video = false;
  auto two = build_stage3_prompt(ps, hist, audio_only);
  EXPECT_EQ(two.render(), ps.text("audio_visual_dialogue") +
                              "\nUser: <|audio|>[audio 0]<|/audio|><|video|>[video 0]<|/video|>\nAI: "
                              "<|emo|>sad<|/emo|>Oh no.<|eos|>\nUser: <|audio|>[audio 1]<|/audio|>\nAI: ");
}

TEST(Prompts, TargetsPerTask) {
  UtteranceRecord rec;
  rec.transcript = "I found a red kite.";
  rec.emotion = "happy";
  rec.metadata.emotion_intensity = Intensity::kHigh;
  rec.metadata.age = 30;
  rec.facial_description = "Cheeks lift. Eyes crinkle.";
  EXPECT_EQ(stage1_target(rec, Stage1Task::kAsr), "I found a red kite.");
  EXPECT_EQ(stage1_target(rec, Stage1Task::kAsrSer), "I found a red kite. | emotion: happy (intensity: high)");
  EXPECT_EQ(stage1_target(rec, Stage1Task::kAsrSer, true),
            "I found a red kite. | emotion: happy (intensity: high); age: 30");
  EXPECT_EQ(stage2_target(rec, Stage2Task::kEmr), "happy");
  EXPECT_EQ(stage2_target(rec, Stage2Task::kEmrEmd), "happy. Cheeks lift. Eyes crinkle.");
  EXPECT_EQ(description_sentence_count(*rec.facial_description), 2);
}

TEST(Prompts, FormatAndParse) {
  const auto vocab = EmotionVocabulary::standard();
  EXPECT_EQ(format_ai_target("happy", "Glad to hear!", vocab), "<|emo|>happy<|/emo|>Glad to hear!");
  EXPECT_EQ(format_ai_target("neutral", "Ok.", vocab), "<|emo|>neutral<|/emo|>Ok.");
  try {
    format_ai_target("joyful", "x", vocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownEmotion);
  }
  auto ok = parse_ai_output("<|emo|>happy<|/emo|>Glad to hear!", ValidationMode::kStrict, vocab);
  EXPECT_EQ(ok.emotion, "happy");
  EXPECT_EQ(ok.text, "Glad to hear!");
  EXPECT_FALSE(ok.warning);

  auto lenient = parse_ai_output("Hello.", ValidationMode::kLenient, vocab);
  EXPECT_EQ(lenient.emotion, "neutral");
  EXPECT_EQ(lenient.text, "Hello.");
  EXPECT_TRUE(lenient.warning);
  try {
    parse_ai_output("Hello.", ValidationMode::kStrict, vocab);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
  }
  auto garbled = parse_ai_output("<|emo|>hapy<|/emo|>Hi", ValidationMode::kLenient, vocab);
  EXPECT_EQ(garbled.emotion, "neutral");
  EXPECT_EQ(garbled.text, "Hi");
  EXPECT_TRUE(garbled.warning);
  EXPECT_THROW(parse_ai_output("<|emo|>happy", ValidationMode::kStrict, vocab), Error);
}

TEST(Prompts, RoundTripThousandRandomPairs) {
  const auto vocab = EmotionVocabulary::standard();
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> len(1, 40), byte(1, 255);
  std::uniform_int_distribution<std::size_t> lab(0, vocab.size() - 1);
  int failures = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string text;
    const int n = len(rng);
    while (static_cast<int>(text.size()) < n) text.push_back(static_cast<char>(byte(rng)));
    if (text.find("<|") != std::string::npos) text += "|";  // keep markers out by breaking them
    bool has_marker = false;
    for (auto m : Tokenizer::kMarkers) has_marker |= text.find(m) != std::string::npos;
    if (has_marker) continue;
    const auto& label = vocab.labels()[lab(rng)];
    const auto out = parse_ai_output(format_ai_target(label, text, vocab), ValidationMode::kStrict, vocab);
    failures += out.emotion != label || out.text != text;
  }
  EXPECT_EQ(failures, 0);
}
