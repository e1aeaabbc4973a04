// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset; the exit status is nonzero if any fails.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "avemo/evaluation.hpp"
#include "avemo/service.hpp"
#include "avemo/synth.hpp"
#include "grad_check.hpp"
#include "metric_oracle.hpp"

using namespace avemo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Notes {
 public:
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      if (!failed_.empty()) failed_ += "; ";
      failed_ += what;
    }
  }
  template <class V>
  void note(const std::string& key, const V& v) {
    std::ostringstream s;
    s << key << "=" << v;
    if (!info_.empty()) info_ += " ";
    info_ += s.str();
  }
  Outcome done() const { return {pass_, pass_ ? info_ : "failed: " + failed_ + (info_.empty() ? "" : " | " + info_)}; }

 private:
  bool pass_ = true;
  std::string failed_, info_;
};

fs::path workdir() {
  static const fs::path d = [] {
    auto p = fs::temp_directory_path() / "avemo_acceptance";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return d;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- 1

Outcome shape_invariance() {
  Notes n;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  FaceEncoderConfig cfg;
  FaceEncoder<float> enc(cfg, rng);
  ag::Tape<float> tape(false);
  for (int len : {1, 7, 50, 311}) {
    auto f = enc.temporal_pool(tape, ag::constant<float>(nn::random_normal<float>(len, cfg.d_frame, 1.0, rng)));
    n.check(f.rows() == 128 && f.cols() == cfg.d_visual,
            "N=" + std::to_string(len) + " gave " + std::to_string(f.rows()) + "x" + std::to_string(f.cols()));
  }
  const double secs = seconds_since(t0);
  n.check(secs < 10, "took longer than 10 s");
  n.note("d_visual", cfg.d_visual);
  n.note("secs", secs);
  return n.done();
}

// ---------------------------------------------------------------- 2

Outcome gradient_check() {
  Notes n;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2);
  FaceEncoderConfig cfg;
  cfg.d_frame = 8;
  cfg.d_visual = 8;
  cfg.n_queries = 4;
  cfg.temporal_layers = 1;
  cfg.temporal_heads = 2;
  FaceEncoder<double> enc(cfg, rng);
  nn::Linear<double> proj("projections.visual", 8, 12, rng);
  const MatD frames = nn::random_normal<double>(5, 8, 1.0, rng);
  const MatD probe = nn::random_normal<double>(4, 12, 1.0, rng);
  std::vector<ag::Parameter<double>*> params;
  enc.for_each_temporal_param([&](ag::Parameter<double>& p) { params.push_back(&p); });
  params.push_back(&enc.queries());
  proj.for_each_param([&](ag::Parameter<double>& p) { params.push_back(&p); });
  auto loss = [&](ag::Tape<double>& t) {
    return ag::dot_const(proj(t, enc.temporal_pool(t, ag::constant<double>(frames))), probe);
  };
  const double worst = test_support::max_rel_error(params, loss);
  const double secs = seconds_since(t0);
  n.check(worst < 1e-4, "relative error too large");
  n.check(secs < 120, "took longer than 2 min");
  n.note("params", params.size());
  n.note("max_rel_err", worst);
  n.note("secs", secs);
  return n.done();
}

// ---------------------------------------------------------------- 3

Outcome loss_mask() {
  Notes n;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(2, 40), tok(0, Tokenizer::kVocabSize - 1);
  std::bernoulli_distribution coin(0.4);
  int changed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int L = len(rng);
    const MatD lp =
        ag::log_softmax_rows(ag::constant<double>(nn::random_normal<double>(L, Tokenizer::kVocabSize, 2.0, rng))).value();
    std::vector<int> targets(static_cast<std::size_t>(L));
    std::vector<bool> mask(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
      targets[static_cast<std::size_t>(i)] = tok(rng);
      mask[static_cast<std::size_t>(i)] = coin(rng);
    }
    mask[static_cast<std::size_t>(L - 1)] = true;
    for (auto red : {LossReduction::kMeanPerToken, LossReduction::kSumPerRound}) {
      const double before = masked_nll<double>(lp, targets, mask, red);
      auto altered = targets;
      for (int i = 0; i < L; ++i)
        if (!mask[static_cast<std::size_t>(i)]) altered[static_cast<std::size_t>(i)] = tok(rng);
      changed += masked_nll<double>(lp, altered, mask, red) != before;
    }
  }
  n.check(changed == 0, std::to_string(changed) + " losses moved");

  MatD quarter = MatD::Constant(3, 4, std::log(0.25));
  const double sum = masked_nll<double>(quarter, std::vector<int>{0, 1, 2}, {true, true, true}, LossReduction::kSumPerRound);
  n.check(std::abs(sum - 4.158883) <= 1e-6, "hand case gave " + std::to_string(sum));
  n.note("hand_sum", sum);
  return n.done();
}

// ---------------------------------------------------------------- 4, 7, 8 share corpora

const DatasetManifest& train_corpus() {
  static const DatasetManifest m = generate_synthetic_corpus(SynthConfig{}, EmotionVocabulary::standard(), workdir() / "corpus");
  return m;
}

FeatureStore& train_store() {
  static FeatureStore s(train_corpus(), PreprocessConfig{});
  return s;
}

std::map<std::string, MatF> snapshot_params(AvEmoModel<float>& m) {
  std::map<std::string, MatF> out;
  m.for_each_param([&](ag::Parameter<float>& p) { out[p.name] = p.value; });
  return out;
}

Outcome freezing() {
  Notes n;
  auto cfg = ModelConfig::tiny();
  AvEmoModel<float> model(cfg);

  const auto encoder_sum = [&] {
    std::string s;
    for (const char* g : {group::kSpeechEncoder, group::kAudioProjection, group::kFaceFrame, group::kFaceTemporal,
                          group::kFaceQueries, group::kVisualProjection})
      s += model.group_checksum(g);
    return s;
  };
  const auto base_before = model.group_checksum(group::kDecoderBase);
  const auto enc_before = encoder_sum();
  const auto before = snapshot_params(model);

  auto s3 = StageConfig::defaults(3);
  s3.max_steps = 10;
  s3.batch_size = 2;
  train_stage(s3, model, train_corpus(), train_store());
  n.check(model.group_checksum(group::kDecoderBase) == base_before, "stage 3 moved the decoder base");
  n.check(encoder_sum() == enc_before, "stage 3 moved an encoder");

  std::set<std::string> allowed;
  for (const char* g : {group::kDecoderLora, group::kDecoderBiasNorm})
    model.for_each_group_param(g, [&](ag::Parameter<float>& p) { allowed.insert(p.name); });
  int moved = 0, lora_moved = 0, bias_norm_moved = 0;
  std::set<std::string> lora_names;
  model.for_each_group_param(group::kDecoderLora, [&](ag::Parameter<float>& p) { lora_names.insert(p.name); });
  model.for_each_param([&](ag::Parameter<float>& p) {
    const auto it = before.find(p.name);
    const bool differs = it == before.end() ? p.value.norm() > 0 : p.value != it->second;
    if (!differs) return;
    ++moved;
    if (!allowed.count(p.name)) n.check(false, p.name + " changed");
    (lora_names.count(p.name) ? lora_moved : bias_norm_moved)++;
  });
  n.check(lora_moved > 0 && bias_norm_moved > 0, "adapters or bias/norm did not train");
  n.note("stage3_changed", moved);

  AvEmoModel<float> fresh(cfg);
  const auto dec_before = fresh.group_checksum(group::kDecoderBase) + fresh.group_checksum(group::kDecoderBiasNorm);
  const auto speech_before = fresh.group_checksum(group::kSpeechEncoder);
  auto s1 = StageConfig::defaults(1);
  s1.max_steps = 10;
  s1.batch_size = 2;
  train_stage(s1, fresh, train_corpus(), train_store());
  n.check(fresh.group_checksum(group::kDecoderBase) + fresh.group_checksum(group::kDecoderBiasNorm) == dec_before,
          "stage 1 moved the decoder");
  n.check(fresh.group_checksum(group::kSpeechEncoder) != speech_before, "stage 1 did not train the speech encoder");
  return n.done();
}

// ---------------------------------------------------------------- 5

Outcome lora() {
  Notes n;
  std::mt19937_64 rng(5);
  DecoderConfig dc;
  dc.d_model = 16;
  dc.n_layers = 2;
  dc.n_heads = 2;
  Decoder<float> dec(dc, rng);
  ag::Tape<float> tape(false);
  const MatF x = nn::random_normal<float>(9, 16, 1.0, rng);
  const MatF base = dec.score(tape, ag::constant<float>(x)).value();
  dec.attach_lora(LoraConfig{}, rng);
  n.check(dec.score(tape, ag::constant<float>(x)).value() == base, "B=0 adapters changed the output");

  LoraAdapter<float> ad("t", 24, 12, 4, 8.f, rng);
  ad.b.value = nn::random_normal<float>(12, 4, 0.5, rng);
  const MatF w = nn::random_normal<float>(12, 24, 1.0, rng);
  const MatF merged = lora_merge(w, ad);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const Eigen::VectorXf in = nn::random_normal<float>(24, 1, 1.0, rng).col(0);
    const Eigen::VectorXf rt = lora_apply<float>(in, w, ad);
    worst = std::max(worst, static_cast<double>((merged * in - rt).norm() / rt.norm()));
  }
  n.check(worst <= 1e-5, "merged and runtime outputs disagree");
  n.note("merge_rel_err", worst);

  LoraAdapter<double> hand("h", 2, 2, 1, 1.0, rng);
  hand.a.value << 1, 0;
  hand.b.value << 0, 1;
  Eigen::VectorXd e1(2);
  e1 << 1, 0;
  const Eigen::VectorXd y = lora_apply<double>(e1, MatD::Identity(2, 2), hand);
  n.check(y(0) == 1.0 && y(1) == 1.0, "hand example is not [1, 1]");
  return n.done();
}

// ---------------------------------------------------------------- 6

class UniformScorer : public LmScorer {
 public:
  explicit UniformScorer(double vocab) : lp_(-std::log(vocab)) {}
  std::vector<double> token_logprobs(const std::string& r) const override {
    return std::vector<double>(metric_tokenize(r).size(), lp_);
  }
  std::string name() const override { return "uniform"; }

 private:
  double lp_;
};

Outcome metric_oracles() {
  Notes n;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = test_support::run_metric_oracle(200, 6);
  n.check(rep.cases == 200 && rep.mismatches == 0, "oracle mismatch: " + rep.first_mismatch);
  const auto T = [](const char* s) { return metric_tokenize(s); };
  n.check(bleu_n(T("the the the the"), {T("the cat")}, 1) == 0.25, "BLEU-1 clipped case");
  n.check(std::abs(rouge_l(T("the cat"), T("the cat sat")) - 0.8) < 1e-12, "ROUGE-L 0.8 case");
  n.check(std::abs(meteor(T("the cat"), T("cat the")) - 0.5) < 1e-12, "METEOR swapped-bigram case");
  n.check(distinct_1({T("a b a c")}) == 0.75, "Distinct-1 case");
  const double ppl = perplexity(UniformScorer(1000), {"some words here", "and more"});
  n.check(std::abs(ppl - 1000) <= 1000 * 1e-6, "uniform PPL gave " + std::to_string(ppl));
  const double secs = seconds_since(t0);
  n.check(secs < 60, "took longer than 1 min");
  n.note("oracle_cases", rep.cases);
  n.note("secs", secs);
  return n.done();
}

// ---------------------------------------------------------------- 7

StageConfig recipe(int stage, int steps, double lr) {
  auto c = StageConfig::defaults(stage);
  c.max_steps = steps;
  c.batch_size = 8;
  c.optimizer.peak_lr = lr;
  c.optimizer.min_lr = 0.1 * lr;
  c.eval_every = 50;
  return c;
}

// Text warm-up shared by the overfit and ablation runs.
fs::path warm_checkpoint() {
  static const fs::path dir = [] {
    const auto d = workdir() / "stage0";
    AvEmoModel<float> m(ModelConfig::tiny());
    train_stage(recipe(0, 300, 3e-3), m, train_corpus(), train_store());
    m.save(d);
    return d;
  }();
  return dir;
}

Outcome overfit() {
  Notes n;
  const auto t0 = std::chrono::steady_clock::now();
  const auto& m = train_corpus();
  auto& store = train_store();
  auto model = AvEmoModel<float>::load(warm_checkpoint());
  n.check(model.config().decoder.d_model <= 128 && model.config().decoder.n_layers <= 4, "config is not tiny");
  train_stage(recipe(1, 150, 1e-3), model, m, store);
  train_stage(recipe(2, 150, 1e-3), model, m, store);
  auto s3 = recipe(3, 400, 3e-3);
  s3.target_loss = 0.05;
  const auto r3 = train_stage(s3, model, m, store);

  // Loss over the whole corpus with the final weights.
  const auto examples = build_stage_examples(s3, m, model.config(), model.prompts(), store);
  FeatureEmbedder<float> feats(model, store);
  double loss = 0;
  for (const auto& ex : examples) {
    ag::Tape<float> tape(false);
    loss += static_cast<double>(example_loss(tape, model, ex, feats, LossReduction::kMeanPerToken).value()(0, 0));
  }
  loss /= static_cast<double>(examples.size());
  n.check(loss < 0.1, "stage-3 loss " + std::to_string(loss));

  EvalConfig ec;
  ec.turns_per_dialogue = 4;
  const auto rep = evaluate_corpus(model, m, store, ec);
  n.check(rep.n_samples == 16, "expected 16 replies, got " + std::to_string(rep.n_samples));
  n.check(rep.emotion_correct == 16, std::to_string(rep.emotion_correct) + "/16 tags");
  n.check(rep.bleu1 == 1.0, "BLEU-1 " + std::to_string(rep.bleu1));
  const double secs = seconds_since(t0);
  n.check(secs < 900, "took longer than 15 min");
  n.note("stage3_steps", r3.steps.size());
  n.note("loss", loss);
  n.note("tags", std::to_string(rep.emotion_correct) + "/" + std::to_string(rep.n_samples));
  n.note("bleu1", rep.bleu1);
  n.note("secs", secs);
  return n.done();
}

// ---------------------------------------------------------------- 8

Outcome ablation() {
  Notes n;
  const auto& m = train_corpus();
  auto& store = train_store();
  SynthConfig hc;
  hc.seed = 1;
  hc.n_dialogues = 16;
  hc.split = Split::kTest;
  const auto held = generate_synthetic_corpus(hc, EmotionVocabulary::standard(), workdir() / "held");
  FeatureStore hstore(held, PreprocessConfig{});

  std::map<std::string, double> acc, held_acc;
  for (bool ser : {false, true}) {
    auto model = AvEmoModel<float>::load(warm_checkpoint());
    auto c = recipe(1, 300, 3e-3);
    c.objectives = ser ? std::set<Objective>{Objective::kAsr, Objective::kSer} : std::set<Objective>{Objective::kAsr};
    train_stage(c, model, m, store);
    const std::string k = ser ? "asr+ser" : "asr";
    acc[k] = speech_emotion_accuracy(model, m, store).accuracy();
    held_acc[k] = speech_emotion_accuracy(model, held, hstore).accuracy();
  }
  for (bool emd : {false, true}) {
    auto model = AvEmoModel<float>::load(warm_checkpoint());
    auto c = recipe(2, 300, 3e-3);
    c.objectives = emd ? std::set<Objective>{Objective::kEmr, Objective::kEmd} : std::set<Objective>{Objective::kEmr};
    train_stage(c, model, m, store);
    const std::string k = emd ? "emr+emd" : "emr";
    acc[k] = face_emotion_accuracy(model, m, store).accuracy();
    held_acc[k] = face_emotion_accuracy(model, held, hstore).accuracy();
  }
  n.check(acc["asr+ser"] > acc["asr"], "ASR+SER did not beat ASR-only");
  n.check(acc["emr+emd"] >= acc["emr"], "EMR+EMD fell below EMR-only");
  for (const auto& [k, v] : acc) n.note(k, v);
  for (const auto& [k, v] : held_acc) n.note("heldout_" + k, v);
  return n.done();
}

// ---------------------------------------------------------------- 9

Outcome round_trip() {
  Notes n;
  const auto vocab = EmotionVocabulary::standard();
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> len(1, 60), byte(1, 255);
  std::uniform_int_distribution<std::size_t> lab(0, vocab.size() - 1);
  int cases = 0, failures = 0;
  while (cases < 1000) {
    std::string text;
    const int L = len(rng);
    while (static_cast<int>(text.size()) < L) text.push_back(static_cast<char>(byte(rng)));
    bool has_marker = false;
    for (auto mk : Tokenizer::kMarkers) has_marker |= text.find(mk) != std::string::npos;
    if (has_marker) continue;
    ++cases;
    const auto& label = vocab.labels()[lab(rng)];
    try {
      const auto out = parse_ai_output(format_ai_target(label, text, vocab), ValidationMode::kStrict, vocab);
      failures += out.emotion != label || out.text != text;
    } catch (const Error&) {
      ++failures;
    }
  }
  n.check(failures == 0, std::to_string(failures) + " failures");
  n.note("cases", cases);
  return n.done();
}

// ---------------------------------------------------------------- 10

Outcome service_contract() {
  Notes n;
  const std::vector<std::size_t> five(5, 1200);
  const auto first = truncate_history(five, 256);
  n.check(five.size() - first == 3, "[1200x5] kept " + std::to_string(five.size() - first));

  // Long turns against the real 4096-token context.
  const auto& m = train_corpus();
  Waveform long_wav;
  std::vector<std::string> videos;
  for (const auto& rec : m.records)
    for (const auto& t : rec.dialogue()->turns) {
      if (t.speaker != Speaker::kUser) continue;
      const auto w = read_wav(m.resolve(*t.audio_ref));
      if (long_wav.samples.size() < 16000u * 22) long_wav.samples.insert(long_wav.samples.end(), w.samples.begin(), w.samples.end());
      std::vector<fs::path> frames;
      for (const auto& e : fs::directory_iterator(m.resolve(*t.video_ref))) frames.push_back(e.path());
      std::sort(frames.begin(), frames.end());
      std::vector<std::pair<std::string, std::string>> members;
      for (const auto& f : frames) members.push_back({f.filename().string(), read_file(f)});
      videos.push_back(make_tar(members));
    }
  const auto wav = encode_wav(long_wav);

  auto cfg = ModelConfig::tiny();
  cfg.decoder.d_model = 32;
  cfg.decoder.n_layers = 1;
  n.check(cfg.decoder.context_len == 4096, "context is not 4096");
  ServiceConfig sc;
  sc.media_dir = workdir() / "service_media";
  sc.decode.max_new = 4;
  DialogueService svc(sc);
  svc.load(std::make_unique<AvEmoModel<float>>(cfg));
  const auto id = svc.create_session();
  std::size_t longest = 0;
  for (int i = 0; i < 5; ++i) {
    const auto r = svc.post_turn(id, wav, videos[static_cast<std::size_t>(i) % videos.size()]);
    longest = std::max(longest, r.sequence_length);
    n.check(r.sequence_length <= 4096, "turn " + std::to_string(i) + " assembled " + std::to_string(r.sequence_length));
  }
  const auto before = svc.get_transcript(id).dump();
  const auto media_dir = sc.media_dir / id;
  const auto media_before = std::distance(fs::directory_iterator(media_dir), {});
  for (const auto& [w, v] : std::vector<std::pair<std::string, std::optional<std::string>>>{
           {"RIFF-garbage", std::nullopt}, {wav, std::string("not a frame archive")}}) {
    try {
      svc.post_turn(id, w, v);
      n.check(false, "a malformed turn was accepted");
    } catch (const Error&) {
    }
  }
  n.check(svc.get_transcript(id).dump() == before, "history changed after a failed turn");
  n.check(std::distance(fs::directory_iterator(media_dir), {}) == media_before, "media left behind by a failed turn");
  const auto dropped = svc.get_transcript(id)["dropped_rounds"].get<int>();
  n.check(dropped > 0, "long session never truncated");
  n.note("longest_sequence", longest);
  n.note("dropped_rounds", dropped);
  return n.done();
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"shape invariance of temporal pooling", shape_invariance},
      {"gradient check", gradient_check},
      {"loss-mask soundness", loss_mask},
      {"freezing contract", freezing},
      {"LoRA correctness", lora},
      {"metric oracles", metric_oracles},
      {"end-to-end overfit", overfit},
      {"objective ablation direction", ablation},
      {"round-trip grammar", round_trip},
      {"service contract", service_contract},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << " (" << o.detail << ")"
              << std::endl;
  }
  fs::remove_all(workdir());
  return failed ? 1 : 0;
}
