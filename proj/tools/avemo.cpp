// avemo command-line entry point: synth, preprocess, train, eval, serve.
//
// Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.

#include <atomic>
#include <csignal>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "avemo/config.hpp"
#include "avemo/evaluation.hpp"
#include "avemo/http.hpp"
#include "avemo/service.hpp"
#include "avemo/synth.hpp"

using namespace avemo;
namespace fs = std::filesystem;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kConfigError: return 2;
    case ErrorCode::kMalformedManifest:
    case ErrorCode::kInvariantViolation:
    case ErrorCode::kMissingMedia:
    case ErrorCode::kEmptyAudio:
    case ErrorCode::kSampleRateMismatch:
    case ErrorCode::kEmptyVideo:
    case ErrorCode::kDecodeError:
    case ErrorCode::kMissingField:
    case ErrorCode::kUnknownEmotion:
    case ErrorCode::kEmptyCorpus:
    case ErrorCode::kPrecondition: return 3;
    default: return 4;
  }
}

std::string required(const RunConfig& rc, const std::string& key, const std::string& flag) {
  auto v = rc.str(key);
  if (v.empty()) fail(ErrorCode::kConfigError, flag + " is required (or set " + RunConfig::env_name(key) + ")");
  return v;
}

ModelConfig preset(const RunConfig& rc) {
  const auto p = rc.str("model.preset");
  ModelConfig c;
  if (p == "tiny") c = ModelConfig::tiny();
  else if (p != "default") fail(ErrorCode::kConfigError, "model.preset must be tiny or default");
  c.seed = rc.get<std::uint64_t>("model.seed");
  return c;
}

std::string manifest_hash(const DatasetManifest& m) { return sha256_hex(serialize_manifest(m)); }

void write_resolved(const fs::path& dir, const std::string& command, const RunConfig& rc,
                    const std::vector<std::string>& sections, nlohmann::json inputs) {
  nlohmann::json j{{"command", command}, {"inputs", std::move(inputs)}};
  for (const auto& s : sections) {
    j["config"][s] = rc.resolved(s);
    j["hashes"][s] = rc.hash(s);
  }
  fs::create_directories(dir);
  atomic_write(dir / ("resolved_" + command + ".json"), j.dump(2) + "\n");
}

PreprocessConfig preprocess_config(const RunConfig& rc) {
  PreprocessConfig pc;
  pc.frame_stride = rc.get<int>("preprocess.frame_stride");
  if (pc.frame_stride < 1) fail(ErrorCode::kConfigError, "preprocess.frame_stride must be >= 1");
  return pc;
}

int cmd_synth(const RunConfig& rc) {
  const fs::path out = required(rc, "synth.out", "--out");
  SynthConfig sc;
  sc.seed = rc.get<std::uint64_t>("synth.seed");
  sc.n_dialogues = rc.get<int>("synth.dialogues");
  sc.rounds_per_dialogue = rc.get<int>("synth.rounds");
  const auto split = parse_split(rc.str("synth.split"));
  if (!split) fail(ErrorCode::kConfigError, "synth.split must be train, valid or test");
  sc.split = *split;
  const auto m = generate_synthetic_corpus(sc, EmotionVocabulary::standard(), out);
  write_resolved(out, "synth", rc, {"synth"}, {});
  std::cout << nlohmann::json{{"manifest", (out / "manifest.jsonl").string()},
                              {"records", m.records.size()},
                              {"manifest_hash", manifest_hash(m)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_preprocess(const RunConfig& rc) {
  const fs::path manifest_path = required(rc, "data.manifest", "--manifest");
  const fs::path cache = required(rc, "data.cache", "--out");
  const int workers = rc.get<int>("preprocess.workers");
  if (workers < 1) fail(ErrorCode::kConfigError, "--workers must be >= 1");
  const auto m = validate_manifest(manifest_path, EmotionVocabulary::standard());
  const auto pc = preprocess_config(rc);

  std::vector<const UtteranceRecord*> todo;
  for (const auto& rec : m.records) {
    if (const auto* u = rec.utterance()) todo.push_back(u);
    if (const auto* d = rec.dialogue())
      for (const auto& t : d->turns)
        if (t.audio_ref || t.video_ref) todo.push_back(&t);
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  PreprocessStats total;
  std::vector<std::string> failures;
  auto work = [&] {
    PreprocessStats local;
    for (std::size_t i; (i = next++) < todo.size();) {
      try {
        preprocess_utterance(*todo[i], m, pc, cache, &local);
      } catch (const Error& e) {
        std::lock_guard lock(mu);
        failures.push_back(e.what());
      }
    }
    std::lock_guard lock(mu);
    total.computed += local.computed;
    total.cached += local.cached;
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  const nlohmann::json report{{"utterances", todo.size()},
                              {"computed", total.computed},
                              {"cached", total.cached},
                              {"failures", failures},
                              {"manifest_hash", manifest_hash(m)}};
  atomic_write(cache / "preprocess_report.json", report.dump(2) + "\n");
  write_resolved(cache, "preprocess", rc, {"data", "preprocess"}, {{"manifest", manifest_hash(m)}});
  std::cout << report.dump() << "\n";
  if (!failures.empty()) fail(ErrorCode::kDecodeError, std::to_string(failures.size()) + " utterance(s) failed: " + failures.front());
  return 0;
}

StageConfig stage_config(RunConfig& rc) {
  const int stage = rc.get<int>("train.stage");
  auto sc = StageConfig::defaults(stage);
  std::string objs;
  for (auto o : sc.objectives) objs += (objs.empty() ? "" : "+") + std::string(to_string(o));
  rc.resolve_default("train.objectives", objs);
  rc.resolve_default("train.max_steps", sc.max_steps);
  rc.resolve_default("train.batch_size", sc.batch_size);
  rc.resolve_default("train.peak_lr", sc.optimizer.peak_lr);
  rc.resolve_default("train.min_lr", rc.get<double>("train.peak_lr") * 0.1);
  rc.resolve_default("train.warmup_steps", sc.optimizer.warmup_steps);

  sc.objectives.clear();
  std::stringstream ss(rc.str("train.objectives"));
  for (std::string part; std::getline(ss, part, '+');) sc.objectives.insert(parse_objective(part));
  sc.modality = Modality::parse(rc.str("train.modality"));
  sc.max_steps = rc.get<int>("train.max_steps");
  sc.batch_size = rc.get<int>("train.batch_size");
  sc.optimizer.peak_lr = rc.get<double>("train.peak_lr");
  sc.optimizer.min_lr = rc.get<double>("train.min_lr");
  sc.optimizer.warmup_steps = rc.get<int>("train.warmup_steps");
  sc.optimizer.weight_decay = rc.get<double>("train.weight_decay");
  sc.eval_every = rc.get<int>("train.eval_every");
  const auto red = rc.str("train.loss_reduction");
  if (red == "mean_per_token") sc.loss_reduction = LossReduction::kMeanPerToken;
  else if (red == "sum_per_round") sc.loss_reduction = LossReduction::kSumPerRound;
  else fail(ErrorCode::kConfigError, "train.loss_reduction must be mean_per_token or sum_per_round");
  sc.full_metadata = rc.get<bool>("train.full_metadata");
  sc.target_loss = rc.get<double>("train.target_loss");
  sc.seed = rc.get<std::uint64_t>("train.seed");
  if (const auto log = rc.str("train.metrics_log"); !log.empty()) sc.metrics_log = log;
  sc.validate();
  return sc;
}

int cmd_train(RunConfig& rc) {
  const fs::path manifest_path = required(rc, "data.manifest", "--manifest");
  const fs::path out = required(rc, "train.out", "--out");
  auto sc = stage_config(rc);
  const auto m = validate_manifest(manifest_path, EmotionVocabulary::standard());
  if (m.split != Split::kTrain) spdlog::warn("training on the '{}' split", to_string(m.split));

  std::unique_ptr<AvEmoModel<float>> model;
  if (const auto init = rc.str("train.init"); !init.empty()) {
    model = std::make_unique<AvEmoModel<float>>(AvEmoModel<float>::load(init));
  } else {
    model = std::make_unique<AvEmoModel<float>>(preset(rc));
  }
  if (sc.stage == 3) {
    std::set<int> done;
    for (const auto& p : model->provenance()) done.insert(p.value("stage", -1));
    if (!done.count(1) || !done.count(2))
      spdlog::warn("stage 3 without a stage-1/2 checkpoint: the {} encoder(s) keep their random initialization",
                   !done.count(1) && !done.count(2) ? "speech and face" : !done.count(1) ? "speech" : "face");
  }
  FeatureStore store(m, preprocess_config(rc), rc.str("data.cache"));
  const auto res = train_stage(sc, *model, m, store);
  model->save(out);
  write_resolved(out, "train", rc, {"model", "data", "preprocess", "train"},
                 {{"manifest", manifest_hash(m)}, {"init", rc.str("train.init")}});
  std::cout << nlohmann::json{{"stage", sc.stage},
                              {"steps", res.steps.size()},
                              {"final_loss", res.final_loss},
                              {"seconds", res.seconds},
                              {"checkpoint", out.string()},
                              {"checkpoint_hash", model->checkpoint_hash()}}
                   .dump()
            << "\n";
  return 0;
}

DecodeConfig decode_config(const RunConfig& rc, const std::string& section) {
  DecodeConfig dc;
  if (section == "eval") {
    const auto k = rc.str("eval.decode");
    if (k == "greedy") dc.kind = DecodeConfig::Kind::kGreedy;
    else if (k == "top_p") dc.kind = DecodeConfig::Kind::kTopP;
    else fail(ErrorCode::kConfigError, "eval.decode must be greedy or top_p");
    dc.top_p = rc.get<double>("eval.top_p");
    dc.temperature = rc.get<double>("eval.temperature");
    dc.seed = rc.get<std::uint64_t>("eval.seed");
  }
  dc.max_new = rc.get<int>(section + ".max_new");
  return dc;
}

int cmd_eval(const RunConfig& rc) {
  const fs::path ckpt = required(rc, "eval.checkpoint", "--checkpoint");
  const fs::path manifest_path = required(rc, "data.manifest", "--manifest");
  auto model = AvEmoModel<float>::load(ckpt);
  const auto m = validate_manifest(manifest_path, model.config().vocabulary());
  FeatureStore store(m, preprocess_config(rc), rc.str("data.cache"));
  EvalConfig ec;
  ec.turns_per_dialogue = rc.get<int>("eval.turns_per_dialogue");
  ec.seed = rc.get<std::uint64_t>("eval.seed");
  ec.decode = decode_config(rc, "eval");
  ec.modality = Modality::parse(rc.str("eval.modality"));
  const auto rep = evaluate_corpus(model, m, store, ec);
  if (const auto out = rc.str("eval.out"); !out.empty()) {
    write_report(rep, out);
    const auto dir = fs::path(out).has_parent_path() ? fs::path(out).parent_path() : fs::path(".");
    write_resolved(dir, "eval", rc, {"data", "preprocess", "eval"},
                   {{"manifest", rep.manifest_hash}, {"checkpoint", rep.checkpoint_hash}});
  }
  std::cout << rep.table();
  std::cout << nlohmann::json{{"bleu1", rep.bleu1},
                              {"bleu4", rep.bleu4},
                              {"rouge_l", rep.rouge_l},
                              {"meteor", rep.meteor},
                              {"ppl", rep.ppl},
                              {"emobert", rep.emobert},
                              {"distinct1", rep.distinct1},
                              {"n_samples", rep.n_samples},
                              {"emotion_accuracy", rep.emotion_accuracy()}}
                   .dump()
            << "\n";
  return 0;
}

std::atomic<HttpServer*> g_server{nullptr};

int cmd_serve(const RunConfig& rc) {
  const fs::path ckpt = required(rc, "serve.checkpoint", "--checkpoint");
  ServiceConfig sc;
  if (const auto d = rc.str("serve.media_dir"); !d.empty()) sc.media_dir = d;
  if (const auto d = rc.str("serve.snapshot_dir"); !d.empty()) sc.snapshot_dir = d;
  sc.generation_reserve = rc.get<int>("serve.reserve");
  sc.decode = decode_config(rc, "serve");
  sc.session_ttl = std::chrono::seconds(rc.get<long>("serve.ttl_seconds"));
  sc.generation_timeout = std::chrono::milliseconds(rc.get<long>("serve.timeout_ms"));
  sc.max_queue = rc.get<int>("serve.max_queue");
  DialogueService svc(sc);
  svc.load(std::make_unique<AvEmoModel<float>>(AvEmoModel<float>::load(ckpt)));
  if (const auto n = svc.restore_snapshots()) spdlog::info("restored {} session(s)", n);
  std::optional<std::string> token;
  if (const auto t = rc.str("serve.token"); !t.empty()) token = t;
  HttpServer server(svc, token);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (auto* s = g_server.load()) s->stop();
  });
  const auto host = rc.str("serve.host");
  const int port = rc.get<int>("serve.port");
  spdlog::info("serving {} on {}:{}", ckpt.string(), host, port);
  server.run(host, port);
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"avemo: emotion-aware audio-visual dialogue"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> ov;
  app.add_option("--config", config_file, "JSON run configuration");
  app.add_option("--set", sets, "override any key: section.name=value");
  auto bind = [&ov](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& desc) {
    sub->add_option_function<std::string>(flag, [&ov, key](const std::string& v) { ov[key] = v; }, desc);
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus");
  bind(synth, "--seed", "synth.seed", "generator seed");
  bind(synth, "--dialogues", "synth.dialogues", "number of dialogues");
  bind(synth, "--rounds", "synth.rounds", "rounds per dialogue");
  bind(synth, "--split", "synth.split", "train, valid or test");
  bind(synth, "--out", "synth.out", "output directory");

  auto* prep = app.add_subcommand("preprocess", "compute and cache features");
  bind(prep, "--manifest", "data.manifest", "manifest.jsonl");
  bind(prep, "--out", "data.cache", "cache directory");
  bind(prep, "--workers", "preprocess.workers", "worker threads");

  auto* train = app.add_subcommand("train", "run one training stage");
  bind(train, "--stage", "train.stage", "0 (text warm-up), 1, 2 or 3");
  bind(train, "--manifest", "data.manifest", "training manifest");
  bind(train, "--cache", "data.cache", "feature cache directory");
  bind(train, "--resume", "train.init", "checkpoint to start from");
  bind(train, "--out", "train.out", "checkpoint directory to write");
  bind(train, "--max-steps", "train.max_steps", "optimizer steps");
  bind(train, "--batch-size", "train.batch_size", "examples per step");
  bind(train, "--lr", "train.peak_lr", "peak learning rate");
  bind(train, "--ablate-objectives", "train.objectives", "objective set, e.g. asr or emr+emd");
  bind(train, "--ablate-modality", "train.modality", "user channels: a, v, av, t");
  bind(train, "--metrics-log", "train.metrics_log", "JSON-lines log of every step");
  bind(train, "--target-loss", "train.target_loss", "stop once the loss is below this");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on a manifest");
  bind(eval, "--checkpoint", "eval.checkpoint", "checkpoint directory");
  bind(eval, "--manifest", "data.manifest", "evaluation manifest");
  bind(eval, "--cache", "data.cache", "feature cache directory");
  bind(eval, "--seed", "eval.seed", "turn sampling seed");
  bind(eval, "--turns", "eval.turns_per_dialogue", "assistant turns per dialogue");
  bind(eval, "--modality", "eval.modality", "user channels: a, v, av, t");
  bind(eval, "--out", "eval.out", "report path (.json)");

  auto* serve = app.add_subcommand("serve", "serve the HTTP dialogue API");
  bind(serve, "--checkpoint", "serve.checkpoint", "checkpoint directory");
  bind(serve, "--host", "serve.host", "bind address");
  bind(serve, "--port", "serve.port", "port");
  bind(serve, "--token", "serve.token", "require this bearer token");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(ErrorCode::kConfigError, "--set expects key=value");
      ov[s.substr(0, eq)] = s.substr(eq + 1);
    }
    auto rc = RunConfig::resolve(config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file), ov);
    if (synth->parsed()) return cmd_synth(rc);
    if (prep->parsed()) return cmd_preprocess(rc);
    if (train->parsed()) return cmd_train(rc);
    if (eval->parsed()) return cmd_eval(rc);
    if (serve->parsed()) return cmd_serve(rc);
    return 2;
  } catch (const Error& e) {
    std::cerr << "avemo: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "avemo: " << e.what() << "\n";
    return 4;
  }
}
