#include "test_support.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "promptrestore/train.hpp"

using namespace promptrestore;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  InstructionCorpus corpus = InstructionCorpus::generate(0, 20);
  TextEncoder encoder{nullptr};
  std::unique_ptr<GuidanceProvider> guidance;
  std::vector<Image> cleans;
  fs::path dir;

  explicit Fixture(bool trainable_text = false, int image_size = 16, int images = 4) {
    torch::manual_seed(100);
    auto cfg = TextEncoderConfig::tiny(corpus.vocab_size());
    cfg.n_layers = 1;
    encoder = TextEncoder(cfg);
    guidance = std::make_unique<GuidanceProvider>(encoder, corpus, trainable_text);
    Rng rng(1);
    cleans = synthetic_clean_images(images, image_size, image_size, rng);
    dir = fs::temp_directory_path() / ("promptrestore_train_" + std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(dir);
  }
  ~Fixture() { fs::remove_all(dir); }

  TrainConfig config(int64_t steps, int patch = 16, int batch = 2) const {
    TrainConfig c;
    c.steps = steps;
    c.patch = patch;
    c.batch_size = batch;
    c.seed = 5;
    return c;
  }

  SyntheticPairStream stream(const TrainConfig& c) const {
    return SyntheticPairStream(cleans, c.task_mix(), corpus, c.patch, c.batch_size);
  }
};

bool same_parameters(const torch::nn::Module& a, const torch::nn::Module& b) {
  const auto pa = unique_named_parameters(a), pb = unique_named_parameters(b);
  if (pa.size() != pb.size()) return false;
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !torch::equal(pa[i].second, pb[i].second)) return false;
  }
  return true;
}

std::vector<double> losses(const std::vector<LogEntry>& log) {
  std::vector<double> out;
  for (const auto& e : log) out.push_back(e.loss);
  return out;
}

}  // namespace

TEST_CASE("loss arithmetic") {
  const auto target = torch::rand({2, 3, 4, 4});
  CHECK(restoration_loss(target, target, LossKind::l1).item<double>() == 0.0);
  CHECK(restoration_loss(target + 0.5, target, LossKind::l1).item<double>() == doctest::Approx(0.5));
  CHECK(restoration_loss(target + 0.5, target, LossKind::l2).item<double>() == doctest::Approx(0.25));
  CHECK_THROWS_AS(restoration_loss(target, torch::rand({2, 3, 4, 5}), LossKind::l1), InvalidArgument);

  const std::vector<Image> a{Image(4, 4, 0.7f)}, b{Image(4, 4, 0.2f)};
  CHECK(restoration_loss(a, b, LossKind::l1) == doctest::Approx(0.5));
  CHECK(restoration_loss(a, b, LossKind::l2) == doctest::Approx(0.25));
  const std::vector<Image> other{Image(5, 4)};
  CHECK_THROWS_AS(restoration_loss(a, other, LossKind::l1), InvalidArgument);
}

TEST_CASE("config validation and schedules") {
  TrainConfig c;
  c.steps = 100;
  CHECK_NOTHROW(c.validate());
  CHECK(c.lr == 2e-4);
  CHECK(c.batch_size == 6);
  CHECK(c.patch == 128);
  CHECK(c.weight_decay == 1e-4);
  CHECK(c.lr_at(50) == 2e-4);
  c.schedule = Schedule::cosine;
  CHECK(c.lr_at(0) == doctest::Approx(2e-4));
  CHECK(c.lr_at(50) == doctest::Approx(1e-4));
  CHECK(c.lr_at(100) == doctest::Approx(0.0));
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.lr = 1e-4;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.steps = 1;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
  c.batch_size = 1;
  c.tasks.clear();
  CHECK_THROWS_AS(c.validate(), InvalidArgument);
}

TEST_CASE("a zero learning rate leaves parameters unchanged") {
  Fixture f;
  auto cfg = f.config(1);
  cfg.lr = 0.0;
  auto state = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  RestorationNet before(BackboneConfig::tiny());
  {
    torch::NoGradGuard guard;
    const auto src = unique_named_parameters(*state.model), dst = unique_named_parameters(*before);
    for (size_t i = 0; i < src.size(); ++i) dst[i].second.copy_(src[i].second);
  }
  auto stream = f.stream(cfg);
  const auto batch = stream.next(state.rng);
  const auto result = train_step(state, *f.guidance, batch);
  CHECK(std::isfinite(result.loss));
  CHECK(state.step == 1);
  CHECK(same_parameters(*state.model, *before));
}

TEST_CASE("train_step rejects empty batches and mismatched guidance") {
  Fixture f;
  auto state = make_train_state(BackboneConfig::tiny(), f.config(1), *f.guidance);
  CHECK_THROWS_AS(train_step(state, *f.guidance, std::vector<ImagePair>{}), InvalidArgument);
  auto wide = BackboneConfig::tiny();
  wide.d_text = 32;
  CHECK_THROWS_AS(make_train_state(wide, f.config(1), *f.guidance), InvalidArgument);
}

TEST_CASE("non-finite losses raise a training failure naming the step") {
  Fixture f;
  auto state = make_train_state(BackboneConfig::tiny(), f.config(3), *f.guidance);
  auto stream = f.stream(state.config);
  auto batch = stream.next(state.rng);
  train_step(state, *f.guidance, batch);
  batch[0].degraded.at(0, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  try {
    train_step(state, *f.guidance, batch);
    FAIL("expected a training failure");
  } catch (const TrainingFailure& e) {
    CHECK(e.step() == 2);
  }
}

TEST_CASE("seeded training replays bit for bit") {
  Fixture f;
  const auto cfg = f.config(6);
  auto a = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  auto sa = f.stream(cfg);
  const auto la = fit(a, *f.guidance, sa);
  auto b = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  auto sb = f.stream(cfg);
  const auto lb = fit(b, *f.guidance, sb);
  CHECK(losses(la) == losses(lb));
  CHECK(same_parameters(*a.model, *b.model));
}

TEST_CASE("fit logs one entry per update and writes periodic checkpoints") {
  Fixture f;
  auto cfg = f.config(1);
  auto state = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  auto stream = f.stream(cfg);
  std::ostringstream lines;
  FitHooks hooks;
  hooks.log_stream = &lines;
  const auto log = fit(state, *f.guidance, stream, hooks);
  REQUIRE(log.size() == 1);
  CHECK(log[0].step == 1);
  CHECK(nlohmann::json::parse(lines.str()).at("step") == 1);

  cfg = f.config(6);
  cfg.checkpoint_every = 2;
  cfg.eval_every = 3;
  auto periodic = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  auto s2 = f.stream(cfg);
  hooks.checkpoint_prefix = f.dir / "run";
  int evaluations = 0;
  hooks.evaluate = [&](TrainState&) {
    ++evaluations;
    return 12.5;
  };
  const auto log2 = fit(periodic, *f.guidance, s2, hooks);
  CHECK(log2.size() == 6);
  CHECK(evaluations == 2);
  CHECK(log2[2].psnr_eval.value_or(0.0) == 12.5);
  int64_t last = 0;
  for (int step : {2, 4, 6}) {
    const auto ckpt = read_checkpoint(periodic_checkpoint_path(hooks.checkpoint_prefix, step));
    CHECK(ckpt.manifest.step > last);
    last = ckpt.manifest.step;
  }
  CHECK_FALSE(fs::exists(periodic_checkpoint_path(hooks.checkpoint_prefix, 3)));
}

TEST_CASE("resume reproduces the uninterrupted trace") {
  for (bool trainable : {false, true}) {
    Fixture f(trainable);
    auto cfg = f.config(10);
    auto full = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
    auto stream = f.stream(cfg);
    const auto uninterrupted = losses(fit(full, *f.guidance, stream));

    Fixture g(trainable);
    auto half_cfg = cfg;
    auto first = make_train_state(BackboneConfig::tiny(), half_cfg, *g.guidance);
    first.config.steps = 4;
    auto s1 = g.stream(cfg);
    auto trace = losses(fit(first, *g.guidance, s1));
    first.config.steps = cfg.steps;
    save_train_state(g.dir / "mid.ckpt", first, *g.guidance);

    Fixture h(trainable);
    auto resumed = load_train_state(g.dir / "mid.ckpt", *h.guidance);
    CHECK(resumed.step == 4);
    auto s2 = h.stream(cfg);
    for (double l : losses(fit(resumed, *h.guidance, s2))) trace.push_back(l);
    CHECK(trace == uninterrupted);
    CHECK(same_parameters(*resumed.model, *full.model));
  }
}

TEST_CASE("checkpoint round trip is bitwise lossless") {
  Fixture f;
  torch::manual_seed(3);
  RestorationNet model(BackboneConfig::tiny());
  save_backbone(f.dir / "bb.ckpt", model);
  auto loaded = load_backbone(f.dir / "bb.ckpt");
  CHECK(same_parameters(*model, *loaded));
  CHECK(loaded->config().to_json() == model->config().to_json());

  const auto ckpt = read_checkpoint(f.dir / "bb.ckpt");
  std::set<std::string> names;
  uint64_t expected_offset = 0;
  for (const auto& t : ckpt.manifest.tensors) {
    CHECK(names.insert(t.name).second);
    CHECK(t.offset == expected_offset);
    expected_offset += t.nbytes;
  }
  CHECK(names.size() == unique_named_parameters(*model).size());
}

TEST_CASE("text encoder checkpoints carry their corpus and centroids") {
  Fixture f;
  save_text_encoder(f.dir / "te.ckpt", f.encoder, f.corpus, {{"steps", 0}});
  auto bundle = load_text_encoder(f.dir / "te.ckpt");
  CHECK(same_parameters(*bundle.encoder, *f.encoder));
  CHECK(bundle.corpus.vocabulary() == f.corpus.vocabulary());
  CHECK(bundle.corpus.instructions().size() == f.corpus.instructions().size());
  CHECK(bundle.centroids.centroids[0].size() == 64);
  CHECK_THROWS_AS(load_backbone(f.dir / "te.ckpt"), CheckpointError);
}

TEST_CASE("checkpoint load errors are distinct") {
  Fixture f;
  RestorationNet model(BackboneConfig::tiny());
  const auto path = f.dir / "bb.ckpt";
  auto kind_of = [&](const fs::path& p) {
    try {
      load_backbone(p);
    } catch (const CheckpointError& e) {
      return e.kind();
    }
    FAIL("expected a checkpoint error");
    return CheckpointErrorKind::io;
  };
  auto rewrite_manifest = [&](const std::function<void(nlohmann::json&)>& edit) {
    save_backbone(path, model);
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    edit(j);
    std::ofstream(path) << j.dump();
  };

  CHECK(kind_of(f.dir / "absent.ckpt") == CheckpointErrorKind::io);

  rewrite_manifest([](nlohmann::json& j) { j["version"] = kCheckpointVersion + 1; });
  CHECK(kind_of(path) == CheckpointErrorKind::version_mismatch);

  save_backbone(path, model);
  fs::resize_file(blob_path(path), fs::file_size(blob_path(path)) - 4);
  CHECK(kind_of(path) == CheckpointErrorKind::truncated_blob);

  save_backbone(path, model);
  std::ofstream(path) << "{ not json";
  CHECK(kind_of(path) == CheckpointErrorKind::malformed);

  auto params = unique_named_parameters(*model);
  NamedTensors tensors;
  for (auto& [n, t] : params) tensors.emplace_back("model." + n, t);
  CheckpointManifest manifest;
  manifest.kind = "backbone";
  manifest.config = {{"backbone", model->config().to_json()}};

  auto extra = tensors;
  extra.emplace_back("model.bogus", torch::zeros({2}));
  write_checkpoint(path, manifest, extra);
  CHECK(kind_of(path) == CheckpointErrorKind::unknown_tensor);

  auto missing = tensors;
  missing.pop_back();
  write_checkpoint(path, manifest, missing);
  CHECK(kind_of(path) == CheckpointErrorKind::missing_tensor);

  auto reshaped = tensors;
  reshaped[0].second = torch::zeros({1});
  write_checkpoint(path, manifest, reshaped);
  CHECK(kind_of(path) == CheckpointErrorKind::shape_mismatch);

  auto dup = tensors;
  dup.push_back(tensors[0]);
  CHECK_THROWS_AS(write_checkpoint(path, manifest, dup), CheckpointError);
}

TEST_CASE("overfitting eight images halves the loss within 500 steps") {
  Fixture f(false, 32, 8);
  auto cfg = f.config(500, 32, 6);
  auto state = make_train_state(BackboneConfig::tiny(), cfg, *f.guidance);
  auto stream = f.stream(cfg);
  const auto trace = losses(fit(state, *f.guidance, stream));
  REQUIRE(trace.size() == 500);
  double start = 0.0, end = 0.0;
  for (int i = 0; i < 10; ++i) {
    start += trace[i] / 10;
    end += trace[trace.size() - 1 - i] / 10;
  }
  CHECK_MESSAGE(end <= 0.5 * start, "start " << start << " end " << end);
}
