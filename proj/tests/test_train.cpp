#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "mixsep/train.hpp"

using namespace mixsep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mixsep_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.repeats = 1;
  cfg.dilations_per_block = 2;
  cfg.channels = 8;
  cfg.hidden = 8;
  cfg.stft = StftConfig{64, 16, "hann"};
  return cfg;
}

train::TrainConfig tiny_train(train::Method method) {
  train::TrainConfig cfg;
  cfg.method = method;
  cfg.batch_size = 2;
  cfg.max_epochs = 2;
  cfg.mixpit_warmstart_epochs = 0;
  cfg.segment_length = 2000;
  cfg.n_threads = 2;
  cfg.seed = 5;
  return cfg;
}

struct Corpus {
  TempDir dir;
  data::ToyCorpus corpus;
  Corpus()
      : dir("corpus"), corpus([this] {
          data::ToySpec spec;
          spec.n_train = 8;
          spec.n_val = 4;
          spec.n_test = 2;
          spec.utterance_seconds = 0.5;
          return data::synth_toy_corpus(dir.path.string(), spec);
        }()) {}
};

}  // namespace

TEST_CASE("clip_gradients scales only above the threshold") {
  train::Grads g;
  g.push_back(Arr::Constant(2, 2, 3.0));  // norm 6
  double pre = train::clip_gradients(g, 5.0);
  CHECK(pre == Catch::Approx(6.0));
  CHECK(train::global_grad_norm(g) == Catch::Approx(5.0));

  train::Grads h;
  h.push_back(Arr::Constant(2, 2, 1.0));  // norm 2
  train::clip_gradients(h, 5.0);
  CHECK(h[0](0, 0) == 1.0);
}

TEST_CASE("adam_step updates every tensor and tracks the step count") {
  std::mt19937 rng(1);
  auto params = model::init(tiny_model(), rng);
  auto before = params;
  train::AdamState opt;
  train::TrainConfig cfg;
  auto grads = train::zero_grads(params);
  for (auto& g : grads) g.setConstant(0.01);
  train::adam_step(params, opt, grads, cfg);
  CHECK(opt.t == 1);
  CHECK(params.step == before.step + 1);
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    CHECK((params.tensors[i].second - before.tensors[i].second).abs().maxCoeff() > 0.0);
}

TEST_CASE("pit_loss_on_tape matches the value-level loss") {
  std::mt19937 rng(2);
  std::uniform_real_distribution<double> d(-0.5, 0.5);
  std::vector<double> r1(64), r2(64);
  Arr o1(1, 64), o2(1, 64);
  for (int i = 0; i < 64; ++i) {
    r1[std::size_t(i)] = d(rng);
    r2[std::size_t(i)] = d(rng);
    o1(0, i) = d(rng);
    o2(0, i) = d(rng);
  }
  ad::Tape tape;
  ad::Var v1 = tape.leaf(o1), v2 = tape.leaf(o2);
  LossConfig lc;
  auto [l, perm] = train::pit_loss_on_tape(tape, r1, r2, v1, v2, lc);
  std::vector<double> s1(o1.data(), o1.data() + 64), s2(o2.data(), o2.data() + 64);
  auto ref = metrics::pit_loss(r1, r2, s1, s2, lc);
  CHECK(tape.value(l)(0, 0) == Catch::Approx(ref.loss));
  CHECK(perm == ref.permutation);
}

TEST_CASE("remix choices are balanced") {
  std::mt19937 rng(3);
  int opt1 = 0;
  for (int i = 0; i < 2000; ++i)
    if (train::draw_remix_choice(rng) == train::RemixChoice::kOpt1) ++opt1;
  CHECK(opt1 > 850);
  CHECK(opt1 < 1150);
}

TEST_CASE("one step of each method runs and produces finite losses") {
  Corpus c;
  data::SegmentSampler sampler{2000};

  SECTION("supervised and mixpit") {
    for (auto method : {train::Method::kPit, train::Method::kMixpit}) {
      auto cfg = tiny_train(method);
      train::TrainState state;
      state.rng.seed(cfg.seed);
      state.params = model::init(tiny_model(), state.rng);
      train::StepStats st;
      if (method == train::Method::kPit)
        st = train::train_step_supervised(
            state, data::make_supervised_batch(c.corpus.train, sampler, 2, state.rng), cfg);
      else
        st = train::train_step_mixpit(state,
                                      data::make_mom_batch(c.corpus.train, sampler, 2, state.rng), cfg);
      CHECK(std::isfinite(st.mean_loss));
      CHECK(st.grad_norm_pre_clip >= 0.0);
      CHECK(state.params.finite());
    }
  }
  SECTION("mixit needs a 4-output model") {
    auto cfg = tiny_train(train::Method::kMixit);
    train::TrainState state;
    state.rng.seed(cfg.seed);
    auto mc = tiny_model();
    state.params = model::init(mc, state.rng);  // 2 outputs: must throw
    auto batch = data::make_mom_batch(c.corpus.train, sampler, 2, state.rng);
    CHECK_THROWS(train::train_step_mixit(state, batch, cfg));
    mc.n_outputs = 4;
    state.params = model::init(mc, state.rng);
    auto st = train::train_step_mixit(state, batch, cfg);
    CHECK(std::isfinite(st.mean_loss));
  }
  SECTION("mixcycle") {
    auto cfg = tiny_train(train::Method::kMixcycle);
    train::TrainState state;
    state.rng.seed(cfg.seed);
    state.params = model::init(tiny_model(), state.rng);
    auto batch = data::make_pair_batch(c.corpus.train, sampler, 2, state.rng);
    auto st = train::train_step_mixcycle(state, batch, cfg);
    CHECK(std::isfinite(st.mean_loss));
    CHECK(state.params.finite());
  }
}

TEST_CASE("training steps are deterministic for a fixed seed and thread count") {
  Corpus c;
  data::SegmentSampler sampler{2000};
  auto cfg = tiny_train(train::Method::kMixpit);

  auto run_once = [&]() {
    train::TrainState state;
    state.rng.seed(cfg.seed);
    state.params = model::init(tiny_model(), state.rng);
    for (int s = 0; s < 2; ++s)
      train::train_step_mixpit(state, data::make_mom_batch(c.corpus.train, sampler, 2, state.rng), cfg);
    return state.params;
  };
  auto a = run_once();
  auto b = run_once();
  for (std::size_t i = 0; i < a.tensors.size(); ++i)
    CHECK((a.tensors[i].second == b.tensors[i].second).all());
}

TEST_CASE("supervised training drives the loss down on the toy corpus") {
  Corpus c;
  data::SegmentSampler sampler{2000};
  auto cfg = tiny_train(train::Method::kPit);
  cfg.lr = 3e-3;
  train::TrainState state;
  state.rng.seed(cfg.seed);
  state.params = model::init(tiny_model(), state.rng);
  std::vector<double> losses;
  for (int s = 0; s < 25; ++s) {
    auto batch = data::make_supervised_batch(c.corpus.train, sampler, 4, state.rng);
    losses.push_back(train::train_step_supervised(state, batch, cfg).mean_loss);
  }
  double first = (losses[0] + losses[1] + losses[2]) / 3.0;
  double last = (losses[22] + losses[23] + losses[24]) / 3.0;
  CHECK(last < first);
}

TEST_CASE("run_training writes logs, checkpoints, and early-stops") {
  Corpus c;
  TempDir run("run");

  SECTION("mixcycle warm start phases are logged, then the cycle phase") {
    auto cfg = tiny_train(train::Method::kMixcycle);
    cfg.max_epochs = 3;
    cfg.mixpit_warmstart_epochs = 2;
    auto mc = tiny_model();
    auto out = train::run_training(cfg, c.corpus.train, c.corpus.val, (run.path / "mc").string(), &mc);
    REQUIRE(out.log.size() == 3);
    CHECK(out.log[0].method_phase == "mixpit(warmstart)");
    CHECK(out.log[1].method_phase == "mixpit(warmstart)");
    CHECK(out.log[2].method_phase == "mixcycle");
    CHECK(fs::exists(run.path / "mc" / "log.jsonl"));
    CHECK(fs::exists(run.path / "mc" / "best.ckpt"));
  }
  SECTION("a frozen model early-stops after the patience runs out") {
    auto cfg = tiny_train(train::Method::kMixpit);
    cfg.lr = 0.0;  // no movement: validation can never improve after epoch 1
    cfg.max_epochs = 50;
    cfg.early_stop_patience = 1;
    auto mc = tiny_model();
    auto out = train::run_training(cfg, c.corpus.train, c.corpus.val, "", &mc);
    CHECK(out.log.size() == 3);  // best at 1, patience consumed at 2 and 3
    CHECK(out.best_epoch == 1);
  }
  SECTION("supervised methods reject manifests without references") {
    auto cfg = tiny_train(train::Method::kPit);
    data::Manifest stripped = c.corpus.train;
    for (auto& r : stripped.records) r.source_paths.clear();
    auto mc = tiny_model();
    CHECK_THROWS(train::run_training(cfg, stripped, c.corpus.val, "", &mc));
  }
}
