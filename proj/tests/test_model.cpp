#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "mixsep/model.hpp"

using namespace mixsep;
using Catch::Approx;

namespace {

ModelConfig tiny_config(int n_outputs = 2) {
  ModelConfig cfg;
  cfg.repeats = 1;
  cfg.dilations_per_block = 2;
  cfg.channels = 8;
  cfg.hidden = 8;
  cfg.n_outputs = n_outputs;
  cfg.stft = StftConfig{64, 16, "hann"};
  return cfg;
}

AudioSegment random_mix(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> d(-0.4, 0.4);
  AudioSegment x;
  x.samples.resize(n);
  for (auto& v : x.samples) v = d(rng);
  return x;
}

}  // namespace

TEST_CASE("forward estimates sum to the re-synthesized mixture") {
  std::mt19937 rng(1);
  auto params = model::init(tiny_config(), rng);
  auto mix = random_mix(640, 2);
  auto est = model::separate(params, mix);
  REQUIRE(est.size() == 2);
  auto resynth = dsp::istft(dsp::stft(mix, params.config.stft));
  double err = 0.0;
  for (std::size_t i = 0; i < mix.length(); ++i)
    err = std::max(err, std::abs(est[0].samples[i] + est[1].samples[i] - resynth.samples[i]));
  CHECK(err < 1e-5);
}

TEST_CASE("mixture consistency holds for the 4-output head too") {
  std::mt19937 rng(3);
  auto params = model::init(tiny_config(4), rng);
  auto mix = random_mix(640, 4);
  auto est = model::separate(params, mix);
  REQUIRE(est.size() == 4);
  auto resynth = dsp::istft(dsp::stft(mix, params.config.stft));
  double err = 0.0;
  for (std::size_t i = 0; i < mix.length(); ++i) {
    double sum = 0.0;
    for (const auto& e : est) sum += e.samples[i];
    err = std::max(err, std::abs(sum - resynth.samples[i]));
  }
  CHECK(err < 1e-5);
}

TEST_CASE("zero mixture gives zero outputs") {
  std::mt19937 rng(5);
  auto params = model::init(tiny_config(), rng);
  AudioSegment mix;
  mix.samples.assign(640, 0.0);
  auto est = model::separate(params, mix);
  for (const auto& e : est)
    for (double v : e.samples) CHECK(v == 0.0);
}

TEST_CASE("forward is deterministic for fixed parameters and input") {
  std::mt19937 rng(6);
  auto params = model::init(tiny_config(), rng);
  auto mix = random_mix(640, 7);
  auto a = model::separate(params, mix);
  auto b = model::separate(params, mix);
  for (std::size_t k = 0; k < a.size(); ++k)
    for (std::size_t i = 0; i < a[k].samples.size(); ++i) CHECK(a[k].samples[i] == b[k].samples[i]);
}

TEST_CASE("masks are strictly inside (0,1) and sum to one") {
  std::mt19937 rng(8);
  auto params = model::init(tiny_config(), rng);
  auto mix = random_mix(640, 9);
  ad::Tape tape(false);
  auto w = model::put_on_tape(tape, params);
  auto fwd = model::forward(tape, w, params.config, mix);
  const Arr& masks = tape.value(fwd.masks);
  const int f = params.config.stft.num_bins();
  CHECK(masks.minCoeff() > 0.0);
  CHECK(masks.maxCoeff() < 1.0);
  Arr sum = masks.topRows(f) + masks.bottomRows(f);
  CHECK((sum - 1.0).abs().maxCoeff() < 1e-6);
}

TEST_CASE("receptive field matches the dilation stack") {
  ModelConfig cfg = tiny_config();
  cfg.repeats = 3;
  cfg.dilations_per_block = 4;
  // kernel 3, dilations 1,2,4,8 per repeat: 1 + 2 * 3 * 15
  CHECK(cfg.receptive_field_frames() == 91);
  cfg.repeats = 1;
  cfg.dilations_per_block = 2;
  CHECK(cfg.receptive_field_frames() == 7);
}

TEST_CASE("teacher snapshot is isolated from later updates") {
  std::mt19937 rng(10);
  auto params = model::init(tiny_config(), rng);
  auto mix = random_mix(640, 11);
  auto snap = snapshot_teacher(params);

  auto before = model::separate(snap.params, mix);
  auto live = model::separate(params, mix);
  for (std::size_t i = 0; i < before[0].samples.size(); ++i)
    CHECK(before[0].samples[i] == live[0].samples[i]);

  params.at("in.w") += 0.1;  // simulate an optimizer step
  auto after_update = model::separate(snap.params, mix);
  for (std::size_t i = 0; i < before[0].samples.size(); ++i)
    CHECK(after_update[0].samples[i] == before[0].samples[i]);
}

TEST_CASE("losses on teacher outputs do not reach the live parameters") {
  std::mt19937 rng(12);
  auto params = model::init(tiny_config(), rng);
  auto mix = random_mix(640, 13);
  auto snap = snapshot_teacher(params);
  auto teacher_out = model::separate(snap.params, mix);

  ad::Tape tape;
  auto w = model::put_on_tape(tape, params);
  auto fwd = model::forward(tape, w, params.config, mix);
  // Loss uses only detached teacher signals as references; the student path
  // is live, so gradients exist for the student but none flow via teacher.
  ad::Var loss = ad::neg_snr(teacher_out[0].samples, fwd.estimates[0]);
  tape.backward(loss);
  CHECK(tape.grad(w.at("in.w")).allFinite());
}

TEST_CASE("checkpoint round trip reproduces forward outputs exactly") {
  std::mt19937 rng(14);
  auto params = model::init(tiny_config(), rng);
  params.step = 123;
  auto mix = random_mix(640, 15);
  auto before = model::separate(params, mix);

  model::Checkpoint ck;
  ck.params = params;
  ck.adam_state["in.w"] = {Arr::Ones(2, 2), Arr::Zero(2, 2)};
  ck.adam_t = 7;
  ck.rng_state = "12345";
  ck.metadata = {{"note", "test"}};
  auto path = (std::filesystem::temp_directory_path() / "mixsep_ck_test.ckpt").string();
  model::save_checkpoint(path, ck);
  auto loaded = model::load_checkpoint(path);

  CHECK(loaded.params.step == 123);
  CHECK(loaded.adam_t == 7);
  CHECK(loaded.rng_state == "12345");
  CHECK(loaded.adam_state.at("in.w").first(0, 0) == 1.0);
  auto after = model::separate(loaded.params, mix);
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t i = 0; i < before[k].samples.size(); ++i)
      CHECK(after[k].samples[i] == before[k].samples[i]);
  std::filesystem::remove(path);
}

TEST_CASE("non-finite parameters fail fast") {
  std::mt19937 rng(16);
  auto params = model::init(tiny_config(), rng);
  params.at("in.w")(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS(model::separate(params, random_mix(640, 17)));
  CHECK_THROWS_AS(snapshot_teacher(params), std::runtime_error);
}
