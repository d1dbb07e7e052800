#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "mixsep/data.hpp"

using namespace mixsep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mixsep_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

data::ToySpec small_spec() {
  data::ToySpec spec;
  spec.n_train = 8;
  spec.n_val = 3;
  spec.n_test = 3;
  spec.utterance_seconds = 1.0;
  return spec;
}

}  // namespace

TEST_CASE("toy corpus: sources sum to the mixture bit-exactly after 16-bit I/O") {
  TempDir dir("toy_exact");
  auto corpus = data::synth_toy_corpus(dir.path.string(), small_spec());
  REQUIRE(corpus.train.size() == 8);
  REQUIRE(corpus.val.size() == 3);
  REQUIRE(corpus.test.size() == 3);
  for (const auto& rec : corpus.train.records) {
    auto loaded = data::load_record(rec);
    REQUIRE(loaded.sources.size() == 2);
    for (std::size_t i = 0; i < loaded.mixture.length(); ++i)
      REQUIRE(loaded.sources[0].samples[i] + loaded.sources[1].samples[i] ==
              Catch::Approx(loaded.mixture.samples[i]).margin(1e-12));
  }
}

TEST_CASE("toy corpus is deterministic under a fixed seed") {
  TempDir d1("toy_det_a"), d2("toy_det_b");
  auto c1 = data::synth_toy_corpus(d1.path.string(), small_spec());
  auto c2 = data::synth_toy_corpus(d2.path.string(), small_spec());
  auto a = data::load_record(c1.train.records[0]);
  auto b = data::load_record(c2.train.records[0]);
  REQUIRE(a.mixture.length() == b.mixture.length());
  for (std::size_t i = 0; i < a.mixture.length(); ++i)
    REQUIRE(a.mixture.samples[i] == b.mixture.samples[i]);
}

TEST_CASE("toy corpus rejects empty splits") {
  data::ToySpec spec = small_spec();
  spec.n_val = 0;
  CHECK_THROWS_AS(data::synth_toy_corpus("/tmp/mixsep_never", spec), std::invalid_argument);
}

TEST_CASE("manifest round trip and validation") {
  TempDir dir("manifest");
  auto corpus = data::synth_toy_corpus(dir.path.string(), small_spec());
  auto manifest_path = (dir.path / "train" / "manifest.jsonl").string();

  SECTION("loading the saved manifest succeeds and preserves records") {
    auto m = data::load_manifest(manifest_path);
    CHECK(m.size() == 8);
    CHECK(m.all_have_sources());
  }
  SECTION("missing file is reported with the record number") {
    auto m = data::load_manifest(manifest_path);
    m.records[2].mixture_path = (dir.path / "nope.wav").string();
    auto bad = (dir.path / "bad.jsonl").string();
    data::save_manifest(bad, m);
    CHECK_THROWS_WITH(data::load_manifest(bad), Catch::Matchers::ContainsSubstring("record 3"));
  }
  SECTION("sample-rate mismatch is rejected") {
    CHECK_THROWS_WITH(data::load_manifest(manifest_path, 16000),
                      Catch::Matchers::ContainsSubstring("sample rate"));
  }
  SECTION("wrong samples field is rejected") {
    auto m = data::load_manifest(manifest_path);
    m.records[0].duration_samples += 1;
    auto bad = (dir.path / "bad_len.jsonl").string();
    data::save_manifest(bad, m);
    CHECK_THROWS_WITH(data::load_manifest(bad), Catch::Matchers::ContainsSubstring("samples field"));
  }
  SECTION("sources that do not sum to the mixture are rejected") {
    auto m = data::load_manifest(manifest_path);
    // Point record 1's mixture at a different record's mixture file.
    m.records[0].mixture_path = m.records[1].mixture_path;
    m.records[0].duration_samples = m.records[1].duration_samples;
    auto bad = (dir.path / "bad_sum.jsonl").string();
    data::save_manifest(bad, m);
    CHECK_THROWS_WITH(data::load_manifest(bad),
                      Catch::Matchers::ContainsSubstring("do not sum to mixture"));
  }
  SECTION("malformed JSON line is rejected with its line number") {
    auto bad = (dir.path / "bad_json.jsonl").string();
    std::ofstream f(bad);
    f << "{not json}\n";
    f.close();
    CHECK_THROWS_WITH(data::load_manifest(bad), Catch::Matchers::ContainsSubstring("record 1"));
  }
  SECTION("empty manifest loads as zero records") {
    auto empty = (dir.path / "empty.jsonl").string();
    std::ofstream(empty).close();
    CHECK(data::load_manifest(empty).size() == 0);
  }
}

TEST_CASE("librimix-style directory adapter") {
  TempDir dir("librimix");
  data::synth_toy_corpus(dir.path.string(), small_spec());
  auto m = data::manifest_from_librimix((dir.path / "val").string());
  CHECK(m.size() == 3);
  CHECK(m.all_have_sources());
  CHECK_THROWS_WITH(data::manifest_from_librimix((dir.path / "no_such").string()),
                    Catch::Matchers::ContainsSubstring("mix_clean"));
}

TEST_CASE("segment sampler cuts aligned segments and zero-pads short input") {
  data::SegmentSampler sampler{4000};
  std::mt19937 rng(1);

  SECTION("long input: mixture and sources are cut at the same offset") {
    data::LoadedRecord rec;
    rec.mixture.samples.resize(10000);
    rec.sources.resize(2);
    rec.sources[0].samples.resize(10000);
    rec.sources[1].samples.resize(10000);
    for (std::size_t i = 0; i < 10000; ++i) {
      rec.sources[0].samples[i] = 0.3 * std::sin(0.01 * double(i));
      rec.sources[1].samples[i] = 0.2 * std::cos(0.017 * double(i));
      rec.mixture.samples[i] = rec.sources[0].samples[i] + rec.sources[1].samples[i];
    }
    auto cut = sampler.sample(rec, rng);
    REQUIRE(cut.mixture.length() == 4000);
    for (std::size_t i = 0; i < 4000; ++i)
      REQUIRE(cut.sources[0].samples[i] + cut.sources[1].samples[i] ==
              Catch::Approx(cut.mixture.samples[i]).margin(1e-12));
  }
  SECTION("short input is right-padded with zeros") {
    data::LoadedRecord rec;
    rec.mixture.samples.assign(1000, 0.5);
    auto cut = sampler.sample(rec, rng);
    REQUIRE(cut.mixture.length() == 4000);
    for (std::size_t i = 0; i < 1000; ++i) CHECK(cut.mixture.samples[i] == 0.5);
    for (std::size_t i = 1000; i < 4000; ++i) CHECK(cut.mixture.samples[i] == 0.0);
  }
  SECTION("offsets cover the feasible range") {
    data::LoadedRecord rec;
    rec.mixture.samples.resize(8000);
    for (std::size_t i = 0; i < 8000; ++i) rec.mixture.samples[i] = double(i);
    std::vector<double> starts;
    for (int k = 0; k < 200; ++k) starts.push_back(sampler.sample(rec, rng).mixture.samples[0]);
    auto [lo, hi] = std::minmax_element(starts.begin(), starts.end());
    CHECK(*lo < 400.0);    // near the left edge
    CHECK(*hi > 3600.0);   // near the right edge (max offset 4000)
  }
}

TEST_CASE("batch constructors") {
  TempDir dir("batches");
  auto corpus = data::synth_toy_corpus(dir.path.string(), small_spec());
  data::SegmentSampler sampler{4000};
  std::mt19937 rng(7);

  SECTION("supervised batch carries aligned references") {
    auto b = data::make_supervised_batch(corpus.train, sampler, 4, rng);
    REQUIRE(b.mixtures.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t s = 0; s < 4000; ++s)
        REQUIRE(b.references[i][0].samples[s] + b.references[i][1].samples[s] ==
                Catch::Approx(b.mixtures[i].samples[s]).margin(1e-9));
  }
  SECTION("mom batch is the exact sum of two distinct mixtures") {
    auto b = data::make_mom_batch(corpus.train, sampler, 4, rng);
    REQUIRE(b.mom.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      bool identical = true;
      for (std::size_t s = 0; s < 4000 && identical; ++s)
        identical = b.mix_1[i].samples[s] == b.mix_2[i].samples[s];
      CHECK_FALSE(identical);
      for (std::size_t s = 0; s < 4000; ++s)
        REQUIRE(b.mom[i].samples[s] == b.mix_1[i].samples[s] + b.mix_2[i].samples[s]);
    }
  }
  SECTION("a full epoch of mom pairs uses each record once before reuse") {
    std::vector<std::size_t> idx = data::detail::draw_indices(8, 8, rng);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < 8; ++i) CHECK(idx[i] == i);
  }
  SECTION("draw_indices reuses only when the manifest is exhausted") {
    auto idx = data::detail::draw_indices(3, 7, rng);
    REQUIRE(idx.size() == 7);
    std::array<int, 3> counts{0, 0, 0};
    for (auto i : idx) counts[i]++;
    for (int c : counts) CHECK(c >= 2);
  }
  SECTION("pair batch matches the mom batch minus the sum channel") {
    auto b = data::make_pair_batch(corpus.train, sampler, 3, rng);
    CHECK(b.mix_1.size() == 3);
    CHECK(b.mix_2.size() == 3);
  }
  SECTION("dynamic mixing builds new mixtures from single sources") {
    auto b = data::make_dynamic_mix_batch(corpus.train, sampler, 4, rng);
    REQUIRE(b.mixtures.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t s = 0; s < 4000; ++s)
        REQUIRE(b.references[i][0].samples[s] + b.references[i][1].samples[s] ==
                Catch::Approx(b.mixtures[i].samples[s]).margin(1e-12));
  }
  SECTION("empty or too-small manifests are rejected") {
    data::Manifest empty;
    CHECK_THROWS(data::make_supervised_batch(empty, sampler, 2, rng));
    data::Manifest one;
    one.records.push_back(corpus.train.records[0]);
    CHECK_THROWS(data::make_mom_batch(one, sampler, 2, rng));
    CHECK_THROWS(data::make_dynamic_mix_batch(one, sampler, 2, rng));
  }
}

TEST_CASE("wav round trip preserves 16-bit content") {
  TempDir dir("wav");
  AudioSegment x;
  x.sample_rate = 8000;
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> d(-0.9, 0.9);
  x.samples.resize(1234);
  for (auto& v : x.samples) v = double(wav::quantize(d(rng))) / 32768.0;
  auto p = (dir.path / "x.wav").string();
  wav::write(p, x);
  auto y = wav::read(p);
  REQUIRE(y.length() == x.length());
  CHECK(y.sample_rate == 8000);
  for (std::size_t i = 0; i < x.length(); ++i) REQUIRE(y.samples[i] == x.samples[i]);
}
