#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mixsep/config.hpp"

using namespace mixsep;
namespace fs = std::filesystem;

TEST_CASE("defaults parse into a valid run config") {
  auto c = config::parse_run_config(config::default_config_json());
  CHECK(c.method == "pit");
  CHECK(c.seed == 1);
  CHECK(c.sample_rate == 8000);
  CHECK(c.model.stft.window_size == 512);
  CHECK(c.model.stft.hop_size == 128);
  CHECK(c.trainer.batch_size == 128);
  CHECK(c.trainer.grad_clip_norm == 5.0);
  CHECK(c.trainer.segment_length == 24000);
  CHECK(c.trainer.loss.snr_max == 30.0);
}

TEST_CASE("unknown keys are rejected at every level") {
  auto j = config::default_config_json();
  SECTION("top level") {
    j["typo"] = 1;
    CHECK_THROWS_WITH(config::parse_run_config(j), Catch::Matchers::ContainsSubstring("typo"));
  }
  SECTION("nested") {
    j["train"]["learning_rate"] = 0.01;  // correct key is "lr"
    CHECK_THROWS_WITH(config::parse_run_config(j),
                      Catch::Matchers::ContainsSubstring("train.learning_rate"));
  }
  SECTION("model scope") {
    j["model"]["depth"] = 4;
    CHECK_THROWS_WITH(config::parse_run_config(j), Catch::Matchers::ContainsSubstring("model.depth"));
  }
}

TEST_CASE("dotted overrides") {
  auto j = config::default_config_json();
  config::apply_override(j, "train.lr=0.01");
  config::apply_override(j, "method=mixcycle");
  config::apply_override(j, "data.train_manifest=/tmp/x.jsonl");
  config::apply_override(j, "model.channels=32");
  auto c = config::parse_run_config(j);
  CHECK(c.trainer.lr == 0.01);
  CHECK(c.method == "mixcycle");
  CHECK(c.trainer.method == train::Method::kMixcycle);
  CHECK(c.train_manifest == "/tmp/x.jsonl");
  CHECK(c.model.channels == 32);

  CHECK_THROWS_AS(config::apply_override(j, "no_equals_sign"), std::invalid_argument);
}

TEST_CASE("invalid values fail validation") {
  SECTION("unknown method") {
    auto j = config::default_config_json();
    j["method"] = "dpcl";
    CHECK_THROWS(config::parse_run_config(j));
  }
  SECTION("non-power-of-two window") {
    auto j = config::default_config_json();
    j["model"]["window_size"] = 500;
    CHECK_THROWS(config::parse_run_config(j));
  }
  SECTION("hop must divide window") {
    auto j = config::default_config_json();
    j["model"]["hop_size"] = 100;
    CHECK_THROWS(config::parse_run_config(j));
  }
  SECTION("zero batch size") {
    auto j = config::default_config_json();
    j["train"]["batch_size"] = 0;
    CHECK_THROWS(config::parse_run_config(j));
  }
  SECTION("negative clip norm") {
    auto j = config::default_config_json();
    j["train"]["grad_clip_norm"] = -1.0;
    CHECK_THROWS(config::parse_run_config(j));
  }
}

TEST_CASE("load_run_config merges file and overrides over defaults") {
  auto p = fs::temp_directory_path() / "mixsep_cfg_test.json";
  {
    std::ofstream f(p);
    f << R"({"method": "mixpit", "train": {"lr": 0.005}})";
  }
  auto c = config::load_run_config(p.string(), {"train.max_epochs=7"});
  CHECK(c.method == "mixpit");
  CHECK(c.trainer.lr == 0.005);
  CHECK(c.trainer.max_epochs == 7);
  CHECK(c.trainer.batch_size == 128);  // untouched default
  fs::remove(p);

  CHECK_THROWS_AS(config::load_run_config("/no/such/config.json", {}), std::invalid_argument);
}

TEST_CASE("the resolved snapshot reflects overrides") {
  auto j = config::default_config_json();
  config::apply_override(j, "seed=99");
  auto c = config::parse_run_config(j);
  CHECK(c.snapshot["seed"] == 99);
  CHECK(c.seed == 99);
}
