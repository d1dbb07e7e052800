// mixsep command-line entry point: synth, train, eval, self-eval, report.
#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "mixsep/config.hpp"
#include "mixsep/data.hpp"
#include "mixsep/eval.hpp"
#include "mixsep/model.hpp"
#include "mixsep/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

std::string run_root() {
  const char* env = std::getenv("MIXSEP_RUN_ROOT");
  return env ? env : ".";
}

int cmd_synth(const std::string& out_dir, mixsep::data::ToySpec spec) {
  auto corpus = mixsep::data::synth_toy_corpus(out_dir, spec);
  json report = {{"train", corpus.train.size()},
                 {"val", corpus.val.size()},
                 {"test", corpus.test.size()},
                 {"sample_rate", spec.sample_rate},
                 {"utterance_seconds", spec.utterance_seconds},
                 {"seed", spec.seed}};
  std::ofstream f(fs::path(out_dir) / "generation.json");
  f << report.dump(2) << "\n";
  std::cout << report.dump(2) << "\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              std::string out_dir, const std::string& resume_path) {
  auto cfg = mixsep::config::load_run_config(config_path, overrides);
  if (cfg.train_manifest.empty() || cfg.val_manifest.empty())
    throw std::invalid_argument("config: data.train_manifest and data.val_manifest are required");

  if (out_dir.empty()) out_dir = (fs::path(run_root()) / ("run_" + cfg.method)).string();
  fs::create_directories(out_dir);
  {
    std::ofstream snap(fs::path(out_dir) / "config.json");
    snap << cfg.snapshot.dump(2) << "\n";
  }

  auto train_manifest = mixsep::data::load_manifest(cfg.train_manifest, cfg.sample_rate);
  auto val_manifest = mixsep::data::load_manifest(cfg.val_manifest, cfg.sample_rate);

  std::optional<mixsep::model::Checkpoint> resume;
  if (!resume_path.empty()) resume = mixsep::model::load_checkpoint(resume_path);

  auto outcome = mixsep::train::run_training(cfg.trainer, train_manifest, val_manifest, out_dir,
                                             &cfg.model, resume ? &*resume : nullptr);
  std::cout << "best epoch " << outcome.best_epoch << ", val loss " << outcome.best_val << "\n"
            << "best checkpoint: " << (fs::path(out_dir) / "best.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& manifest_path, const std::string& out_path,
             const std::string& protocol, int repetitions, unsigned seed) {
  auto ck = mixsep::model::load_checkpoint(ckpt_path);
  auto manifest =
      mixsep::data::load_manifest(manifest_path, ck.params.config.sample_rate);

  mixsep::eval::EvalReport report;
  if (protocol == "GE") {
    if (!manifest.all_have_sources())
      throw std::runtime_error("manifest has records without references; use self-eval instead");
    report = mixsep::eval::evaluate_ground_truth(ck.params, manifest);
  } else if (protocol == "MixIT-oracle") {
    report = mixsep::eval::evaluate_mixit_oracle(ck.params, manifest);
  } else if (protocol == "IRM-oracle") {
    report = mixsep::eval::evaluate_irm_oracle(manifest, ck.params.config.stft);
  } else if (protocol == "SE") {
    std::mt19937 rng(seed);
    report = mixsep::eval::self_evaluate(ck.params, manifest, repetitions, rng);
  } else {
    throw std::invalid_argument("unknown protocol: " + protocol);
  }
  report.metadata["checkpoint"] = ckpt_path;
  report.metadata["manifest"] = manifest_path;

  if (!out_path.empty()) mixsep::eval::write_report_atomic(out_path, report);
  std::cout << "protocol,mean_db,std_db,n\n" << mixsep::eval::csv_row(report) << "\n";
  return kExitOk;
}

int cmd_report(const std::vector<std::string>& report_paths) {
  std::printf("%-14s %-14s %10s %10s %8s\n", "protocol", "label", "mean(dB)", "std(dB)", "n");
  for (const auto& p : report_paths) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot open report: " + p);
    json j = json::parse(f);
    std::string label = fs::path(p).stem().string();
    std::printf("%-14s %-14s %10.2f %10.2f %8zu\n", j.at("protocol").get<std::string>().c_str(),
                label.c_str(), j.at("mean_db").get<double>(), j.at("std_db").get<double>(),
                j.at("n").get<std::size_t>());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixsep: speech separation training and evaluation lab"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic toy corpus");
  std::string synth_out = "toy_corpus";
  mixsep::data::ToySpec toy_spec;
  synth->add_option("--out", synth_out, "Output directory");
  synth->add_option("--n-train", toy_spec.n_train, "Training mixtures");
  synth->add_option("--n-val", toy_spec.n_val, "Validation mixtures");
  synth->add_option("--n-test", toy_spec.n_test, "Test mixtures");
  synth->add_option("--sample-rate", toy_spec.sample_rate, "Sample rate in Hz");
  synth->add_option("--seconds", toy_spec.utterance_seconds, "Utterance length in seconds");
  synth->add_option("--families", toy_spec.source_families, "Number of source families");
  synth->add_option("--seed", toy_spec.seed, "Generator seed");

  // train
  auto* train = app.add_subcommand("train", "Train one of: pit, pit_dm, mixit, mixpit, mixcycle");
  std::string train_config, train_out, resume_path;
  std::vector<std::string> overrides;
  train->add_option("--config", train_config, "JSON config file");
  train->add_option("--out", train_out, "Run directory");
  train->add_option("--overrides", overrides, "Dotted-key overrides, e.g. train.lr=0.001");
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  // eval / self-eval
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint against references");
  std::string eval_ckpt, eval_manifest, eval_out, eval_protocol = "GE";
  evalc->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  evalc->add_option("--manifest", eval_manifest, "Manifest to evaluate on")->required();
  evalc->add_option("--out", eval_out, "Report JSON output path");
  evalc->add_option("--protocol", eval_protocol, "GE, MixIT-oracle, or IRM-oracle");

  auto* sev = app.add_subcommand("self-eval", "Reference-free self-evaluation");
  std::string se_ckpt, se_manifest, se_out;
  int se_reps = 100;
  unsigned se_seed = 1;
  sev->add_option("--checkpoint", se_ckpt, "Checkpoint file")->required();
  sev->add_option("--manifest", se_manifest, "Manifest (mixtures only are used)")->required();
  sev->add_option("--out", se_out, "Report JSON output path");
  sev->add_option("--repetitions", se_reps, "Remixing repetitions (default 100)");
  sev->add_option("--seed", se_seed, "Pairing seed");

  auto* rep = app.add_subcommand("report", "Tabulate evaluation report JSONs");
  std::vector<std::string> report_paths;
  rep->add_option("reports", report_paths, "Report JSON files")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(synth_out, toy_spec);
    if (train->parsed()) return cmd_train(train_config, overrides, train_out, resume_path);
    if (evalc->parsed()) return cmd_eval(eval_ckpt, eval_manifest, eval_out, eval_protocol, 0, 0);
    if (sev->parsed()) return cmd_eval(se_ckpt, se_manifest, se_out, "SE", se_reps, se_seed);
    if (rep->parsed()) return cmd_report(report_paths);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    std::string msg = e.what();
    bool data_error = msg.find("manifest") != std::string::npos || msg.find("wav") != std::string::npos ||
                      msg.find("open") != std::string::npos || msg.find("reference") != std::string::npos;
    return data_error ? kExitData : kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
