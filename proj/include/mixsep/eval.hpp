// Evaluation protocols: ground-truth (GE), IRM oracle, MixIT oracle, and the
// reference-free self-evaluation (SE).
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixsep/data.hpp"
#include "mixsep/metrics.hpp"
#include "mixsep/model.hpp"

namespace mixsep::eval {

struct EvalReport {
  std::string protocol;  // "GE", "IRM-oracle", "MixIT-oracle", "SE"
  std::vector<double> per_item_si_snri;
  std::size_t n_items = 0;
  nlohmann::json metadata;

  double mean() const {
    if (per_item_si_snri.empty()) return 0.0;
    return std::accumulate(per_item_si_snri.begin(), per_item_si_snri.end(), 0.0) /
           double(per_item_si_snri.size());
  }
  double stddev() const {
    if (per_item_si_snri.size() < 2) return 0.0;
    double m = mean();
    double s = 0.0;
    for (double v : per_item_si_snri) s += (v - m) * (v - m);
    return std::sqrt(s / double(per_item_si_snri.size() - 1));
  }
};

inline nlohmann::json to_json(const EvalReport& r, bool include_items = true) {
  nlohmann::json j;
  j["protocol"] = r.protocol;
  j["mean_db"] = r.mean();
  j["std_db"] = r.stddev();
  j["n"] = r.n_items;
  j["metadata"] = r.metadata;
  if (include_items) j["per_item"] = r.per_item_si_snri;
  return j;
}

inline std::string csv_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%.3f,%.3f,%zu", r.protocol.c_str(), r.mean(), r.stddev(),
                r.n_items);
  return buf;
}

// Temp-file plus rename, so readers never observe a partial report.
inline void write_report_atomic(const std::string& path, const EvalReport& r) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write report: " + path);
    f << to_json(r).dump(2) << "\n";
    if (!f) throw std::runtime_error("report write failed: " + path);
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

template <typename Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t nt = std::max<std::size_t>(1, std::min<std::size_t>(hw ? hw : 1, n));
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(nt);
  for (std::size_t t = 0; t < nt; ++t)
    threads.emplace_back([&, t]() {
      try {
        for (std::size_t i = t; i < n; i += nt) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : threads) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Best assignment of two references onto the estimates, maximizing summed
// SI-SNRi. With two estimates this is the 2-permutation search; with four
// (MixIT head) it is the best injective pick of 2 of the 4.
inline double best_match_si_snri(const AudioSegment& ref1, const AudioSegment& ref2,
                                 const std::vector<AudioSegment>& est, const AudioSegment& mix) {
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < est.size(); ++a) {
    for (std::size_t b = 0; b < est.size(); ++b) {
      if (a == b) continue;
      double v = metrics::si_snr_improvement(ref1.samples, est[a].samples, mix.samples) +
                 metrics::si_snr_improvement(ref2.samples, est[b].samples, mix.samples);
      best = std::max(best, v);
    }
  }
  return best / 2.0;  // mean over the two sources
}

}  // namespace detail

// Per item: forward on the single mixture, best output-to-reference match,
// average the per-source SI-SNRi pair.
inline EvalReport evaluate_ground_truth(const ModelParameters& params, const data::Manifest& manifest) {
  if (!manifest.all_have_sources())
    throw std::runtime_error("evaluate_ground_truth: manifest records need references");
  EvalReport r;
  r.protocol = "GE";
  r.per_item_si_snri.resize(manifest.size());
  detail::parallel_for(manifest.size(), [&](std::size_t i) {
    auto rec = data::load_record(manifest.records[i]);
    auto est = model::separate(params, rec.mixture);
    r.per_item_si_snri[i] = detail::best_match_si_snri(rec.sources[0], rec.sources[1], est, rec.mixture);
  });
  r.n_items = r.per_item_si_snri.size();
  r.metadata = {{"dataset_items", manifest.size()}};
  return r;
}

// Ideal-ratio-mask oracle: masks from the true source magnitudes, applied to
// the mixture with the mixture phase. The empirical ceiling for mask models.
inline EvalReport evaluate_irm_oracle(const data::Manifest& manifest, const StftConfig& stft_cfg) {
  if (!manifest.all_have_sources())
    throw std::runtime_error("evaluate_irm_oracle: manifest records need references");
  EvalReport r;
  r.protocol = "IRM-oracle";
  r.per_item_si_snri.resize(manifest.size());
  detail::parallel_for(manifest.size(), [&](std::size_t i) {
    auto rec = data::load_record(manifest.records[i]);
    auto mix_spec = dsp::stft(rec.mixture, stft_cfg);
    auto s1_spec = dsp::stft(rec.sources[0], stft_cfg);
    auto s2_spec = dsp::stft(rec.sources[1], stft_cfg);
    Arr raw1 = s1_spec.magnitude + 1e-12;
    Arr raw2 = s2_spec.magnitude + 1e-12;
    auto [masks, e1, e2] = dsp::apply_masks(mix_spec, raw1, raw2);
    r.per_item_si_snri[i] =
        detail::best_match_si_snri(rec.sources[0], rec.sources[1], {e1, e2}, rec.mixture);
  });
  r.n_items = r.per_item_si_snri.size();
  r.metadata = {{"window_size", stft_cfg.window_size}, {"hop_size", stft_cfg.hop_size}};
  return r;
}

// Oracle evaluation of a 4-output MixIT model: group the outputs with the
// best 2x4 mixing matrix against the references, quantifying how much
// over-separation costs the standard evaluation.
inline EvalReport evaluate_mixit_oracle(const ModelParameters& params, const data::Manifest& manifest) {
  if (params.config.n_outputs != 4)
    throw std::runtime_error("evaluate_mixit_oracle: model must have 4 outputs");
  if (!manifest.all_have_sources())
    throw std::runtime_error("evaluate_mixit_oracle: manifest records need references");
  EvalReport r;
  r.protocol = "MixIT-oracle";
  r.per_item_si_snri.resize(manifest.size());
  detail::parallel_for(manifest.size(), [&](std::size_t i) {
    auto rec = data::load_record(manifest.records[i]);
    auto est = model::separate(params, rec.mixture);
    const std::size_t n = rec.mixture.length();
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < 16; ++a) {
      AudioSegment g1(std::vector<double>(n, 0.0), rec.mixture.sample_rate);
      AudioSegment g2(std::vector<double>(n, 0.0), rec.mixture.sample_rate);
      for (int o = 0; o < 4; ++o) {
        AudioSegment& dst = (a >> o) & 1 ? g2 : g1;
        for (std::size_t s = 0; s < n; ++s) dst.samples[s] += est[std::size_t(o)].samples[s];
      }
      double v =
          metrics::si_snr_improvement(rec.sources[0].samples, g1.samples, rec.mixture.samples) +
          metrics::si_snr_improvement(rec.sources[1].samples, g2.samples, rec.mixture.samples);
      best = std::max(best, v);
    }
    r.per_item_si_snri[i] = best / 2.0;
  });
  r.n_items = r.per_item_si_snri.size();
  r.metadata = {{"dataset_items", manifest.size()}};
  return r;
}

// Reference-free self-evaluation: the trained model's own estimates serve as
// pseudo-references; estimates from different mixtures are remixed and the
// model is scored on the remixes. Consumes mixture paths only.
inline EvalReport self_evaluate(const ModelParameters& params, const data::Manifest& manifest,
                                int repetitions, std::mt19937& rng) {
  if (manifest.size() < 2) throw std::runtime_error("self_evaluate: need at least 2 mixtures");
  if (repetitions < 1) throw std::invalid_argument("self_evaluate: repetitions must be >= 1");

  std::vector<AudioSegment> mixtures(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i)
    mixtures[i] = wav::read(manifest.records[i].mixture_path);

  // Pseudo-references are fixed across repetitions.
  std::vector<std::vector<AudioSegment>> pseudo(manifest.size());
  detail::parallel_for(manifest.size(), [&](std::size_t i) {
    pseudo[i] = model::separate(params, mixtures[i]);
  });

  EvalReport r;
  r.protocol = "SE";
  for (int rep = 0; rep < repetitions; ++rep) {
    std::vector<std::size_t> order(manifest.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_pairs = order.size() / 2;
    std::vector<int> opts(n_pairs);
    for (auto& o : opts) o = std::uniform_int_distribution<int>(0, 1)(rng);

    std::vector<double> rep_values(2 * n_pairs, 0.0);
    detail::parallel_for(n_pairs, [&](std::size_t p) {
      std::size_t ia = order[2 * p], ib = order[2 * p + 1];
      const auto& ea = pseudo[ia];
      const auto& eb = pseudo[ib];
      // Remix across mixtures, mirroring the training-time options.
      const AudioSegment& r1a = opts[p] == 0 ? ea[0] : ea[1];
      const AudioSegment& r1b = eb[0];
      const AudioSegment& r2a = opts[p] == 0 ? ea[1] : ea[0];
      const AudioSegment& r2b = eb[1];
      AudioSegment am1 = r1a + r1b;
      AudioSegment am2 = r2a + r2b;
      auto o1 = model::separate(params, am1);
      auto o2 = model::separate(params, am2);
      rep_values[2 * p] = detail::best_match_si_snri(r1a, r1b, o1, am1);
      rep_values[2 * p + 1] = detail::best_match_si_snri(r2a, r2b, o2, am2);
    });
    r.per_item_si_snri.insert(r.per_item_si_snri.end(), rep_values.begin(), rep_values.end());
  }
  r.n_items = r.per_item_si_snri.size();
  r.metadata = {{"repetitions", repetitions},
                {"aggregation", "pooled over repetition x item"},
                {"low_confidence", repetitions < 10}};
  return r;
}

}  // namespace mixsep::eval
