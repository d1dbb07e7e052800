// Scalar objectives and metrics: thresholded negative SNR, SI-SNR/SI-SNRi,
// and the permutation/assignment searches for PIT, MixIT, MixPIT, MixCycle.
#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mixsep/audio.hpp"

namespace mixsep {

struct LossConfig {
  double snr_max = 30.0;  // dB
  double eps = 1e-8;

  double tau() const { return std::pow(10.0, -snr_max / 10.0); }

  void validate() const {
    if (snr_max <= 0 || eps <= 0) throw std::invalid_argument("LossConfig: snr_max and eps must be positive");
  }
};

// Symmetric SI-SNR clamp; keeps report statistics finite on perfect estimates.
inline constexpr double kSiSnrCapDb = 60.0;

namespace metrics {

inline void check_equal_length(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) throw std::invalid_argument(std::string(what) + ": length mismatch");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double sq_norm(std::span<const double> a) { return dot(a, a); }

// L = -10 log10( ||ref||^2 / (||ref-est||^2 + tau ||ref||^2) ), bounded below
// by -snr_max. An all-zero reference falls back to the eps stabilizer.
inline double neg_thresholded_snr(std::span<const double> ref, std::span<const double> est,
                                  const LossConfig& cfg = {}) {
  check_equal_length(ref, est, "neg_thresholded_snr");
  const double tau = cfg.tau();
  double r = sq_norm(ref);
  double d = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    double e = ref[i] - est[i];
    d += e * e;
  }
  if (r <= 0.0) return 10.0 * std::log10((d + cfg.eps) / cfg.eps);
  return 10.0 * std::log10(d / r + tau);
}

// Gradient of neg_thresholded_snr with respect to est.
inline std::vector<double> neg_thresholded_snr_grad(std::span<const double> ref, std::span<const double> est,
                                                    const LossConfig& cfg = {}) {
  check_equal_length(ref, est, "neg_thresholded_snr_grad");
  const double tau = cfg.tau();
  double r = sq_norm(ref);
  double d = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    double e = ref[i] - est[i];
    d += e * e;
  }
  const double denom = (r <= 0.0) ? (d + cfg.eps) : (d + tau * r);
  const double k = 10.0 / std::log(10.0) * 2.0 / std::max(denom, cfg.eps);
  std::vector<double> g(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) g[i] = k * (est[i] - ref[i]);
  return g;
}

inline double si_snr(std::span<const double> ref, std::span<const double> est) {
  check_equal_length(ref, est, "si_snr");
  double r = sq_norm(ref);
  if (r <= 0.0) throw std::invalid_argument("si_snr: zero reference, metric undefined");
  double a = dot(est, ref) / r;
  double target = a * a * r;  // ||a ref||^2
  double noise = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    double e = est[i] - a * ref[i];
    noise += e * e;
  }
  if (target <= 0.0) return -kSiSnrCapDb;
  if (noise <= 0.0) return kSiSnrCapDb;
  double v = 10.0 * std::log10(target / noise);
  return std::min(kSiSnrCapDb, std::max(-kSiSnrCapDb, v));
}

inline double si_snr_improvement(std::span<const double> ref, std::span<const double> est,
                                 std::span<const double> mix) {
  return si_snr(ref, est) - si_snr(ref, mix);
}

// Permutation over two outputs: 0 keeps the order, 1 swaps.
struct PitResult {
  double loss = 0.0;
  int permutation = 0;
};

inline PitResult pit_loss(std::span<const double> ref1, std::span<const double> ref2,
                          std::span<const double> out1, std::span<const double> out2,
                          const LossConfig& cfg = {}) {
  double keep = neg_thresholded_snr(ref1, out1, cfg) + neg_thresholded_snr(ref2, out2, cfg);
  double swap = neg_thresholded_snr(ref1, out2, cfg) + neg_thresholded_snr(ref2, out1, cfg);
  if (swap < keep) return {swap, 1};
  return {keep, 0};  // ties break to identity
}

// One-hot assignment of each of the 4 outputs to reference mixture 1 or 2.
struct MixitResult {
  double loss = 0.0;
  std::array<int, 4> assignment = {1, 1, 2, 2};
};

inline MixitResult mixit_loss(std::span<const double> mix1, std::span<const double> mix2,
                              const std::array<std::span<const double>, 4>& out, const LossConfig& cfg = {}) {
  const std::size_t n = mix1.size();
  for (const auto& o : out) check_equal_length(mix1, o, "mixit_loss");
  check_equal_length(mix1, mix2, "mixit_loss");

  MixitResult best;
  best.loss = std::numeric_limits<double>::infinity();
  std::vector<double> g1(n), g2(n);
  for (int a = 0; a < 16; ++a) {
    std::fill(g1.begin(), g1.end(), 0.0);
    std::fill(g2.begin(), g2.end(), 0.0);
    for (int o = 0; o < 4; ++o) {
      auto& dst = (a >> o) & 1 ? g2 : g1;
      for (std::size_t i = 0; i < n; ++i) dst[i] += out[std::size_t(o)][i];
    }
    double loss = neg_thresholded_snr(mix1, g1, cfg) + neg_thresholded_snr(mix2, g2, cfg);
    if (loss < best.loss) {
      best.loss = loss;
      for (int o = 0; o < 4; ++o) best.assignment[std::size_t(o)] = ((a >> o) & 1) + 1;
    }
  }
  return best;
}

// MixPIT is PIT with the constituent mixtures as references.
inline PitResult mixpit_loss(std::span<const double> mix1, std::span<const double> mix2,
                             std::span<const double> out1, std::span<const double> out2,
                             const LossConfig& cfg = {}) {
  return pit_loss(mix1, mix2, out1, out2, cfg);
}

inline double mixcycle_loss(std::span<const double> t1a, std::span<const double> t1b,
                            std::span<const double> t2a, std::span<const double> t2b,
                            std::span<const double> s1a, std::span<const double> s1b,
                            std::span<const double> s2a, std::span<const double> s2b,
                            const LossConfig& cfg = {}) {
  return pit_loss(t1a, t1b, s1a, s1b, cfg).loss + pit_loss(t2a, t2b, s2a, s2b, cfg).loss;
}

}  // namespace metrics
}  // namespace mixsep
