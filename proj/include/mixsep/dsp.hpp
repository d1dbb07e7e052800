// STFT analysis/synthesis and mixture-consistent mask application.
//
// Analysis is center-padded (reflect, window/2 on both sides) so the
// round trip istft(stft(x)) covers the whole segment. Synthesis divides
// the overlap-add by the summed squared window, which makes the round
// trip exact wherever that sum is nonzero, independent of COLA.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "mixsep/audio.hpp"
#include "mixsep/fft.hpp"

namespace mixsep {

using Arr = Eigen::ArrayXXd;

struct StftConfig {
  int window_size = 512;
  int hop_size = 128;
  std::string window_kind = "hann";

  void validate() const {
    if (hop_size <= 0 || hop_size > window_size)
      throw std::invalid_argument("stft: need 0 < hop_size <= window_size");
    if (!fft::is_pow2(std::size_t(window_size)))
      throw std::invalid_argument("stft: window_size must be a power of two");
    if (window_kind != "hann") throw std::invalid_argument("stft: unknown window kind " + window_kind);
    if (window_size % hop_size != 0)
      throw std::invalid_argument("stft: hop_size must divide window_size");
  }

  int num_bins() const { return window_size / 2 + 1; }

  bool operator==(const StftConfig&) const = default;
};

struct Spectrogram {
  Arr magnitude;  // F x T, nonnegative
  Arr phase;      // F x T, radians
  StftConfig config;
  std::size_t num_samples = 0;  // analysis length, restored by istft
  int sample_rate = 8000;

  int bins() const { return int(magnitude.rows()); }
  int frames() const { return int(magnitude.cols()); }
};

namespace dsp {

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[std::size_t(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * double(i) / double(n)));
  return w;
}

namespace detail {

// Reflect-padded sample access, pad = window/2 on each side.
inline double padded_sample(const std::vector<double>& x, long idx, long pad) {
  long n = long(x.size());
  long i = idx - pad;
  if (i < 0) i = -i;
  if (i >= n) i = 2 * (n - 1) - i;
  if (i < 0) i = 0;  // degenerate short signals
  return x[std::size_t(i)];
}

inline int frame_count(std::size_t num_samples, const StftConfig& cfg) {
  long padded = long(num_samples) + cfg.window_size;
  return int((padded - cfg.window_size) / cfg.hop_size) + 1;
}

// Summed squared synthesis window across overlapping frames.
inline std::vector<double> ola_normalizer(int frames, const StftConfig& cfg) {
  const auto win = hann_window(cfg.window_size);
  std::vector<double> norm(std::size_t((frames - 1) * cfg.hop_size + cfg.window_size), 0.0);
  for (int t = 0; t < frames; ++t)
    for (int n = 0; n < cfg.window_size; ++n)
      norm[std::size_t(t * cfg.hop_size + n)] += win[std::size_t(n)] * win[std::size_t(n)];
  return norm;
}

}  // namespace detail

inline Spectrogram stft(const AudioSegment& x, const StftConfig& cfg) {
  cfg.validate();
  if (!x.finite()) throw std::invalid_argument("stft: non-finite input sample");
  if (long(x.length()) < cfg.window_size)
    throw std::invalid_argument("stft: segment shorter than one window (" + std::to_string(x.length()) +
                                " < " + std::to_string(cfg.window_size) + ")");

  const int nfft = cfg.window_size;
  const int bins = cfg.num_bins();
  const int frames = detail::frame_count(x.length(), cfg);
  const long pad = nfft / 2;
  const auto win = hann_window(nfft);

  Spectrogram spec;
  spec.config = cfg;
  spec.num_samples = x.length();
  spec.sample_rate = x.sample_rate;
  spec.magnitude.resize(bins, frames);
  spec.phase.resize(bins, frames);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(nfft));
  for (int t = 0; t < frames; ++t) {
    for (int n = 0; n < nfft; ++n)
      buf[std::size_t(n)] = detail::padded_sample(x.samples, long(t) * cfg.hop_size + n, pad) * win[std::size_t(n)];
    fft::forward(buf);
    for (int f = 0; f < bins; ++f) {
      spec.magnitude(f, t) = std::abs(buf[std::size_t(f)]);
      spec.phase(f, t) = std::arg(buf[std::size_t(f)]);
    }
  }
  return spec;
}

// Synthesis of a waveform from (magnitude, phase) under cfg; the core of
// istft, shared with the gradient path in autodiff.hpp.
inline std::vector<double> synthesize(const Arr& magnitude, const Arr& phase, const StftConfig& cfg,
                                      std::size_t num_samples) {
  const int nfft = cfg.window_size;
  const int bins = cfg.num_bins();
  const int frames = int(magnitude.cols());
  if (magnitude.rows() != bins || phase.rows() != magnitude.rows() || phase.cols() != magnitude.cols())
    throw std::invalid_argument("istft: magnitude/phase shape mismatch with config");
  if (frames != detail::frame_count(num_samples, cfg))
    throw std::invalid_argument("istft: frame count inconsistent with sample count");

  const long pad = nfft / 2;
  const auto win = hann_window(nfft);
  const auto norm = detail::ola_normalizer(frames, cfg);
  std::vector<double> ola(norm.size(), 0.0);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(nfft));
  for (int t = 0; t < frames; ++t) {
    for (int f = 0; f < bins; ++f)
      buf[std::size_t(f)] = std::polar(magnitude(f, t), phase(f, t));
    for (int f = bins; f < nfft; ++f) buf[std::size_t(f)] = std::conj(buf[std::size_t(nfft - f)]);
    fft::inverse(buf);
    for (int n = 0; n < nfft; ++n)
      ola[std::size_t(t * cfg.hop_size + n)] += buf[std::size_t(n)].real() * win[std::size_t(n)];
  }

  std::vector<double> out(num_samples, 0.0);
  for (std::size_t i = 0; i < num_samples; ++i) {
    double d = norm[std::size_t(long(i) + pad)];
    out[i] = d > 1e-12 ? ola[std::size_t(long(i) + pad)] / d : 0.0;
  }
  return out;
}

// Adjoint of synthesize() with respect to magnitude at fixed phase:
// maps a gradient over output samples back onto the magnitude bins.
inline Arr synthesize_adjoint(const std::vector<double>& grad_out, const Arr& phase, const StftConfig& cfg,
                              std::size_t num_samples) {
  const int nfft = cfg.window_size;
  const int bins = cfg.num_bins();
  const int frames = int(phase.cols());
  const long pad = nfft / 2;
  const auto win = hann_window(nfft);
  const auto norm = detail::ola_normalizer(frames, cfg);

  std::vector<double> grad_ola(norm.size(), 0.0);
  for (std::size_t i = 0; i < num_samples; ++i) {
    double d = norm[std::size_t(long(i) + pad)];
    if (d > 1e-12) grad_ola[std::size_t(long(i) + pad)] = grad_out[i] / d;
  }

  Arr grad_mag(bins, frames);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(nfft));
  for (int t = 0; t < frames; ++t) {
    for (int n = 0; n < nfft; ++n)
      buf[std::size_t(n)] = grad_ola[std::size_t(t * cfg.hop_size + n)] * win[std::size_t(n)];
    fft::forward(buf);
    for (int f = 0; f < bins; ++f) {
      const double cf = (f == 0 || f == nfft / 2) ? 1.0 : 2.0;
      // d x(n) / d mag(f) = (cf/N) cos(2 pi f n / N + phi); contraction with
      // the frame gradient equals (cf/N) Re[e^{i phi} conj(DFT(g)(f))]
      // = (cf/N) (cos(phi) Re G + sin(phi) Im G) for a real frame gradient.
      grad_mag(f, t) = cf / double(nfft) *
                       (std::cos(phase(f, t)) * buf[std::size_t(f)].real() +
                        std::sin(phase(f, t)) * buf[std::size_t(f)].imag());
    }
  }
  return grad_mag;
}

inline AudioSegment istft(const Spectrogram& spec) {
  spec.config.validate();
  AudioSegment out;
  out.sample_rate = spec.sample_rate;
  out.samples = synthesize(spec.magnitude, spec.phase, spec.config, spec.num_samples);
  return out;
}

struct MaskSet {
  Arr mask1;  // F x T, entries in (0,1)
  Arr mask2;
};

// Normalizes raw positive masks to sum to one per TF bin and applies them to
// the mixture magnitude, synthesizing both estimates with the mixture phase.
inline std::tuple<MaskSet, AudioSegment, AudioSegment> apply_masks(const Spectrogram& mix_spec, const Arr& raw1,
                                                                   const Arr& raw2) {
  if (raw1.rows() != mix_spec.magnitude.rows() || raw1.cols() != mix_spec.magnitude.cols() ||
      raw2.rows() != raw1.rows() || raw2.cols() != raw1.cols())
    throw std::invalid_argument("apply_masks: mask shape mismatch");
  if ((raw1 <= 0.0).any() || (raw2 <= 0.0).any())
    throw std::domain_error("apply_masks: raw mask entries must be strictly positive");

  MaskSet masks;
  Arr denom = raw1 + raw2;
  masks.mask1 = raw1 / denom;
  masks.mask2 = raw2 / denom;

  Spectrogram est = mix_spec;
  est.magnitude = mix_spec.magnitude * masks.mask1;
  AudioSegment s1 = istft(est);
  est.magnitude = mix_spec.magnitude * masks.mask2;
  AudioSegment s2 = istft(est);
  return {std::move(masks), std::move(s1), std::move(s2)};
}

}  // namespace dsp
}  // namespace mixsep
