// Iterative radix-2 FFT for power-of-two sizes.
#pragma once

#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace mixsep::fft {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place forward transform, e^{-i 2 pi f n / N} convention.
inline void forward(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (!is_pow2(n)) throw std::invalid_argument("fft size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / double(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// In-place inverse transform including the 1/N factor.
inline void inverse(std::vector<std::complex<double>>& a) {
  for (auto& v : a) v = std::conj(v);
  forward(a);
  const double inv_n = 1.0 / double(a.size());
  for (auto& v : a) v = std::conj(v) * inv_n;
}

}  // namespace mixsep::fft
