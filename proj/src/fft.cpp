#include "painmeter/fft.hpp"

#include <cmath>

#include "painmeter/errors.hpp"

namespace painmeter {

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) {
    throw UsageError("fft_radix2: length must be a power of two");
  }
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double angle = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(angle), std::sin(angle));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

std::vector<std::complex<double>> fft_real(const Eigen::VectorXd& signal) {
  if (signal.size() < 2) throw UsageError("fft_real: signal too short");
  const std::size_t padded = next_pow2(static_cast<std::size_t>(signal.size()));
  std::vector<std::complex<double>> a(padded, {0.0, 0.0});
  for (Eigen::Index i = 0; i < signal.size(); ++i) a[i] = {signal[i], 0.0};
  fft_radix2(a);
  return a;
}

Eigen::VectorXd fft_magnitudes(const Eigen::VectorXd& signal, int bins) {
  if (bins < 1) throw UsageError("fft_magnitudes: bins must be >= 1");
  if (2L * bins >= signal.size()) {
    throw UsageError("fft_magnitudes: bins must be < signal length / 2");
  }
  const auto spectrum = fft_real(signal);
  Eigen::VectorXd mags(bins);
  for (int k = 0; k < bins; ++k) mags[k] = std::abs(spectrum[k + 1]);
  return mags;
}

}  // namespace painmeter
