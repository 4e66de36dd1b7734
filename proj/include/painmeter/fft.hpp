#pragma once

#include <Eigen/Dense>
#include <complex>
#include <vector>

namespace painmeter {

std::size_t next_pow2(std::size_t n);

/// In-place iterative radix-2 Cooley-Tukey transform, decimation in time,
/// unnormalized forward direction. Length must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& a);

/// Full complex spectrum of a real signal zero-padded to the next power of
/// two. Returned length equals the padded length.
std::vector<std::complex<double>> fft_real(const Eigen::VectorXd& signal);

/// Magnitudes of Fourier bins 1..bins of the zero-padded transform (the DC
/// bin is excluded). Requires bins < length/2 of the original signal.
Eigen::VectorXd fft_magnitudes(const Eigen::VectorXd& signal, int bins);

}  // namespace painmeter
