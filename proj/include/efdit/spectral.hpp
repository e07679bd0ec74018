#pragma once

#include <cstdint>
#include <vector>

#include "efdit/tensor.hpp"

namespace efdit {

// Per-channel 2D frequency representation in the uncentered layout (the DC
// bin sits at index (0,0)). Produced by fft2 with the unnormalized forward
// convention; ifft2 carries the 1/(H*W) factor.
struct Spectrum {
    std::int64_t h = 0, w = 0, c = 0;
    std::vector<double> re, im;

    std::size_t index(std::int64_t u, std::int64_t v, std::int64_t ch) const {
        return static_cast<std::size_t>((u * w + v) * c + ch);
    }
};

enum class FilterKind { low_pass, high_pass };

// Isotropic Gaussian frequency mask. The low-pass weight at centered radial
// distance D is exp(-D^2 / (2 D0^2)); high-pass is its complement, so the
// pair always sums to one at every bin.
struct RadialFilter {
    FilterKind kind = FilterKind::low_pass;
    double cutoff = 0.0;
    std::int64_t h = 0, w = 0;
    std::vector<double> mask;  // H*W weights in [0,1], uncentered layout

    double at(std::int64_t u, std::int64_t v) const {
        return mask[static_cast<std::size_t>(u * w + v)];
    }
};

struct BandFilters {
    RadialFilter high;
    RadialFilter low;
};

struct BandPair {
    Tensor high;
    Tensor low;
};

// x must be [H x W] or [H x W x C] with power-of-two H and W.
Spectrum fft2(const Tensor& x);

// Real part of the inverse transform; when max_imag is given it receives the
// largest |imaginary| residual of the reconstruction.
Tensor ifft2(const Spectrum& s, double* max_imag = nullptr);

RadialFilter make_filter(FilterKind kind, double cutoff, std::int64_t h, std::int64_t w);
BandFilters make_band_filters(double cutoff, std::int64_t h, std::int64_t w);

// Applies a mask in the frequency domain and returns to pixel space.
Tensor apply_band(const Tensor& x, const RadialFilter& filter);

BandPair split_bands(const Tensor& x, const BandFilters& filters);
BandPair split_bands(const Tensor& x, double cutoff);

// Fraction of spectral energy passed by the high-pass mask; 0 for an
// all-zero image.
double high_freq_energy_ratio(const Tensor& x, const RadialFilter& high);
double high_freq_energy_ratio(const Tensor& x, double cutoff);

}  // namespace efdit
