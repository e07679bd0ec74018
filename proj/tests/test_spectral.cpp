#include <doctest.h>

#include <cmath>
#include <complex>

#include "efdit/data.hpp"
#include "efdit/spectral.hpp"
#include "helpers.hpp"

using namespace efdit;
using efdit::testing::max_abs_diff;

namespace {

// direct O(N^2) DFT per output bin, long double accumulation
Spectrum naive_dft(const Tensor& x) {
    const std::int64_t h = x.shape[0], w = x.shape[1];
    const std::int64_t c = x.rank() == 3 ? x.shape[2] : 1;
    Spectrum s;
    s.h = h;
    s.w = w;
    s.c = c;
    s.re.assign(static_cast<std::size_t>(h * w * c), 0.0);
    s.im.assign(static_cast<std::size_t>(h * w * c), 0.0);
    const long double pi = 3.14159265358979323846264338327950288L;
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t u = 0; u < h; ++u) {
            for (std::int64_t v = 0; v < w; ++v) {
                long double re = 0.0L, im = 0.0L;
                for (std::int64_t y = 0; y < h; ++y) {
                    for (std::int64_t xx = 0; xx < w; ++xx) {
                        const long double ang =
                            -2.0L * pi *
                            (static_cast<long double>(u * y) / h +
                             static_cast<long double>(v * xx) / w);
                        const long double val = x.data[static_cast<std::size_t>(
                            (y * w + xx) * c + ch)];
                        re += val * std::cos(ang);
                        im += val * std::sin(ang);
                    }
                }
                s.re[s.index(u, v, ch)] = static_cast<double>(re);
                s.im[s.index(u, v, ch)] = static_cast<double>(im);
            }
        }
    }
    return s;
}

double l2(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data) acc += v * v;
    return acc;
}

}  // namespace

TEST_CASE("delta image has a flat spectrum") {
    Tensor x({8, 8, 1});
    x.data[0] = 1.0;
    Spectrum s = fft2(x);
    for (double v : s.re) CHECK(v == doctest::Approx(1.0).epsilon(1e-12));
    for (double v : s.im) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("constant image is DC-only") {
    const double val = -0.37;
    Tensor x = Tensor::full({16, 8, 1}, val);
    Spectrum s = fft2(x);
    CHECK(s.re[s.index(0, 0, 0)] == doctest::Approx(val * 16 * 8).epsilon(1e-12));
    for (std::int64_t u = 0; u < 16; ++u) {
        for (std::int64_t v = 0; v < 8; ++v) {
            if (u == 0 && v == 0) continue;
            CHECK(std::abs(s.re[s.index(u, v, 0)]) < 1e-9);
            CHECK(std::abs(s.im[s.index(u, v, 0)]) < 1e-9);
        }
    }
}

TEST_CASE("fft2 matches the naive DFT oracle") {
    Rng rng(21);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = Tensor::uniform({8, 8, 2}, -1, 1, rng);
        Spectrum fast = fft2(x);
        Spectrum slow = naive_dft(x);
        CHECK(max_abs_diff(fast.re, slow.re) < 1e-9);
        CHECK(max_abs_diff(fast.im, slow.im) < 1e-9);
    }
}

TEST_CASE("fft2 rejects non-power-of-two extents") {
    CHECK_THROWS_AS(fft2(Tensor({12, 12, 1})), ConfigError);
    CHECK_THROWS_AS(fft2(Tensor({8, 6, 1})), ConfigError);
}

TEST_CASE("round trip, zero spectrum, Parseval") {
    Rng rng(31);
    for (int s = 0; s < 50; ++s) {
        Tensor x = Tensor::uniform({16, 16, 3}, -1, 1, rng);
        double max_imag = 0.0;
        Tensor back = ifft2(fft2(x), &max_imag);
        CHECK(max_abs_diff(back.data, x.data) < 1e-10);
        CHECK(max_imag < 1e-10);
    }

    Spectrum zero;
    zero.h = zero.w = 8;
    zero.c = 1;
    zero.re.assign(64, 0.0);
    zero.im.assign(64, 0.0);
    for (double v : ifft2(zero).data) CHECK(v == 0.0);

    Tensor x = Tensor::uniform({16, 16, 1}, -1, 1, rng);
    Spectrum s = fft2(x);
    double spatial = l2(x);
    double freq = 0.0;
    for (std::size_t i = 0; i < s.re.size(); ++i) freq += s.re[i] * s.re[i] + s.im[i] * s.im[i];
    freq /= 16.0 * 16.0;
    CHECK(std::abs(spatial - freq) / spatial < 1e-8);
}

TEST_CASE("fft2 linearity") {
    Rng rng(37);
    Tensor x = Tensor::uniform({8, 8, 1}, -1, 1, rng);
    Tensor y = Tensor::uniform({8, 8, 1}, -1, 1, rng);
    const double a = 1.7, b = -0.4;
    Tensor combo;
    combo.shape = x.shape;
    combo.data.resize(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) combo.data[i] = a * x.data[i] + b * y.data[i];
    Spectrum sc = fft2(combo);
    Spectrum sx = fft2(x);
    Spectrum sy = fft2(y);
    for (std::size_t i = 0; i < sc.re.size(); ++i) {
        CHECK(std::abs(sc.re[i] - (a * sx.re[i] + b * sy.re[i])) < 1e-10);
        CHECK(std::abs(sc.im[i] - (a * sx.im[i] + b * sy.im[i])) < 1e-10);
    }
}

TEST_CASE("spectrum of a real map is Hermitian") {
    Rng rng(41);
    Tensor x = Tensor::uniform({16, 8, 2}, -1, 1, rng);
    Spectrum s = fft2(x);
    for (std::int64_t u = 0; u < s.h; ++u) {
        for (std::int64_t v = 0; v < s.w; ++v) {
            const std::int64_t mu = (s.h - u) % s.h;
            const std::int64_t mv = (s.w - v) % s.w;
            for (std::int64_t ch = 0; ch < s.c; ++ch) {
                CHECK(std::abs(s.re[s.index(u, v, ch)] - s.re[s.index(mu, mv, ch)]) < 1e-10);
                CHECK(std::abs(s.im[s.index(u, v, ch)] + s.im[s.index(mu, mv, ch)]) < 1e-10);
            }
        }
    }
}

TEST_CASE("filter mask values and symmetry") {
    CHECK_THROWS_AS(make_filter(FilterKind::low_pass, 0.0, 8, 8), ConfigError);

    const double d0 = 4.0;
    RadialFilter low = make_filter(FilterKind::low_pass, d0, 16, 16);
    RadialFilter high = make_filter(FilterKind::high_pass, d0, 16, 16);
    CHECK(low.at(0, 0) == 1.0);
    CHECK(high.at(0, 0) == 0.0);
    CHECK(low.at(0, 4) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

    double sum_both = 0.0;
    for (std::int64_t u = 0; u < 16; ++u) {
        for (std::int64_t v = 0; v < 16; ++v) {
            CHECK(low.at(u, v) + high.at(u, v) == 1.0);
            CHECK(low.at(u, v) == low.at((16 - u) % 16, (16 - v) % 16));
            sum_both += low.at(u, v) + high.at(u, v);
        }
    }
    CHECK(sum_both == 256.0);  // sum of complements is exactly H*W
}

TEST_CASE("split_bands complementarity and DC behavior") {
    Rng rng(43);
    Tensor x = Tensor::uniform({16, 16, 1}, -1, 1, rng);
    BandPair bands = split_bands(x, 4.0);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        CHECK(std::abs(bands.high.data[i] + bands.low.data[i] - x.data[i]) < 1e-10);
    }

    Tensor c = Tensor::full({16, 16, 1}, 0.6);
    BandPair cb = split_bands(c, 4.0);
    for (std::size_t i = 0; i < c.data.size(); ++i) {
        CHECK(std::abs(cb.high.data[i]) < 1e-10);
        CHECK(std::abs(cb.low.data[i] - 0.6) < 1e-10);
    }

    CHECK_THROWS_AS(apply_band(Tensor({8, 8, 1}), make_filter(FilterKind::low_pass, 2, 16, 16)),
                    DimError);
}

TEST_CASE("checkerboard energy ratio matches the naive oracle") {
    Tensor x({16, 16, 1});
    for (std::int64_t y = 0; y < 16; ++y) {
        for (std::int64_t xx = 0; xx < 16; ++xx) {
            x.data[static_cast<std::size_t>(y * 16 + xx)] = ((y + xx) % 2 == 0) ? 1.0 : -1.0;
        }
    }
    const double d0 = 4.0;
    const double got = high_freq_energy_ratio(x, d0);

    Spectrum slow = naive_dft(x);
    RadialFilter high = make_filter(FilterKind::high_pass, d0, 16, 16);
    long double total = 0.0L, passed = 0.0L;
    for (std::int64_t u = 0; u < 16; ++u) {
        for (std::int64_t v = 0; v < 16; ++v) {
            const long double e = slow.re[slow.index(u, v, 0)] * slow.re[slow.index(u, v, 0)] +
                                  slow.im[slow.index(u, v, 0)] * slow.im[slow.index(u, v, 0)];
            total += e;
            passed += high.at(u, v) * e;
        }
    }
    CHECK(got == doctest::Approx(static_cast<double>(passed / total)).epsilon(1e-9));
    // the checkerboard is pure Nyquist content, far above the cutoff
    CHECK(got > 0.95);

    BandPair bands = split_bands(x, d0);
    const double ratio_split = l2(bands.high) / l2(x);
    CHECK(ratio_split > 0.9);
}

TEST_CASE("high-frequency energy ratio cases") {
    CHECK(high_freq_energy_ratio(Tensor::full({16, 16, 1}, 0.25), 4.0) == 0.0);
    CHECK(high_freq_energy_ratio(Tensor({16, 16, 1}), 4.0) == 0.0);  // all-zero image

    // flat spectrum: the ratio equals the mean of the high-pass mask
    Tensor delta({16, 16, 1});
    delta.data[0] = 1.0;
    RadialFilter high = make_filter(FilterKind::high_pass, 4.0, 16, 16);
    double mean_mask = 0.0;
    for (double v : high.mask) mean_mask += v;
    mean_mask /= 256.0;
    CHECK(high_freq_energy_ratio(delta, 4.0) == doctest::Approx(mean_mask).epsilon(1e-12));
}

TEST_CASE("textured subclass image carries more high-band energy than its smoothed version") {
    DatasetSpec spec;
    spec.samples_per_sub = 2;
    Dataset ds = generate(spec);
    int checked = 0;
    for (std::size_t i = 0; i < ds.samples.size(); i += 7) {
        const Tensor& img = ds.samples[i].image;
        Tensor smoothed = split_bands(img, 4.0).low;
        CHECK(high_freq_energy_ratio(img, 4.0) > high_freq_energy_ratio(smoothed, 4.0));
        ++checked;
    }
    CHECK(checked > 3);
}
