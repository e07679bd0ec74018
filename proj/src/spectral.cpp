#include "efdit/spectral.hpp"

#include <cmath>
#include <utility>

namespace efdit {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;

bool power_of_two(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place radix-2 Cooley-Tukey on interleaved complex data with stride 1.
// sign = -1 forward, +1 inverse (unnormalized).
void fft_inplace(std::vector<double>& re, std::vector<double>& im, int sign) {
    const std::size_t n = re.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = sign * 2.0 * kPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

void fft2_channel(std::vector<double>& re, std::vector<double>& im, std::int64_t h,
                  std::int64_t w, int sign) {
    std::vector<double> rowr(static_cast<std::size_t>(w)), rowi(static_cast<std::size_t>(w));
    for (std::int64_t u = 0; u < h; ++u) {
        for (std::int64_t v = 0; v < w; ++v) {
            rowr[static_cast<std::size_t>(v)] = re[static_cast<std::size_t>(u * w + v)];
            rowi[static_cast<std::size_t>(v)] = im[static_cast<std::size_t>(u * w + v)];
        }
        fft_inplace(rowr, rowi, sign);
        for (std::int64_t v = 0; v < w; ++v) {
            re[static_cast<std::size_t>(u * w + v)] = rowr[static_cast<std::size_t>(v)];
            im[static_cast<std::size_t>(u * w + v)] = rowi[static_cast<std::size_t>(v)];
        }
    }
    std::vector<double> colr(static_cast<std::size_t>(h)), coli(static_cast<std::size_t>(h));
    for (std::int64_t v = 0; v < w; ++v) {
        for (std::int64_t u = 0; u < h; ++u) {
            colr[static_cast<std::size_t>(u)] = re[static_cast<std::size_t>(u * w + v)];
            coli[static_cast<std::size_t>(u)] = im[static_cast<std::size_t>(u * w + v)];
        }
        fft_inplace(colr, coli, sign);
        for (std::int64_t u = 0; u < h; ++u) {
            re[static_cast<std::size_t>(u * w + v)] = colr[static_cast<std::size_t>(u)];
            im[static_cast<std::size_t>(u * w + v)] = coli[static_cast<std::size_t>(u)];
        }
    }
}

struct ImageDims {
    std::int64_t h, w, c;
};

ImageDims image_dims(const Tensor& x) {
    if (x.rank() == 2) return {x.shape[0], x.shape[1], 1};
    if (x.rank() == 3) return {x.shape[0], x.shape[1], x.shape[2]};
    throw DimError("expected [H x W] or [H x W x C] image, got " + shape_str(x.shape));
}

}  // namespace

Spectrum fft2(const Tensor& x) {
    const ImageDims d = image_dims(x);
    if (!power_of_two(d.h) || !power_of_two(d.w)) {
        throw ConfigError("fft2: extents must be powers of two, got " + shape_str(x.shape));
    }
    Spectrum s;
    s.h = d.h;
    s.w = d.w;
    s.c = d.c;
    s.re.assign(static_cast<std::size_t>(d.h * d.w * d.c), 0.0);
    s.im.assign(static_cast<std::size_t>(d.h * d.w * d.c), 0.0);
    std::vector<double> re(static_cast<std::size_t>(d.h * d.w));
    std::vector<double> im(static_cast<std::size_t>(d.h * d.w));
    for (std::int64_t ch = 0; ch < d.c; ++ch) {
        for (std::int64_t i = 0; i < d.h * d.w; ++i) {
            re[static_cast<std::size_t>(i)] = x.data[static_cast<std::size_t>(i * d.c + ch)];
            im[static_cast<std::size_t>(i)] = 0.0;
        }
        fft2_channel(re, im, d.h, d.w, -1);
        for (std::int64_t i = 0; i < d.h * d.w; ++i) {
            s.re[static_cast<std::size_t>(i * d.c + ch)] = re[static_cast<std::size_t>(i)];
            s.im[static_cast<std::size_t>(i * d.c + ch)] = im[static_cast<std::size_t>(i)];
        }
    }
    return s;
}

Tensor ifft2(const Spectrum& s, double* max_imag) {
    Tensor out({s.h, s.w, s.c});
    const double norm = 1.0 / static_cast<double>(s.h * s.w);
    double worst = 0.0;
    std::vector<double> re(static_cast<std::size_t>(s.h * s.w));
    std::vector<double> im(static_cast<std::size_t>(s.h * s.w));
    for (std::int64_t ch = 0; ch < s.c; ++ch) {
        for (std::int64_t i = 0; i < s.h * s.w; ++i) {
            re[static_cast<std::size_t>(i)] = s.re[static_cast<std::size_t>(i * s.c + ch)];
            im[static_cast<std::size_t>(i)] = s.im[static_cast<std::size_t>(i * s.c + ch)];
        }
        fft2_channel(re, im, s.h, s.w, +1);
        for (std::int64_t i = 0; i < s.h * s.w; ++i) {
            out.data[static_cast<std::size_t>(i * s.c + ch)] = re[static_cast<std::size_t>(i)] * norm;
            worst = std::max(worst, std::abs(im[static_cast<std::size_t>(i)] * norm));
        }
    }
    if (max_imag) *max_imag = worst;
    return out;
}

RadialFilter make_filter(FilterKind kind, double cutoff, std::int64_t h, std::int64_t w) {
    if (cutoff <= 0.0) throw ConfigError("make_filter: cutoff must be positive");
    RadialFilter f;
    f.kind = kind;
    f.cutoff = cutoff;
    f.h = h;
    f.w = w;
    f.mask.assign(static_cast<std::size_t>(h * w), 0.0);
    const double denom = 2.0 * cutoff * cutoff;
    for (std::int64_t u = 0; u < h; ++u) {
        // signed frequency coordinate, i.e. distance from the centered origin
        const double fu = static_cast<double>(u <= h / 2 ? u : u - h);
        for (std::int64_t v = 0; v < w; ++v) {
            const double fv = static_cast<double>(v <= w / 2 ? v : v - w);
            const double d2 = fu * fu + fv * fv;
            const double low = std::exp(-d2 / denom);
            f.mask[static_cast<std::size_t>(u * w + v)] =
                kind == FilterKind::low_pass ? low : 1.0 - low;
        }
    }
    return f;
}

BandFilters make_band_filters(double cutoff, std::int64_t h, std::int64_t w) {
    return BandFilters{make_filter(FilterKind::high_pass, cutoff, h, w),
                       make_filter(FilterKind::low_pass, cutoff, h, w)};
}

Tensor apply_band(const Tensor& x, const RadialFilter& filter) {
    const ImageDims d = image_dims(x);
    if (d.h != filter.h || d.w != filter.w) {
        throw DimError("apply_band: image " + shape_str(x.shape) + " does not match filter " +
                       std::to_string(filter.h) + "x" + std::to_string(filter.w));
    }
    Spectrum s = fft2(x);
    for (std::int64_t u = 0; u < s.h; ++u) {
        for (std::int64_t v = 0; v < s.w; ++v) {
            const double m = filter.at(u, v);
            for (std::int64_t ch = 0; ch < s.c; ++ch) {
                s.re[s.index(u, v, ch)] *= m;
                s.im[s.index(u, v, ch)] *= m;
            }
        }
    }
    Tensor out = ifft2(s);
    out.shape = x.shape;  // preserve rank-2 inputs
    return out;
}

BandPair split_bands(const Tensor& x, const BandFilters& filters) {
    return BandPair{apply_band(x, filters.high), apply_band(x, filters.low)};
}

BandPair split_bands(const Tensor& x, double cutoff) {
    const ImageDims d = image_dims(x);
    return split_bands(x, make_band_filters(cutoff, d.h, d.w));
}

double high_freq_energy_ratio(const Tensor& x, const RadialFilter& high) {
    const ImageDims d = image_dims(x);
    if (d.h != high.h || d.w != high.w) {
        throw DimError("high_freq_energy_ratio: image " + shape_str(x.shape) +
                       " does not match filter");
    }
    Spectrum s = fft2(x);
    double total = 0.0, passed = 0.0;
    for (std::int64_t u = 0; u < s.h; ++u) {
        for (std::int64_t v = 0; v < s.w; ++v) {
            const double m = high.at(u, v);
            for (std::int64_t ch = 0; ch < s.c; ++ch) {
                const double e = s.re[s.index(u, v, ch)] * s.re[s.index(u, v, ch)] +
                                 s.im[s.index(u, v, ch)] * s.im[s.index(u, v, ch)];
                total += e;
                passed += m * e;
            }
        }
    }
    if (total == 0.0) return 0.0;
    return passed / total;
}

double high_freq_energy_ratio(const Tensor& x, double cutoff) {
    const ImageDims d = image_dims(x);
    return high_freq_energy_ratio(x, make_filter(FilterKind::high_pass, cutoff, d.h, d.w));
}

}  // namespace efdit
