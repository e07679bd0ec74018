#include "efdit/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace efdit {

namespace {

constexpr double kPi = 3.14159265358979323846264338327950288;
// Bright palette with soft shape edges: the frequency-guided enhancement
// x0*(1 + high) amplifies detail only where intensity is positive, and hard
// edges would otherwise drown the texture band.
constexpr double kBackground = 0.30;
constexpr double kBase = 0.75;    // fill level inside the shape
constexpr double kAmp = 0.22;     // texture amplitude
constexpr double kFeather = 2.0;  // edge softness in pixels at 32x32

struct ShapeJitter {
    double cx, cy, r;
};

// Signed distance to the shape boundary, positive inside.
double shape_distance(int super_id, const ShapeJitter& j, double x, double y) {
    const double dx = x - j.cx;
    const double dy = y - j.cy;
    switch (super_id) {
        case 0:  // disk
            return j.r - std::sqrt(dx * dx + dy * dy);
        case 1: {  // square
            const double a = 0.9 * j.r;
            return std::min(a - std::abs(dx), a - std::abs(dy));
        }
        case 2: {  // upward triangle, minimum of three half-plane distances
            const double ax = j.cx, ay = j.cy - j.r;
            const double bx = j.cx - 0.95 * j.r, by = j.cy + 0.75 * j.r;
            const double cx2 = j.cx + 0.95 * j.r, cy2 = j.cy + 0.75 * j.r;
            auto side = [&](double x1, double y1, double x2, double y2) {
                const double nx = y2 - y1, ny = x1 - x2;
                const double len = std::sqrt(nx * nx + ny * ny);
                return ((x - x1) * nx + (y - y1) * ny) / len;
            };
            return std::min({side(ax, ay, bx, by), side(bx, by, cx2, cy2),
                             side(cx2, cy2, ax, ay)});
        }
        case 3: {  // ring
            const double d = std::sqrt(dx * dx + dy * dy);
            return std::min(j.r - d, d - 0.55 * j.r);
        }
        default:
            return -1.0;
    }
}

}  // namespace

double subclass_frequency(const DatasetSpec& spec, int sub) {
    const int j = sub % spec.subs_per_super;
    // cycles per image, proportional to resolution (5, 7, 9, ... at 32x32)
    const double unit = static_cast<double>(std::min(spec.height, spec.width)) / 32.0;
    return (5.0 + 2.0 * static_cast<double>(j)) * unit;
}

Dataset generate(const DatasetSpec& spec) {
    if (spec.n_super < 1 || spec.n_super > 4) {
        throw ConfigError("generate: n_super must be 1..4 (shape table has four entries)");
    }
    if (spec.subs_per_super < 1 || spec.samples_per_sub < 1) {
        throw ConfigError("generate: counts must be positive");
    }
    if (spec.channels != 1 && spec.channels != 3) {
        throw ConfigError("generate: channels must be 1 or 3");
    }
    const double f_max = subclass_frequency(spec, spec.subs_per_super - 1);
    if (f_max >= static_cast<double>(std::min(spec.height, spec.width)) / 2.0) {
        throw ConfigError("generate: texture frequency exceeds Nyquist for this image size");
    }

    Dataset ds;
    ds.spec = spec;
    const int total = spec.n_sub() * spec.samples_per_sub;
    ds.samples.reserve(static_cast<std::size_t>(total));
    const double minhw = static_cast<double>(std::min(spec.height, spec.width));

    for (int i = 0; i < total; ++i) {
        const int sub = i / spec.samples_per_sub;
        const int super_id = spec.parent_of(sub);
        const int j = sub % spec.subs_per_super;
        const int s_idx = i % spec.samples_per_sub;
        // jitter stream keyed by (superclass, sample index): subclasses within
        // a superclass share shapes and phases and differ only in texture
        Rng rng(Rng::mix(spec.seed,
                         static_cast<std::uint64_t>(super_id * spec.samples_per_sub + s_idx)));

        ShapeJitter jit;
        jit.cx = static_cast<double>(spec.width) / 2.0 + rng.uniform(-3.0, 3.0);
        jit.cy = static_cast<double>(spec.height) / 2.0 + rng.uniform(-3.0, 3.0);
        jit.r = rng.uniform(0.30, 0.40) * minhw;

        const double freq = subclass_frequency(spec, sub);
        const double theta = kPi * static_cast<double>(j) /
                                 static_cast<double>(spec.subs_per_super) +
                             0.3;
        const double phase = rng.uniform(0.0, 2.0 * kPi);
        const double kx = std::cos(theta) * 2.0 * kPi * freq / static_cast<double>(spec.width);
        const double ky = std::sin(theta) * 2.0 * kPi * freq / static_cast<double>(spec.height);

        const double feather = kFeather * minhw / 32.0;
        Sample s;
        s.image = Tensor::full({spec.height, spec.width, spec.channels}, kBackground);
        s.label.subclass = sub;
        s.label.superclass = super_id;
        for (std::int64_t y = 0; y < spec.height; ++y) {
            for (std::int64_t x = 0; x < spec.width; ++x) {
                const double dist = shape_distance(super_id, jit, static_cast<double>(x),
                                                   static_cast<double>(y));
                double m = std::clamp(dist / feather + 0.5, 0.0, 1.0);
                if (m <= 0.0) continue;
                m = m * m * (3.0 - 2.0 * m);  // smoothstep keeps edges out of the high band
                const double tex = kBase + kAmp * std::sin(kx * static_cast<double>(x) +
                                                           ky * static_cast<double>(y) + phase);
                const double v = kBackground + (tex - kBackground) * m;
                for (std::int64_t c = 0; c < spec.channels; ++c) {
                    s.image.data[static_cast<std::size_t>((y * spec.width + x) * spec.channels +
                                                          c)] = v;
                }
            }
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---- on-disk format -----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'E', 'F', 'D', 'D'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(const std::string& buf, std::size_t& off, const std::string& path) {
    if (off + sizeof(T) > buf.size()) {
        throw IoError(path + ": truncated at byte offset " + std::to_string(off));
    }
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kVersion);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.n_super));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.subs_per_super));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.samples_per_sub));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.height));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.width));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.spec.channels));
    write_pod<std::uint64_t>(os, ds.spec.seed);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.samples.size()));
    for (const Sample& s : ds.samples) {
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(s.label.subclass));
        write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(s.label.superclass));
        os.write(reinterpret_cast<const char*>(s.image.data.data()),
                 static_cast<std::streamsize>(s.image.data.size() * sizeof(double)));
    }
    if (!os) throw IoError("write failed for " + path);
}

Dataset load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset " + path);
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
        throw IoError(path + ": bad magic, not an EFDD dataset");
    }
    std::size_t off = 4;
    const auto version = read_pod<std::uint32_t>(buf, off, path);
    if (version != kVersion) {
        throw IoError(path + ": unsupported version " + std::to_string(version));
    }
    Dataset ds;
    ds.spec.n_super = static_cast<int>(read_pod<std::uint32_t>(buf, off, path));
    ds.spec.subs_per_super = static_cast<int>(read_pod<std::uint32_t>(buf, off, path));
    ds.spec.samples_per_sub = static_cast<int>(read_pod<std::uint32_t>(buf, off, path));
    ds.spec.height = read_pod<std::uint32_t>(buf, off, path);
    ds.spec.width = read_pod<std::uint32_t>(buf, off, path);
    ds.spec.channels = read_pod<std::uint32_t>(buf, off, path);
    ds.spec.seed = read_pod<std::uint64_t>(buf, off, path);
    const auto count = read_pod<std::uint32_t>(buf, off, path);
    const std::size_t pixels =
        static_cast<std::size_t>(ds.spec.height * ds.spec.width * ds.spec.channels);
    ds.samples.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Sample s;
        s.label.subclass = read_pod<std::uint16_t>(buf, off, path);
        s.label.superclass = read_pod<std::uint16_t>(buf, off, path);
        if (off + pixels * sizeof(double) > buf.size()) {
            throw IoError(path + ": truncated at byte offset " + std::to_string(off));
        }
        s.image = Tensor({ds.spec.height, ds.spec.width, ds.spec.channels});
        std::memcpy(s.image.data.data(), buf.data() + off, pixels * sizeof(double));
        off += pixels * sizeof(double);
        ds.samples.push_back(std::move(s));
    }
    if (off != buf.size()) {
        throw IoError(path + ": trailing bytes at offset " + std::to_string(off));
    }
    return ds;
}

void export_image(const Tensor& x, const std::string& path) {
    if (x.rank() != 3) throw DimError("export_image: expected [H x W x C]");
    const std::int64_t c = x.shape[2];
    if (c != 1 && c != 3) throw ConfigError("export_image: unsupported channel count " +
                                            std::to_string(c));
    for (double v : x.data) {
        if (!std::isfinite(v)) throw NumericError("export_image: non-finite pixel");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << (c == 1 ? "P5" : "P6") << "\n" << x.shape[1] << " " << x.shape[0] << "\n255\n";
    std::vector<unsigned char> bytes(x.data.size());
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double mapped = (x.data[i] + 1.0) / 2.0 * 255.0;
        const long long r = std::llround(mapped);  // rounds half away from zero
        bytes[i] = static_cast<unsigned char>(std::clamp<long long>(r, 0, 255));
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + path);
}

}  // namespace efdit
