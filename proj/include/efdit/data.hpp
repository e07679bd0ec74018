#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "efdit/network.hpp"
#include "efdit/tensor.hpp"

namespace efdit {

// Procedural hierarchical dataset: superclasses are coarse shapes (disk,
// square, triangle, ring), subclasses are stripe textures at increasing
// spatial frequency drawn only inside the shape mask, so subclasses within a
// superclass differ only in high-band content.
struct DatasetSpec {
    int n_super = 4;
    int subs_per_super = 5;
    int samples_per_sub = 200;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::int64_t channels = 1;
    std::uint64_t seed = 42;

    int n_sub() const { return n_super * subs_per_super; }
    int parent_of(int sub) const { return sub / subs_per_super; }
};

struct Sample {
    Tensor image;  // [H x W x C], values in [-1, 1]
    TieredCondition label;
};

struct Dataset {
    DatasetSpec spec;
    std::vector<Sample> samples;
};

// Deterministic in spec.seed; each sample derives its own stream, so
// generation order never changes the content.
Dataset generate(const DatasetSpec& spec);

// Texture frequency (cycles per image) used by a subclass within its
// superclass; exposed for tests of the frequency ordering.
double subclass_frequency(const DatasetSpec& spec, int sub);

// "EFDD" container: magic, version, spec fields, then samples as u16 label
// pairs followed by little-endian f64 pixels. save/load is a bitwise identity.
void save(const Dataset& ds, const std::string& path);
Dataset load(const std::string& path);

// Linear [-1,1] -> [0,255] (rounded half away from zero), binary PGM for one
// channel or PPM for three.
void export_image(const Tensor& x, const std::string& path);

}  // namespace efdit
