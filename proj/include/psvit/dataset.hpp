#pragma once

// PSVD container: "PSVD" magic, u32 version, u32 n_sequences, u32 frames,
// u32 channels, u32 height, u32 width, u8 dtype (0 = f32), then raw frames
// sequence-major little-endian. A textual sidecar (same path + ".meta") holds
// generator kind, seed, parameter ranges and per-sequence parameters.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "psvit/sim.hpp"

namespace psvit::data {

struct Dataset {
    std::uint32_t version = 1;
    std::uint32_t n = 0, frames = 0, channels = 3, height = 0, width = 0;
    std::vector<float> pixels;  // [n][frames][channels][height][width]

    // sidecar payload
    std::string kind;
    bool ood = false;
    std::uint64_t seed = 0;
    double frame_dt = 0;
    std::string target;  // "gravity", "mass" or "none"
    double target_lo = 0, target_hi = 0;
    std::vector<std::vector<std::pair<std::string, double>>> seq_params;
    std::vector<std::map<std::string, double>> seq_flags;

    std::int64_t frame_elems() const { return std::int64_t(channels) * height * width; }
    std::int64_t seq_elems() const { return std::int64_t(frames) * frame_elems(); }
    const float* seq_ptr(std::int64_t i) const { return pixels.data() + i * seq_elems(); }
    const float* frame_ptr(std::int64_t i, std::int64_t t) const {
        return seq_ptr(i) + t * frame_elems();
    }
    double param_of(std::int64_t i, const std::string& name) const;
};

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// kind in {moon, pendulum, roller, balls2d}
Dataset generate_dataset(const std::string& kind, int n, int frames, int size, bool ood,
                         std::uint64_t seed);

struct SplitIdx {
    std::vector<std::int64_t> train, val;
};
// Deterministic leading/trailing split by sequence index; never overlaps.
SplitIdx split_train_val(std::int64_t n, double val_frac = 0.1);

}  // namespace psvit::data
