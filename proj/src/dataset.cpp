#include "psvit/dataset.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "psvit/errors.hpp"
#include "psvit/raster.hpp"

static_assert(std::endian::native == std::endian::little,
              "PSVD i/o assumes a little-endian host");

namespace psvit::data {

double Dataset::param_of(std::int64_t i, const std::string& name) const {
    for (const auto& [k, v] : seq_params[size_t(i)])
        if (k == name) return v;
    throw DataError("dataset: sequence " + std::to_string(i) + " has no parameter " + name);
}

namespace {

constexpr char kMagic[4] = {'P', 'S', 'V', 'D'};

void put_u32(std::ofstream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::ifstream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
    if (std::int64_t(ds.pixels.size()) != std::int64_t(ds.n) * ds.seq_elems())
        throw DataError("write_dataset: pixel buffer size mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("write_dataset: cannot open " + path);
    os.write(kMagic, 4);
    put_u32(os, ds.version);
    put_u32(os, ds.n);
    put_u32(os, ds.frames);
    put_u32(os, ds.channels);
    put_u32(os, ds.height);
    put_u32(os, ds.width);
    std::uint8_t dtype = 0;
    os.write(reinterpret_cast<const char*>(&dtype), 1);
    os.write(reinterpret_cast<const char*>(ds.pixels.data()),
             std::streamsize(ds.pixels.size() * sizeof(float)));
    if (!os) throw DataError("write_dataset: short write to " + path);
    os.close();

    std::ofstream ms(path + ".meta", std::ios::trunc);
    if (!ms) throw DataError("write_dataset: cannot open " + path + ".meta");
    ms << "psvd-meta 1\n";
    ms << "kind " << ds.kind << "\n";
    ms << "n " << ds.n << "\n";
    ms << "frames " << ds.frames << "\n";
    ms << "channels " << ds.channels << "\n";
    ms << "height " << ds.height << "\n";
    ms << "width " << ds.width << "\n";
    ms << "ood " << (ds.ood ? 1 : 0) << "\n";
    ms << "seed " << ds.seed << "\n";
    ms << "frame_dt " << fmt_double(ds.frame_dt) << "\n";
    ms << "target " << (ds.target.empty() ? "none" : ds.target) << "\n";
    ms << "target_lo " << fmt_double(ds.target_lo) << "\n";
    ms << "target_hi " << fmt_double(ds.target_hi) << "\n";
    for (std::uint32_t i = 0; i < ds.n; ++i) {
        ms << "seq " << i;
        for (const auto& [k, v] : ds.seq_params[i]) ms << " " << k << "=" << fmt_double(v);
        ms << " |";
        for (const auto& [k, v] : ds.seq_flags[i]) ms << " " << k << "=" << fmt_double(v);
        ms << "\n";
    }
    if (!ms) throw DataError("write_dataset: short write to " + path + ".meta");
}

Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError("read_dataset: " + path + " is not a PSVD container");
    Dataset ds;
    ds.version = get_u32(is);
    if (ds.version != 1)
        throw DataError("read_dataset: unsupported version " + std::to_string(ds.version));
    ds.n = get_u32(is);
    ds.frames = get_u32(is);
    ds.channels = get_u32(is);
    ds.height = get_u32(is);
    ds.width = get_u32(is);
    std::uint8_t dtype = 255;
    is.read(reinterpret_cast<char*>(&dtype), 1);
    if (!is || dtype != 0) throw DataError("read_dataset: unsupported dtype");
    std::int64_t count = std::int64_t(ds.n) * ds.seq_elems();
    ds.pixels.resize(size_t(count));
    is.read(reinterpret_cast<char*>(ds.pixels.data()), std::streamsize(count * sizeof(float)));
    if (is.gcount() != std::streamsize(count * sizeof(float)))
        throw DataError("read_dataset: truncated payload in " + path);
    char extra;
    if (is.read(&extra, 1))
        throw DataError("read_dataset: trailing bytes in " + path);

    std::ifstream ms(path + ".meta");
    if (!ms) throw DataError("read_dataset: missing sidecar " + path + ".meta");
    std::string line;
    if (!std::getline(ms, line) || line.rfind("psvd-meta 1", 0) != 0)
        throw DataError("read_dataset: bad sidecar header in " + path + ".meta");
    ds.seq_params.resize(ds.n);
    ds.seq_flags.resize(ds.n);
    while (std::getline(ms, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key;
        ls >> key;
        if (key == "kind") ls >> ds.kind;
        else if (key == "ood") {
            int v;
            ls >> v;
            ds.ood = v != 0;
        } else if (key == "seed") ls >> ds.seed;
        else if (key == "frame_dt") ls >> ds.frame_dt;
        else if (key == "target") ls >> ds.target;
        else if (key == "target_lo") ls >> ds.target_lo;
        else if (key == "target_hi") ls >> ds.target_hi;
        else if (key == "n" || key == "frames" || key == "channels" || key == "height" ||
                 key == "width") {
            std::uint32_t v;
            ls >> v;
            std::uint32_t expect = key == "n"          ? ds.n
                                   : key == "frames"   ? ds.frames
                                   : key == "channels" ? ds.channels
                                   : key == "height"   ? ds.height
                                                       : ds.width;
            if (v != expect)
                throw DataError("read_dataset: sidecar " + key + " disagrees with container");
        } else if (key == "seq") {
            std::uint32_t i;
            ls >> i;
            if (i >= ds.n) throw DataError("read_dataset: sidecar sequence index out of range");
            bool in_flags = false;
            std::string tok;
            while (ls >> tok) {
                if (tok == "|") {
                    in_flags = true;
                    continue;
                }
                auto eq = tok.find('=');
                if (eq == std::string::npos)
                    throw DataError("read_dataset: bad sidecar token " + tok);
                std::string name = tok.substr(0, eq);
                double val = std::strtod(tok.c_str() + eq + 1, nullptr);
                if (in_flags) ds.seq_flags[i][name] = val;
                else ds.seq_params[i].push_back({name, val});
            }
        } else {
            throw DataError("read_dataset: unknown sidecar key " + key);
        }
    }
    return ds;
}

Dataset generate_dataset(const std::string& kind, int n, int frames, int size, bool ood,
                         std::uint64_t seed) {
    if (n < 1 || frames < 1 || size < 8)
        throw ValueError("generate_dataset: need n >= 1, frames >= 1, size >= 8");
    Dataset ds;
    ds.n = std::uint32_t(n);
    ds.frames = std::uint32_t(frames);
    ds.channels = 3;
    ds.height = std::uint32_t(size);
    ds.width = std::uint32_t(size);
    ds.kind = kind;
    ds.ood = ood;
    ds.seed = seed;
    ds.pixels.reserve(size_t(n) * size_t(ds.seq_elems()));

    if (kind == "moon") {
        ds.frame_dt = sim::kMoonFrameDt;
        ds.target = "mass";
        ds.target_lo = ood ? 200 : 72;
        ds.target_hi = ood ? 300 : 200;
    } else if (kind == "pendulum") {
        ds.frame_dt = sim::kPendulumFrameDt;
        ds.target = "gravity";
        ds.target_lo = ood ? 6 : 0.2;
        ds.target_hi = ood ? 10 : 6;
    } else if (kind == "roller") {
        ds.frame_dt = sim::kRollerFrameDt;
        ds.target = "gravity";
        ds.target_lo = ood ? 100 : 2;
        ds.target_hi = ood ? 150 : 100;
    } else if (kind == "balls2d") {
        ds.frame_dt = sim::kBallsFrameDt;
        ds.target = "none";
    } else {
        throw ValueError("generate_dataset: unknown kind " + kind);
    }

    Rng master(seed);
    sim::SplineTrack track;
    if (kind == "roller") track = sim::default_track();
    for (int i = 0; i < n; ++i) {
        Rng rng = master.fork(std::uint64_t(i));
        sim::Sequence seq;
        if (kind == "moon") {
            seq = sim::simulate_moon(sim::sample_moon(rng, ood), frames);
        } else if (kind == "pendulum") {
            seq = sim::simulate_pendulum(sim::sample_pendulum(rng, ood), frames);
        } else if (kind == "roller") {
            seq = sim::simulate_roller(track, sim::sample_roller(rng, ood), frames);
        } else {
            seq = sim::simulate_balls(sim::sample_balls(rng, ood), frames);
        }
        auto px = raster::render_sequence(seq, size, size);
        ds.pixels.insert(ds.pixels.end(), px.begin(), px.end());
        if (kind == "moon") {
            // sidecar target name matches the CLI vocabulary
            for (auto& [k, v] : seq.params)
                if (k == "central_mass") k = "mass";
        }
        ds.seq_params.push_back(std::move(seq.params));
        ds.seq_flags.push_back(std::move(seq.flags));
    }
    return ds;
}

SplitIdx split_train_val(std::int64_t n, double val_frac) {
    SplitIdx s;
    std::int64_t nval = std::int64_t(n * val_frac + 0.5);
    if (nval < 1) nval = 1;
    if (nval >= n) nval = n > 1 ? n - 1 : 0;
    for (std::int64_t i = 0; i < n - nval; ++i) s.train.push_back(i);
    for (std::int64_t i = n - nval; i < n; ++i) s.val.push_back(i);
    return s;
}

}  // namespace psvit::data
