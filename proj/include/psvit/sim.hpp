#pragma once

// Physics generators. All integration happens in double precision in world
// units (unit box, y up); rasterization to pixels happens elsewhere. Each
// system emits per-frame object states plus static "furniture" strokes that
// are drawn dim so the object segmenter ignores them.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "psvit/rng.hpp"

namespace psvit::sim {

// Classic fixed-step RK4 on a small state vector (n <= 16).
template <class F>
void rk4_step(F&& f, double t, double dt, double* y, int n) {
    std::array<double, 16> k1, k2, k3, k4, tmp;
    f(t, y, k1.data());
    for (int i = 0; i < n; ++i) tmp[size_t(i)] = y[i] + 0.5 * dt * k1[size_t(i)];
    f(t + 0.5 * dt, tmp.data(), k2.data());
    for (int i = 0; i < n; ++i) tmp[size_t(i)] = y[i] + 0.5 * dt * k2[size_t(i)];
    f(t + 0.5 * dt, tmp.data(), k3.data());
    for (int i = 0; i < n; ++i) tmp[size_t(i)] = y[i] + dt * k3[size_t(i)];
    f(t + dt, tmp.data(), k4.data());
    for (int i = 0; i < n; ++i)
        y[i] += dt / 6.0 * (k1[size_t(i)] + 2 * k2[size_t(i)] + 2 * k3[size_t(i)] + k4[size_t(i)]);
}

struct Disk {
    double x = 0, y = 0;   // world, y up
    double r = 0;          // world radius
    float color[3] = {1, 1, 1};
};

struct Stroke {  // polyline in world coords
    std::vector<std::array<double, 2>> pts;
    double half_width_px = 1.0;
    float color[3] = {0.09f, 0.09f, 0.09f};
};

struct WorldFrame {
    std::vector<Disk> disks;
    std::vector<Stroke> strokes;  // per-frame furniture (pendulum rod)
};

struct Sequence {
    std::vector<WorldFrame> frames;
    std::vector<Stroke> furniture;                       // static, drawn on every frame
    std::vector<std::pair<std::string, double>> params;  // recorded in the sidecar
    std::map<std::string, double> flags;                 // e.g. truncated, flight_steps
};

// ----------------------------------------------------------------- moon -----

struct MoonParams {
    double central_mass = 100;  // probe target; G = 1 world units
    double r0 = 0.25;
    double phi0 = 0;
    double speed_factor = 1.0;  // 1 = circular
    int dir = 1;                // +1 ccw, -1 cw
};

inline constexpr double kMoonFrameDt = 8e-4;
inline constexpr double kMoonContactRadius = 0.085;  // central r + moon r + gap

MoonParams sample_moon(Rng& rng, bool ood);
Sequence simulate_moon(const MoonParams& p, int frames, double frame_dt = kMoonFrameDt,
                       int substeps = 16);
// raw state trace (x, y, vx, vy) relative to the central body
std::vector<std::array<double, 4>> moon_trace(const MoonParams& p, double t_end, double dt);

// ------------------------------------------------------------- pendulum -----

struct PendulumParams {
    double gravity = 3.0;  // probe target
    double length = 0.55;
    double theta0 = 1.0;
    double omega0 = 0.0;
};

inline constexpr double kPendulumFrameDt = 0.035;

PendulumParams sample_pendulum(Rng& rng, bool ood);
Sequence simulate_pendulum(const PendulumParams& p, int frames,
                           double frame_dt = kPendulumFrameDt, int substeps = 8);
// raw (theta, omega) trace
std::vector<std::array<double, 2>> pendulum_trace(const PendulumParams& p, double t_end,
                                                  double dt);

// --------------------------------------------------------------- roller -----

// Natural cubic spline y(x) through knots; the rolling surface.
struct SplineTrack {
    std::vector<double> xs, ys;      // knots, xs strictly increasing
    std::vector<double> m;           // second derivatives at knots
    void build(std::vector<double> knot_x, std::vector<double> knot_y);
    double y(double x) const;
    double dy(double x) const;
    double d2y(double x) const;
    double x_min() const { return xs.front(); }
    double x_max() const { return xs.back(); }
};

SplineTrack default_track();

struct RollerParams {
    double gravity = 30;  // probe target
    double x0 = 0.2;
    double v0 = 0;        // signed speed along track, +x direction
};

inline constexpr double kRollerFrameDt = 0.008;

struct RollerSample {
    double t, x, y, v;  // v = signed tangential speed
    bool on_track;
};

RollerParams sample_roller(Rng& rng, bool ood);
Sequence simulate_roller(const SplineTrack& track, const RollerParams& p, int frames,
                         double frame_dt = kRollerFrameDt, int substeps = 32);
std::vector<RollerSample> roller_trace(const SplineTrack& track, const RollerParams& p,
                                       double t_end, double dt);

// -------------------------------------------------------------- balls2d -----

struct BallsParams {
    std::vector<double> x, y, vx, vy, r, mass;
    int n() const { return int(x.size()); }
};

inline constexpr double kBallsFrameDt = 0.35;

// Throws if a non-overlapping placement cannot be found.
BallsParams sample_balls(Rng& rng, bool ood);
// Event-driven: straight-line flight between exact wall/pair collision times.
Sequence simulate_balls(const BallsParams& p, int frames, double frame_dt = kBallsFrameDt);
// Advances state in place for dt, resolving events; returns collision count.
std::int64_t balls_advance(BallsParams& p, double dt);

double balls_kinetic_energy(const BallsParams& p);

}  // namespace psvit::sim
