#include "psvit/sim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "psvit/errors.hpp"

namespace psvit::sim {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

// ----------------------------------------------------------------- moon -----

static double central_radius(double mass) { return 0.030 * std::cbrt(mass / 100.0) + 0.012; }
static constexpr double kMoonRadius = 0.028;

static double moon_contact_radius(double mass) {
    return central_radius(mass) + kMoonRadius + 0.01;
}

MoonParams sample_moon(Rng& rng, bool ood) {
    for (int attempt = 0; attempt < 200; ++attempt) {
        MoonParams p;
        p.central_mass = ood ? rng.uniform(200, 300) : rng.uniform(72, 200);
        p.r0 = rng.uniform(0.16, 0.30);
        p.phi0 = rng.uniform(0, 2 * kPi);
        p.speed_factor = rng.uniform(0.85, 1.10);
        p.dir = rng.uniform() < 0.5 ? 1 : -1;
        // vis-viva sanity: keep the whole ellipse inside the frame and clear
        // of the central body
        double M = p.central_mass;
        double v = p.speed_factor * std::sqrt(M / p.r0);
        double eps = 0.5 * v * v - M / p.r0;
        if (eps >= 0) continue;  // unbound
        double a = -M / (2 * eps);
        double L = p.r0 * v;  // tangential launch
        double e2 = 1.0 + 2.0 * eps * L * L / (M * M);
        double e = e2 > 0 ? std::sqrt(e2) : 0.0;
        double r_apo = a * (1 + e), r_peri = a * (1 - e);
        if (r_apo > 0.40) continue;
        if (r_peri < moon_contact_radius(M) + 0.02) continue;
        return p;
    }
    throw ValueError("moon: no valid orbit found after 200 attempts");
}

std::vector<std::array<double, 4>> moon_trace(const MoonParams& p, double t_end, double dt) {
    double M = p.central_mass;
    auto f = [M](double, const double* y, double* d) {
        double r2 = y[0] * y[0] + y[1] * y[1];
        double r = std::sqrt(r2);
        double a = -M / (r2 * r);
        d[0] = y[2];
        d[1] = y[3];
        d[2] = a * y[0];
        d[3] = a * y[1];
    };
    double v = p.speed_factor * std::sqrt(M / p.r0);
    double y[4] = {p.r0 * std::cos(p.phi0), p.r0 * std::sin(p.phi0),
                   -v * std::sin(p.phi0) * p.dir, v * std::cos(p.phi0) * p.dir};
    std::vector<std::array<double, 4>> out;
    int steps = int(std::llround(t_end / dt));
    out.reserve(size_t(steps) + 1);
    out.push_back({y[0], y[1], y[2], y[3]});
    for (int i = 0; i < steps; ++i) {
        rk4_step(f, i * dt, dt, y, 4);
        out.push_back({y[0], y[1], y[2], y[3]});
    }
    return out;
}

Sequence simulate_moon(const MoonParams& p, int frames, double frame_dt, int substeps) {
    Sequence seq;
    seq.params = {{"central_mass", p.central_mass}, {"r0", p.r0},         {"phi0", p.phi0},
                  {"speed_factor", p.speed_factor}, {"dir", double(p.dir)}};
    double contact = moon_contact_radius(p.central_mass);
    double dt = frame_dt / substeps;
    auto trace = moon_trace(p, frame_dt * frames, dt);
    bool truncated = false;
    double hx = 0, hy = 0;  // frozen position once truncated
    for (int t = 0; t < frames; ++t) {
        auto& s = trace[size_t(t * substeps)];
        double r = std::hypot(s[0], s[1]);
        if (!truncated && r < contact) {
            truncated = true;
            // freeze at the contact circle along the current direction
            hx = s[0] / r * contact;
            hy = s[1] / r * contact;
        }
        WorldFrame fr;
        Disk central;
        central.x = 0.5;
        central.y = 0.5;
        central.r = central_radius(p.central_mass);
        central.color[0] = 1.0f;
        central.color[1] = 0.9f;
        central.color[2] = 0.55f;
        Disk moon;
        moon.x = 0.5 + (truncated ? hx : s[0]);
        moon.y = 0.5 + (truncated ? hy : s[1]);
        moon.r = kMoonRadius;
        moon.color[0] = 0.55f;
        moon.color[1] = 0.8f;
        moon.color[2] = 1.0f;
        fr.disks = {central, moon};
        seq.frames.push_back(std::move(fr));
    }
    seq.flags["truncated"] = truncated ? 1 : 0;
    return seq;
}

// ------------------------------------------------------------- pendulum -----

static constexpr double kPivotX = 0.5, kPivotY = 0.82;
static constexpr double kBobRadius = 0.045;
static constexpr double kMaxSwing = 1.7;  // rad, keeps the bob inside the frame

PendulumParams sample_pendulum(Rng& rng, bool ood) {
    PendulumParams p;
    p.length = 0.4;
    p.gravity = ood ? rng.uniform(6, 10) : rng.uniform(0.2, 6);
    double gl = p.gravity / p.length;
    double e_cap = gl * (-std::cos(kMaxSwing));  // energy of a kMaxSwing turn at rest
    for (int attempt = 0; attempt < 200; ++attempt) {
        p.theta0 = rng.uniform(-1.6, 1.6);
        p.omega0 = rng.uniform(-0.8, 0.8) * std::sqrt(gl);
        double e = 0.5 * p.omega0 * p.omega0 - gl * std::cos(p.theta0);
        if (e < e_cap) return p;
    }
    p.omega0 = 0;
    return p;
}

std::vector<std::array<double, 2>> pendulum_trace(const PendulumParams& p, double t_end,
                                                  double dt) {
    double gl = p.gravity / p.length;
    auto f = [gl](double, const double* y, double* d) {
        d[0] = y[1];
        d[1] = -gl * std::sin(y[0]);
    };
    double y[2] = {p.theta0, p.omega0};
    std::vector<std::array<double, 2>> out;
    int steps = int(std::llround(t_end / dt));
    out.reserve(size_t(steps) + 1);
    out.push_back({y[0], y[1]});
    for (int i = 0; i < steps; ++i) {
        rk4_step(f, i * dt, dt, y, 2);
        out.push_back({y[0], y[1]});
    }
    return out;
}

Sequence simulate_pendulum(const PendulumParams& p, int frames, double frame_dt, int substeps) {
    Sequence seq;
    seq.params = {{"gravity", p.gravity},
                  {"length", p.length},
                  {"theta0", p.theta0},
                  {"omega0", p.omega0}};
    auto trace = pendulum_trace(p, frame_dt * frames, frame_dt / substeps);
    for (int t = 0; t < frames; ++t) {
        double th = trace[size_t(t * substeps)][0];
        double bx = kPivotX + p.length * std::sin(th);
        double by = kPivotY - p.length * std::cos(th);
        WorldFrame fr;
        Disk bob;
        bob.x = bx;
        bob.y = by;
        bob.r = kBobRadius;
        bob.color[0] = 1.0f;
        bob.color[1] = 0.85f;
        bob.color[2] = 0.3f;
        fr.disks = {bob};
        Stroke rod;
        rod.pts = {{kPivotX, kPivotY}, {bx, by}};
        rod.half_width_px = 0.7;
        fr.strokes.push_back(std::move(rod));
        seq.frames.push_back(std::move(fr));
    }
    return seq;
}

// --------------------------------------------------------------- roller -----

void SplineTrack::build(std::vector<double> kx, std::vector<double> ky) {
    if (kx.size() < 3 || kx.size() != ky.size())
        throw ValueError("spline track: need >= 3 knots");
    for (size_t i = 1; i < kx.size(); ++i)
        if (kx[i] <= kx[i - 1]) throw ValueError("spline track: knots must increase");
    xs = std::move(kx);
    ys = std::move(ky);
    size_t n = xs.size();
    // natural cubic spline: tridiagonal solve for second derivatives
    std::vector<double> a(n, 0), b(n, 0), c(n, 0), d(n, 0);
    m.assign(n, 0.0);
    b[0] = b[n - 1] = 1;
    for (size_t i = 1; i + 1 < n; ++i) {
        double h0 = xs[i] - xs[i - 1], h1 = xs[i + 1] - xs[i];
        a[i] = h0;
        b[i] = 2 * (h0 + h1);
        c[i] = h1;
        d[i] = 6 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
    }
    for (size_t i = 1; i < n; ++i) {
        double w = a[i] / b[i - 1];
        b[i] -= w * c[i - 1];
        d[i] -= w * d[i - 1];
    }
    m[n - 1] = d[n - 1] / b[n - 1];
    for (size_t i = n - 1; i-- > 0;) m[i] = (d[i] - c[i] * m[i + 1]) / b[i];
}

static size_t seg_of(const std::vector<double>& xs, double x) {
    size_t lo = 0, hi = xs.size() - 1;
    if (x <= xs.front()) return 0;
    if (x >= xs.back()) return xs.size() - 2;
    while (hi - lo > 1) {
        size_t mid = (lo + hi) / 2;
        if (xs[mid] <= x) lo = mid;
        else hi = mid;
    }
    return lo;
}

double SplineTrack::y(double x) const {
    size_t i = seg_of(xs, x);
    double h = xs[i + 1] - xs[i], t = x - xs[i], u = xs[i + 1] - x;
    return m[i] * u * u * u / (6 * h) + m[i + 1] * t * t * t / (6 * h) +
           (ys[i] / h - m[i] * h / 6) * u + (ys[i + 1] / h - m[i + 1] * h / 6) * t;
}

double SplineTrack::dy(double x) const {
    size_t i = seg_of(xs, x);
    double h = xs[i + 1] - xs[i], t = x - xs[i], u = xs[i + 1] - x;
    return -m[i] * u * u / (2 * h) + m[i + 1] * t * t / (2 * h) -
           (ys[i] / h - m[i] * h / 6) + (ys[i + 1] / h - m[i + 1] * h / 6);
}

double SplineTrack::d2y(double x) const {
    size_t i = seg_of(xs, x);
    double h = xs[i + 1] - xs[i], t = x - xs[i], u = xs[i + 1] - x;
    return m[i] * u / h + m[i + 1] * t / h;
}

SplineTrack default_track() {
    SplineTrack t;
    t.build({0.06, 0.22, 0.38, 0.50, 0.62, 0.78, 0.94},
            {0.80, 0.30, 0.48, 0.60, 0.40, 0.26, 0.82});
    return t;
}

RollerParams sample_roller(Rng& rng, bool ood) {
    static const SplineTrack track = default_track();
    double wall = std::min(track.y(track.x_min()), track.y(track.x_max()));
    for (int attempt = 0; attempt < 300; ++attempt) {
        RollerParams p;
        p.gravity = ood ? rng.uniform(100, 150) : rng.uniform(2, 100);
        p.x0 = rng.uniform(0.10, 0.90);
        p.v0 = rng.uniform(-0.35, 0.35) * std::sqrt(p.gravity);
        double e = 0.5 * p.v0 * p.v0 + p.gravity * track.y(p.x0);
        if (e < 0.94 * p.gravity * wall) return p;
    }
    RollerParams p;
    p.gravity = ood ? rng.uniform(100, 150) : rng.uniform(2, 100);
    p.x0 = 0.3;
    p.v0 = 0;
    return p;
}

std::vector<RollerSample> roller_trace(const SplineTrack& track, const RollerParams& p,
                                       double t_end, double dt) {
    const double g = p.gravity;
    const double xlo = track.x_min() + 1e-6, xhi = track.x_max() - 1e-6;
    auto on_track_f = [&](double, const double* y, double* d) {
        double s = track.dy(y[0]);
        double den = std::sqrt(1 + s * s);
        d[0] = y[1] / den;
        d[1] = -g * s / den;
    };
    std::vector<RollerSample> out;
    int steps = int(std::llround(t_end / dt));
    out.reserve(size_t(steps) + 1);
    bool flying = false;
    double y2[2] = {p.x0, p.v0};          // on-track: x, signed speed
    double yf[4] = {0, 0, 0, 0};          // flight: x, y, vx, vy
    out.push_back({0.0, y2[0], track.y(y2[0]), y2[1], true});
    for (int i = 0; i < steps; ++i) {
        double t = i * dt;
        if (!flying) {
            rk4_step(on_track_f, t, dt, y2, 2);
            if (y2[0] < xlo) {
                y2[0] = xlo;
                y2[1] = std::fabs(y2[1]);
            } else if (y2[0] > xhi) {
                y2[0] = xhi;
                y2[1] = -std::fabs(y2[1]);
            }
            double s = track.dy(y2[0]);
            double c = track.d2y(y2[0]);
            // centripetal demand beyond what gravity can supply on a crest
            if (c < 0 && y2[1] * y2[1] * (-c) / (1 + s * s) > g) {
                flying = true;
                double den = std::sqrt(1 + s * s);
                yf[0] = y2[0];
                yf[1] = track.y(y2[0]);
                yf[2] = y2[1] / den;
                yf[3] = y2[1] * s / den;
            }
            out.push_back({t + dt, y2[0], track.y(y2[0]), y2[1], true});
        } else {
            double x0 = yf[0], y0 = yf[1], vx0 = yf[2], vy0 = yf[3];
            yf[0] = x0 + vx0 * dt;
            yf[1] = y0 + vy0 * dt - 0.5 * g * dt * dt;
            yf[3] = vy0 - g * dt;
            if (yf[0] < xlo || yf[0] > xhi) {
                yf[0] = std::clamp(yf[0], xlo, xhi);
                yf[2] = -yf[2];
            }
            if (yf[1] <= track.y(yf[0])) {
                // bisect the crossing time inside this substep
                double lo = 0, hi = dt;
                for (int it = 0; it < 40; ++it) {
                    double mid = 0.5 * (lo + hi);
                    double xm = x0 + vx0 * mid;
                    double ym = y0 + vy0 * mid - 0.5 * g * mid * mid;
                    if (ym <= track.y(std::clamp(xm, xlo, xhi))) hi = mid;
                    else lo = mid;
                }
                double tc = hi;
                double xc = std::clamp(x0 + vx0 * tc, xlo, xhi);
                double vyc = vy0 - g * tc;
                double s = track.dy(xc);
                double den = std::sqrt(1 + s * s);
                double vt = (vx0 + vyc * s) / den;  // tangential projection
                flying = false;
                y2[0] = xc;
                y2[1] = vt;
                // finish the substep on the track
                double rest = dt - tc;
                if (rest > 1e-12) rk4_step(on_track_f, t + tc, rest, y2, 2);
                out.push_back({t + dt, y2[0], track.y(y2[0]), y2[1], true});
                continue;
            }
            double s = track.dy(std::clamp(yf[0], xlo, xhi));
            double den = std::sqrt(1 + s * s);
            double vt = (yf[2] + yf[3] * s) / den;
            out.push_back({t + dt, yf[0], yf[1], vt, false});
        }
    }
    return out;
}

Sequence simulate_roller(const SplineTrack& track, const RollerParams& p, int frames,
                         double frame_dt, int substeps) {
    Sequence seq;
    seq.params = {{"gravity", p.gravity}, {"x0", p.x0}, {"v0", p.v0}};
    auto trace = roller_trace(track, p, frame_dt * frames, frame_dt / substeps);
    int flight_steps = 0;
    for (const auto& s : trace)
        if (!s.on_track) ++flight_steps;
    for (int t = 0; t < frames; ++t) {
        const auto& s = trace[size_t(t * substeps)];
        WorldFrame fr;
        Disk ball;
        ball.x = s.x;
        ball.y = s.y;
        ball.r = 0.032;
        ball.color[0] = 1.0f;
        ball.color[1] = 0.6f;
        ball.color[2] = 0.25f;
        fr.disks = {ball};
        seq.frames.push_back(std::move(fr));
    }
    // the track itself, sampled densely
    Stroke rail;
    for (int i = 0; i <= 200; ++i) {
        double x = track.x_min() + (track.x_max() - track.x_min()) * i / 200.0;
        rail.pts.push_back({x, track.y(x)});
    }
    rail.half_width_px = 1.0;
    seq.furniture.push_back(std::move(rail));
    seq.flags["flight_steps"] = flight_steps;
    return seq;
}

// -------------------------------------------------------------- balls2d -----

static constexpr double kBoxLo = 0.03, kBoxHi = 0.97;

BallsParams sample_balls(Rng& rng, bool ood) {
    BallsParams p;
    int n = int(rng.uniform_int(1, 3));
    double vmax = ood ? 0.42 : 0.28;
    for (int i = 0; i < n; ++i) {
        double r = rng.uniform(0.035, 0.06);
        bool placed = false;
        for (int attempt = 0; attempt < 300 && !placed; ++attempt) {
            double x = rng.uniform(kBoxLo + r + 0.005, kBoxHi - r - 0.005);
            double y = rng.uniform(kBoxLo + r + 0.005, kBoxHi - r - 0.005);
            bool clear = true;
            for (int j = 0; j < i; ++j) {
                double d = std::hypot(x - p.x[size_t(j)], y - p.y[size_t(j)]);
                if (d < r + p.r[size_t(j)] + 0.012) {
                    clear = false;
                    break;
                }
            }
            if (clear) {
                p.x.push_back(x);
                p.y.push_back(y);
                p.r.push_back(r);
                p.mass.push_back((r / 0.05) * (r / 0.05));
                p.vx.push_back(rng.uniform(-vmax, vmax));
                p.vy.push_back(rng.uniform(-vmax, vmax));
                placed = true;
            }
        }
        if (!placed)
            throw ValueError("balls2d: could not place ball " + std::to_string(i) +
                             " without overlap");
    }
    return p;
}

double balls_kinetic_energy(const BallsParams& p) {
    double e = 0;
    for (int i = 0; i < p.n(); ++i)
        e += 0.5 * p.mass[size_t(i)] *
             (p.vx[size_t(i)] * p.vx[size_t(i)] + p.vy[size_t(i)] * p.vy[size_t(i)]);
    return e;
}

namespace {

struct Event {
    double t;
    int kind;  // 0 wall-x, 1 wall-y, 2 pair
    int i, j;
};

// soonest event, or t = infinity
Event next_event(const BallsParams& p) {
    Event best{std::numeric_limits<double>::infinity(), -1, -1, -1};
    for (int i = 0; i < p.n(); ++i) {
        double r = p.r[size_t(i)];
        if (p.vx[size_t(i)] > 1e-15) {
            double t = (kBoxHi - r - p.x[size_t(i)]) / p.vx[size_t(i)];
            if (t < best.t) best = {t, 0, i, -1};
        } else if (p.vx[size_t(i)] < -1e-15) {
            double t = (kBoxLo + r - p.x[size_t(i)]) / p.vx[size_t(i)];
            if (t < best.t) best = {t, 0, i, -1};
        }
        if (p.vy[size_t(i)] > 1e-15) {
            double t = (kBoxHi - r - p.y[size_t(i)]) / p.vy[size_t(i)];
            if (t < best.t) best = {t, 1, i, -1};
        } else if (p.vy[size_t(i)] < -1e-15) {
            double t = (kBoxLo + r - p.y[size_t(i)]) / p.vy[size_t(i)];
            if (t < best.t) best = {t, 1, i, -1};
        }
    }
    for (int i = 0; i < p.n(); ++i)
        for (int j = i + 1; j < p.n(); ++j) {
            double dx = p.x[size_t(i)] - p.x[size_t(j)], dy = p.y[size_t(i)] - p.y[size_t(j)];
            double dvx = p.vx[size_t(i)] - p.vx[size_t(j)],
                   dvy = p.vy[size_t(i)] - p.vy[size_t(j)];
            double a = dvx * dvx + dvy * dvy;
            if (a < 1e-18) continue;
            double b = dx * dvx + dy * dvy;
            if (b >= 0) continue;  // receding
            double R = p.r[size_t(i)] + p.r[size_t(j)];
            double c = dx * dx + dy * dy - R * R;
            double disc = b * b - a * c;
            if (disc <= 0) continue;
            double t = (-b - std::sqrt(disc)) / a;
            if (t < 0) t = 0;
            if (t < best.t) best = {t, 2, i, j};
        }
    return best;
}

void advance(BallsParams& p, double dt) {
    for (int i = 0; i < p.n(); ++i) {
        p.x[size_t(i)] += p.vx[size_t(i)] * dt;
        p.y[size_t(i)] += p.vy[size_t(i)] * dt;
    }
}

void resolve(BallsParams& p, const Event& ev) {
    if (ev.kind == 0) {
        p.vx[size_t(ev.i)] = -p.vx[size_t(ev.i)];
    } else if (ev.kind == 1) {
        p.vy[size_t(ev.i)] = -p.vy[size_t(ev.i)];
    } else {
        size_t i = size_t(ev.i), j = size_t(ev.j);
        double dx = p.x[i] - p.x[j], dy = p.y[i] - p.y[j];
        double d = std::hypot(dx, dy);
        double nx = dx / d, ny = dy / d;
        double dvn = (p.vx[i] - p.vx[j]) * nx + (p.vy[i] - p.vy[j]) * ny;
        double mi = p.mass[i], mj = p.mass[j];
        double ki = 2 * mj / (mi + mj) * dvn, kj = 2 * mi / (mi + mj) * dvn;
        p.vx[i] -= ki * nx;
        p.vy[i] -= ki * ny;
        p.vx[j] += kj * nx;
        p.vy[j] += kj * ny;
    }
}

const float kBallColors[4][3] = {
    {1.0f, 0.85f, 0.3f}, {0.45f, 0.9f, 1.0f}, {1.0f, 0.55f, 0.95f}, {0.95f, 0.95f, 0.95f}};

}  // namespace

// Exposed for the energy-drift test: run the event loop for a time budget,
// returns number of collisions handled.
std::int64_t balls_advance(BallsParams& p, double dt) {
    std::int64_t events = 0;
    double left = dt;
    while (left > 0) {
        Event ev = next_event(p);
        if (ev.t >= left) {
            advance(p, left);
            break;
        }
        advance(p, ev.t);
        resolve(p, ev);
        left -= ev.t;
        if (++events > 200000)
            throw NumericError("balls2d: event storm, > 200000 collisions in one frame");
    }
    return events;
}

Sequence simulate_balls(const BallsParams& p0, int frames, double frame_dt) {
    Sequence seq;
    BallsParams p = p0;
    seq.params.push_back({"n_balls", double(p.n())});
    for (int i = 0; i < p.n(); ++i) {
        auto tag = std::to_string(i);
        seq.params.push_back({"r" + tag, p.r[size_t(i)]});
        seq.params.push_back({"m" + tag, p.mass[size_t(i)]});
    }
    std::int64_t collisions = 0;
    for (int t = 0; t < frames; ++t) {
        WorldFrame fr;
        for (int i = 0; i < p.n(); ++i) {
            Disk d;
            d.x = p.x[size_t(i)];
            d.y = p.y[size_t(i)];
            d.r = p.r[size_t(i)];
            d.color[0] = kBallColors[i % 4][0];
            d.color[1] = kBallColors[i % 4][1];
            d.color[2] = kBallColors[i % 4][2];
            fr.disks.push_back(d);
        }
        seq.frames.push_back(std::move(fr));
        if (t + 1 < frames) collisions += balls_advance(p, frame_dt);
    }
    seq.flags["collisions"] = double(collisions);
    return seq;
}

}  // namespace psvit::sim
