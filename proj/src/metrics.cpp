#include "psvit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "psvit/errors.hpp"
#include "psvit/loss.hpp"

namespace psvit::metrics {

namespace {

constexpr double kLumThreshold = 0.1;
constexpr std::int64_t kMinMass = 8;

double lum_at(const float* frame, std::int64_t channels, std::int64_t hw, std::int64_t px) {
    double s = 0;
    for (std::int64_t c = 0; c < channels; ++c) s += frame[c * hw + px];
    return s / double(channels);
}

}  // namespace

std::vector<Centroid> extract_centroids(const float* frame, std::int64_t channels,
                                        std::int64_t height, std::int64_t width) {
    std::int64_t hw = height * width;
    std::vector<std::int8_t> seen(size_t(hw), 0);
    std::vector<Centroid> out;
    std::vector<std::int64_t> stack;
    for (std::int64_t start = 0; start < hw; ++start) {
        if (seen[size_t(start)] || lum_at(frame, channels, hw, start) <= kLumThreshold) {
            seen[size_t(start)] = 1;
            continue;
        }
        // flood one 8-connected component
        double wsum = 0, wx = 0, wy = 0;
        std::int64_t mass = 0;
        stack.assign(1, start);
        seen[size_t(start)] = 1;
        while (!stack.empty()) {
            std::int64_t p = stack.back();
            stack.pop_back();
            std::int64_t y = p / width, x = p % width;
            double l = lum_at(frame, channels, hw, p);
            ++mass;
            wsum += l;
            wx += l * double(x);
            wy += l * double(y);
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dx = -1; dx <= 1; ++dx) {
                    std::int64_t ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= height || nx < 0 || nx >= width) continue;
                    std::int64_t q = ny * width + nx;
                    if (seen[size_t(q)]) continue;
                    if (lum_at(frame, channels, hw, q) <= kLumThreshold) continue;
                    seen[size_t(q)] = 1;
                    stack.push_back(q);
                }
        }
        if (mass >= kMinMass && wsum > 0)
            out.push_back({wx / wsum, wy / wsum, double(mass)});
    }
    return out;
}

double DivergenceReport::at(std::int64_t t) const {
    if (t < 1 || t > std::int64_t(rolling.size()))
        throw ValueError("divergence: rolling average asked at step " + std::to_string(t) +
                         " of " + std::to_string(rolling.size()));
    return rolling[size_t(t - 1)];
}

DivergenceReport divergence(const std::vector<std::vector<Centroid>>& pred,
                            const std::vector<std::vector<Centroid>>& truth,
                            std::int64_t height, std::int64_t width) {
    if (pred.size() != truth.size())
        throw ValueError("divergence: " + std::to_string(pred.size()) + " predicted vs " +
                         std::to_string(truth.size()) + " truth steps");
    double scl = 128.0 / double(height);
    double diag = std::hypot(double(height), double(width)) * scl;
    DivergenceReport rep;
    double acc = 0;
    std::int64_t acc_n = 0;
    for (size_t s = 0; s < truth.size(); ++s) {
        const auto& ts = truth[s];
        const auto& ps = pred[s];
        if (ts.empty()) {
            rep.step_mean.push_back(0);
            rep.step_valid.push_back(false);
            rep.rolling.push_back(acc_n ? acc / double(acc_n) : 0.0);
            continue;
        }
        std::vector<char> used(ps.size(), 0);
        double sum = 0;
        for (const auto& t : ts) {
            std::int64_t best = -1;
            double best_d = 0;
            for (size_t j = 0; j < ps.size(); ++j) {
                if (used[j]) continue;
                double d = std::hypot(t.x - ps[j].x, t.y - ps[j].y);
                if (best < 0 || d < best_d) {
                    best = std::int64_t(j);
                    best_d = d;
                }
            }
            if (best < 0) {
                sum += diag;
            } else {
                used[size_t(best)] = 1;
                sum += best_d * scl;
            }
        }
        double mean = sum / double(ts.size());
        rep.step_mean.push_back(mean);
        rep.step_valid.push_back(true);
        acc += mean;
        ++acc_n;
        rep.rolling.push_back(acc / double(acc_n));
    }
    return rep;
}

double l1(const float* x, const float* y, std::int64_t n) {
    double s = 0;
    for (std::int64_t i = 0; i < n; ++i) s += std::fabs(double(x[i]) - double(y[i]));
    return s / double(n);
}

double psnr(const float* x, const float* y, std::int64_t n) {
    double mse = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        double d = double(x[i]) - double(y[i]);
        mse += d * d;
    }
    mse /= double(n);
    if (mse < 1e-10) return 100.0;
    return 10.0 * std::log10(1.0 / mse);
}

double ssim_frame(const float* x, const float* y, std::int64_t channels, std::int64_t height,
                  std::int64_t width) {
    NoGradGuard ng;
    std::int64_t n = channels * height * width;
    auto tx = TensorT<float>::from({channels, height, width}, std::vector<float>(x, x + n));
    auto ty = TensorT<float>::from({channels, height, width}, std::vector<float>(y, y + n));
    return double(ssim(tx, ty).item());
}

double median(std::vector<double> v) {
    if (v.empty()) throw ValueError("median of nothing");
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

// greedy same-order matching used to estimate per-object velocities
std::vector<std::int64_t> match_nearest(const std::vector<Centroid>& from,
                                        const std::vector<Centroid>& to) {
    std::vector<std::int64_t> idx(from.size(), -1);
    std::vector<char> used(to.size(), 0);
    for (size_t i = 0; i < from.size(); ++i) {
        std::int64_t best = -1;
        double best_d = 0;
        for (size_t j = 0; j < to.size(); ++j) {
            if (used[j]) continue;
            double d = std::hypot(from[i].x - to[j].x, from[i].y - to[j].y);
            if (best < 0 || d < best_d) {
                best = std::int64_t(j);
                best_d = d;
            }
        }
        if (best >= 0) {
            used[size_t(best)] = 1;
            idx[i] = best;
        }
    }
    return idx;
}

}  // namespace

std::vector<std::vector<Centroid>> copy_last_track(const data::Dataset& ds, std::int64_t seq,
                                                   std::int64_t context, std::int64_t horizon) {
    auto last = extract_centroids(ds.frame_ptr(seq, context - 1), ds.channels, ds.height,
                                  ds.width);
    return std::vector<std::vector<Centroid>>(size_t(horizon), last);
}

std::vector<std::vector<Centroid>> const_velocity_track(const data::Dataset& ds, std::int64_t seq,
                                                        std::int64_t context,
                                                        std::int64_t horizon) {
    auto last = extract_centroids(ds.frame_ptr(seq, context - 1), ds.channels, ds.height,
                                  ds.width);
    std::vector<Centroid> prev;
    if (context >= 2)
        prev = extract_centroids(ds.frame_ptr(seq, context - 2), ds.channels, ds.height,
                                 ds.width);
    auto back = match_nearest(last, prev);
    std::vector<std::vector<Centroid>> out(static_cast<size_t>(horizon));
    for (std::int64_t k = 1; k <= horizon; ++k) {
        auto step = last;
        for (size_t i = 0; i < step.size(); ++i) {
            if (back[i] < 0) continue;  // newcomer: no velocity estimate
            step[i].x += double(k) * (last[i].x - prev[size_t(back[i])].x);
            step[i].y += double(k) * (last[i].y - prev[size_t(back[i])].y);
        }
        out[size_t(k - 1)] = std::move(step);
    }
    return out;
}

double RolloutEval::divergence_at(std::int64_t t) const {
    if (t < 1 || t > std::int64_t(divergence_median.size()))
        throw ValueError("rollout eval: no divergence at step " + std::to_string(t));
    return divergence_median[size_t(t - 1)];
}

double RolloutEval::ssim_first(std::int64_t k) const {
    double s = 0;
    for (std::int64_t i = 0; i < k; ++i) s += ssim_mean[size_t(i)];
    return s / double(k);
}

double RolloutEval::psnr_first(std::int64_t k) const {
    double s = 0;
    for (std::int64_t i = 0; i < k; ++i) s += psnr_mean[size_t(i)];
    return s / double(k);
}

RolloutEval evaluate_rollout(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                             const data::Dataset& ds, std::int64_t context,
                             std::int64_t horizon) {
    if (context < 1 || horizon < 1 || context + horizon > std::int64_t(ds.frames))
        throw ValueError("evaluate_rollout: context " + std::to_string(context) + " + horizon " +
                         std::to_string(horizon) + " vs " + std::to_string(ds.frames) +
                         " frames");
    std::int64_t fe = ds.frame_elems();
    size_t nseq = ds.n;
    std::vector<std::vector<double>> div(nseq), cdiv(nseq), vdiv(nseq);
    std::vector<std::vector<double>> l1s(nseq), psnrs(nseq), ssims(nseq);
    NoGradGuard ng;
    for (std::int64_t i = 0; i < std::int64_t(ds.n); ++i) {
        auto ctx = TensorT<float>::from(
            {context, ds.channels, ds.height, ds.width},
            std::vector<float>(ds.seq_ptr(i), ds.seq_ptr(i) + context * fe));
        auto pred = model::rollout(cfg, ps, ctx, horizon);
        size_t hz = static_cast<size_t>(horizon);
        std::vector<std::vector<Centroid>> pc(hz), tc(hz);
        for (std::int64_t s = 0; s < horizon; ++s) {
            const float* pf = pred.values().data() + s * fe;
            const float* tf = ds.frame_ptr(i, context + s);
            pc[size_t(s)] = extract_centroids(pf, ds.channels, ds.height, ds.width);
            tc[size_t(s)] = extract_centroids(tf, ds.channels, ds.height, ds.width);
            l1s[size_t(i)].push_back(l1(pf, tf, fe));
            psnrs[size_t(i)].push_back(psnr(pf, tf, fe));
            ssims[size_t(i)].push_back(ssim_frame(pf, tf, ds.channels, ds.height, ds.width));
        }
        div[size_t(i)] = divergence(pc, tc, ds.height, ds.width).rolling;
        cdiv[size_t(i)] =
            divergence(copy_last_track(ds, i, context, horizon), tc, ds.height, ds.width).rolling;
        vdiv[size_t(i)] =
            divergence(const_velocity_track(ds, i, context, horizon), tc, ds.height, ds.width)
                .rolling;
    }
    RolloutEval ev;
    for (std::int64_t s = 0; s < horizon; ++s) {
        std::vector<double> a, b, c;
        double l = 0, p = 0, ss = 0;
        for (std::int64_t i = 0; i < std::int64_t(ds.n); ++i) {
            a.push_back(div[size_t(i)][size_t(s)]);
            b.push_back(cdiv[size_t(i)][size_t(s)]);
            c.push_back(vdiv[size_t(i)][size_t(s)]);
            l += l1s[size_t(i)][size_t(s)];
            p += psnrs[size_t(i)][size_t(s)];
            ss += ssims[size_t(i)][size_t(s)];
        }
        ev.divergence_median.push_back(median(a));
        ev.copy_last_divergence_median.push_back(median(b));
        ev.const_velocity_divergence_median.push_back(median(c));
        ev.l1_mean.push_back(l / double(ds.n));
        ev.psnr_mean.push_back(p / double(ds.n));
        ev.ssim_mean.push_back(ss / double(ds.n));
    }
    return ev;
}

void write_curves_csv(const RolloutEval& ev, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("write_curves_csv: cannot open " + path);
    os << "step,divergence_median,l1_mean,psnr_mean,ssim_mean\n";
    for (size_t s = 0; s < ev.divergence_median.size(); ++s)
        os << (s + 1) << "," << ev.divergence_median[s] << "," << ev.l1_mean[s] << ","
           << ev.psnr_mean[s] << "," << ev.ssim_mean[s] << "\n";
    if (!os) throw DataError("write_curves_csv: short write to " + path);
}

void write_baselines_csv(const RolloutEval& ev, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("write_baselines_csv: cannot open " + path);
    os << "step,model_divergence_median,copy_last_divergence_median,const_velocity_divergence_"
          "median\n";
    for (size_t s = 0; s < ev.divergence_median.size(); ++s)
        os << (s + 1) << "," << ev.divergence_median[s] << ","
           << ev.copy_last_divergence_median[s] << "," << ev.const_velocity_divergence_median[s]
           << "\n";
    if (!os) throw DataError("write_baselines_csv: short write to " + path);
}

void write_ppm(const float* frame, std::int64_t channels, std::int64_t height,
               std::int64_t width, const std::string& path) {
    if (channels != 1 && channels != 3)
        throw ValueError("write_ppm: want 1 or 3 channels, got " + std::to_string(channels));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("write_ppm: cannot open " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    std::int64_t hw = height * width;
    std::vector<unsigned char> row(size_t(width * 3));
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x)
            for (std::int64_t c = 0; c < 3; ++c) {
                float v = frame[(channels == 1 ? 0 : c) * hw + y * width + x];
                v = std::min(1.0f, std::max(0.0f, v));
                row[size_t(x * 3 + c)] = static_cast<unsigned char>(std::lround(v * 255.0f));
            }
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!os) throw DataError("write_ppm: short write to " + path);
}

}  // namespace psvit::metrics
