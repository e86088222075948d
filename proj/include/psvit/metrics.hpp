#pragma once

// Frame-quality metrics (L1, PSNR, SSIM) and the object-divergence metric:
// segment bright objects, match predicted to true centroids per step, average
// the per-step mean pixel distances into a rolling curve. Distances are
// normalized by 128/H so numbers are comparable across render resolutions.

#include <cstdint>
#include <string>
#include <vector>

#include "psvit/dataset.hpp"
#include "psvit/model.hpp"
#include "psvit/param_store.hpp"

namespace psvit::metrics {

struct Centroid {
    double x = 0, y = 0;  // pixel coordinates, x = column, y = row
    double mass = 0;      // pixel count of the component
};

// luminance (mean over channels) > 0.1, 8-connected components, components
// under 8 px dropped, intensity-weighted centroids; discovery order is the
// row-major scan order of each component's first pixel
std::vector<Centroid> extract_centroids(const float* frame, std::int64_t channels,
                                        std::int64_t height, std::int64_t width);

struct DivergenceReport {
    std::vector<double> step_mean;  // per-step mean distance over truth objects
    std::vector<bool> step_valid;   // steps where the truth had any objects
    std::vector<double> rolling;    // rolling[i] = mean of valid step_mean[0..i]

    // rolling average after t steps (t >= 1)
    double at(std::int64_t t) const;
};

// per step: each truth centroid greedily grabs the nearest unmatched
// prediction (ties to the lower prediction id); leftovers cost the frame
// diagonal. Distances scaled by 128/height.
DivergenceReport divergence(const std::vector<std::vector<Centroid>>& pred,
                            const std::vector<std::vector<Centroid>>& truth,
                            std::int64_t height, std::int64_t width);

double l1(const float* x, const float* y, std::int64_t n);
// 10*log10(1/MSE) with unit dynamic range, capped at 100 dB for (near-)equal inputs
double psnr(const float* x, const float* y, std::int64_t n);
// non-differentiating wrapper over the training SSIM, one [C,H,W] frame pair
double ssim_frame(const float* x, const float* y, std::int64_t channels, std::int64_t height,
                  std::int64_t width);

struct RolloutEval {
    // per output step, aggregated across sequences
    std::vector<double> divergence_median;  // rolling divergence, median
    std::vector<double> l1_mean;
    std::vector<double> psnr_mean;
    std::vector<double> ssim_mean;
    // baseline rolling-divergence medians on the same sequences
    std::vector<double> copy_last_divergence_median;
    std::vector<double> const_velocity_divergence_median;

    double divergence_at(std::int64_t t) const;  // model curve, t >= 1
    double ssim_first(std::int64_t k) const;     // mean of the first k steps
    double psnr_first(std::int64_t k) const;
};

// rolls the model out `horizon` steps from the first `context` frames of each
// sequence and scores against the remaining truth frames
RolloutEval evaluate_rollout(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                             const data::Dataset& ds, std::int64_t context,
                             std::int64_t horizon);

// baseline centroid tracks for one sequence's context frames
std::vector<std::vector<Centroid>> copy_last_track(const data::Dataset& ds, std::int64_t seq,
                                                   std::int64_t context, std::int64_t horizon);
std::vector<std::vector<Centroid>> const_velocity_track(const data::Dataset& ds, std::int64_t seq,
                                                        std::int64_t context,
                                                        std::int64_t horizon);

void write_curves_csv(const RolloutEval& ev, const std::string& path);
void write_baselines_csv(const RolloutEval& ev, const std::string& path);

// binary portable pixmap; channels must be 1 or 3, values clamped to [0,1]
void write_ppm(const float* frame, std::int64_t channels, std::int64_t height,
               std::int64_t width, const std::string& path);

double median(std::vector<double> v);

}  // namespace psvit::metrics
