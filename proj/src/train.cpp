#include "psvit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "psvit/errors.hpp"
#include "psvit/metrics.hpp"
#include "psvit/rng.hpp"

namespace psvit::train {

namespace {

TensorT<float> window_tensor(const data::Dataset& ds, std::int64_t seq, std::int64_t start,
                             std::int64_t len) {
    const float* p = ds.frame_ptr(seq, start);
    std::int64_t fe = ds.frame_elems();
    return TensorT<float>::from({len, ds.channels, ds.height, ds.width},
                                std::vector<float>(p, p + len * fe));
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

double validation_divergence(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                             const data::Dataset& ds, const std::vector<std::int64_t>& seqs,
                             std::int64_t context, std::int64_t horizon) {
    if (seqs.empty()) throw ValueError("validation_divergence: no sequences");
    if (context + horizon > std::int64_t(ds.frames))
        throw ValueError("validation_divergence: context + horizon exceeds " +
                         std::to_string(ds.frames) + " frames");
    NoGradGuard ng;
    std::int64_t fe = ds.frame_elems();
    std::vector<double> per_seq;
    for (std::int64_t i : seqs) {
        auto ctx = TensorT<float>::from(
            {context, ds.channels, ds.height, ds.width},
            std::vector<float>(ds.seq_ptr(i), ds.seq_ptr(i) + context * fe));
        auto pred = model::rollout(cfg, ps, ctx, horizon);
        size_t hz = static_cast<size_t>(horizon);
        std::vector<std::vector<metrics::Centroid>> pc(hz), tc(hz);
        for (std::int64_t s = 0; s < horizon; ++s) {
            pc[size_t(s)] = metrics::extract_centroids(pred.values().data() + s * fe,
                                                       ds.channels, ds.height, ds.width);
            tc[size_t(s)] = metrics::extract_centroids(ds.frame_ptr(i, context + s),
                                                       ds.channels, ds.height, ds.width);
        }
        per_seq.push_back(metrics::divergence(pc, tc, ds.height, ds.width).at(horizon));
    }
    return metrics::median(std::move(per_seq));
}

TrainResult train(const model::ModelConfig& cfg, ParamStoreT<float>& ps,
                  const data::Dataset& ds, const TrainConfig& tc, const TrainHooks* hooks) {
    if (tc.batch < 1) throw ValueError("train: batch must be >= 1");
    if (tc.epochs < 1) throw ValueError("train: epochs must be >= 1");
    if (tc.context < 1 || tc.context > cfg.t_max)
        throw ValueError("train: context " + std::to_string(tc.context) + " outside [1, " +
                         std::to_string(cfg.t_max) + "]");
    std::int64_t win = tc.context + 1;  // inputs plus one-step-shifted targets
    if (win > std::int64_t(ds.frames))
        throw ValueError("train: window " + std::to_string(win) + " frames but sequences have " +
                         std::to_string(ds.frames));
    auto split = data::split_train_val(std::int64_t(ds.n));
    if (split.train.empty() || split.val.empty())
        throw ValueError("train: need at least 2 sequences to split");

    AdamW opt;
    opt.lr = tc.lr;
    Rng base(tc.seed);
    TrainResult res;
    res.best_divergence = std::numeric_limits<double>::infinity();
    res.best_params = ps.cast<float>(true);
    double carried_div = std::numeric_limits<double>::quiet_NaN();

    std::vector<std::int64_t> order = split.train;
    for (std::int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        Rng er = base.fork(std::uint64_t(epoch));
        for (std::int64_t i = std::int64_t(order.size()) - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(er.uniform_int(0, i))]);

        double loss_sum = 0;
        std::int64_t loss_n = 0;
        bool aborted = false;
        for (size_t at = 0; at < order.size() && !aborted; at += size_t(tc.batch)) {
            std::int64_t bn = std::min<std::int64_t>(tc.batch, std::int64_t(order.size() - at));
            ps.zero_grad();
            for (std::int64_t b = 0; b < bn; ++b) {
                std::int64_t seq = order[at + size_t(b)];
                std::int64_t start = er.uniform_int(0, std::int64_t(ds.frames) - win);
                auto w = window_tensor(ds, seq, start, win);
                if (hooks && hooks->on_window) hooks->on_window(seq, start, w);
                auto loss = teacher_forced_loss(cfg, ps, w, tc.loss);
                float lv = loss.item();
                if (!std::isfinite(lv)) {
                    aborted = true;
                    break;
                }
                loss_sum += lv;
                ++loss_n;
                backward(scale(loss, 1.0f / float(bn)));
            }
            if (aborted) break;
            if (!opt.step(ps)) ++res.skipped_steps;
        }
        if (aborted) {
            res.aborted_nonfinite = true;
            break;  // ps still holds the state before the bad batch's step
        }

        EpochRow row;
        row.epoch = epoch;
        row.train_loss = loss_n ? loss_sum / double(loss_n) : 0.0;
        {
            NoGradGuard ng;
            double vsum = 0;
            for (std::int64_t i : split.val) {
                auto w = window_tensor(ds, i, 0, win);
                vsum += double(teacher_forced_loss(cfg, ps, w, tc.loss).item());
            }
            row.val_loss = vsum / double(split.val.size());
        }
        bool eval_now = (epoch % std::max<std::int64_t>(1, tc.eval_every) == 0) ||
                        epoch == tc.epochs - 1;
        if (eval_now) {
            carried_div = validation_divergence(cfg, ps, ds, split.val, tc.context,
                                               tc.val_horizon);
            if (carried_div < res.best_divergence) {
                res.best_divergence = carried_div;
                res.best_epoch = epoch;
                res.best_params = ps.cast<float>(true);
            }
        }
        row.val_divergence = carried_div;
        row.wall_seconds = seconds_since(t0);
        res.log.push_back(row);
        if (hooks && hooks->on_epoch) hooks->on_epoch(row);
        if (tc.patience > 0 && res.best_epoch >= 0 && epoch - res.best_epoch >= tc.patience)
            break;
    }
    return res;
}

void append_metrics_row(const std::string& path, const EpochRow& row, std::int64_t horizon) {
    bool fresh = !std::ifstream(path).good();
    std::ofstream os(path, std::ios::app);
    if (!os) throw DataError("append_metrics_row: cannot open " + path);
    if (fresh)
        os << "epoch,train_loss,val_loss,val_divergence@" << horizon << ",wall_seconds\n";
    os << row.epoch << "," << row.train_loss << "," << row.val_loss << "," << row.val_divergence
       << "," << row.wall_seconds << "\n";
    if (!os) throw DataError("append_metrics_row: short write to " + path);
}

}  // namespace psvit::train
