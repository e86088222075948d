#pragma once

// Teacher-forced training loop: random windows from train sequences, gradient
// accumulation to an effective batch, AdamW updates, per-epoch validation loss
// and rolling object divergence, best-checkpoint tracking and early stopping.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "psvit/dataset.hpp"
#include "psvit/loss.hpp"
#include "psvit/model.hpp"
#include "psvit/optim.hpp"
#include "psvit/param_store.hpp"

namespace psvit::train {

struct TrainConfig {
    std::int64_t batch = 8;   // sequences per optimizer step (grad accumulation)
    std::int64_t epochs = 30;
    float lr = 3e-4f;
    LossKind loss = LossKind::SSIM;
    std::int64_t context = 12;     // window feeds context+1 frames (inputs + shifted targets)
    std::int64_t patience = 0;     // epochs without divergence improvement; 0 disables
    std::uint64_t seed = 0;
    std::int64_t val_horizon = 20;  // rollout steps for validation divergence
    std::int64_t eval_every = 1;    // epochs between divergence evals (carried forward between)
};

struct EpochRow {
    std::int64_t epoch = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_divergence = 0;
    double wall_seconds = 0;
};

struct TrainHooks {
    // fires before each training window is consumed; used to audit that the
    // inputs are ground-truth dataset slices
    std::function<void(std::int64_t seq, std::int64_t start, const TensorT<float>& window)>
        on_window;
    // fires after each epoch row is finalized (CSV streaming lives here)
    std::function<void(const EpochRow&)> on_epoch;
};

struct TrainResult {
    std::vector<EpochRow> log;
    bool aborted_nonfinite = false;  // loss went NaN/Inf; params hold the last good state
    std::int64_t skipped_steps = 0;  // optimizer steps dropped for non-finite grads
    std::int64_t best_epoch = -1;
    double best_divergence = 0;
    ParamStoreT<float> best_params;  // deep copy from the best validation epoch
};

// Trains `ps` in place on the train split of `ds` (deterministic index split),
// validating on the held-out split. Writes no files; stream rows via hooks.
TrainResult train(const model::ModelConfig& cfg, ParamStoreT<float>& ps,
                  const data::Dataset& ds, const TrainConfig& tc,
                  const TrainHooks* hooks = nullptr);

// Median over val sequences of the rolling divergence after `horizon` rollout
// steps from the first `context` frames.
double validation_divergence(const model::ModelConfig& cfg, const ParamStoreT<float>& ps,
                             const data::Dataset& ds, const std::vector<std::int64_t>& seqs,
                             std::int64_t context, std::int64_t horizon);

// Appends one row, creating the file with its header when absent.
void append_metrics_row(const std::string& path, const EpochRow& row, std::int64_t horizon);

}  // namespace psvit::train
