#pragma once

// Video transformer over pixel patches. Pipeline per forward pass:
//   patchify -> linear embed (+ positions, + register tokens)
//   -> local windowed space/time layers with 2x2 patch merges (encoder)
//   -> a stack of full-width space/time layers (the global block)
//   -> mirrored unmerges with skip connections (decoder)
//   -> layernorm + linear head + sigmoid -> frames
// Every layer is: spatial attention, FFN, temporal attention, FFN, each as a
// pre-layernorm residual sub-block. Temporal attention is causal throughout,
// so output t only ever sees frames 0..t; that output is trained to predict
// frame t+1.
//
// Width schedule: local level l runs at dim >> (local_blocks - l); the global
// block runs at dim. Register tokens ride along at every level (they skip the
// spatial 2x2 merge and get a linear width adapter instead), attend globally
// in space, and only to themselves in time.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "psvit/param_store.hpp"
#include "psvit/tensor.hpp"

namespace psvit::model {

enum class AttnScheme { LS_LT, GS_LT, GS_T };
enum class PosEnc { LPE, APE, ROPE };

std::string scheme_name(AttnScheme s);
std::string pos_name(PosEnc p);
AttnScheme scheme_from(const std::string& s);
PosEnc pos_from(const std::string& s);

struct ModelConfig {
    std::int64_t image = 64;  // square frames
    std::int64_t channels = 3;
    std::int64_t patch = 8;
    std::int64_t dim = 512;    // width of the global block
    std::int64_t heads = 12;   // heads in the global block
    std::int64_t head_dim = 64;
    std::int64_t ffn = 2048;   // post-temporal FFN hidden at full width
    std::int64_t layers = 8;   // global layers
    std::int64_t local_blocks = 2;
    std::int64_t registers = 4;
    std::int64_t t_max = 100;
    AttnScheme scheme = AttnScheme::GS_T;
    PosEnc pos = PosEnc::LPE;

    std::int64_t grid() const { return image / patch; }
    std::int64_t grid_at(std::int64_t level) const { return grid() >> level; }
    std::int64_t width_at(std::int64_t level) const { return dim >> (local_blocks - level); }
    std::int64_t heads_at(std::int64_t level) const {
        std::int64_t h = width_at(level) / head_dim;
        return h < 1 ? 1 : h;
    }
    std::int64_t ffn_at(std::int64_t level) const { return ffn >> (local_blocks - level); }

    void validate() const;
};

// Full parameter schema, in the order used everywhere (init, checkpoints,
// optimizer). Computable without allocating anything.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& cfg);
std::int64_t param_count(const ModelConfig& cfg);

template <class T>
ParamStoreT<T> init_params(const ModelConfig& cfg, Rng& rng);

template <class T>
struct AttnRecord {
    std::string block;  // enc0, glb3, dec1
    std::string kind;   // spatial | temporal
    std::int64_t grid = 0, heads = 0;
    AttnWeights<T> w;
};

template <class T>
struct ForwardCapture {
    bool want_global_tokens = false;
    bool want_global_spatial_attn = false;
    std::vector<TensorT<T>> global_tokens;  // per global layer: [T*(Sg+N), dim]
    std::vector<AttnRecord<T>> attn;
};

// frames [T,C,H,W] -> predictions [T,C,H,W]; row t is the model's guess at
// frame t+1 given frames 0..t.
template <class T>
TensorT<T> forward(const ModelConfig& cfg, const ParamStoreT<T>& ps, const TensorT<T>& frames,
                   ForwardCapture<T>* cap = nullptr);

// Autoregressive continuation: feeds its own predictions back in. Keeps a
// sliding window of the most recent t_max frames. Gradient-free.
template <class T>
TensorT<T> rollout(const ModelConfig& cfg, const ParamStoreT<T>& ps, const TensorT<T>& context,
                   std::int64_t horizon);

// Patch <-> token reshapes, exposed for tests.
template <class T>
TensorT<T> patchify(const TensorT<T>& frames, std::int64_t patch);
template <class T>
TensorT<T> unpatchify(const TensorT<T>& tokens, std::int64_t channels, std::int64_t image,
                      std::int64_t patch);

// Per (global layer, head): median over patch queries of the weight-median
// attention distance on the patch grid, normalized by each query's farthest
// patch, averaged over time. 0 = attends to itself, 1 = attends to the far
// corner.
std::vector<std::vector<double>> attention_stats(const std::vector<AttnRecord<float>>& records);

// shared mask/table builders (also used by tests)
std::shared_ptr<const std::vector<std::uint8_t>> local_spatial_mask(std::int64_t g,
                                                                    std::int64_t n_reg);
std::shared_ptr<const std::vector<std::uint8_t>> causal_mask(std::int64_t t);
struct NeighborTables {
    std::vector<std::int64_t> idx;  // (S+N)*9 position indices, -1 = pad
    std::shared_ptr<const std::vector<std::uint8_t>> mask;  // (S+N) groups of T x 9T
};
NeighborTables neighbor_time_tables(std::int64_t g, std::int64_t n_reg, std::int64_t t);

}  // namespace psvit::model

#include "psvit/model_impl.hpp"
