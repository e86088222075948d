#pragma once

// Checkpoint file: a short textual header (format tag + full model config +
// parameter totals), a "payload" line, then every parameter tensor as raw
// little-endian f32 in canonical schema order. Loading rebuilds the schema
// from the embedded config and refuses mismatched or truncated files.

#include <string>

#include "psvit/model.hpp"
#include "psvit/param_store.hpp"

namespace psvit {

struct Checkpoint {
    model::ModelConfig config;
    ParamStoreT<float> params;
};

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const ParamStoreT<float>& ps);
Checkpoint load_checkpoint(const std::string& path);
// as above, but additionally demands the embedded config equal `want`
Checkpoint load_checkpoint(const std::string& path, const model::ModelConfig& want);

}  // namespace psvit
