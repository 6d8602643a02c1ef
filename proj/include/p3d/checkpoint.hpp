#pragma once

#include <optional>

#include "p3d/context.hpp"

namespace p3d {

class AdamW;
class Ema;

/// Checkpoint directory layout:
///   manifest.json              config, step, seed, rng state, flags
///   params/<name>.bin          one tensor blob per backbone parameter
///   context/<name>.bin         context model parameters (separate namespace)
///   ema/<name>.bin             EMA shadow weights
///   opt/<name>.{m,v}.bin       optimizer moments
struct CheckpointExtras {
    const ContextModel* context = nullptr;
    const AdamW* optimizer = nullptr;
    const AdamW* context_optimizer = nullptr;
    const Ema* ema = nullptr;
    const Ema* context_ema = nullptr;
    int64_t step = 0;
    uint64_t seed = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& dir, const P3DModel& model, const CheckpointExtras& extras = {});

struct LoadedCheckpoint {
    ModelConfig config;
    std::optional<ContextConfig> context_config;
    int64_t step = 0;
    uint64_t seed = 0;
    std::string rng_state;
    bool has_ema = false;
    bool has_optimizer = false;
};

/// Reads the manifest only (model construction happens at the call site).
LoadedCheckpoint read_checkpoint_manifest(const std::string& dir);

/// Loads saved tensors into an existing store; every store entry must exist.
void load_params(const std::string& dir, const std::string& subdir, ParamStore& params);
void load_optimizer(const std::string& dir, const std::string& subdir, AdamW& opt,
                    const ParamStore& params);
void load_ema(const std::string& dir, const std::string& subdir, Ema& ema, const ParamStore& params);

}  // namespace p3d
