#pragma once

#include <functional>

#include "p3d/context.hpp"

namespace p3d {

// ---- flow matching -------------------------------------------------------------

/// One point on the probability path from noise to data.
struct FlowState {
    Tensor x_t;
    double t = 0.0;
    double sigma_min = 1e-4;
    Tensor eps;
};

/// x_t = t * u_out + (1 - (1 - sigma_min) * t) * eps
Var fm_sample_xt(const Var& u_out, const Var& eps, double t, double sigma_min);
FlowState fm_sample_state(const Tensor& u_out, const Tensor& eps, double t, double sigma_min);

/// Regression target u_out - (1 - sigma_min) * eps.
Var fm_target(const Var& u_out, const Var& eps, double sigma_min);
Var fm_loss(const Var& model_out, const Var& u_out, const Var& eps, double sigma_min);

/// Integrates dx/dt = v(x, t) from t=0 (x ~ N(0,I)) to t=1 with explicit
/// Euler steps of size 1/steps. Runs without gradient recording.
Tensor euler_sample(const std::function<Tensor(const Tensor&, double)>& velocity, const Shape& shape,
                    int steps, Rng& rng, DType dtype = DType::F32);

// ---- data sampling -------------------------------------------------------------

struct CropPair {
    Tensor in, out;
    std::array<int64_t, 3> offset{};
};

/// Same random offset applied to both states; offsets uniform over the full
/// valid range (inclusive).
CropPair crop_sample(const Tensor& s_t, const Tensor& s_next, int64_t size, Rng& rng);

/// One training example as produced by a dataset sampler. `id` identifies the
/// underlying (simulation, timestep) pair when the sampler can name it; it
/// keys the setup-(e) latent cache.
struct SamplePair {
    Tensor in, out;       // [C,X,Y,Z]
    Conditioning cond;
    int64_t id = -1;
};

class PairSampler {
public:
    virtual ~PairSampler() = default;
    virtual SamplePair sample(Rng& rng) = 0;
};

// ---- optimizer / EMA -------------------------------------------------------------

struct AdamWConfig {
    double lr = 2e-4;
    double weight_decay = 1e-15;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay. Parameters whose requires_grad flag is
/// off at step time are skipped entirely (their moments also stay put).
class AdamW {
public:
    AdamW(const ParamStore& params, AdamWConfig cfg);
    void step(ParamStore& params);
    int64_t step_count() const { return step_count_; }
    const AdamWConfig& config() const { return cfg_; }

    struct Slot {
        Tensor m, v;
    };
    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }
    void set_step_count(int64_t n) { step_count_ = n; }

private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    int64_t step_count_ = 0;
};

/// ema' = decay * ema + (1 - decay) * weights
class Ema {
public:
    Ema(const ParamStore& params, double decay);
    void update(const ParamStore& params);
    double decay() const { return decay_; }
    std::vector<Tensor>& shadow() { return shadow_; }
    const std::vector<Tensor>& shadow() const { return shadow_; }
    /// Copies the shadow weights into the parameters (for evaluation).
    void copy_to(ParamStore& params) const;

private:
    double decay_;
    std::vector<Tensor> shadow_;
};

// ---- gradient scoping (Fig. 4 setups) ----------------------------------------------

struct TrainSetup {
    enum class Mode { FullDomain, Crops, ContextFull, ContextPartial, ContextFrozenEncoder };
    Mode mode = Mode::Crops;
    enum class Objective { Supervised, FlowMatching } objective = Objective::Supervised;
    int64_t crop = 0;             // crop edge for Crops mode / region size for context modes
    int64_t batch = 4;
    double lr = 2e-4;
    double weight_decay = 1e-15;
    double ema_decay = 0.999;
    double sigma_min = 1e-4;
    double p_enc = 1.0, p_dec = 1.0;  // ContextPartial enable probabilities
    bool precompute_latents = false;  // ContextFrozenEncoder only, supervised only
    int64_t steps = 1000;
    int64_t log_every = 10;
    int64_t ckpt_every = 0;       // 0: only final
};

TrainSetup::Mode train_mode_from_name(const std::string& s);

/// Per-step gradient mask: which crops backpropagate through their encoder and
/// which decoder blocks receive parameter gradients.
struct GradScope {
    std::vector<bool> encoder_crops;   // per region; empty = all enabled
    std::vector<bool> decoder_blocks;  // per decoder block (level-major); empty = all
    bool encoder_params = true;
};

GradScope draw_grad_scope(const TrainSetup& setup, int64_t n_regions, int64_t n_decoder_blocks, Rng& rng);

/// Temporarily clears requires_grad on parameters matching any prefix.
class ParamFreeze {
public:
    ParamFreeze(ParamStore& params, const std::vector<std::string>& prefixes);
    ~ParamFreeze();
    ParamFreeze(const ParamFreeze&) = delete;
    ParamFreeze& operator=(const ParamFreeze&) = delete;

private:
    std::vector<Var> frozen_;
};

/// Decoder block parameter name prefixes in a fixed (level-major) order.
std::vector<std::string> decoder_block_prefixes(const ModelConfig& cfg);

// ---- training loop -------------------------------------------------------------------

struct TrainResult {
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::vector<double> losses;
    int64_t steps_run = 0;
};

struct TrainLoopConfig {
    TrainSetup setup;
    uint64_t seed = 0;
    std::string out_dir;          // checkpoints + loss.csv; empty = no files
    std::string latent_cache_dir; // setup (e) precompute cache; empty = out_dir/latent_cache
    RegionLayout layout;          // context modes only
    int64_t resume_step = 0;
    std::string resume_rng_state;
};

TrainResult train_loop(P3DModel& model, ContextModel* ctx, PairSampler& data, const TrainLoopConfig& cfg);

/// Gradient norm over all parameters that currently hold a gradient.
double global_grad_norm(const ParamStore& params);

}  // namespace p3d
