#pragma once

#include <memory>

#include "p3d/backbone.hpp"

namespace p3d {

/// Partition of a domain into equal axis-aligned regions. Region size matches
/// the pretraining crop size; regions tile the domain exactly.
struct RegionLayout {
    std::array<int64_t, 3> domain{};   // voxels per axis
    std::array<int64_t, 3> region{};   // voxels per region per axis
    int64_t token_spacing = 0;

    void validate() const;
    std::array<int64_t, 3> region_grid() const {
        return {domain[0] / region[0], domain[1] / region[1], domain[2] / region[2]};
    }
    int64_t num_regions() const {
        auto g = region_grid();
        return g[0] * g[1] * g[2];
    }
    std::array<int64_t, 3> tokens_per_region() const {
        return {region[0] / token_spacing, region[1] / token_spacing, region[2] / token_spacing};
    }
    int64_t tokens_per_region_count() const {
        auto t = tokens_per_region();
        return t[0] * t[1] * t[2];
    }
    /// Region coordinates in the region grid; index is row-major [gx,gy,gz].
    std::array<int64_t, 3> region_coord(int64_t r) const {
        auto g = region_grid();
        return {r / (g[1] * g[2]), (r / g[2]) % g[1], r % g[2]};
    }
    std::array<int64_t, 3> region_origin(int64_t r) const {
        auto c = region_coord(r);
        return {c[0] * region[0], c[1] * region[1], c[2] * region[2]};
    }
};

struct ContextConfig {
    int layers = 6;
    int64_t latent_dim = 0;  // 0: matches the backbone transformer dim
    int heads = 4;
    std::string kernel = "dense";  // sequence attention kernel id
    int64_t mlp_hidden = 0;        // 0: 4 * latent_dim
};

/// Pluggable attention kernel for the sequence model. The dense kernel is the
/// default; efficient alternatives can be dropped in behind this interface.
class SequenceAttentionKernel {
public:
    virtual ~SequenceAttentionKernel() = default;
    virtual Var apply(const Var& q, const Var& k, const Var& v) const = 0;
    virtual std::string name() const = 0;
};

std::unique_ptr<SequenceAttentionKernel> make_attention_kernel(const std::string& id);

/// What the context model hands back to the per-region decoders.
struct ContextOutput {
    Var latent_skip;      // [B, R*T_r, backbone_dim]; exactly zero at init
    Var region_offsets;   // [B, R, cond_dim]; exactly zero at init
};

/// Sequence model over region tokens + latent tokens with frequency positional
/// embeddings, plus the region-token -> conditioning-offset path.
class ContextModel {
public:
    ContextModel(ContextConfig cfg, int64_t backbone_dim, int64_t cond_dim, uint64_t seed,
                 DType dtype);

    const ContextConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    int64_t latent_dim() const { return latent_dim_; }

    /// Learned base embedding + positional embedding per region.
    Var make_region_tokens(const RegionLayout& layout) const;  // [R, latent_dim]
    /// Linear embedding of bottleneck tokens + positional embedding of each
    /// token's global grid coordinate. Tokens ordered region-major.
    Var embed_latents(const Var& bottleneck, const RegionLayout& layout) const;  // [B,T,latent]
    /// Raw n-layer sequence transform (regions first, then latents).
    Var process_sequence(const Var& seq, const Var& e) const;

    ContextOutput forward(const Var& bottleneck, const RegionLayout& layout, const Var& e) const;

private:
    Var positional_embedding(const std::vector<std::array<double, 3>>& coords) const;

    struct SeqBlock {
        LinearLayer qkv, proj, ada;
        Mlp mlp;
        int64_t dim = 0;
        int heads = 1;
    };
    Var seq_block_forward(const SeqBlock& blk, const Var& x, const Var& e) const;

    ContextConfig cfg_;
    int64_t backbone_dim_ = 0, cond_dim_ = 0, latent_dim_ = 0, pos_dim_ = 0;
    DType dtype_ = DType::F32;
    ParamStore params_;
    LinearLayer embed_, pos_proj_, out_proj_;
    Var region_base_;
    std::vector<SeqBlock> blocks_;
    Mlp region_mlp_;
    std::unique_ptr<SequenceAttentionKernel> kernel_;
};

/// Additive skip of processed latents into the decoder input tokens.
Var inject_context(const Var& decoder_tokens, const Var& latent_skip);

/// Per-crop assembled forward: split the domain into regions, encode and
/// transform each crop independently, optionally run the context model, then
/// decode each crop (with region-conditioned modulation) and reassemble.
struct AssembledForwardOptions {
    bool use_context = true;
    /// Per-region gradient switches; empty means all enabled. Disabled crops
    /// contribute no gradient through their encoder pass.
    std::vector<bool> encoder_grad;
    /// Precomputed per-region encoder outputs (tokens after the backbone
    /// transformer plus residuals); indexed by region. Empty means compute.
    std::vector<BackboneState> precomputed;
};

Var assembled_forward(const P3DModel& model, const ContextModel* ctx, const Var& u_full,
                      const RegionLayout& layout, const Var& e, const AssembledForwardOptions& opts = {});

/// Run encode+transform for one region crop (the cacheable part of setup (e)).
BackboneState encode_region(const P3DModel& model, const Var& u_full, const RegionLayout& layout,
                            int64_t region, const Var& e);

}  // namespace p3d
