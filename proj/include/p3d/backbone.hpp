#pragma once

#include <array>

#include "p3d/conditioning.hpp"

namespace p3d {

/// Architecture hyperparameters. token_spacing (voxels per bottleneck token
/// per axis) = 2^(#downsamples) * patch; the paper configs use 4 * 8 = 32.
struct ModelConfig {
    int64_t in_channels = 3;
    int64_t out_channels = 3;
    std::vector<int64_t> embed_dims = {32, 32, 64};  // conv ladder, one downsample between entries
    int groups = 16;
    int64_t transformer_dim = 0;  // 0: defaults to 2 * embed_dims.back()
    int heads = 0;                // 0: defaults to transformer_dim / 32, at least 1
    int window = 4;               // tokens per axis inside one attention window
    int depth = 4;                // transformer blocks at the bottleneck
    int patch = 8;                // conv-feature voxels per token axis
    int64_t cond_dim = 64;
    int64_t freq_dim = 64;
    int64_t n_params = 0;
    int64_t n_labels = 0;
    int64_t bias_hidden = 64;     // hidden width of the relative-position bias MLP
    PadMode pad_mode = PadMode::Zero;
    DType dtype = DType::F32;

    int conv_downs() const { return static_cast<int>(embed_dims.size()) - 1; }
    int64_t token_spacing() const { return (int64_t(1) << conv_downs()) * patch; }
    int64_t tdim() const { return transformer_dim > 0 ? transformer_dim : 2 * embed_dims.back(); }
    int n_heads() const { return heads > 0 ? heads : std::max<int>(1, static_cast<int>(tdim() / 32)); }
    void validate() const;

    /// Paper ladder presets "S", "B", "L" plus a desk-scale "tiny".
    static ModelConfig preset(const std::string& name);
};

/// Residual conv block with conditioning-driven scale/shift modulation,
/// used by both the encoder and the decoder.
struct EncoderBlock {
    GroupNormLayer norm1, norm2;
    Conv3dLayer conv1, conv2;  // conv2 zero-initialized: block is identity at init
    LinearLayer mod;           // cond -> [scale, shift], zero-initialized
    static EncoderBlock create(ParamStore& ps, const std::string& prefix, int64_t channels, int groups,
                               int64_t cond_dim, Rng& rng, DType dtype);
    Var forward(const Var& x, const Var& e, PadMode pad) const;
};

/// Non-overlapping-window multi-head self-attention with a continuous
/// log-spaced relative position bias. No window shifting.
struct WindowedMsa {
    LinearLayer qkv, proj;
    Mlp bias_mlp;             // 3 -> hidden -> heads over log-spaced offsets
    Var rel_coords;           // [(2w-1)^3, 3] constant
    std::vector<int64_t> bias_index;  // [w^3 * w^3] offset table lookups
    int window = 1, heads = 1;
    int64_t dim = 0;
    static WindowedMsa create(ParamStore& ps, const std::string& prefix, int64_t dim, int heads,
                              int window, int64_t bias_hidden, Rng& rng, DType dtype);
    Var forward(const Var& tokens, std::array<int64_t, 3> grid) const;
};

/// DiT-style block: adaLN-Zero modulation around windowed attention and an
/// MLP. Exact identity at initialization.
struct TransformerBlock {
    WindowedMsa msa;
    Mlp mlp;
    LinearLayer ada;  // cond -> 6*dim, zero-initialized
    int64_t dim = 0;
    static TransformerBlock create(ParamStore& ps, const std::string& prefix, int64_t dim, int heads,
                                   int window, int64_t bias_hidden, int64_t cond_dim, Rng& rng, DType dtype);
    Var forward(const Var& tokens, const Var& e, std::array<int64_t, 3> grid) const;
};

/// Bottleneck tokens plus everything the decoder needs to mirror the encoder.
struct BackboneState {
    Var tokens;                       // [B, T, transformer_dim]
    std::array<int64_t, 3> grid{};    // tokens per axis
    std::vector<Var> residuals;       // saved before each downsample, outermost first
};

struct ConvEncoder {
    Conv3dLayer stem;
    std::vector<std::array<EncoderBlock, 2>> blocks;  // per level
    std::vector<Conv3dLayer> downs;
    LinearLayer patchify;
    static ConvEncoder create(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg, Rng& rng);
    BackboneState forward(const Var& u, const Var& e, const ModelConfig& cfg) const;
};

struct ConvDecoder {
    LinearLayer unpatchify;
    std::vector<Conv3dLayer> ups;                      // channel expansion before pixel shuffle
    std::vector<std::array<EncoderBlock, 2>> blocks;
    Conv3dLayer head;
    static ConvDecoder create(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg, Rng& rng);
    /// `e` may be per-sample [B,cond] applied everywhere.
    Var forward(const Var& tokens, const BackboneState& state, const Var& e, const ModelConfig& cfg) const;
};

/// The P3D network: conv encoder, windowed-transformer bottleneck, conv
/// decoder, all modulated by a shared conditioning embedding.
class P3DModel {
public:
    P3DModel(ModelConfig cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    Var embed_conditioning(const std::vector<Conditioning>& batch) const;
    BackboneState encode(const Var& u, const Var& e) const;
    Var transform(const Var& tokens, const Var& e, std::array<int64_t, 3> grid) const;
    Var decode(const Var& tokens, const BackboneState& state, const Var& e) const;

    /// Supervised mode: u -> next state. Diffusion mode: pass the channel
    /// concatenation [u_in, x_t] (or x_t alone) and put t in the conditioning.
    Var forward(const Var& u, const std::vector<Conditioning>& c) const;
    Var forward_with_embedding(const Var& u, const Var& e) const;

private:
    ModelConfig cfg_;
    ParamStore params_;
    CondEmbedder cond_;
    ConvEncoder encoder_;
    std::vector<TransformerBlock> tblocks_;
    ConvDecoder decoder_;
};

}  // namespace p3d
