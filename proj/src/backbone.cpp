#include "p3d/backbone.hpp"

#include <cmath>

namespace p3d {

void ModelConfig::validate() const {
    if (embed_dims.empty()) throw std::runtime_error("ModelConfig: embed_dims must not be empty");
    for (int64_t d : embed_dims) {
        if (d <= 0) throw std::runtime_error("ModelConfig: embed_dims must be positive");
        if (d % groups != 0)
            throw std::runtime_error("ModelConfig: embed dim " + std::to_string(d) +
                                     " not divisible by groups " + std::to_string(groups));
    }
    if (patch < 1) throw std::runtime_error("ModelConfig: patch must be >= 1");
    if (window < 1) throw std::runtime_error("ModelConfig: window must be >= 1");
    if (depth < 0) throw std::runtime_error("ModelConfig: depth must be >= 0");
    if (tdim() % n_heads() != 0)
        throw std::runtime_error("ModelConfig: transformer_dim not divisible by heads");
}

ModelConfig ModelConfig::preset(const std::string& name) {
    ModelConfig c;
    if (name == "S") {
        c.embed_dims = {32, 32, 64};
        c.groups = 16;
    } else if (name == "B") {
        c.embed_dims = {64, 128, 128};
        c.groups = 32;
    } else if (name == "L") {
        c.embed_dims = {128, 256, 256};
        c.groups = 32;
    } else if (name == "tiny") {
        c.embed_dims = {4, 4, 8};
        c.groups = 2;
        c.patch = 2;
        c.window = 2;
        c.depth = 2;
        c.transformer_dim = 16;
        c.heads = 2;
        c.cond_dim = 16;
        c.freq_dim = 16;
        c.bias_hidden = 16;
    } else {
        throw std::runtime_error("unknown model preset: " + name);
    }
    return c;
}

// ---- EncoderBlock -------------------------------------------------------------

EncoderBlock EncoderBlock::create(ParamStore& ps, const std::string& prefix, int64_t channels,
                                  int groups, int64_t cond_dim, Rng& rng, DType dtype) {
    EncoderBlock b;
    b.norm1 = GroupNormLayer::create(ps, prefix + ".norm1", channels, groups, dtype);
    b.conv1 = Conv3dLayer::create(ps, prefix + ".conv1", channels, channels, 3, 1, rng, dtype);
    b.norm2 = GroupNormLayer::create(ps, prefix + ".norm2", channels, groups, dtype);
    b.mod = LinearLayer::create(ps, prefix + ".mod", cond_dim, 2 * channels, rng, dtype, /*zero_init=*/true);
    b.conv2 = Conv3dLayer::create(ps, prefix + ".conv2", channels, channels, 3, 1, rng, dtype,
                                  /*zero_init=*/true);
    return b;
}

Var EncoderBlock::forward(const Var& x, const Var& e, PadMode pad) const {
    const int64_t C = x->shape()[1];
    Var h = norm1.forward(x);
    h = gelu(h);
    h = conv1.forward(h, pad);
    h = norm2.forward(h);
    Var m = mod.forward(silu(e));  // [B, 2C]
    Var sc = slice(m, 1, 0, C);
    Var sh = slice(m, 1, C, C);
    h = modulate_channels(h, sc, sh);
    h = gelu(h);
    h = conv2.forward(h, pad);
    return add(x, h);
}

// ---- WindowedMsa ----------------------------------------------------------------

WindowedMsa WindowedMsa::create(ParamStore& ps, const std::string& prefix, int64_t dim, int heads,
                                int window, int64_t bias_hidden, Rng& rng, DType dtype) {
    WindowedMsa m;
    m.window = window;
    m.heads = heads;
    m.dim = dim;
    m.qkv = LinearLayer::create(ps, prefix + ".qkv", dim, 3 * dim, rng, dtype);
    m.proj = LinearLayer::create(ps, prefix + ".proj", dim, dim, rng, dtype);
    m.bias_mlp = Mlp::create(ps, prefix + ".bias_mlp", 3, bias_hidden, heads, rng, dtype, Mlp::Act::Relu);

    const int w = window;
    const int span = 2 * w - 1;
    const double denom = std::log2(static_cast<double>(std::max(w, 2)));
    Tensor coords({static_cast<int64_t>(span) * span * span, 3}, dtype);
    auto log_spaced = [denom](int d) {
        const double s = d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0;
        return s * std::log2(1.0 + std::abs(static_cast<double>(d))) / denom;
    };
    int64_t row = 0;
    for (int dx = -(w - 1); dx <= w - 1; ++dx)
        for (int dy = -(w - 1); dy <= w - 1; ++dy)
            for (int dz = -(w - 1); dz <= w - 1; ++dz) {
                coords.set(row * 3 + 0, log_spaced(dx));
                coords.set(row * 3 + 1, log_spaced(dy));
                coords.set(row * 3 + 2, log_spaced(dz));
                ++row;
            }
    m.rel_coords = make_leaf(std::move(coords), false);

    const int64_t w3 = static_cast<int64_t>(w) * w * w;
    m.bias_index.resize(w3 * w3);
    auto local = [w](int64_t t) {
        return std::array<int, 3>{static_cast<int>(t / (w * w)), static_cast<int>((t / w) % w),
                                  static_cast<int>(t % w)};
    };
    for (int64_t a = 0; a < w3; ++a)
        for (int64_t b = 0; b < w3; ++b) {
            const auto pa = local(a), pb = local(b);
            const int dx = pa[0] - pb[0] + w - 1;
            const int dy = pa[1] - pb[1] + w - 1;
            const int dz = pa[2] - pb[2] + w - 1;
            m.bias_index[a * w3 + b] = (static_cast<int64_t>(dx) * span + dy) * span + dz;
        }
    return m;
}

Var WindowedMsa::forward(const Var& tokens, std::array<int64_t, 3> grid) const {
    const Shape& s = tokens->shape();
    if (s.size() != 3) throw std::runtime_error("windowed_msa: tokens must be [B,T,D]");
    const int64_t B = s[0], T = s[1], D = s[2];
    const auto [tx, ty, tz] = grid;
    if (tx * ty * tz != T) throw std::runtime_error("windowed_msa: grid does not match token count");
    const int w = window;
    if (tx % w || ty % w || tz % w)
        throw std::runtime_error("windowed_msa: token grid " + std::to_string(tx) + "x" +
                                 std::to_string(ty) + "x" + std::to_string(tz) +
                                 " not divisible by window " + std::to_string(w));
    const int64_t gx = tx / w, gy = ty / w, gz = tz / w;
    const int64_t nw = gx * gy * gz;
    const int64_t w3 = static_cast<int64_t>(w) * w * w;

    // Partition into non-overlapping window cubes.
    Var h = reshape(tokens, {B, gx, w, gy, w, gz, w, D});
    h = permute(h, {0, 1, 3, 5, 2, 4, 6, 7});  // [B,gx,gy,gz,wx,wy,wz,D]
    h = reshape(h, {B * nw, w3, D});

    Var qkv_out = qkv.forward(h);  // [N, w3, 3D]
    const int64_t H = heads, dh = D / H;
    auto split_head = [&](int64_t off) {
        Var p = slice(qkv_out, 2, off, D);
        p = reshape(p, {B * nw, w3, H, dh});
        return permute(p, {0, 2, 1, 3});  // [N,H,w3,dh]
    };
    Var q = split_head(0), k = split_head(D), v = split_head(2 * D);

    Var table = bias_mlp.forward(rel_coords);            // [(2w-1)^3, H]
    Var bias = index_select0(table, bias_index);         // [w3*w3, H]
    bias = reshape(bias, {w3, w3, static_cast<int64_t>(H)});
    bias = permute(bias, {2, 0, 1});                     // [H, w3, w3]

    Var attn = attention(q, k, v, bias);                 // [N,H,w3,dh]
    attn = permute(attn, {0, 2, 1, 3});
    attn = reshape(attn, {B * nw, w3, D});
    attn = proj.forward(attn);

    // Undo the window partition.
    attn = reshape(attn, {B, gx, gy, gz, w, w, w, D});
    attn = permute(attn, {0, 1, 4, 2, 5, 3, 6, 7});
    return reshape(attn, {B, T, D});
}

// ---- TransformerBlock -------------------------------------------------------------

TransformerBlock TransformerBlock::create(ParamStore& ps, const std::string& prefix, int64_t dim,
                                          int heads, int window, int64_t bias_hidden, int64_t cond_dim,
                                          Rng& rng, DType dtype) {
    TransformerBlock b;
    b.dim = dim;
    b.msa = WindowedMsa::create(ps, prefix + ".msa", dim, heads, window, bias_hidden, rng, dtype);
    b.mlp = Mlp::create(ps, prefix + ".mlp", dim, 4 * dim, dim, rng, dtype, Mlp::Act::Gelu);
    b.ada = LinearLayer::create(ps, prefix + ".ada", cond_dim, 6 * dim, rng, dtype, /*zero_init=*/true);
    return b;
}

Var TransformerBlock::forward(const Var& tokens, const Var& e, std::array<int64_t, 3> grid) const {
    Var m = ada.forward(silu(e));  // [B, 6D]
    const int64_t D = dim;
    Var s1 = slice(m, 1, 0, D), b1 = slice(m, 1, D, D), g1 = slice(m, 1, 2 * D, D);
    Var s2 = slice(m, 1, 3 * D, D), b2 = slice(m, 1, 4 * D, D), g2 = slice(m, 1, 5 * D, D);

    Var h = layer_norm_lastdim(tokens);
    h = modulate_seq(h, s1, b1);
    h = msa.forward(h, grid);
    Var x = add(tokens, gate_seq(h, g1));

    Var h2 = layer_norm_lastdim(x);
    h2 = modulate_seq(h2, s2, b2);
    h2 = mlp.forward(h2);
    return add(x, gate_seq(h2, g2));
}

// ---- ConvEncoder ---------------------------------------------------------------------

ConvEncoder ConvEncoder::create(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
                                Rng& rng) {
    ConvEncoder e;
    const auto& dims = cfg.embed_dims;
    e.stem = Conv3dLayer::create(ps, prefix + ".stem", cfg.in_channels, dims[0], 3, 1, rng, cfg.dtype);
    for (int lvl = 0; lvl < cfg.conv_downs(); ++lvl) {
        std::array<EncoderBlock, 2> blks{
            EncoderBlock::create(ps, prefix + ".lvl" + std::to_string(lvl) + ".block0", dims[lvl],
                                 cfg.groups, cfg.cond_dim, rng, cfg.dtype),
            EncoderBlock::create(ps, prefix + ".lvl" + std::to_string(lvl) + ".block1", dims[lvl],
                                 cfg.groups, cfg.cond_dim, rng, cfg.dtype)};
        e.blocks.push_back(std::move(blks));
        e.downs.push_back(Conv3dLayer::create(ps, prefix + ".down" + std::to_string(lvl), dims[lvl],
                                              dims[lvl + 1], 3, 2, rng, cfg.dtype));
    }
    const int64_t p3 = static_cast<int64_t>(cfg.patch) * cfg.patch * cfg.patch;
    e.patchify = LinearLayer::create(ps, prefix + ".patchify", dims.back() * p3, cfg.tdim(), rng, cfg.dtype);
    return e;
}

BackboneState ConvEncoder::forward(const Var& u, const Var& e, const ModelConfig& cfg) const {
    const Shape& s = u->shape();
    if (s.size() != 5) throw std::runtime_error("encoder: input must be [B,C,X,Y,Z]");
    if (s[1] != cfg.in_channels)
        throw std::runtime_error("encoder: expected " + std::to_string(cfg.in_channels) +
                                 " channels, got " + std::to_string(s[1]));
    const int64_t ts = cfg.token_spacing();
    for (int a = 2; a < 5; ++a)
        if (s[a] % ts != 0)
            throw std::runtime_error("encoder: spatial extent " + std::to_string(s[a]) +
                                     " not divisible by token spacing " + std::to_string(ts));

    BackboneState st;
    Var h = stem.forward(u, cfg.pad_mode);
    for (size_t lvl = 0; lvl < blocks.size(); ++lvl) {
        h = blocks[lvl][0].forward(h, e, cfg.pad_mode);
        h = blocks[lvl][1].forward(h, e, cfg.pad_mode);
        st.residuals.push_back(h);
        h = downs[lvl].forward(h, cfg.pad_mode);
    }

    // Patchify: fold patch^3 blocks of conv features into tokens.
    const Shape& hs = h->shape();
    const int64_t B = hs[0], C = hs[1];
    const int64_t p = cfg.patch;
    const int64_t tx = hs[2] / p, ty = hs[3] / p, tz = hs[4] / p;
    Var t = reshape(h, {B, C, tx, p, ty, p, tz, p});
    t = permute(t, {0, 2, 4, 6, 1, 3, 5, 7});  // [B,tx,ty,tz,C,p,p,p]
    t = reshape(t, {B, tx * ty * tz, C * p * p * p});
    st.tokens = patchify.forward(t);
    st.grid = {tx, ty, tz};
    return st;
}

// ---- ConvDecoder ---------------------------------------------------------------------

ConvDecoder ConvDecoder::create(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
                                Rng& rng) {
    ConvDecoder d;
    const auto& dims = cfg.embed_dims;
    const int64_t p3 = static_cast<int64_t>(cfg.patch) * cfg.patch * cfg.patch;
    d.unpatchify = LinearLayer::create(ps, prefix + ".unpatchify", cfg.tdim(), dims.back() * p3, rng,
                                       cfg.dtype);
    for (int lvl = cfg.conv_downs() - 1; lvl >= 0; --lvl) {
        d.ups.push_back(Conv3dLayer::create(ps, prefix + ".up" + std::to_string(lvl), dims[lvl + 1],
                                            8 * dims[lvl], 3, 1, rng, cfg.dtype));
        std::array<EncoderBlock, 2> blks{
            EncoderBlock::create(ps, prefix + ".lvl" + std::to_string(lvl) + ".block0", dims[lvl],
                                 cfg.groups, cfg.cond_dim, rng, cfg.dtype),
            EncoderBlock::create(ps, prefix + ".lvl" + std::to_string(lvl) + ".block1", dims[lvl],
                                 cfg.groups, cfg.cond_dim, rng, cfg.dtype)};
        d.blocks.push_back(std::move(blks));
    }
    d.head = Conv3dLayer::create(ps, prefix + ".head", dims[0], cfg.out_channels, 3, 1, rng, cfg.dtype);
    return d;
}

Var ConvDecoder::forward(const Var& tokens, const BackboneState& state, const Var& e,
                         const ModelConfig& cfg) const {
    const auto [tx, ty, tz] = state.grid;
    const int64_t B = tokens->shape()[0];
    const int64_t p = cfg.patch;
    const int64_t C = cfg.embed_dims.back();

    Var h = unpatchify.forward(tokens);  // [B,T,C*p^3]
    h = reshape(h, {B, tx, ty, tz, C, p, p, p});
    h = permute(h, {0, 4, 1, 5, 2, 6, 3, 7});  // [B,C,tx,p,ty,p,tz,p]
    h = reshape(h, {B, C, tx * p, ty * p, tz * p});

    for (size_t i = 0; i < ups.size(); ++i) {
        const size_t lvl = state.residuals.size() - 1 - i;  // encoder level being mirrored
        h = ups[i].forward(h, cfg.pad_mode);
        h = pixel_shuffle_3d(h, 2);
        if (state.residuals[lvl]->shape() != h->shape())
            throw std::runtime_error("decoder: residual shape " +
                                     shape_str(state.residuals[lvl]->shape()) +
                                     " does not match upsampled features " + shape_str(h->shape()));
        h = add(h, state.residuals[lvl]);
        h = blocks[i][0].forward(h, e, cfg.pad_mode);
        h = blocks[i][1].forward(h, e, cfg.pad_mode);
    }
    return head.forward(h, cfg.pad_mode);
}

// ---- P3DModel ------------------------------------------------------------------------

P3DModel::P3DModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    cond_ = CondEmbedder::create(params_, "cond", cfg_.cond_dim, cfg_.freq_dim, cfg_.n_params,
                                 cfg_.n_labels, rng, cfg_.dtype);
    encoder_ = ConvEncoder::create(params_, "enc", cfg_, rng);
    for (int i = 0; i < cfg_.depth; ++i)
        tblocks_.push_back(TransformerBlock::create(params_, "tblock" + std::to_string(i), cfg_.tdim(),
                                                    cfg_.n_heads(), cfg_.window, cfg_.bias_hidden,
                                                    cfg_.cond_dim, rng, cfg_.dtype));
    decoder_ = ConvDecoder::create(params_, "dec", cfg_, rng);
}

Var P3DModel::embed_conditioning(const std::vector<Conditioning>& batch) const {
    return cond_.forward(batch);
}

BackboneState P3DModel::encode(const Var& u, const Var& e) const {
    return encoder_.forward(u, e, cfg_);
}

Var P3DModel::transform(const Var& tokens, const Var& e, std::array<int64_t, 3> grid) const {
    Var t = tokens;
    for (const auto& blk : tblocks_) t = blk.forward(t, e, grid);
    return t;
}

Var P3DModel::decode(const Var& tokens, const BackboneState& state, const Var& e) const {
    return decoder_.forward(tokens, state, e, cfg_);
}

Var P3DModel::forward_with_embedding(const Var& u, const Var& e) const {
    BackboneState st = encode(u, e);
    Var t = transform(st.tokens, e, st.grid);
    return decode(t, st, e);
}

Var P3DModel::forward(const Var& u, const std::vector<Conditioning>& c) const {
    if (static_cast<int64_t>(c.size()) != u->shape()[0])
        throw std::runtime_error("forward: conditioning batch size mismatch");
    return forward_with_embedding(u, embed_conditioning(c));
}

}  // namespace p3d
