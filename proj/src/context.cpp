#include "p3d/context.hpp"

#include <cmath>

namespace p3d {

void RegionLayout::validate() const {
    if (token_spacing < 1) throw std::runtime_error("RegionLayout: token_spacing must be >= 1");
    for (int a = 0; a < 3; ++a) {
        if (region[a] < 1 || domain[a] < 1) throw std::runtime_error("RegionLayout: empty extents");
        if (domain[a] % region[a])
            throw std::runtime_error("RegionLayout: domain extent " + std::to_string(domain[a]) +
                                     " not divisible by region size " + std::to_string(region[a]));
        if (region[a] % token_spacing)
            throw std::runtime_error("RegionLayout: region size " + std::to_string(region[a]) +
                                     " not divisible by token spacing " + std::to_string(token_spacing));
    }
}

namespace {

class DenseAttentionKernel : public SequenceAttentionKernel {
public:
    Var apply(const Var& q, const Var& k, const Var& v) const override { return attention(q, k, v); }
    std::string name() const override { return "dense"; }
};

}  // namespace

std::unique_ptr<SequenceAttentionKernel> make_attention_kernel(const std::string& id) {
    if (id == "dense") return std::make_unique<DenseAttentionKernel>();
    throw std::runtime_error("unknown attention kernel '" + id + "' (available: dense)");
}

ContextModel::ContextModel(ContextConfig cfg, int64_t backbone_dim, int64_t cond_dim, uint64_t seed,
                           DType dtype)
    : cfg_(std::move(cfg)), backbone_dim_(backbone_dim), cond_dim_(cond_dim), dtype_(dtype) {
    if (cfg_.layers < 1) throw std::runtime_error("ContextConfig: layers must be >= 1");
    latent_dim_ = cfg_.latent_dim > 0 ? cfg_.latent_dim : backbone_dim;
    if (latent_dim_ % cfg_.heads) throw std::runtime_error("ContextConfig: latent_dim % heads != 0");
    pos_dim_ = std::max<int64_t>(2, (latent_dim_ / 4) & ~int64_t(1));
    const int64_t hidden = cfg_.mlp_hidden > 0 ? cfg_.mlp_hidden : 4 * latent_dim_;

    Rng rng(seed);
    embed_ = LinearLayer::create(params_, "embed", backbone_dim_, latent_dim_, rng, dtype_);
    pos_proj_ = LinearLayer::create(params_, "pos_proj", 3 * pos_dim_, latent_dim_, rng, dtype_);
    region_base_ = params_.add("region_base", init_normal({latent_dim_}, 0.02, rng, dtype_));
    for (int i = 0; i < cfg_.layers; ++i) {
        SeqBlock b;
        b.dim = latent_dim_;
        b.heads = cfg_.heads;
        const std::string p = "layer" + std::to_string(i);
        b.qkv = LinearLayer::create(params_, p + ".qkv", latent_dim_, 3 * latent_dim_, rng, dtype_);
        b.proj = LinearLayer::create(params_, p + ".proj", latent_dim_, latent_dim_, rng, dtype_);
        b.mlp = Mlp::create(params_, p + ".mlp", latent_dim_, hidden, latent_dim_, rng, dtype_);
        b.ada = LinearLayer::create(params_, p + ".ada", cond_dim_, 6 * latent_dim_, rng, dtype_,
                                    /*zero_init=*/true);
        blocks_.push_back(std::move(b));
    }
    // Zero-initialized output paths make the whole context model a no-op at
    // finetune start.
    out_proj_ = LinearLayer::create(params_, "out_proj", latent_dim_, backbone_dim_, rng, dtype_,
                                    /*zero_init=*/true);
    region_mlp_ = Mlp::create(params_, "region_mlp", latent_dim_, latent_dim_, cond_dim_, rng, dtype_,
                              Mlp::Act::Silu, /*zero_init_last=*/true);
    kernel_ = make_attention_kernel(cfg_.kernel);
}

Var ContextModel::positional_embedding(const std::vector<std::array<double, 3>>& coords) const {
    const int64_t n = static_cast<int64_t>(coords.size());
    Tensor feats({n, 3 * pos_dim_}, dtype_);
    std::vector<double> buf(pos_dim_);
    for (int64_t i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) {
            sinusoidal_embed(coords[i][a], pos_dim_, buf.data());
            for (int64_t j = 0; j < pos_dim_; ++j)
                feats.set(i * 3 * pos_dim_ + a * pos_dim_ + j, buf[j]);
        }
    return pos_proj_.forward(make_leaf(std::move(feats), false));
}

Var ContextModel::make_region_tokens(const RegionLayout& layout) const {
    layout.validate();
    const int64_t R = layout.num_regions();
    std::vector<std::array<double, 3>> centers(R);
    const auto tpr = layout.tokens_per_region();
    for (int64_t r = 0; r < R; ++r) {
        const auto o = layout.region_origin(r);
        for (int a = 0; a < 3; ++a)
            centers[r][a] = static_cast<double>(o[a]) / static_cast<double>(layout.token_spacing) +
                            0.5 * static_cast<double>(tpr[a]);
    }
    Var tiled = add_bcast0(make_leaf(Tensor::zeros({R, latent_dim_}, dtype_), false), region_base_);
    return add(tiled, positional_embedding(centers));
}

Var ContextModel::embed_latents(const Var& bottleneck, const RegionLayout& layout) const {
    layout.validate();
    const Shape& s = bottleneck->shape();
    if (s.size() != 3 || s[2] != backbone_dim_)
        throw std::runtime_error("embed_latents: bottleneck must be [B,T," + std::to_string(backbone_dim_) + "]");
    const int64_t R = layout.num_regions();
    const int64_t Tr = layout.tokens_per_region_count();
    if (s[1] != R * Tr)
        throw std::runtime_error("embed_latents: expected " + std::to_string(R * Tr) + " tokens, got " +
                                 std::to_string(s[1]));

    Var lat = embed_.forward(bottleneck);  // [B,T,latent]
    std::vector<std::array<double, 3>> coords;
    coords.reserve(R * Tr);
    const auto tpr = layout.tokens_per_region();
    for (int64_t r = 0; r < R; ++r) {
        const auto o = layout.region_origin(r);
        for (int64_t tx = 0; tx < tpr[0]; ++tx)
            for (int64_t ty = 0; ty < tpr[1]; ++ty)
                for (int64_t tz = 0; tz < tpr[2]; ++tz)
                    coords.push_back({static_cast<double>(o[0] / layout.token_spacing + tx),
                                      static_cast<double>(o[1] / layout.token_spacing + ty),
                                      static_cast<double>(o[2] / layout.token_spacing + tz)});
    }
    return add_bcast0(lat, positional_embedding(coords));
}

Var ContextModel::seq_block_forward(const SeqBlock& blk, const Var& x, const Var& e) const {
    const int64_t D = blk.dim;
    const Shape& s = x->shape();
    const int64_t B = s[0], S = s[1];
    const int64_t H = blk.heads, dh = D / H;

    Var m = blk.ada.forward(silu(e));
    Var s1 = slice(m, 1, 0, D), b1 = slice(m, 1, D, D), g1 = slice(m, 1, 2 * D, D);
    Var s2 = slice(m, 1, 3 * D, D), b2 = slice(m, 1, 4 * D, D), g2 = slice(m, 1, 5 * D, D);

    Var h = layer_norm_lastdim(x);
    h = modulate_seq(h, s1, b1);
    Var qkv_out = blk.qkv.forward(h);
    auto split_head = [&](int64_t off) {
        Var p = slice(qkv_out, 2, off, D);
        p = reshape(p, {B, S, H, dh});
        return permute(p, {0, 2, 1, 3});
    };
    Var a = kernel_->apply(split_head(0), split_head(D), split_head(2 * D));
    a = permute(a, {0, 2, 1, 3});
    a = reshape(a, {B, S, D});
    a = blk.proj.forward(a);
    Var out = add(x, gate_seq(a, g1));

    Var h2 = layer_norm_lastdim(out);
    h2 = modulate_seq(h2, s2, b2);
    h2 = blk.mlp.forward(h2);
    return add(out, gate_seq(h2, g2));
}

Var ContextModel::process_sequence(const Var& seq, const Var& e) const {
    Var x = seq;
    for (const auto& blk : blocks_) x = seq_block_forward(blk, x, e);
    return x;
}

ContextOutput ContextModel::forward(const Var& bottleneck, const RegionLayout& layout, const Var& e) const {
    const int64_t B = bottleneck->shape()[0];
    const int64_t R = layout.num_regions();
    const int64_t Tr = layout.tokens_per_region_count();

    Var lat = embed_latents(bottleneck, layout);
    Var reg = make_region_tokens(layout);  // [R, latent]
    Var reg_b = add_bcast0(make_leaf(Tensor::zeros({B, R, latent_dim_}, dtype_), false), reg);
    Var seq = concat({reg_b, lat}, 1);  // regions first, then latents
    seq = process_sequence(seq, e);

    ContextOutput out;
    Var regions_out = slice(seq, 1, 0, R);
    Var latents_out = slice(seq, 1, R, R * Tr);
    out.latent_skip = out_proj_.forward(latents_out);
    out.region_offsets = region_mlp_.forward(regions_out);
    return out;
}

Var inject_context(const Var& decoder_tokens, const Var& latent_skip) {
    if (decoder_tokens->shape() != latent_skip->shape())
        throw std::runtime_error("inject_context: token shape mismatch " +
                                 shape_str(decoder_tokens->shape()) + " vs " +
                                 shape_str(latent_skip->shape()));
    return add(decoder_tokens, latent_skip);
}

namespace {

Var crop_region(const Var& u, const RegionLayout& layout, int64_t r) {
    const auto o = layout.region_origin(r);
    Var c = slice(u, 2, o[0], layout.region[0]);
    c = slice(c, 3, o[1], layout.region[1]);
    return slice(c, 4, o[2], layout.region[2]);
}

/// Concatenate per-region outputs back into the full domain.
Var assemble_regions(const std::vector<Var>& outs, const RegionLayout& layout) {
    const auto g = layout.region_grid();
    std::vector<Var> x_parts;
    for (int64_t gx = 0; gx < g[0]; ++gx) {
        std::vector<Var> y_parts;
        for (int64_t gy = 0; gy < g[1]; ++gy) {
            std::vector<Var> z_parts;
            for (int64_t gz = 0; gz < g[2]; ++gz)
                z_parts.push_back(outs[(gx * g[1] + gy) * g[2] + gz]);
            y_parts.push_back(z_parts.size() == 1 ? z_parts[0] : concat(z_parts, 4));
        }
        x_parts.push_back(y_parts.size() == 1 ? y_parts[0] : concat(y_parts, 3));
    }
    return x_parts.size() == 1 ? x_parts[0] : concat(x_parts, 2);
}

BackboneState detach_state(const BackboneState& st) {
    BackboneState out;
    out.tokens = detach(st.tokens);
    out.grid = st.grid;
    for (const auto& r : st.residuals) out.residuals.push_back(detach(r));
    return out;
}

}  // namespace

BackboneState encode_region(const P3DModel& model, const Var& u_full, const RegionLayout& layout,
                            int64_t region, const Var& e) {
    Var crop = crop_region(u_full, layout, region);
    BackboneState st = model.encode(crop, e);
    st.tokens = model.transform(st.tokens, e, st.grid);
    return st;
}

Var assembled_forward(const P3DModel& model, const ContextModel* ctx, const Var& u_full,
                      const RegionLayout& layout, const Var& e, const AssembledForwardOptions& opts) {
    layout.validate();
    const Shape& s = u_full->shape();
    if (s.size() != 5) throw std::runtime_error("assembled_forward: input must be [B,C,X,Y,Z]");
    for (int a = 0; a < 3; ++a)
        if (s[2 + a] != layout.domain[a])
            throw std::runtime_error("assembled_forward: input extents do not match layout domain");
    const int64_t R = layout.num_regions();
    if (!opts.encoder_grad.empty() && static_cast<int64_t>(opts.encoder_grad.size()) != R)
        throw std::runtime_error("assembled_forward: encoder_grad size mismatch");
    if (!opts.precomputed.empty() && static_cast<int64_t>(opts.precomputed.size()) != R)
        throw std::runtime_error("assembled_forward: precomputed size mismatch");

    std::vector<BackboneState> states;
    states.reserve(R);
    for (int64_t r = 0; r < R; ++r) {
        BackboneState st = opts.precomputed.empty() ? encode_region(model, u_full, layout, r, e)
                                                    : opts.precomputed[r];
        const bool grad_on = opts.encoder_grad.empty() || opts.encoder_grad[r];
        states.push_back(grad_on ? std::move(st) : detach_state(st));
    }

    ContextOutput ctx_out;
    if (opts.use_context && ctx) {
        std::vector<Var> toks;
        for (const auto& st : states) toks.push_back(st.tokens);
        Var all = toks.size() == 1 ? toks[0] : concat(toks, 1);
        ctx_out = ctx->forward(all, layout, e);
    }

    const int64_t Tr = layout.tokens_per_region_count();
    std::vector<Var> outs;
    outs.reserve(R);
    for (int64_t r = 0; r < R; ++r) {
        Var tokens = states[r].tokens;
        Var e_r = e;
        if (ctx_out.latent_skip) {
            tokens = inject_context(tokens, slice(ctx_out.latent_skip, 1, r * Tr, Tr));
            Var off = reshape(slice(ctx_out.region_offsets, 1, r, 1), e->shape());
            e_r = add(e, off);
        }
        outs.push_back(model.decode(tokens, states[r], e_r));
    }
    return assemble_regions(outs, layout);
}

}  // namespace p3d
