#include "p3d/conditioning.hpp"

#include <cmath>

namespace p3d {

void sinusoidal_embed(double v, int64_t dim, double* out) {
    const int64_t half = dim / 2;
    for (int64_t j = 0; j < half; ++j) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) /
                                     static_cast<double>(std::max<int64_t>(half - 1, 1)));
        out[2 * j] = std::sin(v * freq);
        out[2 * j + 1] = std::cos(v * freq);
    }
    if (dim % 2) out[dim - 1] = 0.0;
}

CondEmbedder CondEmbedder::create(ParamStore& ps, const std::string& prefix, int64_t cond_dim,
                                  int64_t freq_dim, int64_t n_params, int64_t n_labels, Rng& rng,
                                  DType dtype) {
    CondEmbedder e;
    e.cond_dim_ = cond_dim;
    e.freq_dim_ = freq_dim;
    e.n_params_ = n_params;
    e.n_labels_ = n_labels;
    e.dtype_ = dtype;
    e.t_mlp_ = Mlp::create(ps, prefix + ".t_mlp", freq_dim, cond_dim, cond_dim, rng, dtype, Mlp::Act::Silu);
    for (int64_t i = 0; i < n_params; ++i)
        e.param_mlps_.push_back(Mlp::create(ps, prefix + ".param_mlp" + std::to_string(i), freq_dim,
                                            cond_dim, cond_dim, rng, dtype, Mlp::Act::Silu));
    if (n_labels > 0)
        e.label_table_ = ps.add(prefix + ".label_table", init_normal({n_labels, cond_dim}, 0.02, rng, dtype));
    return e;
}

Var CondEmbedder::forward(const std::vector<Conditioning>& batch) const {
    const int64_t B = static_cast<int64_t>(batch.size());
    if (B == 0) throw std::runtime_error("CondEmbedder: empty batch");
    for (const auto& c : batch) {
        if (!c.params.empty() && static_cast<int64_t>(c.params.size()) != n_params_)
            throw std::runtime_error("CondEmbedder: expected " + std::to_string(n_params_) +
                                     " params, got " + std::to_string(c.params.size()));
        if (c.label && n_labels_ == 0)
            throw std::runtime_error("CondEmbedder: model has no label embedding");
    }

    std::vector<double> buf(freq_dim_);
    auto part_features = [&](auto getter) {
        Tensor feats({B, freq_dim_}, dtype_);
        for (int64_t b = 0; b < B; ++b) {
            std::optional<double> v = getter(batch[b]);
            if (!v) continue;  // absent part contributes a zero feature vector
            sinusoidal_embed(*v, freq_dim_, buf.data());
            for (int64_t j = 0; j < freq_dim_; ++j) feats.set(b * freq_dim_ + j, buf[j]);
        }
        return make_leaf(std::move(feats), false);
    };

    Var out = t_mlp_.forward(part_features([](const Conditioning& c) { return c.t; }));
    for (int64_t i = 0; i < n_params_; ++i) {
        Var f = part_features([i](const Conditioning& c) -> std::optional<double> {
            if (c.params.empty()) return std::nullopt;
            return c.params[i];
        });
        out = add(out, param_mlps_[i].forward(f));
    }
    if (n_labels_ > 0) {
        bool any = false;
        for (const auto& c : batch) any = any || c.label.has_value();
        if (any) {
            std::vector<int64_t> idx(B);
            for (int64_t b = 0; b < B; ++b) {
                if (!batch[b].label) throw std::runtime_error("CondEmbedder: mixed label presence in batch");
                idx[b] = *batch[b].label;
            }
            out = add(out, index_select0(label_table_, idx));
        }
    }
    return out;
}

}  // namespace p3d
