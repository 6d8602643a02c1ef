#pragma once

#include <optional>

#include "p3d/nn.hpp"

namespace p3d {

/// Everything known about a sample besides the field itself: physical
/// parameters, an optional class label and an optional diffusion time.
struct Conditioning {
    std::vector<double> params;
    std::optional<int64_t> label;
    std::optional<double> t;
};

/// Maps a batch of Conditioning records to [B, cond_dim] embeddings.
///
/// Each part is turned into a sinusoidal frequency embedding (zero vector when
/// the part is absent) and routed through its own two-layer MLP; labels use a
/// learned table. The per-part outputs are summed, so with everything absent
/// the result is the constant MLP(0).
class CondEmbedder {
public:
    static CondEmbedder create(ParamStore& ps, const std::string& prefix, int64_t cond_dim,
                               int64_t freq_dim, int64_t n_params, int64_t n_labels, Rng& rng,
                               DType dtype);

    Var forward(const std::vector<Conditioning>& batch) const;

    int64_t cond_dim() const { return cond_dim_; }
    int64_t n_params() const { return n_params_; }

private:
    int64_t cond_dim_ = 0, freq_dim_ = 0, n_params_ = 0, n_labels_ = 0;
    DType dtype_ = DType::F32;
    Mlp t_mlp_;
    std::vector<Mlp> param_mlps_;
    Var label_table_;
};

/// Sinusoidal embedding of a scalar: [sin(w_j v), cos(w_j v)] with
/// log-spaced frequencies w_j.
void sinusoidal_embed(double v, int64_t dim, double* out);

}  // namespace p3d
