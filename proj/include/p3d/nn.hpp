#pragma once

#include <unordered_map>

#include "p3d/ops.hpp"
#include "p3d/rng.hpp"

namespace p3d {

/// Ordered registry of named trainable parameters. Registration order is the
/// canonical iteration order for the optimizer, EMA and checkpointing.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init);
    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
    size_t size() const { return items_.size(); }
    int64_t total_elements() const;
    void zero_grads();
    /// FNV-1a hash over parameter bytes in registration order.
    uint64_t content_hash() const;

private:
    std::vector<std::pair<std::string, Var>> items_;
    std::unordered_map<std::string, size_t> index_;
};

// Initializers
Tensor init_uniform_fan_in(Shape shape, int64_t fan_in, Rng& rng, DType dtype);
Tensor init_normal(Shape shape, double stddev, Rng& rng, DType dtype);

struct LinearLayer {
    Var w, b;
    static LinearLayer create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out,
                              Rng& rng, DType dtype, bool zero_init = false, bool bias = true);
    Var forward(const Var& x) const { return linear(x, w, b); }
};

struct Conv3dLayer {
    Var w, b;
    int stride = 1;
    static Conv3dLayer create(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout,
                              int k, int stride, Rng& rng, DType dtype, bool zero_init = false);
    Var forward(const Var& x, PadMode pad) const { return conv3(x, w, b, stride, pad); }
};

struct GroupNormLayer {
    Var gamma, beta;
    int groups = 1;
    double eps = 1e-5;
    static GroupNormLayer create(ParamStore& ps, const std::string& prefix, int64_t channels, int groups,
                                 DType dtype);
    Var forward(const Var& x) const { return group_norm(x, groups, gamma, beta, eps); }
};

/// Two-layer MLP with an activation in between.
struct Mlp {
    LinearLayer fc1, fc2;
    enum class Act { Gelu, Silu, Relu } act = Act::Gelu;
    static Mlp create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out,
                      Rng& rng, DType dtype, Act act = Act::Gelu, bool zero_init_last = false);
    Var forward(const Var& x) const;
};

}  // namespace p3d
