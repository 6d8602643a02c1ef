#include "p3d/nn.hpp"

#include <cmath>
#include <cstring>

namespace p3d {

Var ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
    Var v = make_leaf(std::move(init), true);
    index_[name] = items_.size();
    items_.push_back({name, v});
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
    return items_[it->second].second;
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_) n += v->value.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (auto& [name, v] : items_) {
        if (v->has_grad) v->grad.zero_();
    }
}

uint64_t ParamStore::content_hash() const {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, v] : items_) {
        mix(name.data(), name.size());
        if (v->value.dtype() == DType::F32)
            mix(v->value.data<float>(), v->value.numel() * sizeof(float));
        else
            mix(v->value.data<double>(), v->value.numel() * sizeof(double));
    }
    return h;
}

Tensor init_uniform_fan_in(Shape shape, int64_t fan_in, Rng& rng, DType dtype) {
    Tensor t(std::move(shape), dtype);
    const double bound = fan_in > 0 ? 1.0 / std::sqrt(static_cast<double>(fan_in)) : 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(-bound, bound));
    return t;
}

Tensor init_normal(Shape shape, double stddev, Rng& rng, DType dtype) {
    Tensor t(std::move(shape), dtype);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, stddev * rng.normal());
    return t;
}

LinearLayer LinearLayer::create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t out,
                                Rng& rng, DType dtype, bool zero_init, bool bias) {
    LinearLayer l;
    l.w = ps.add(prefix + ".weight",
                 zero_init ? Tensor::zeros({in, out}, dtype) : init_uniform_fan_in({in, out}, in, rng, dtype));
    if (bias)
        l.b = ps.add(prefix + ".bias",
                     zero_init ? Tensor::zeros({out}, dtype) : init_uniform_fan_in({out}, in, rng, dtype));
    return l;
}

Conv3dLayer Conv3dLayer::create(ParamStore& ps, const std::string& prefix, int64_t cin, int64_t cout,
                                int k, int stride, Rng& rng, DType dtype, bool zero_init) {
    Conv3dLayer l;
    l.stride = stride;
    const int64_t fan_in = cin * k * k * k;
    l.w = ps.add(prefix + ".weight", zero_init ? Tensor::zeros({cout, cin, k, k, k}, dtype)
                                               : init_uniform_fan_in({cout, cin, k, k, k}, fan_in, rng, dtype));
    l.b = ps.add(prefix + ".bias",
                 zero_init ? Tensor::zeros({cout}, dtype) : init_uniform_fan_in({cout}, fan_in, rng, dtype));
    return l;
}

GroupNormLayer GroupNormLayer::create(ParamStore& ps, const std::string& prefix, int64_t channels,
                                      int groups, DType dtype) {
    GroupNormLayer l;
    l.groups = groups;
    l.gamma = ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0, dtype));
    l.beta = ps.add(prefix + ".beta", Tensor::zeros({channels}, dtype));
    return l;
}

Mlp Mlp::create(ParamStore& ps, const std::string& prefix, int64_t in, int64_t hidden, int64_t out,
                Rng& rng, DType dtype, Act act, bool zero_init_last) {
    Mlp m;
    m.act = act;
    m.fc1 = LinearLayer::create(ps, prefix + ".fc1", in, hidden, rng, dtype);
    m.fc2 = LinearLayer::create(ps, prefix + ".fc2", hidden, out, rng, dtype, zero_init_last);
    return m;
}

Var Mlp::forward(const Var& x) const {
    Var h = fc1.forward(x);
    switch (act) {
        case Act::Gelu: h = gelu(h); break;
        case Act::Silu: h = silu(h); break;
        case Act::Relu: h = relu(h); break;
    }
    return fc2.forward(h);
}

}  // namespace p3d
