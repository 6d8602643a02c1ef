#include <cmath>
#include <cstring>

#include "p3d/ops.hpp"

namespace p3d {

PadMode pad_mode_from_name(const std::string& s) {
    if (s == "zero") return PadMode::Zero;
    if (s == "circular") return PadMode::Circular;
    throw std::runtime_error("unknown pad_mode: " + s);
}

namespace {

void check_same(const Var& a, const Var& b, const char* op) {
    if (a->shape() != b->shape() || a->dtype() != b->dtype())
        throw std::runtime_error(std::string(op) + ": shape/dtype mismatch " + shape_str(a->shape()) +
                                 " vs " + shape_str(b->shape()));
}

void accum(const Var& p, const Tensor& g) {
    if (p->requires_grad) p->grad_buffer().add_(g);
}

template <typename Fn>
void dispatch(DType dt, Fn&& fn) {
    if (dt == DType::F32) fn(float{});
    else fn(double{});
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    Tensor out = a->value.clone();
    out.add_(b->value);
    return make_node(std::move(out), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        accum(n.parents[1], n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    Tensor out = a->value.clone();
    out.add_scaled_(b->value, -1.0);
    return make_node(std::move(out), {a, b}, [](Node& n) {
        accum(n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->grad_buffer().add_scaled_(n.grad, -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor out(a->shape(), a->dtype());
    const int64_t n = out.numel();
    dispatch(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a->value.data<T>();
        const T* pb = b->value.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    });
    return make_node(std::move(out), {a, b}, [n](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            if (nd.parents[0]->requires_grad) {
                T* da = nd.parents[0]->grad_buffer().data<T>();
                const T* pb = nd.parents[1]->value.data<T>();
                for (int64_t i = 0; i < n; ++i) da[i] += g[i] * pb[i];
            }
            if (nd.parents[1]->requires_grad) {
                T* db = nd.parents[1]->grad_buffer().data<T>();
                const T* pa = nd.parents[0]->value.data<T>();
                for (int64_t i = 0; i < n; ++i) db[i] += g[i] * pa[i];
            }
        });
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value.clone();
    const int64_t n = out.numel();
    dispatch(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        const T sv = static_cast<T>(s);
        for (int64_t i = 0; i < n; ++i) po[i] += sv;
    });
    return make_node(std::move(out), {a}, [](Node& n) { accum(n.parents[0], n.grad); });
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a->value.clone();
    out.scale_(s);
    return make_node(std::move(out), {a}, [s](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->grad_buffer().add_scaled_(n.grad, s);
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}

Var gelu(const Var& x) {
    Tensor out(x->shape(), x->dtype());
    const int64_t n = out.numel();
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(px[i]);
            const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            po[i] = static_cast<T>(0.5 * v * (1.0 + t));
        }
    });
    return make_node(std::move(out), {x}, [n](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* px = nd.parents[0]->value.data<T>();
            T* dx = nd.parents[0]->grad_buffer().data<T>();
#pragma omp parallel for schedule(static)
            for (int64_t i = 0; i < n; ++i) {
                const double v = static_cast<double>(px[i]);
                const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
                const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
                const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                dx[i] += static_cast<T>(static_cast<double>(g[i]) * d);
            }
        });
    });
}

Var silu(const Var& x) {
    Tensor out(x->shape(), x->dtype());
    const int64_t n = out.numel();
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) {
            const double v = static_cast<double>(px[i]);
            po[i] = static_cast<T>(v / (1.0 + std::exp(-v)));
        }
    });
    return make_node(std::move(out), {x}, [n](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* px = nd.parents[0]->value.data<T>();
            T* dx = nd.parents[0]->grad_buffer().data<T>();
            for (int64_t i = 0; i < n; ++i) {
                const double v = static_cast<double>(px[i]);
                const double s = 1.0 / (1.0 + std::exp(-v));
                dx[i] += static_cast<T>(static_cast<double>(g[i]) * s * (1.0 + v * (1.0 - s)));
            }
        });
    });
}

Var relu(const Var& x) {
    Tensor out(x->shape(), x->dtype());
    const int64_t n = out.numel();
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
        for (int64_t i = 0; i < n; ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    });
    return make_node(std::move(out), {x}, [n](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* px = nd.parents[0]->value.data<T>();
            T* dx = nd.parents[0]->grad_buffer().data<T>();
            for (int64_t i = 0; i < n; ++i)
                if (px[i] > T(0)) dx[i] += g[i];
        });
    });
}

Var sum_all(const Var& x) {
    Tensor out = Tensor::scalar(x->value.sum(), x->dtype());
    return make_node(std::move(out), {x}, [](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        const double g = nd.grad.at(0);
        Tensor ones(nd.parents[0]->shape(), nd.parents[0]->dtype());
        ones.fill_(g);
        nd.parents[0]->grad_buffer().add_(ones);
    });
}

Var mean_all(const Var& x) {
    const int64_t n = x->value.numel();
    if (n == 0) throw std::runtime_error("mean_all: empty tensor");
    Tensor out = Tensor::scalar(x->value.sum() / static_cast<double>(n), x->dtype());
    return make_node(std::move(out), {x}, [n](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        const double g = nd.grad.at(0) / static_cast<double>(n);
        Tensor fillv(nd.parents[0]->shape(), nd.parents[0]->dtype());
        fillv.fill_(g);
        nd.parents[0]->grad_buffer().add_(fillv);
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    return make_node(std::move(out), {x}, [](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        nd.parents[0]->grad_buffer().add_(nd.grad.reshaped(nd.parents[0]->shape()));
    });
}

namespace {

std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

/// out[i0,i1,...] = in[coords permuted by axes]; axes[j] = source axis of out axis j.
template <typename T>
void permute_kernel(const T* in, T* out, const Shape& out_shape, const std::vector<int64_t>& in_stride_for_out) {
    const int nd = static_cast<int>(out_shape.size());
    const int64_t total = numel(out_shape);
    if (total == 0) return;
    const int64_t inner = out_shape[nd - 1];
    const int64_t inner_stride = in_stride_for_out[nd - 1];
    const int64_t outer = total / inner;
#pragma omp parallel for schedule(static)
    for (int64_t o = 0; o < outer; ++o) {
        int64_t rem = o;
        int64_t base = 0;
        for (int a = nd - 2; a >= 0; --a) {
            const int64_t c = rem % out_shape[a];
            rem /= out_shape[a];
            base += c * in_stride_for_out[a];
        }
        T* dst = out + o * inner;
        const T* src = in + base;
        for (int64_t i = 0; i < inner; ++i) dst[i] = src[i * inner_stride];
    }
}

}  // namespace

Var permute(const Var& x, const std::vector<int>& axes) {
    const Shape& in_shape = x->shape();
    const int nd = static_cast<int>(in_shape.size());
    if (static_cast<int>(axes.size()) != nd) throw std::runtime_error("permute: axes rank mismatch");
    Shape out_shape(nd);
    std::vector<bool> seen(nd, false);
    for (int j = 0; j < nd; ++j) {
        if (axes[j] < 0 || axes[j] >= nd || seen[axes[j]]) throw std::runtime_error("permute: bad axes");
        seen[axes[j]] = true;
        out_shape[j] = in_shape[axes[j]];
    }
    const auto in_strides = strides_of(in_shape);
    std::vector<int64_t> map(nd);
    for (int j = 0; j < nd; ++j) map[j] = in_strides[axes[j]];

    Tensor out(out_shape, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        permute_kernel(x->value.data<T>(), out.data<T>(), out_shape, map);
    });

    std::vector<int> inv(nd);
    for (int j = 0; j < nd; ++j) inv[axes[j]] = j;
    return make_node(std::move(out), {x}, [inv](Node& nd_) {
        if (!nd_.parents[0]->requires_grad) return;
        const Shape& gshape = nd_.parents[0]->shape();
        const auto gsrc_strides = strides_of(nd_.grad.shape());
        std::vector<int64_t> map2(inv.size());
        for (size_t j = 0; j < inv.size(); ++j) map2[j] = gsrc_strides[inv[j]];
        Tensor gp(gshape, nd_.dtype());
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            permute_kernel(nd_.grad.data<T>(), gp.data<T>(), gshape, map2);
        });
        nd_.parents[0]->grad_buffer().add_(gp);
    });
}

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw std::runtime_error("concat: no inputs");
    const Shape& s0 = xs[0]->shape();
    const int nd = static_cast<int>(s0.size());
    if (axis < 0 || axis >= nd) throw std::runtime_error("concat: bad axis");
    Shape out_shape = s0;
    int64_t sum_axis = 0;
    for (const auto& x : xs) {
        const Shape& s = x->shape();
        if (static_cast<int>(s.size()) != nd || x->dtype() != xs[0]->dtype())
            throw std::runtime_error("concat: rank/dtype mismatch");
        for (int a = 0; a < nd; ++a)
            if (a != axis && s[a] != s0[a])
                throw std::runtime_error("concat: extent mismatch at axis " + std::to_string(a));
        sum_axis += s[axis];
    }
    out_shape[axis] = sum_axis;

    int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= s0[a];
    for (int a = axis + 1; a < nd; ++a) inner *= s0[a];

    Tensor out(out_shape, xs[0]->dtype());
    std::vector<int64_t> offsets;  // element offset of each input within an outer row
    dispatch(xs[0]->dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        const int64_t row = sum_axis * inner;
        int64_t off = 0;
        for (const auto& x : xs) {
            offsets.push_back(off);
            const int64_t blk = x->shape()[axis] * inner;
            const T* px = x->value.data<T>();
            for (int64_t o = 0; o < outer; ++o)
                std::memcpy(po + o * row + off, px + o * blk, blk * sizeof(T));
            off += blk;
        }
    });
    std::vector<int64_t> blocks;
    for (const auto& x : xs) blocks.push_back(x->shape()[axis] * inner);
    return make_node(std::move(out), xs, [outer, sum_axis, inner, offsets, blocks](Node& nd_) {
        const int64_t row = sum_axis * inner;
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            for (size_t i = 0; i < nd_.parents.size(); ++i) {
                auto& p = nd_.parents[i];
                if (!p->requires_grad) continue;
                T* dp = p->grad_buffer().data<T>();
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = g + o * row + offsets[i];
                    T* dst = dp + o * blocks[i];
                    for (int64_t j = 0; j < blocks[i]; ++j) dst[j] += src[j];
                }
            }
        });
    });
}

Var slice(const Var& x, int axis, int64_t start, int64_t len) {
    const Shape& s = x->shape();
    const int nd = static_cast<int>(s.size());
    if (axis < 0 || axis >= nd) throw std::runtime_error("slice: bad axis");
    if (start < 0 || len < 0 || start + len > s[axis]) throw std::runtime_error("slice: out of range");
    Shape out_shape = s;
    out_shape[axis] = len;
    int64_t outer = 1, inner = 1;
    for (int a = 0; a < axis; ++a) outer *= s[a];
    for (int a = axis + 1; a < nd; ++a) inner *= s[a];

    Tensor out(out_shape, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
        const int64_t in_row = s[axis] * inner;
        const int64_t out_row = len * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + o * out_row, px + o * in_row + start * inner, out_row * sizeof(T));
    });
    const int64_t in_axis = s[axis];
    return make_node(std::move(out), {x}, [outer, inner, start, len, in_axis](Node& nd_) {
        if (!nd_.parents[0]->requires_grad) return;
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            T* dx = nd_.parents[0]->grad_buffer().data<T>();
            const int64_t in_row = in_axis * inner;
            const int64_t out_row = len * inner;
            for (int64_t o = 0; o < outer; ++o) {
                T* dst = dx + o * in_row + start * inner;
                const T* src = g + o * out_row;
                for (int64_t j = 0; j < out_row; ++j) dst[j] += src[j];
            }
        });
    });
}

Var detach(const Var& x) { return make_leaf(x->value.clone(), false); }

Var add_bcast0(const Var& x, const Var& b) {
    const int64_t rb = b->value.numel();
    const int64_t nx = x->value.numel();
    if (rb == 0 || nx % rb != 0 || x->dtype() != b->dtype())
        throw std::runtime_error("add_bcast0: incompatible shapes");
    const int nb = b->value.ndim();
    for (int a = 0; a < nb; ++a)
        if (x->shape()[x->value.ndim() - nb + a] != b->shape()[a])
            throw std::runtime_error("add_bcast0: trailing dims mismatch");
    const int64_t reps = nx / rb;
    Tensor out = x->value.clone();
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        const T* pb = b->value.data<T>();
        for (int64_t r = 0; r < reps; ++r) {
            T* row = po + r * rb;
            for (int64_t j = 0; j < rb; ++j) row[j] += pb[j];
        }
    });
    return make_node(std::move(out), {x, b}, [reps, rb](Node& nd_) {
        accum(nd_.parents[0], nd_.grad);
        if (!nd_.parents[1]->requires_grad) return;
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            T* db = nd_.parents[1]->grad_buffer().data<T>();
            for (int64_t j = 0; j < rb; ++j) {
                double acc = 0.0;
                for (int64_t r = 0; r < reps; ++r) acc += static_cast<double>(g[r * rb + j]);
                db[j] += static_cast<T>(acc);
            }
        });
    });
}

namespace {

/// Shared kernel for the (1+scale)*x + shift family over [outer, T, D] with
/// per-(outer, D) scale/shift. gate==true drops the +1 and the shift.
template <typename T>
void affine_rows_fwd(const T* x, const T* s, const T* t, T* o, int64_t outer, int64_t rows, int64_t d,
                     bool gate) {
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < outer; ++b) {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xp = x + (b * rows + r) * d;
            T* op = o + (b * rows + r) * d;
            const T* sp = s + b * d;
            if (gate) {
                for (int64_t j = 0; j < d; ++j) op[j] = xp[j] * sp[j];
            } else {
                const T* tp = t + b * d;
                for (int64_t j = 0; j < d; ++j) op[j] = xp[j] * (T(1) + sp[j]) + tp[j];
            }
        }
    }
}

}  // namespace

Var modulate_seq(const Var& x, const Var& scale, const Var& shift) {
    const Shape& s = x->shape();
    if (s.size() != 3) throw std::runtime_error("modulate_seq: x must be [B,T,D]");
    const int64_t B = s[0], T_ = s[1], D = s[2];
    if (scale->shape() != Shape{B, D} || shift->shape() != Shape{B, D})
        throw std::runtime_error("modulate_seq: scale/shift must be [B,D]");
    Tensor out(s, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        affine_rows_fwd(x->value.data<T>(), scale->value.data<T>(), shift->value.data<T>(), out.data<T>(),
                        B, T_, D, false);
    });
    return make_node(std::move(out), {x, scale, shift}, [B, T_, D](Node& nd_) {
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            const T* px = nd_.parents[0]->value.data<T>();
            const T* ps = nd_.parents[1]->value.data<T>();
            if (nd_.parents[0]->requires_grad) {
                T* dx = nd_.parents[0]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t t = 0; t < T_; ++t) {
                        const int64_t off = (b * T_ + t) * D;
                        for (int64_t j = 0; j < D; ++j) dx[off + j] += g[off + j] * (T(1) + ps[b * D + j]);
                    }
            }
            if (nd_.parents[1]->requires_grad) {
                T* ds = nd_.parents[1]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t j = 0; j < D; ++j) {
                        double acc = 0.0;
                        for (int64_t t = 0; t < T_; ++t) {
                            const int64_t off = (b * T_ + t) * D + j;
                            acc += static_cast<double>(g[off]) * static_cast<double>(px[off]);
                        }
                        ds[b * D + j] += static_cast<T>(acc);
                    }
            }
            if (nd_.parents[2]->requires_grad) {
                T* dt = nd_.parents[2]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t j = 0; j < D; ++j) {
                        double acc = 0.0;
                        for (int64_t t = 0; t < T_; ++t) acc += static_cast<double>(g[(b * T_ + t) * D + j]);
                        dt[b * D + j] += static_cast<T>(acc);
                    }
            }
        });
    });
}

Var gate_seq(const Var& x, const Var& gate) {
    const Shape& s = x->shape();
    if (s.size() != 3) throw std::runtime_error("gate_seq: x must be [B,T,D]");
    const int64_t B = s[0], T_ = s[1], D = s[2];
    if (gate->shape() != Shape{B, D}) throw std::runtime_error("gate_seq: gate must be [B,D]");
    Tensor out(s, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        affine_rows_fwd(x->value.data<T>(), gate->value.data<T>(), static_cast<const T*>(nullptr),
                        out.data<T>(), B, T_, D, true);
    });
    return make_node(std::move(out), {x, gate}, [B, T_, D](Node& nd_) {
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            const T* px = nd_.parents[0]->value.data<T>();
            const T* pg = nd_.parents[1]->value.data<T>();
            if (nd_.parents[0]->requires_grad) {
                T* dx = nd_.parents[0]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t t = 0; t < T_; ++t) {
                        const int64_t off = (b * T_ + t) * D;
                        for (int64_t j = 0; j < D; ++j) dx[off + j] += g[off + j] * pg[b * D + j];
                    }
            }
            if (nd_.parents[1]->requires_grad) {
                T* dg = nd_.parents[1]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t j = 0; j < D; ++j) {
                        double acc = 0.0;
                        for (int64_t t = 0; t < T_; ++t) {
                            const int64_t off = (b * T_ + t) * D + j;
                            acc += static_cast<double>(g[off]) * static_cast<double>(px[off]);
                        }
                        dg[b * D + j] += static_cast<T>(acc);
                    }
            }
        });
    });
}

Var modulate_channels(const Var& x, const Var& scale, const Var& shift) {
    const Shape& s = x->shape();
    if (s.size() < 3) throw std::runtime_error("modulate_channels: x must be [B,C,spatial...]");
    const int64_t B = s[0], C = s[1];
    int64_t sp = 1;
    for (size_t a = 2; a < s.size(); ++a) sp *= s[a];
    if (scale->shape() != Shape{B, C} || shift->shape() != Shape{B, C})
        throw std::runtime_error("modulate_channels: scale/shift must be [B,C]");
    Tensor out(s, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* psc = scale->value.data<T>();
        const T* psh = shift->value.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static) collapse(2)
        for (int64_t b = 0; b < B; ++b)
            for (int64_t c = 0; c < C; ++c) {
                const int64_t off = (b * C + c) * sp;
                const T sc = T(1) + psc[b * C + c];
                const T sh = psh[b * C + c];
                for (int64_t i = 0; i < sp; ++i) po[off + i] = px[off + i] * sc + sh;
            }
    });
    return make_node(std::move(out), {x, scale, shift}, [B, C, sp](Node& nd_) {
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            const T* px = nd_.parents[0]->value.data<T>();
            const T* psc = nd_.parents[1]->value.data<T>();
            if (nd_.parents[0]->requires_grad) {
                T* dx = nd_.parents[0]->grad_buffer().data<T>();
#pragma omp parallel for schedule(static) collapse(2)
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (b * C + c) * sp;
                        const T sc = T(1) + psc[b * C + c];
                        for (int64_t i = 0; i < sp; ++i) dx[off + i] += g[off + i] * sc;
                    }
            }
            if (nd_.parents[1]->requires_grad) {
                T* ds = nd_.parents[1]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (b * C + c) * sp;
                        double acc = 0.0;
                        for (int64_t i = 0; i < sp; ++i)
                            acc += static_cast<double>(g[off + i]) * static_cast<double>(px[off + i]);
                        ds[b * C + c] += static_cast<T>(acc);
                    }
            }
            if (nd_.parents[2]->requires_grad) {
                T* dt = nd_.parents[2]->grad_buffer().data<T>();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (b * C + c) * sp;
                        double acc = 0.0;
                        for (int64_t i = 0; i < sp; ++i) acc += static_cast<double>(g[off + i]);
                        dt[b * C + c] += static_cast<T>(acc);
                    }
            }
        });
    });
}

Var index_select0(const Var& table, std::vector<int64_t> indices) {
    const Shape& s = table->shape();
    if (s.size() != 2) throw std::runtime_error("index_select0: table must be 2-D");
    const int64_t N = s[0], D = s[1];
    for (int64_t i : indices)
        if (i < 0 || i >= N) throw std::runtime_error("index_select0: index out of range");
    const int64_t M = static_cast<int64_t>(indices.size());
    Tensor out({M, D}, table->dtype());
    dispatch(table->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pt = table->value.data<T>();
        T* po = out.data<T>();
        for (int64_t m = 0; m < M; ++m)
            std::memcpy(po + m * D, pt + indices[m] * D, D * sizeof(T));
    });
    return make_node(std::move(out), {table}, [indices = std::move(indices), D](Node& nd_) {
        if (!nd_.parents[0]->requires_grad) return;
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd_.grad.data<T>();
            T* dt = nd_.parents[0]->grad_buffer().data<T>();
            for (size_t m = 0; m < indices.size(); ++m) {
                T* dst = dt + indices[m] * D;
                const T* src = g + m * D;
                for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
            }
        });
    });
}

Var mse_loss(const Var& pred, const Var& target) {
    check_same(pred, target, "mse_loss");
    const int64_t n = pred->value.numel();
    if (n == 0) throw std::runtime_error("mse_loss: empty tensors");
    double acc = 0.0;
    dispatch(pred->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* a = pred->value.data<T>();
        const T* b = target->value.data<T>();
        constexpr int64_t tile = 4096;
        const int64_t tiles = (n + tile - 1) / tile;
        std::vector<double> partial(tiles, 0.0);
#pragma omp parallel for schedule(static)
        for (int64_t t = 0; t < tiles; ++t) {
            const int64_t lo = t * tile, hi = std::min(n, lo + tile);
            double p = 0.0;
            for (int64_t i = lo; i < hi; ++i) {
                const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
                p += d * d;
            }
            partial[t] = p;
        }
        for (double v : partial) acc += v;
    });
    Tensor out = Tensor::scalar(acc / static_cast<double>(n), pred->dtype());
    return make_node(std::move(out), {pred, target}, [n](Node& nd_) {
        const double g = nd_.grad.at(0) * 2.0 / static_cast<double>(n);
        dispatch(nd_.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* a = nd_.parents[0]->value.data<T>();
            const T* b = nd_.parents[1]->value.data<T>();
            if (nd_.parents[0]->requires_grad) {
                T* d = nd_.parents[0]->grad_buffer().data<T>();
                for (int64_t i = 0; i < n; ++i)
                    d[i] += static_cast<T>(g * (static_cast<double>(a[i]) - static_cast<double>(b[i])));
            }
            if (nd_.parents[1]->requires_grad) {
                T* d = nd_.parents[1]->grad_buffer().data<T>();
                for (int64_t i = 0; i < n; ++i)
                    d[i] -= static_cast<T>(g * (static_cast<double>(a[i]) - static_cast<double>(b[i])));
            }
        });
    });
}

}  // namespace p3d
