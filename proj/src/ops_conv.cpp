#include <cmath>
#include <cstring>
#include <vector>

#include "p3d/ops.hpp"

namespace p3d {

namespace {

template <typename Fn>
void dispatch(DType dt, Fn&& fn) {
    if (dt == DType::F32) fn(float{});
    else fn(double{});
}

inline int64_t wrap(int64_t i, int64_t n) {
    i %= n;
    return i < 0 ? i + n : i;
}

/// Copy [B,C,X,Y,Z] into a buffer padded by p on each spatial side, filled
/// with zeros or circularly wrapped values.
template <typename T>
std::vector<T> pad_input(const T* x, int64_t B, int64_t C, int64_t X, int64_t Y, int64_t Z, int p,
                         PadMode mode) {
    const int64_t Xp = X + 2 * p, Yp = Y + 2 * p, Zp = Z + 2 * p;
    std::vector<T> out(B * C * Xp * Yp * Zp, T(0));
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t bc = 0; bc < B * C; ++bc)
        for (int64_t ix = 0; ix < Xp; ++ix) {
            const int64_t sx = ix - p;
            const bool x_in = sx >= 0 && sx < X;
            if (mode == PadMode::Zero && !x_in) continue;
            const int64_t src_x = mode == PadMode::Zero ? sx : wrap(sx, X);
            for (int64_t iy = 0; iy < Yp; ++iy) {
                const int64_t sy = iy - p;
                const bool y_in = sy >= 0 && sy < Y;
                if (mode == PadMode::Zero && !y_in) continue;
                const int64_t src_y = mode == PadMode::Zero ? sy : wrap(sy, Y);
                T* dst = out.data() + ((bc * Xp + ix) * Yp + iy) * Zp;
                const T* src = x + ((bc * X + src_x) * Y + src_y) * Z;
                if (mode == PadMode::Zero) {
                    std::memcpy(dst + p, src, Z * sizeof(T));
                } else {
                    for (int64_t iz = 0; iz < Zp; ++iz) dst[iz] = src[wrap(iz - p, Z)];
                }
            }
        }
    return out;
}

template <typename T>
void conv3_forward(const T* xpad, const T* w, const T* b, T* out, int64_t B, int64_t Cin, int64_t Cout,
                   int64_t Xp, int64_t Yp, int64_t Zp, int64_t OX, int64_t OY, int64_t OZ, int k, int s) {
#pragma omp parallel
    {
        std::vector<double> acc(OY * OZ);
#pragma omp for schedule(static) collapse(2)
        for (int64_t bco = 0; bco < B * Cout; ++bco)
            for (int64_t ox = 0; ox < OX; ++ox) {
                const int64_t bb = bco / Cout, co = bco % Cout;
                const double bias = b ? static_cast<double>(b[co]) : 0.0;
                std::fill(acc.begin(), acc.end(), bias);
                for (int64_t ci = 0; ci < Cin; ++ci) {
                    const T* xc = xpad + (bb * Cin + ci) * Xp * Yp * Zp;
                    const T* wc = w + ((co * Cin + ci) * k) * k * k;
                    for (int i = 0; i < k; ++i) {
                        const T* xplane = xc + (ox * s + i) * Yp * Zp;
                        for (int64_t oy = 0; oy < OY; ++oy) {
                            double* arow = acc.data() + oy * OZ;
                            for (int j = 0; j < k; ++j) {
                                const T* xrow = xplane + (oy * s + j) * Zp;
                                const T* wrow = wc + (i * k + j) * k;
                                for (int l = 0; l < k; ++l) {
                                    const double wv = static_cast<double>(wrow[l]);
                                    const T* xr = xrow + l;
                                    if (s == 1) {
                                        for (int64_t oz = 0; oz < OZ; ++oz)
                                            arow[oz] += wv * static_cast<double>(xr[oz]);
                                    } else {
                                        for (int64_t oz = 0; oz < OZ; ++oz)
                                            arow[oz] += wv * static_cast<double>(xr[oz * s]);
                                    }
                                }
                            }
                        }
                    }
                }
                T* orow = out + (bco * OX + ox) * OY * OZ;
                for (int64_t i = 0; i < OY * OZ; ++i) orow[i] = static_cast<T>(acc[i]);
            }
    }
}

struct ConvDims {
    int64_t B, Cin, Cout, X, Y, Z, OX, OY, OZ;
    int k, s, p;
    PadMode mode;
};

template <typename T>
void conv3_backward(const Tensor& grad, Node& nd, const ConvDims& d) {
    const T* g = grad.data<T>();
    const Var& xv = nd.parents[0];
    const Var& wv = nd.parents[1];
    const Var* bv = nd.parents.size() > 2 ? &nd.parents[2] : nullptr;
    const int64_t Xp = d.X + 2 * d.p, Yp = d.Y + 2 * d.p, Zp = d.Z + 2 * d.p;

    std::vector<T> xpad;
    if (wv->requires_grad)
        xpad = pad_input(xv->value.data<T>(), d.B, d.Cin, d.X, d.Y, d.Z, d.p, d.mode);

    if (xv->requires_grad) {
        // Scatter into a padded gradient buffer, then fold the borders back.
        std::vector<double> dxpad(d.B * d.Cin * Xp * Yp * Zp, 0.0);
        const T* w = wv->value.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t bci = 0; bci < d.B * d.Cin; ++bci) {
            const int64_t bb = bci / d.Cin, ci = bci % d.Cin;
            double* dxc = dxpad.data() + bci * Xp * Yp * Zp;
            for (int64_t co = 0; co < d.Cout; ++co) {
                const T* gc = g + (bb * d.Cout + co) * d.OX * d.OY * d.OZ;
                const T* wc = w + (co * d.Cin + ci) * d.k * d.k * d.k;
                for (int64_t ox = 0; ox < d.OX; ++ox)
                    for (int64_t oy = 0; oy < d.OY; ++oy) {
                        const T* grow = gc + (ox * d.OY + oy) * d.OZ;
                        for (int i = 0; i < d.k; ++i)
                            for (int j = 0; j < d.k; ++j) {
                                double* dplane =
                                    dxc + ((ox * d.s + i) * Yp + oy * d.s + j) * Zp;
                                const T* wrow = wc + (i * d.k + j) * d.k;
                                for (int l = 0; l < d.k; ++l) {
                                    const double wvv = static_cast<double>(wrow[l]);
                                    double* dst = dplane + l;
                                    for (int64_t oz = 0; oz < d.OZ; ++oz)
                                        dst[oz * d.s] += wvv * static_cast<double>(grow[oz]);
                                }
                            }
                    }
            }
        }
        T* dx = xv->grad_buffer().data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t bci = 0; bci < d.B * d.Cin; ++bci) {
            const double* dxc = dxpad.data() + bci * Xp * Yp * Zp;
            T* dst = dx + bci * d.X * d.Y * d.Z;
            for (int64_t ix = 0; ix < Xp; ++ix) {
                const int64_t tx = d.mode == PadMode::Circular ? wrap(ix - d.p, d.X) : ix - d.p;
                if (tx < 0 || tx >= d.X) continue;
                for (int64_t iy = 0; iy < Yp; ++iy) {
                    const int64_t ty = d.mode == PadMode::Circular ? wrap(iy - d.p, d.Y) : iy - d.p;
                    if (ty < 0 || ty >= d.Y) continue;
                    const double* srow = dxc + (ix * Yp + iy) * Zp;
                    T* drow = dst + (tx * d.Y + ty) * d.Z;
                    for (int64_t iz = 0; iz < Zp; ++iz) {
                        const int64_t tz = d.mode == PadMode::Circular ? wrap(iz - d.p, d.Z) : iz - d.p;
                        if (tz < 0 || tz >= d.Z) continue;
                        drow[tz] += static_cast<T>(srow[iz]);
                    }
                }
            }
        }
    }

    if (wv->requires_grad) {
        T* dw = wv->grad_buffer().data<T>();
        const int64_t ksz = static_cast<int64_t>(d.k) * d.k * d.k;
#pragma omp parallel for schedule(static)
        for (int64_t co = 0; co < d.Cout; ++co) {
            std::vector<double> acc(d.Cin * ksz, 0.0);
            for (int64_t bb = 0; bb < d.B; ++bb) {
                const T* gc = g + (bb * d.Cout + co) * d.OX * d.OY * d.OZ;
                for (int64_t ci = 0; ci < d.Cin; ++ci) {
                    const T* xc = xpad.data() + (bb * d.Cin + ci) * Xp * Yp * Zp;
                    double* accw = acc.data() + ci * ksz;
                    for (int64_t ox = 0; ox < d.OX; ++ox)
                        for (int64_t oy = 0; oy < d.OY; ++oy) {
                            const T* grow = gc + (ox * d.OY + oy) * d.OZ;
                            for (int i = 0; i < d.k; ++i)
                                for (int j = 0; j < d.k; ++j) {
                                    const T* xrow = xc + ((ox * d.s + i) * Yp + oy * d.s + j) * Zp;
                                    double* aw = accw + (i * d.k + j) * d.k;
                                    for (int l = 0; l < d.k; ++l) {
                                        double dot = 0.0;
                                        const T* xr = xrow + l;
                                        for (int64_t oz = 0; oz < d.OZ; ++oz)
                                            dot += static_cast<double>(grow[oz]) *
                                                   static_cast<double>(xr[oz * d.s]);
                                        aw[l] += dot;
                                    }
                                }
                        }
                }
            }
            T* dwc = dw + co * d.Cin * ksz;
            for (int64_t i = 0; i < d.Cin * ksz; ++i) dwc[i] += static_cast<T>(acc[i]);
        }
    }

    if (bv && (*bv)->requires_grad) {
        T* db = (*bv)->grad_buffer().data<T>();
        const int64_t sp = d.OX * d.OY * d.OZ;
        for (int64_t co = 0; co < d.Cout; ++co) {
            double acc = 0.0;
            for (int64_t bb = 0; bb < d.B; ++bb) {
                const T* gc = g + (bb * d.Cout + co) * sp;
                for (int64_t i = 0; i < sp; ++i) acc += static_cast<double>(gc[i]);
            }
            db[co] += static_cast<T>(acc);
        }
    }
}

}  // namespace

Var conv3(const Var& x, const Var& w, const Var& b, int stride, PadMode pad) {
    const Shape& xs = x->shape();
    const Shape& ws = w->shape();
    if (xs.size() != 5) throw std::runtime_error("conv3: input must be [B,Cin,X,Y,Z]");
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        throw std::runtime_error("conv3: weight must be [Cout,Cin,k,k,k]");
    if (ws[1] != xs[1])
        throw std::runtime_error("conv3: channel mismatch, input " + shape_str(xs) + " weight " + shape_str(ws));
    const int k = static_cast<int>(ws[2]);
    if (k % 2 == 0) throw std::runtime_error("conv3: kernel size must be odd");
    if (stride != 1 && stride != 2) throw std::runtime_error("conv3: stride must be 1 or 2");
    if (x->dtype() != w->dtype()) throw std::runtime_error("conv3: dtype mismatch");
    if (b && (b->shape() != Shape{ws[0]} || b->dtype() != x->dtype()))
        throw std::runtime_error("conv3: bias must be [Cout]");

    ConvDims d;
    d.B = xs[0]; d.Cin = xs[1]; d.Cout = ws[0];
    d.X = xs[2]; d.Y = xs[3]; d.Z = xs[4];
    d.k = k; d.s = stride; d.p = (k - 1) / 2; d.mode = pad;
    if (pad == PadMode::Circular) {
        if (d.X % stride || d.Y % stride || d.Z % stride)
            throw std::runtime_error("conv3: circular padding requires extents divisible by stride");
        d.OX = d.X / stride; d.OY = d.Y / stride; d.OZ = d.Z / stride;
    } else {
        d.OX = (d.X + 2 * d.p - k) / stride + 1;
        d.OY = (d.Y + 2 * d.p - k) / stride + 1;
        d.OZ = (d.Z + 2 * d.p - k) / stride + 1;
    }

    Tensor out({d.B, d.Cout, d.OX, d.OY, d.OZ}, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xpad = pad_input(x->value.data<T>(), d.B, d.Cin, d.X, d.Y, d.Z, d.p, d.mode);
        conv3_forward(xpad.data(), w->value.data<T>(), b ? b->value.data<T>() : nullptr, out.data<T>(),
                      d.B, d.Cin, d.Cout, d.X + 2 * d.p, d.Y + 2 * d.p, d.Z + 2 * d.p,
                      d.OX, d.OY, d.OZ, d.k, d.s);
    });
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents), [d](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            conv3_backward<T>(nd.grad, nd, d);
        });
    });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
    const Shape& s = x->shape();
    if (s.size() < 3) throw std::runtime_error("group_norm: input must be [B,C,spatial...]");
    const int64_t B = s[0], C = s[1];
    if (groups <= 0 || C % groups != 0)
        throw std::runtime_error("group_norm: channel count " + std::to_string(C) +
                                 " not divisible by groups " + std::to_string(groups));
    if (gamma->shape() != Shape{C} || beta->shape() != Shape{C})
        throw std::runtime_error("group_norm: gamma/beta must be [C]");
    int64_t sp = 1;
    for (size_t a = 2; a < s.size(); ++a) sp *= s[a];
    const int64_t cg = C / groups;       // channels per group
    const int64_t gsz = cg * sp;         // elements per (batch, group)

    Tensor out(s, x->dtype());
    auto stats = std::make_shared<std::vector<double>>(2 * B * groups);
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        const T* pg = gamma->value.data<T>();
        const T* pb = beta->value.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t bg = 0; bg < B * groups; ++bg) {
            const int64_t b = bg / groups, g = bg % groups;
            const T* base = px + (b * C + g * cg) * sp;
            double mean = 0.0;
            for (int64_t i = 0; i < gsz; ++i) mean += static_cast<double>(base[i]);
            mean /= static_cast<double>(gsz);
            double var = 0.0;
            for (int64_t i = 0; i < gsz; ++i) {
                const double dv = static_cast<double>(base[i]) - mean;
                var += dv * dv;
            }
            var /= static_cast<double>(gsz);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*stats)[2 * bg] = mean;
            (*stats)[2 * bg + 1] = inv;
            T* obase = po + (b * C + g * cg) * sp;
            for (int64_t c = 0; c < cg; ++c) {
                const double ga = static_cast<double>(pg[g * cg + c]);
                const double be = static_cast<double>(pb[g * cg + c]);
                const T* xr = base + c * sp;
                T* orow = obase + c * sp;
                for (int64_t i = 0; i < sp; ++i)
                    orow[i] = static_cast<T>((static_cast<double>(xr[i]) - mean) * inv * ga + be);
            }
        }
    });
    return make_node(std::move(out), {x, gamma, beta}, [B, C, groups, cg, sp, gsz, stats](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* px = nd.parents[0]->value.data<T>();
            const T* pgamma = nd.parents[1]->value.data<T>();
            if (nd.parents[0]->requires_grad) {
                T* dx = nd.parents[0]->grad_buffer().data<T>();
#pragma omp parallel for schedule(static)
                for (int64_t bg = 0; bg < B * groups; ++bg) {
                    const int64_t b = bg / groups, gr = bg % groups;
                    const double mean = (*stats)[2 * bg], inv = (*stats)[2 * bg + 1];
                    const T* xbase = px + (b * C + gr * cg) * sp;
                    const T* gbase = g + (b * C + gr * cg) * sp;
                    double sum_gy = 0.0, sum_gyx = 0.0;
                    for (int64_t c = 0; c < cg; ++c) {
                        const double ga = static_cast<double>(pgamma[gr * cg + c]);
                        const T* xr = xbase + c * sp;
                        const T* grow = gbase + c * sp;
                        for (int64_t i = 0; i < sp; ++i) {
                            const double gy = static_cast<double>(grow[i]) * ga;
                            const double xh = (static_cast<double>(xr[i]) - mean) * inv;
                            sum_gy += gy;
                            sum_gyx += gy * xh;
                        }
                    }
                    const double m = static_cast<double>(gsz);
                    T* dxbase = dx + (b * C + gr * cg) * sp;
                    for (int64_t c = 0; c < cg; ++c) {
                        const double ga = static_cast<double>(pgamma[gr * cg + c]);
                        const T* xr = xbase + c * sp;
                        const T* grow = gbase + c * sp;
                        T* dxr = dxbase + c * sp;
                        for (int64_t i = 0; i < sp; ++i) {
                            const double gy = static_cast<double>(grow[i]) * ga;
                            const double xh = (static_cast<double>(xr[i]) - mean) * inv;
                            dxr[i] += static_cast<T>(inv * (gy - sum_gy / m - xh * sum_gyx / m));
                        }
                    }
                }
            }
            if (nd.parents[1]->requires_grad || nd.parents[2]->requires_grad) {
                std::vector<double> dgamma(C, 0.0), dbeta(C, 0.0);
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t bg = b * groups + c / cg;
                        const double mean = (*stats)[2 * bg], inv = (*stats)[2 * bg + 1];
                        const T* xr = px + (b * C + c) * sp;
                        const T* grow = g + (b * C + c) * sp;
                        double acc_g = 0.0, acc_gx = 0.0;
                        for (int64_t i = 0; i < sp; ++i) {
                            const double gv = static_cast<double>(grow[i]);
                            acc_g += gv;
                            acc_gx += gv * (static_cast<double>(xr[i]) - mean) * inv;
                        }
                        dgamma[c] += acc_gx;
                        dbeta[c] += acc_g;
                    }
                if (nd.parents[1]->requires_grad) {
                    T* dg = nd.parents[1]->grad_buffer().data<T>();
                    for (int64_t c = 0; c < C; ++c) dg[c] += static_cast<T>(dgamma[c]);
                }
                if (nd.parents[2]->requires_grad) {
                    T* db = nd.parents[2]->grad_buffer().data<T>();
                    for (int64_t c = 0; c < C; ++c) db[c] += static_cast<T>(dbeta[c]);
                }
            }
        });
    });
}

namespace {

/// direction=false: shuffle [B, r^3 C, X,Y,Z] -> [B, C, rX,rY,rZ]
/// direction=true: the inverse rearrangement.
template <typename T>
void shuffle_kernel(const T* in, T* out, int64_t B, int64_t C, int64_t X, int64_t Y, int64_t Z, int r,
                    bool inverse) {
    const int64_t r3 = static_cast<int64_t>(r) * r * r;
#pragma omp parallel for schedule(static) collapse(2)
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t x = 0; x < X; ++x)
                for (int i = 0; i < r; ++i)
                    for (int64_t y = 0; y < Y; ++y)
                        for (int j = 0; j < r; ++j)
                            for (int64_t z = 0; z < Z; ++z)
                                for (int l = 0; l < r; ++l) {
                                    const int64_t cin = c * r3 + (i * r + j) * r + l;
                                    const int64_t src = (((b * C * r3 + cin) * X + x) * Y + y) * Z + z;
                                    const int64_t dst =
                                        (((b * C + c) * X * r + x * r + i) * Y * r + y * r + j) * Z * r +
                                        z * r + l;
                                    if (inverse) out[src] = in[dst];
                                    else out[dst] = in[src];
                                }
}

}  // namespace

Var pixel_shuffle_3d(const Var& x, int r) {
    const Shape& s = x->shape();
    if (s.size() != 5) throw std::runtime_error("pixel_shuffle_3d: input must be [B,C,X,Y,Z]");
    const int64_t r3 = static_cast<int64_t>(r) * r * r;
    if (r < 1 || s[1] % r3 != 0)
        throw std::runtime_error("pixel_shuffle_3d: channels " + std::to_string(s[1]) +
                                 " not divisible by r^3=" + std::to_string(r3));
    const int64_t B = s[0], C = s[1] / r3, X = s[2], Y = s[3], Z = s[4];
    Tensor out({B, C, X * r, Y * r, Z * r}, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        shuffle_kernel(x->value.data<T>(), out.data<T>(), B, C, X, Y, Z, r, false);
    });
    return make_node(std::move(out), {x}, [B, C, X, Y, Z, r](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            Tensor gp(nd.parents[0]->shape(), nd.dtype());
            shuffle_kernel(nd.grad.data<T>(), gp.data<T>(), B, C, X, Y, Z, r, true);
            nd.parents[0]->grad_buffer().add_(gp);
        });
    });
}

Var pixel_unshuffle_3d(const Var& x, int r) {
    const Shape& s = x->shape();
    if (s.size() != 5) throw std::runtime_error("pixel_unshuffle_3d: input must be [B,C,X,Y,Z]");
    if (r < 1 || s[2] % r || s[3] % r || s[4] % r)
        throw std::runtime_error("pixel_unshuffle_3d: extents not divisible by r");
    const int64_t r3 = static_cast<int64_t>(r) * r * r;
    const int64_t B = s[0], C = s[1], X = s[2] / r, Y = s[3] / r, Z = s[4] / r;
    Tensor out({B, C * r3, X, Y, Z}, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        shuffle_kernel(x->value.data<T>(), out.data<T>(), B, C, X, Y, Z, r, true);
    });
    return make_node(std::move(out), {x}, [B, C, X, Y, Z, r](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            Tensor gp(nd.parents[0]->shape(), nd.dtype());
            shuffle_kernel(nd.grad.data<T>(), gp.data<T>(), B, C, X, Y, Z, r, false);
            nd.parents[0]->grad_buffer().add_(gp);
        });
    });
}

}  // namespace p3d
