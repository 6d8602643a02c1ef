#include <cmath>
#include <vector>

#include "p3d/ops.hpp"

namespace p3d {

namespace {

template <typename Fn>
void dispatch(DType dt, Fn&& fn) {
    if (dt == DType::F32) fn(float{});
    else fn(double{});
}

// All matmul kernels accumulate dot products in double and write results in a
// fixed order, so outputs are identical for any thread count.

/// C[b,m,n] (+)= sum_k A[b,m,k] * B[b,k,n]
template <typename T>
void bmm_nn(const T* A, const T* B, T* C, int64_t batch, int64_t M, int64_t N, int64_t K, bool acc) {
#pragma omp parallel
    {
        std::vector<double> row(N);
#pragma omp for schedule(static)
        for (int64_t bm = 0; bm < batch * M; ++bm) {
            const int64_t b = bm / M, m = bm % M;
            const T* a = A + (b * M + m) * K;
            const T* bb = B + b * K * N;
            std::fill(row.begin(), row.end(), 0.0);
            for (int64_t k = 0; k < K; ++k) {
                const double av = static_cast<double>(a[k]);
                const T* brow = bb + k * N;
                for (int64_t n = 0; n < N; ++n) row[n] += av * static_cast<double>(brow[n]);
            }
            T* c = C + (b * M + m) * N;
            if (acc)
                for (int64_t n = 0; n < N; ++n) c[n] += static_cast<T>(row[n]);
            else
                for (int64_t n = 0; n < N; ++n) c[n] = static_cast<T>(row[n]);
        }
    }
}

/// C[b,m,n] (+)= sum_k A[b,m,k] * B[b,n,k]
template <typename T>
void bmm_nt(const T* A, const T* B, T* C, int64_t batch, int64_t M, int64_t N, int64_t K, bool acc) {
#pragma omp parallel for schedule(static)
    for (int64_t bm = 0; bm < batch * M; ++bm) {
        const int64_t b = bm / M, m = bm % M;
        const T* a = A + (b * M + m) * K;
        const T* bb = B + b * N * K;
        T* c = C + (b * M + m) * N;
        for (int64_t n = 0; n < N; ++n) {
            const T* brow = bb + n * K;
            double dot = 0.0;
            for (int64_t k = 0; k < K; ++k) dot += static_cast<double>(a[k]) * static_cast<double>(brow[k]);
            if (acc) c[n] += static_cast<T>(dot);
            else c[n] = static_cast<T>(dot);
        }
    }
}

/// C[b,k,n] (+)= sum_m A[b,m,k] * B[b,m,n]
template <typename T>
void bmm_tn(const T* A, const T* B, T* C, int64_t batch, int64_t M, int64_t N, int64_t K, bool acc) {
#pragma omp parallel
    {
        std::vector<double> row(N);
#pragma omp for schedule(static)
        for (int64_t bk = 0; bk < batch * K; ++bk) {
            const int64_t b = bk / K, k = bk % K;
            const T* aa = A + b * M * K;
            const T* bb = B + b * M * N;
            std::fill(row.begin(), row.end(), 0.0);
            for (int64_t m = 0; m < M; ++m) {
                const double av = static_cast<double>(aa[m * K + k]);
                const T* brow = bb + m * N;
                for (int64_t n = 0; n < N; ++n) row[n] += av * static_cast<double>(brow[n]);
            }
            T* c = C + (b * K + k) * N;
            if (acc)
                for (int64_t n = 0; n < N; ++n) c[n] += static_cast<T>(row[n]);
            else
                for (int64_t n = 0; n < N; ++n) c[n] = static_cast<T>(row[n]);
        }
    }
}

struct BatchDims {
    int64_t batch, M, K;
};

BatchDims split_batched(const Shape& s, const char* op) {
    if (s.size() < 2) throw std::runtime_error(std::string(op) + ": rank must be >= 2");
    int64_t batch = 1;
    for (size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
    return {batch, s[s.size() - 2], s[s.size() - 1]};
}

void check_leading(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) throw std::runtime_error(std::string(op) + ": rank mismatch");
    for (size_t i = 0; i + 2 < a.size(); ++i)
        if (a[i] != b[i]) throw std::runtime_error(std::string(op) + ": leading dims mismatch");
}

}  // namespace

Var matmul_nn(const Var& a, const Var& b) {
    if (a->dtype() != b->dtype()) throw std::runtime_error("matmul_nn: dtype mismatch");
    check_leading(a->shape(), b->shape(), "matmul_nn");
    const auto da = split_batched(a->shape(), "matmul_nn");
    const auto db = split_batched(b->shape(), "matmul_nn");
    if (da.K != db.M) throw std::runtime_error("matmul_nn: inner dim mismatch");
    Shape out_shape = a->shape();
    out_shape[out_shape.size() - 1] = db.K;
    Tensor out(out_shape, a->dtype());
    dispatch(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        bmm_nn(a->value.data<T>(), b->value.data<T>(), out.data<T>(), da.batch, da.M, db.K, da.K, false);
    });
    const int64_t batch = da.batch, M = da.M, K = da.K, N = db.K;
    return make_node(std::move(out), {a, b}, [batch, M, K, N](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            if (nd.parents[0]->requires_grad)
                bmm_nt(g, nd.parents[1]->value.data<T>(), nd.parents[0]->grad_buffer().data<T>(),
                       batch, M, K, N, true);
            if (nd.parents[1]->requires_grad)
                bmm_tn(nd.parents[0]->value.data<T>(), g, nd.parents[1]->grad_buffer().data<T>(),
                       batch, M, N, K, true);
        });
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->dtype() != b->dtype()) throw std::runtime_error("matmul_nt: dtype mismatch");
    check_leading(a->shape(), b->shape(), "matmul_nt");
    const auto da = split_batched(a->shape(), "matmul_nt");
    const auto db = split_batched(b->shape(), "matmul_nt");
    if (da.K != db.K) throw std::runtime_error("matmul_nt: inner dim mismatch");
    Shape out_shape = a->shape();
    out_shape[out_shape.size() - 1] = db.M;
    Tensor out(out_shape, a->dtype());
    dispatch(a->dtype(), [&](auto tag) {
        using T = decltype(tag);
        bmm_nt(a->value.data<T>(), b->value.data<T>(), out.data<T>(), da.batch, da.M, db.M, da.K, false);
    });
    const int64_t batch = da.batch, M = da.M, K = da.K, N = db.M;
    return make_node(std::move(out), {a, b}, [batch, M, K, N](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            if (nd.parents[0]->requires_grad)
                bmm_nn(g, nd.parents[1]->value.data<T>(), nd.parents[0]->grad_buffer().data<T>(),
                       batch, M, K, N, true);
            if (nd.parents[1]->requires_grad)
                bmm_tn(g, nd.parents[0]->value.data<T>(), nd.parents[1]->grad_buffer().data<T>(),
                       batch, M, K, N, true);
        });
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Shape& xs = x->shape();
    const Shape& ws = w->shape();
    if (ws.size() != 2) throw std::runtime_error("linear: weight must be [F,G]");
    if (xs.empty() || xs.back() != ws[0])
        throw std::runtime_error("linear: feature dim mismatch " + shape_str(xs) + " vs " + shape_str(ws));
    if (x->dtype() != w->dtype()) throw std::runtime_error("linear: dtype mismatch");
    const int64_t F = ws[0], G = ws[1];
    const int64_t L = x->value.numel() / F;
    Shape out_shape = xs;
    out_shape.back() = G;
    if (b) {
        if (b->shape() != Shape{G} || b->dtype() != x->dtype())
            throw std::runtime_error("linear: bias must be [G]");
    }
    Tensor out(out_shape, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        bmm_nn(x->value.data<T>(), w->value.data<T>(), out.data<T>(), 1, L, G, F, false);
        if (b) {
            T* po = out.data<T>();
            const T* pb = b->value.data<T>();
            for (int64_t l = 0; l < L; ++l) {
                T* row = po + l * G;
                for (int64_t gi = 0; gi < G; ++gi) row[gi] += pb[gi];
            }
        }
    });
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents), [L, F, G](Node& nd) {
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            if (nd.parents[0]->requires_grad)
                bmm_nt(g, nd.parents[1]->value.data<T>(), nd.parents[0]->grad_buffer().data<T>(),
                       1, L, F, G, true);
            if (nd.parents[1]->requires_grad)
                bmm_tn(nd.parents[0]->value.data<T>(), g, nd.parents[1]->grad_buffer().data<T>(),
                       1, L, G, F, true);
            if (nd.parents.size() > 2 && nd.parents[2]->requires_grad) {
                std::vector<double> acc(G, 0.0);
                for (int64_t l = 0; l < L; ++l) {
                    const T* row = g + l * G;
                    for (int64_t gi = 0; gi < G; ++gi) acc[gi] += static_cast<double>(row[gi]);
                }
                T* db = nd.parents[2]->grad_buffer().data<T>();
                for (int64_t gi = 0; gi < G; ++gi) db[gi] += static_cast<T>(acc[gi]);
            }
        });
    });
}

Var softmax_lastdim(const Var& x) {
    const Shape& s = x->shape();
    if (s.empty()) throw std::runtime_error("softmax: scalar input");
    const int64_t L = s.back();
    const int64_t R = x->value.numel() / L;
    Tensor out(s, x->dtype());
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r) {
            const T* row = px + r * L;
            T* orow = po + r * L;
            double m = static_cast<double>(row[0]);
            for (int64_t i = 1; i < L; ++i) m = std::max(m, static_cast<double>(row[i]));
            double sum = 0.0;
            for (int64_t i = 0; i < L; ++i) {
                const double e = std::exp(static_cast<double>(row[i]) - m);
                orow[i] = static_cast<T>(e);
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (int64_t i = 0; i < L; ++i) orow[i] = static_cast<T>(static_cast<double>(orow[i]) * inv);
        }
    });
    return make_node(std::move(out), {x}, [R, L](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* y = nd.value.data<T>();
            T* dx = nd.parents[0]->grad_buffer().data<T>();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r) {
                const T* grow = g + r * L;
                const T* yrow = y + r * L;
                double dot = 0.0;
                for (int64_t i = 0; i < L; ++i)
                    dot += static_cast<double>(grow[i]) * static_cast<double>(yrow[i]);
                T* dxrow = dx + r * L;
                for (int64_t i = 0; i < L; ++i)
                    dxrow[i] += static_cast<T>(static_cast<double>(yrow[i]) *
                                               (static_cast<double>(grow[i]) - dot));
            }
        });
    });
}

Var layer_norm_lastdim(const Var& x, double eps) {
    const Shape& s = x->shape();
    if (s.empty()) throw std::runtime_error("layer_norm: scalar input");
    const int64_t L = s.back();
    const int64_t R = x->value.numel() / L;
    Tensor out(s, x->dtype());
    auto stats = std::make_shared<std::vector<double>>(2 * R);  // (mean, inv_std) per row
    dispatch(x->dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = x->value.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r) {
            const T* row = px + r * L;
            double mean = 0.0;
            for (int64_t i = 0; i < L; ++i) mean += static_cast<double>(row[i]);
            mean /= static_cast<double>(L);
            double var = 0.0;
            for (int64_t i = 0; i < L; ++i) {
                const double d = static_cast<double>(row[i]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(L);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*stats)[2 * r] = mean;
            (*stats)[2 * r + 1] = inv;
            T* orow = po + r * L;
            for (int64_t i = 0; i < L; ++i)
                orow[i] = static_cast<T>((static_cast<double>(row[i]) - mean) * inv);
        }
    });
    return make_node(std::move(out), {x}, [R, L, stats](Node& nd) {
        if (!nd.parents[0]->requires_grad) return;
        dispatch(nd.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* g = nd.grad.data<T>();
            const T* y = nd.value.data<T>();  // normalized values
            T* dx = nd.parents[0]->grad_buffer().data<T>();
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r) {
                const double inv = (*stats)[2 * r + 1];
                const T* grow = g + r * L;
                const T* yrow = y + r * L;
                double gsum = 0.0, gysum = 0.0;
                for (int64_t i = 0; i < L; ++i) {
                    gsum += static_cast<double>(grow[i]);
                    gysum += static_cast<double>(grow[i]) * static_cast<double>(yrow[i]);
                }
                T* dxrow = dx + r * L;
                const double invL = 1.0 / static_cast<double>(L);
                for (int64_t i = 0; i < L; ++i) {
                    const double gi = static_cast<double>(grow[i]);
                    const double yi = static_cast<double>(yrow[i]);
                    dxrow[i] += static_cast<T>(inv * (gi - invL * gsum - yi * invL * gysum));
                }
            }
        });
    });
}

Var attention(const Var& q, const Var& k, const Var& v, const Var& bias) {
    const Shape& qs = q->shape();
    if (qs.size() < 2) throw std::runtime_error("attention: q rank must be >= 2");
    if (k->shape() != qs || v->shape() != qs)
        throw std::runtime_error("attention: q,k,v shapes must match");
    const int64_t dh = qs.back();
    Var scores = matmul_nt(q, k);
    scores = mul_scalar(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
    if (bias) scores = add_bcast0(scores, bias);
    Var w = softmax_lastdim(scores);
    return matmul_nn(w, v);
}

}  // namespace p3d
