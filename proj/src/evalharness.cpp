#include "p3d/evalharness.hpp"

#include <cmath>
#include <fstream>

#include "p3d/fft.hpp"

namespace p3d {

std::vector<Tensor> rollout(const P3DModel& model, const ContextModel* ctx, const Tensor& u0,
                            const Conditioning& cond, const RolloutSpec& spec) {
    const Shape& s = u0.shape();
    if (s.size() != 4) throw std::runtime_error("rollout: u0 must be [C,X,Y,Z]");
    if (spec.steps < 1) throw std::runtime_error("rollout: steps must be >= 1");

    NoGradGuard ng;
    RegionLayout layout;
    if (spec.strategy != RolloutSpec::Strategy::Full) {
        if (spec.crop <= 0) throw std::runtime_error("rollout: crop size required for this strategy");
        layout.domain = {s[1], s[2], s[3]};
        layout.region = {spec.crop, spec.crop, spec.crop};
        layout.token_spacing = model.config().token_spacing();
        layout.validate();
    }

    std::vector<Tensor> states;
    Tensor u = u0.clone();
    Shape batched = s;
    batched.insert(batched.begin(), 1);
    for (int step = 0; step < spec.steps; ++step) {
        Var in = make_leaf(u.reshaped(batched), false);
        Var e = model.embed_conditioning({cond});
        Var out;
        switch (spec.strategy) {
            case RolloutSpec::Strategy::Full:
                out = model.forward_with_embedding(in, e);
                break;
            case RolloutSpec::Strategy::Crops: {
                AssembledForwardOptions opts;
                opts.use_context = false;
                out = assembled_forward(model, nullptr, in, layout, e, opts);
                break;
            }
            case RolloutSpec::Strategy::Context: {
                if (!ctx) throw std::runtime_error("rollout: context strategy requires a context model");
                out = assembled_forward(model, ctx, in, layout, e);
                break;
            }
        }
        Shape flat(out->shape().begin() + 1, out->shape().end());
        u = out->value.reshaped(flat);
        states.push_back(u.clone());
    }
    return states;
}

double nrmse(const Tensor& pred, const Tensor& ref) {
    if (pred.shape() != ref.shape()) throw std::runtime_error("nrmse: shape mismatch");
    const int ndim = pred.ndim();
    const int64_t B = ndim == 5 ? pred.dim(0) : 1;
    const int64_t per = pred.numel() / B;
    double acc = 0.0;
    for (int64_t b = 0; b < B; ++b) {
        double num = 0.0, den = 0.0;
        for (int64_t i = 0; i < per; ++i) {
            const double p = pred.at(b * per + i), r = ref.at(b * per + i);
            num += (p - r) * (p - r);
            den += r * r;
        }
        if (den == 0.0) throw std::runtime_error("nrmse: reference norm is zero");
        acc += std::sqrt(num / den);
    }
    return acc / static_cast<double>(B);
}

Tensor vorticity_fd(const Tensor& velocity, const std::array<double, 3>& spacing, bool periodic) {
    const Shape& s = velocity.shape();
    if (s.size() != 4 || s[0] != 3)
        throw std::runtime_error("vorticity_fd: expected [3,X,Y,Z] velocity");
    const int64_t X = s[1], Y = s[2], Z = s[3];
    const int64_t ext[3] = {X, Y, Z};

    auto vel = [&](int c, int64_t x, int64_t y, int64_t z) {
        return velocity.at(((c * X + x) * Y + y) * Z + z);
    };
    // d vel_c / d axis, second order: central inside (and across periodic
    // wraps), one-sided 3-point at open boundaries.
    auto deriv = [&](int c, int axis, int64_t x, int64_t y, int64_t z) {
        int64_t i[3] = {x, y, z};
        const double h = spacing[axis];
        const int64_t n = ext[axis];
        auto at_off = [&](int64_t off) {
            int64_t j[3] = {i[0], i[1], i[2]};
            j[axis] += off;
            if (periodic) j[axis] = (j[axis] % n + n) % n;
            return vel(c, j[0], j[1], j[2]);
        };
        if (periodic || (i[axis] > 0 && i[axis] < n - 1))
            return (at_off(1) - at_off(-1)) / (2.0 * h);
        if (i[axis] == 0) return (-3.0 * at_off(0) + 4.0 * at_off(1) - at_off(2)) / (2.0 * h);
        return (3.0 * at_off(0) - 4.0 * at_off(-1) + at_off(-2)) / (2.0 * h);
    };

    Tensor w(s, DType::F64);
    double* pw = w.data<double>();
    int64_t idx = 0;
    for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y)
            for (int64_t z = 0; z < Z; ++z, ++idx) {
                const int64_t plane = X * Y * Z;
                pw[0 * plane + idx] = deriv(2, 1, x, y, z) - deriv(1, 2, x, y, z);
                pw[1 * plane + idx] = deriv(0, 2, x, y, z) - deriv(2, 0, x, y, z);
                pw[2 * plane + idx] = deriv(1, 0, x, y, z) - deriv(0, 1, x, y, z);
            }
    return w;
}

EnstrophyGraph enstrophy_graph(const Tensor& vorticity, SpectralWindow window) {
    const Shape& s = vorticity.shape();
    if (s.size() != 4 || s[0] != 3) throw std::runtime_error("enstrophy_graph: expected [3,X,Y,Z]");
    if (s[1] != s[2] || s[2] != s[3]) throw std::runtime_error("enstrophy_graph: grid must be cubic");
    const int64_t N = s[1];
    const int64_t nbins = static_cast<int64_t>(std::floor(std::sqrt(3.0) * (N / 2))) + 2;

    // Separable symmetric Hann taper, zero at both boundaries.
    std::vector<double> win(N, 1.0);
    if (window == SpectralWindow::Hann)
        for (int64_t i = 0; i < N; ++i)
            win[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / static_cast<double>(N - 1)));

    EnstrophyGraph g;
    g.shells.assign(nbins, 0.0);
    const double norm = 1.0 / static_cast<double>(N * N * N);
    for (int c = 0; c < 3; ++c) {
        Tensor comp({N, N, N}, DType::F64);
        double* pc = comp.data<double>();
        const int64_t chan_off = c * N * N * N;
        int64_t idx = 0;
        for (int64_t x = 0; x < N; ++x)
            for (int64_t y = 0; y < N; ++y)
                for (int64_t z = 0; z < N; ++z, ++idx)
                    pc[idx] = vorticity.at(chan_off + idx) * win[x] * win[y] * win[z];
        SpectralField sf = rfft3(comp);
        for (int64_t ix = 0; ix < N; ++ix)
            for (int64_t iy = 0; iy < N; ++iy)
                for (int64_t iz = 0; iz < sf.nzc(); ++iz) {
                    const double fx = static_cast<double>(SpectralField::freq_index(ix, N));
                    const double fy = static_cast<double>(SpectralField::freq_index(iy, N));
                    const double fz = static_cast<double>(iz);
                    const double kmag = std::sqrt(fx * fx + fy * fy + fz * fz);
                    const int64_t bin = static_cast<int64_t>(std::floor(kmag + 0.5));
                    const std::complex<double> v = sf.at(ix, iy, iz) * norm;
                    g.shells[bin] += 0.5 * sf.hermitian_weight(iz) * std::norm(v);
                }
    }
    return g;
}

double enstrophy_l2(const EnstrophyGraph& a, const EnstrophyGraph& b) {
    if (a.shells.size() != b.shells.size())
        throw std::runtime_error("enstrophy_l2: shell bin count mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.shells.size(); ++i) {
        const double d = a.shells[i] - b.shells[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

namespace {

struct MomentAcc {
    double n = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    void add(double v) {
        n += 1.0;
        s1 += v;
        s2 += v * v;
        s3 += v * v * v;
    }
    double mean() const { return s1 / n; }
    double variance() const {
        const double m = mean();
        return s2 / n - m * m;
    }
    double skewness() const {
        const double m = mean();
        const double var = variance();
        if (var < 1e-12) return 0.0;
        const double m3 = s3 / n - 3.0 * m * s2 / n + 2.0 * m * m * m;
        return m3 / std::pow(var, 1.5);
    }
};

}  // namespace

ProfileMoments profile_moments(const std::vector<Tensor>& samples, int flow_axis, int wall_axis) {
    if (samples.empty()) throw std::runtime_error("profile_moments: no samples");
    if (flow_axis < 0 || flow_axis > 2 || wall_axis < 0 || wall_axis > 2)
        throw std::runtime_error("profile_moments: axes must be 0..2");
    const Shape& s = samples[0].shape();
    if (s.size() != 4) throw std::runtime_error("profile_moments: samples must be [C,X,Y,Z]");
    if (flow_axis >= s[0]) throw std::runtime_error("profile_moments: flow channel out of range");
    const int64_t n_wall = s[1 + wall_axis];

    std::vector<MomentAcc> acc(n_wall);
    for (const auto& f : samples) {
        if (f.shape() != s) throw std::runtime_error("profile_moments: ragged sample shapes");
        const int64_t X = s[1], Y = s[2], Z = s[3];
        for (int64_t x = 0; x < X; ++x)
            for (int64_t y = 0; y < Y; ++y)
                for (int64_t z = 0; z < Z; ++z) {
                    const int64_t coord[3] = {x, y, z};
                    acc[coord[wall_axis]].add(f.at(((flow_axis * X + x) * Y + y) * Z + z));
                }
    }
    ProfileMoments out;
    for (const auto& a : acc) {
        out.mean.push_back(a.mean());
        out.variance.push_back(a.variance());
        out.skewness.push_back(a.skewness());
    }
    return out;
}

double profile_l2(const ProfileMoments& a, const ProfileMoments& b, int moment) {
    auto pick = [moment](const ProfileMoments& p) -> const std::vector<double>& {
        switch (moment) {
            case 1: return p.mean;
            case 2: return p.variance;
            case 3: return p.skewness;
            default: throw std::runtime_error("profile_l2: moment must be 1, 2 or 3");
        }
    };
    const auto& va = pick(a);
    const auto& vb = pick(b);
    if (va.size() != vb.size()) throw std::runtime_error("profile_l2: profile length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < va.size(); ++i) acc += (va[i] - vb[i]) * (va[i] - vb[i]);
    return std::sqrt(acc);
}

GlobalMoments global_moments(const std::vector<Tensor>& samples, int flow_axis) {
    if (samples.empty()) throw std::runtime_error("global_moments: no samples");
    MomentAcc a;
    for (const auto& f : samples) {
        const Shape& s = f.shape();
        const int64_t per = s[1] * s[2] * s[3];
        for (int64_t i = 0; i < per; ++i) a.add(f.at(flow_axis * per + i));
    }
    return {a.mean(), a.variance(), a.skewness()};
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "run_id,step,metric,value\n";
    for (const auto& r : rows) f << r.run_id << "," << r.step << "," << r.metric << "," << r.value << "\n";
}

void write_xy_csv(const std::string& path, const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw std::runtime_error("write_xy_csv: length mismatch");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (size_t i = 0; i < x.size(); ++i) f << x[i] << "," << y[i] << "\n";
}

void write_pgm_slice(const std::string& path, const Tensor& field, int64_t channel) {
    const Shape& s = field.shape();
    if (s.size() != 4) throw std::runtime_error("write_pgm_slice: expected [C,X,Y,Z]");
    const int64_t X = s[1], Y = s[2], Z = s[3], z = Z / 2;
    double lo = 1e300, hi = -1e300;
    for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y) {
            const double v = field.at(((channel * X + x) * Y + y) * Z + z);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << "P5\n" << Y << " " << X << "\n255\n";
    for (int64_t x = 0; x < X; ++x)
        for (int64_t y = 0; y < Y; ++y) {
            const double v = field.at(((channel * X + x) * Y + y) * Z + z);
            const unsigned char b = static_cast<unsigned char>(255.0 * (v - lo) / span);
            f.write(reinterpret_cast<const char*>(&b), 1);
        }
}

}  // namespace p3d
