#include "p3d/fft.hpp"

#include <fftw3.h>

#include <map>
#include <mutex>

namespace p3d {

namespace {

// FFTW plan creation is not thread-safe; creation is serialized and plans are
// cached per grid size. Execution via the new-array interface is re-entrant.
std::mutex g_plan_mutex;

fftw_plan get_plan(int64_t nx, int64_t ny, int64_t nz, bool forward) {
    static std::map<std::tuple<int64_t, int64_t, int64_t, bool>, fftw_plan> cache;
    std::lock_guard<std::mutex> lock(g_plan_mutex);
    auto key = std::make_tuple(nx, ny, nz, forward);
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    std::vector<double> real(nx * ny * nz);
    std::vector<fftw_complex> cplx(nx * ny * (nz / 2 + 1));
    fftw_plan plan;
    if (forward)
        plan = fftw_plan_dft_r2c_3d(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz),
                                    real.data(), cplx.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    else
        plan = fftw_plan_dft_c2r_3d(static_cast<int>(nx), static_cast<int>(ny), static_cast<int>(nz),
                                    cplx.data(), real.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!plan) throw std::runtime_error("fftw plan creation failed");
    cache[key] = plan;
    return plan;
}

}  // namespace

double SpectralField::wavenumber(int axis, int64_t i) const {
    const int64_t n = axis == 0 ? nx : axis == 1 ? ny : nz;
    const int64_t k = axis == 2 ? i : freq_index(i, n);
    return 2.0 * M_PI * static_cast<double>(k) / domain[axis];
}

SpectralField rfft3(const Tensor& field, std::array<double, 3> domain) {
    Shape s = field.shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 3) throw std::runtime_error("rfft3: field must be [X,Y,Z]");
    if (s[0] < 2 || s[1] < 2 || s[2] < 2) throw std::runtime_error("rfft3: extents must be >= 2");

    SpectralField out;
    out.nx = s[0]; out.ny = s[1]; out.nz = s[2];
    out.domain = domain;
    out.coeff.resize(out.size());

    std::vector<double> real(out.nx * out.ny * out.nz);
    for (int64_t i = 0; i < static_cast<int64_t>(real.size()); ++i) real[i] = field.at(i);

    fftw_plan plan = get_plan(out.nx, out.ny, out.nz, true);
    fftw_execute_dft_r2c(plan, real.data(), reinterpret_cast<fftw_complex*>(out.coeff.data()));
    return out;
}

Tensor irfft3(const SpectralField& spec, DType dtype) {
    // c2r destroys its input; work on a copy.
    std::vector<std::complex<double>> tmp = spec.coeff;
    std::vector<double> real(spec.nx * spec.ny * spec.nz);
    fftw_plan plan = get_plan(spec.nx, spec.ny, spec.nz, false);
    fftw_execute_dft_c2r(plan, reinterpret_cast<fftw_complex*>(tmp.data()), real.data());

    const double norm = 1.0 / static_cast<double>(spec.nx * spec.ny * spec.nz);
    Tensor out({spec.nx, spec.ny, spec.nz}, dtype);
    for (int64_t i = 0; i < out.numel(); ++i) out.set(i, real[i] * norm);
    return out;
}

}  // namespace p3d
