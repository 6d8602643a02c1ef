#pragma once

#include <functional>

#include "p3d/dataset.hpp"
#include "p3d/fft.hpp"

namespace p3d {

struct SpectralGrid {
    int64_t nx = 0, ny = 0, nz = 0;
    std::array<double, 3> domain{1.0, 1.0, 1.0};
    std::vector<double> kx, ky, kz;  // physical wavenumbers; kz covers the half axis
    static SpectralGrid make(std::array<int64_t, 3> res, std::array<double, 3> domain);
    int64_t nmodes() const { return nx * ny * (nz / 2 + 1); }
    int64_t nvox() const { return nx * ny * nz; }
};

/// Semi-linear PDE du/dt = L u + N(u). L is diagonal per Fourier mode
/// (possibly per channel); N is evaluated in physical space.
struct PDESpec {
    std::string family;
    int channels = 1;
    std::map<std::string, double> params;
    std::array<double, 3> domain{1.0, 1.0, 1.0};
    double dt_store = 0.01;
    int substeps = 1;
    int warmup = 0;  // discarded steps, in units of dt_store
    bool dealias = true;
    std::function<std::complex<double>(int ch, double kx, double ky, double kz)> linear;
    /// nullptr for purely linear families.
    std::function<void(const std::vector<Tensor>& u_phys, const std::vector<SpectralField>& u_hat,
                       const SpectralGrid& grid, std::vector<Tensor>& n_out)>
        nonlinear;
    enum class Init { Random3, Random3Clamped, GsBlobs } init = Init::Random3;
    double gs_central_fraction = 0.6;
    std::vector<std::string> channel_names;
};

/// Family registry; draws the varied parameters from their published ranges.
PDESpec make_pde_spec(const std::string& family, Rng& rng);
std::vector<std::string> pde_family_names();

struct SimConfig {
    std::array<int64_t, 3> resolution{32, 32, 32};
    int snapshots = 20;
    double dt_store = 0.0;  // 0: family default
    int substeps = 0;       // 0: family default
    int warmup = -1;        // -1: family default
    uint64_t seed = 0;
    int etdrk_order = 2;    // 2 or 4
};

DatasetContainer simulate(const PDESpec& spec, const SimConfig& cfg);

// ---- initializers ---------------------------------------------------------------
// Every field is normalized to max|u| = 1 afterwards.
Tensor init_fourier(Rng& rng, const SpectralGrid& grid, int cutoff);
Tensor init_grf(Rng& rng, const SpectralGrid& grid, double exponent);
Tensor init_diffused(Rng& rng, const SpectralGrid& grid, double intensity);

struct GsBlobs {
    std::vector<std::array<double, 3>> centers;
    std::vector<double> sigma;
};
GsBlobs sample_gs_blobs(Rng& rng, const std::array<double, 3>& domain, double central_fraction);
/// (c_a, c_b) with c_b = clamped Gaussian bumps and c_a = 1 - c_b.
std::pair<Tensor, Tensor> init_gs_blobs(Rng& rng, const SpectralGrid& grid, double central_fraction);

// ---- exponential integrator ------------------------------------------------------
// phi_j evaluated by the direct formula away from the origin and by 16-point
// unit-circle contour averaging for |z| < 0.5 where the formula cancels.
std::complex<double> phi1(std::complex<double> z);
std::complex<double> phi2(std::complex<double> z);
std::complex<double> phi3(std::complex<double> z);

struct EtdrkCoeffs {
    int order = 2;
    double dt = 0.0;
    // per channel, per half-spectrum mode
    std::vector<std::vector<std::complex<double>>> E, E2, Q, f1, f2, f3;
    std::vector<char> dealias_mask;  // 1 = keep
};

EtdrkCoeffs etdrk_precompute(const PDESpec& spec, const SpectralGrid& grid, double dt, int order);
void etdrk_step(std::vector<SpectralField>& u_hat, const PDESpec& spec, const SpectralGrid& grid,
                const EtdrkCoeffs& coeffs);

/// i*k_axis derivative, returned in physical space.
Tensor spectral_derivative(const SpectralField& u_hat, const SpectralGrid& grid, int axis);

}  // namespace p3d
