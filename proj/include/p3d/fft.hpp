#pragma once

#include <array>
#include <complex>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

/// Half-spectrum complex coefficients of one real 3-D field.
///
/// Coefficients follow the unnormalized forward-DFT convention
/// (u_hat[k] = sum_x u[x] exp(-i 2 pi k.x / N)); the inverse transform divides
/// by the total grid size. Layout is row-major [nx, ny, nz/2+1].
struct SpectralField {
    std::vector<std::complex<double>> coeff;
    int64_t nx = 0, ny = 0, nz = 0;                 // physical grid extents
    std::array<double, 3> domain = {1.0, 1.0, 1.0};  // physical lengths per axis

    int64_t nzc() const { return nz / 2 + 1; }
    int64_t size() const { return nx * ny * nzc(); }
    std::complex<double>& at(int64_t ix, int64_t iy, int64_t iz) {
        return coeff[(ix * ny + iy) * nzc() + iz];
    }
    const std::complex<double>& at(int64_t ix, int64_t iy, int64_t iz) const {
        return coeff[(ix * ny + iy) * nzc() + iz];
    }

    /// Signed integer frequency along a full axis (0 or 1) for index i.
    static int64_t freq_index(int64_t i, int64_t n) { return i <= n / 2 ? i : i - n; }
    /// Physical wavenumber 2*pi*k_int/L for a coefficient index along an axis.
    double wavenumber(int axis, int64_t i) const;

    /// Multiplicity of a half-spectrum coefficient when summing |u_hat|^2 over
    /// the full spectrum (2 except on the self-conjugate z-planes).
    double hermitian_weight(int64_t iz) const {
        return (iz == 0 || (nz % 2 == 0 && iz == nz / 2)) ? 1.0 : 2.0;
    }
};

/// Real-input 3-D FFT of a [X,Y,Z] (or [1,X,Y,Z]) tensor; f32 input is
/// promoted to f64 internally.
SpectralField rfft3(const Tensor& field, std::array<double, 3> domain = {1.0, 1.0, 1.0});

/// Inverse transform back to a real field with the given dtype.
Tensor irfft3(const SpectralField& spec, DType dtype = DType::F64);

}  // namespace p3d
