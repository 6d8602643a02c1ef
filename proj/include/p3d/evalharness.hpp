#pragma once

#include "p3d/context.hpp"

namespace p3d {

/// How a rollout applies the model per step: whole-domain forward, independent
/// per-crop forwards, or per-crop forwards linked by the context model.
struct RolloutSpec {
    enum class Strategy { Full, Crops, Context } strategy = Strategy::Full;
    int steps = 1;
    int64_t crop = 0;  // crop/region edge for Crops and Context
};

/// Autoregressive rollout from u0 [C,X,Y,Z]; returns `steps` predictions.
std::vector<Tensor> rollout(const P3DModel& model, const ContextModel* ctx, const Tensor& u0,
                            const Conditioning& cond, const RolloutSpec& spec);

/// ||pred - ref||_2 / ||ref||_2 over channels and voxels; for 5-D inputs the
/// per-sample values are averaged over the batch axis.
double nrmse(const Tensor& pred, const Tensor& ref);

/// Curl of a 3-channel velocity field by second-order finite differences;
/// central stencils with periodic wrap, one-sided at open boundaries.
Tensor vorticity_fd(const Tensor& velocity, const std::array<double, 3>& spacing, bool periodic);

/// Shell-binned enstrophy spectrum: E(k) = 1/2 sum_{|k_vec| in [k-1/2,k+1/2)} |w_hat|^2
/// with DFT coefficients normalized by the grid size.
struct EnstrophyGraph {
    std::vector<double> shells;  // value per integer wavenumber bin
};

enum class SpectralWindow { None, Hann };

EnstrophyGraph enstrophy_graph(const Tensor& vorticity, SpectralWindow window);
double enstrophy_l2(const EnstrophyGraph& a, const EnstrophyGraph& b);

/// Per-wall-coordinate mean/variance/skewness of the streamwise velocity,
/// pooled over the two remaining axes and all samples.
struct ProfileMoments {
    std::vector<double> mean, variance, skewness;
};

ProfileMoments profile_moments(const std::vector<Tensor>& samples, int flow_axis, int wall_axis);
double profile_l2(const ProfileMoments& a, const ProfileMoments& b, int moment);

/// Pooled moments of the streamwise channel over all voxels and samples.
struct GlobalMoments {
    double mean = 0.0, variance = 0.0, skewness = 0.0;
};
GlobalMoments global_moments(const std::vector<Tensor>& samples, int flow_axis);

// ---- emitters ------------------------------------------------------------------
struct MetricRow {
    std::string run_id;
    int64_t step;
    std::string metric;
    double value;
};
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
void write_xy_csv(const std::string& path, const std::vector<double>& x, const std::vector<double>& y);
/// Mid-Z slice of one channel as an 8-bit PGM, min-max normalized.
void write_pgm_slice(const std::string& path, const Tensor& field, int64_t channel);

}  // namespace p3d
