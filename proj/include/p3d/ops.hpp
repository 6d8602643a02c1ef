#pragma once

#include <optional>

#include "p3d/autograd.hpp"

namespace p3d {

enum class PadMode { Zero, Circular };

PadMode pad_mode_from_name(const std::string& s);

// ---- elementwise ----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var gelu(const Var& x);      // tanh approximation
Var silu(const Var& x);
Var relu(const Var& x);

// ---- reductions ------------------------------------------------------------
Var sum_all(const Var& x);   // -> shape [1]
Var mean_all(const Var& x);  // -> shape [1]

// ---- shape ------------------------------------------------------------------
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& axes);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& x, int axis, int64_t start, int64_t len);
Var detach(const Var& x);

// ---- linear algebra ---------------------------------------------------------
/// x[..., F] @ W[F, G] + b[G] (b may be null).
Var linear(const Var& x, const Var& w, const Var& b);
/// a[*, M, K] @ b[*, K, N] -> [*, M, N]; leading dims must match exactly.
Var matmul_nn(const Var& a, const Var& b);
/// a[*, M, K] @ b[*, N, K]^T -> [*, M, N].
Var matmul_nt(const Var& a, const Var& b);

Var softmax_lastdim(const Var& x);
/// Normalizes over the last axis, no affine part.
Var layer_norm_lastdim(const Var& x, double eps = 1e-5);

/// Dense scaled-dot-product attention. q,k,v: [*, T, Dh]; optional additive
/// bias with shape equal to the trailing dims of the score tensor
/// (broadcast over the remaining leading axes). scores = q k^T / sqrt(Dh).
Var attention(const Var& q, const Var& k, const Var& v, const Var& bias = nullptr);

// ---- broadcast helpers -------------------------------------------------------
/// x[N, rest...] + b[rest...]: b tiled over the leading axis group.
Var add_bcast0(const Var& x, const Var& b);
/// x[B,T,D] * (1 + s[B,D]) + t[B,D]
Var modulate_seq(const Var& x, const Var& scale, const Var& shift);
/// x[B,T,D] * g[B,D]
Var gate_seq(const Var& x, const Var& gate);
/// x[B,C,spatial...] * (1 + s[B,C]) + t[B,C]
Var modulate_channels(const Var& x, const Var& scale, const Var& shift);

// ---- table lookup -------------------------------------------------------------
/// rows of table[N, D] gathered by indices (int64 data in an f64/f32 tensor is
/// not allowed; indices are passed as a plain vector). Backward scatter-adds.
Var index_select0(const Var& table, std::vector<int64_t> indices);

// ---- normalization -------------------------------------------------------------
/// GroupNorm over [B,C,spatial...]; gamma/beta have shape [C].
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- convolution ---------------------------------------------------------------
/// 3-D convolution, kernel k odd, padding (k-1)/2, stride 1 or 2.
/// x[B,Cin,X,Y,Z], w[Cout,Cin,k,k,k], b[Cout] (may be null).
Var conv3(const Var& x, const Var& w, const Var& b, int stride, PadMode pad);

/// [B, r^3*C, X,Y,Z] -> [B, C, rX, rY, rZ]; channel c*r^3 + (i*r^2 + j*r + l)
/// at voxel (x,y,z) lands on channel c at (r*x+i, r*y+j, r*z+l).
Var pixel_shuffle_3d(const Var& x, int r);
/// Inverse rearrangement of pixel_shuffle_3d.
Var pixel_unshuffle_3d(const Var& x, int r);

// ---- losses --------------------------------------------------------------------
Var mse_loss(const Var& pred, const Var& target);

}  // namespace p3d
