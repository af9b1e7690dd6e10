#pragma once

#include "sparseformer/tensor.hpp"

#include <vector>

namespace sf {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul_scalar(a, 1.0 / s); }

Tensor neg(const Tensor& a);
inline Tensor operator-(const Tensor& a) { return neg(a); }
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor square(const Tensor& a);
/// Exact (erf-based) GELU.
Tensor gelu(const Tensor& a);

/// Sum of all elements, returned as a 0-d tensor.
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int dim, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int dim, bool keepdim = false);

/// Contiguous reshape; one dimension may be -1.
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor transpose(const Tensor& a, int d0, int d1);
Tensor narrow(const Tensor& a, int dim, std::int64_t start, std::int64_t length);
/// Removes `dim` after picking `index` along it.
Tensor select(const Tensor& a, int dim, std::int64_t index);
Tensor concat(const std::vector<Tensor>& parts, int dim);
/// Repeats `a` (shape S) to shape [n, S...].
Tensor expand_leading(const Tensor& a, std::int64_t n);

/// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] (same leading dims).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Multiply-adds performed by forward matmuls since the last reset (all threads).
std::uint64_t matmul_macs();
void reset_matmul_macs();

/// x @ w + bias, with w: [in, out] and optional bias: [out].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

/// Samples `feature_map` ([H,W,C] or [B,H,W,C]) at normalized (x, y) points
/// ([P,2] or [B,P,2]) with bilinear weights. Texel centers sit at (i + 0.5) / size;
/// coordinates outside the map are clamped to the border texels.
Tensor bilinear_sample(const Tensor& feature_map, const Tensor& points);

/// Patch extraction for convolutions over NHWC input [B,H,W,C]. Output
/// [B,Ho,Wo,k*k*C] with (ky, kx, c) ordering inside each patch; zero padding.
Tensor im2col(const Tensor& x, int kernel, int stride, int pad);
/// NHWC convolution; weight [k*k*Cin, Cout], bias [Cout].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel, int stride, int pad);

/// Mean negative log-likelihood over rows whose target != ignore_index.
/// log_probs: [M, L]. Returns 0 (with zero gradient) when every row is ignored.
Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& targets, int ignore_index = -100);

/// Values-only helpers (no graph).
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace sf
