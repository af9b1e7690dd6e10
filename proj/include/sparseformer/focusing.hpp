#pragma once

#include "sparseformer/layers.hpp"
#include "sparseformer/model_spec.hpp"

#include <array>
#include <random>
#include <vector>

namespace sf {

/// Token region in normalized image coordinates: center (x, y), size (w, h).
struct RoI {
    double x = 0.5;
    double y = 0.5;
    double w = 1.0;
    double h = 1.0;
};

/// x' = x + dx*w, y' = y + dy*h, w' = w*exp(dw), h' = h*exp(dh).
RoI adjust_roi(const RoI& roi, const std::array<double, 4>& delta);

/// Uniform ceil(sqrt(n)) grid, row-major, truncated to the first n cells.
std::vector<RoI> grid_rois(int n);

/// Tensor forms. RoI tensors are [..., 4] laid out as (x, y, w, h).
Tensor rois_to_tensor(const std::vector<RoI>& rois);
std::vector<RoI> tensor_to_rois(const Tensor& t);

/// Differentiable RoI update; rois and deltas share shape [..., 4].
Tensor adjust_rois(const Tensor& rois, const Tensor& deltas);

/// Frequencies max_freq^(k / (count - 1)), k = 0..count-1 (a single term is 1).
std::vector<double> pe_frequencies(int count, double max_freq);

/// Sinusoidal RoI encoding [..., width] = [PE(left) | PE(top) | PE(right) | PE(bottom)],
/// each part interleaving sin(pi f v), cos(pi f v) over width/8 frequencies.
Tensor roi_position_encoding(const Tensor& rois, std::int64_t width, double max_freq);

/// embeddings + roi_position_encoding(rois, d).
Tensor inject_roi_pe(const Tensor& embeddings, const Tensor& rois, double max_freq);

/// Regular sqrt(P) x sqrt(P) offset grid spanning [-0.5, 0.5]^2, y-major: [P, 2].
Tensor sampling_grid_bias(int points);

/// Points [..., P, 2] = center + (embeddings @ offset_w + offset_b) * size.
Tensor generate_sampling_points(const Tensor& embeddings, const Tensor& rois, const Tensor& offset_w,
                                const Tensor& offset_b);

struct FocusingWeights {
    int points = 16;
    double pe_max_freq = 128.0;
    Tensor stem1_w, stem1_b;  // [27, hidden]
    Tensor stem2_w, stem2_b;  // [9*hidden, channels]
    Tensor init_embed;        // [N, d_f]
    Tensor init_center;       // [N, 2]
    Tensor init_log_size;     // [N, 2]
    Tensor offset_w, offset_b;    // [d_f, 2P], [2P]
    Tensor sample_w, sample_b;    // [P*C, d_f]
    EncoderBlockWeights block;    // shared across iterations
    Tensor delta_ln_gamma, delta_ln_beta;
    Tensor delta1_w, delta1_b;    // [d_f, d_f]
    Tensor delta2_w, delta2_b;    // [d_f, 4], zero-initialized
    Tensor final_offset_w, final_offset_b;
    Tensor final_sample_w, final_sample_b;  // [P*C, d_cortex]
    Tensor lift_w, lift_b;                  // [d_f, d_cortex]

    std::int64_t focus_width() const { return init_embed.dim(1); }
    std::int64_t cortex_width() const { return lift_w.dim(1); }
    std::int64_t n_tokens() const { return init_embed.dim(0); }
    std::int64_t stem_channels() const { return stem2_w.dim(1); }
    NamedTensors named(const std::string& prefix = "focus.") const;
    FocusingWeights clone() const;
};

FocusingWeights init_focusing(const SparseFormerSpec& spec, std::mt19937_64& rng);

/// Initial learnable state: embeddings [N, d_f] and RoIs [N, 4].
struct TokenState {
    Tensor embeddings;
    Tensor rois;
};
TokenState init_token_state(const FocusingWeights& w);

/// Replaces the learnable initial state with `n` tokens on a denser grid; each new
/// embedding copies the old token whose initial RoI center is nearest.
void resize_token_state(FocusingWeights& w, int n);

/// Two stride-2 3x3 convolutions with GELU between: [B,H,W,3] -> [B,H/4,W/4,C].
Tensor early_conv(const Tensor& images, const FocusingWeights& w);

/// Bilinear samples at `points` [B,N,P,2] from `feature_map` [B,h,w,C], flattened per
/// token and projected: returns embeddings + flatten(samples) @ proj_w + proj_b.
Tensor sample_and_embed(const Tensor& feature_map, const Tensor& embeddings, const Tensor& points,
                        const Tensor& proj_w, const Tensor& proj_b);

/// RoI deltas [B, N, 4] from the two-layer MLP.
Tensor roi_deltas(const Tensor& embeddings, const FocusingWeights& w);

struct FocusingOutput {
    Tensor tokens;                  // [B, N, d_cortex]
    Tensor feature_map;             // [B, H/4, W/4, C]
    std::vector<Tensor> roi_stages;  // initial RoIs then one entry per iteration, each [B, N, 4]
    Tensor final_points;            // [B, N, P, 2]
};

FocusingOutput focusing_forward(const Tensor& images, const FocusingWeights& w, int iterations);

}  // namespace sf
