#pragma once

#include "sparseformer/model.hpp"
#include "sparseformer/synthetic.hpp"

#include <functional>
#include <random>
#include <vector>

namespace sf {

inline constexpr int kIgnoreLabel = 255;

struct DenseHeadSpec {
    int width = 256;
    int heads = 8;
    int depth = 2;
    int mlp_ratio = 4;
    int num_classes = 150;
    double sigma = 0.5;
};

struct DenseHeadWeights {
    double sigma = 0.5;
    int heads = 8;
    Tensor reduce_w, reduce_b;          // [d_cortex, d]
    std::vector<EncoderBlockWeights> blocks;
    Tensor classifier_w, classifier_b;  // [d, L]
    Tensor query_w, query_b;            // 3x3 conv on the stem map: [9*C, d]
    Tensor bias_w, bias_b;              // predictive bias: [d, 1]

    std::int64_t width() const { return reduce_w.dim(1); }
    std::int64_t num_classes() const { return classifier_w.dim(1); }
    NamedTensors named(const std::string& prefix = "dense.") const;
};

DenseHeadWeights init_dense_head(const DenseHeadSpec& spec, std::int64_t cortex_width, std::int64_t stem_channels,
                                 std::mt19937_64& rng);

struct TokenHeadOutput {
    Tensor logits;  // P_token [B, N, L]
    Tensor keys;    // K_token [B, N, d]
};

/// Reduce, two encoder blocks, classify.
TokenHeadOutput token_logits(const Tensor& tokens, const DenseHeadWeights& w);

/// Gaussian-like bias [B, h*w, N] between the h x w cell centers ((i + 0.5) / size)
/// and token RoIs [B, N, 4]: -((px - x)^2 / w^2 + (py - y)^2 / h^2) / (2 sigma^2).
Tensor geometric_bias(const Tensor& rois, int grid_h, int grid_w, double sigma);

/// Q_dense [B, h*w, d] from the stem map [B, h, w, C].
Tensor dense_query(const Tensor& feature_map, const DenseHeadWeights& w);

/// softmax(Q K^T / sqrt(d) + bias) P_token: [B, HW, L]. `bias` is [B, HW, N] or
/// broadcastable to it. When `attention` is non-null it receives the weights.
Tensor dense_projection(const Tensor& token_logits, const Tensor& keys, const Tensor& queries, const Tensor& bias,
                        Tensor* attention = nullptr);

struct DenseHeadOutput {
    Tensor dense_logits;  // [B, h, w, L]
    Tensor token_logits;  // [B, N, L]
    Tensor attention;     // [B, h*w, N]
};

/// latent: [B, N, d_cortex]; rois: [B, N, 4]; feature_map: [B, h, w, C].
DenseHeadOutput dense_head_forward(const Tensor& latent, const Tensor& rois, const Tensor& feature_map,
                                   const DenseHeadWeights& w);

/// Bilinear resize of [B, h, w, C] by an integer factor (texel-center aligned).
Tensor upsample_bilinear(const Tensor& x, int factor);

/// Upsamples dense logits to the label resolution and takes the mean per-pixel
/// cross-entropy over labels != 255. labels: B*H*W class ids, row-major.
Tensor seg_loss(const Tensor& dense_logits, const std::vector<int>& labels, int height, int width);

/// Argmax of the upsampled logits against labels, ignoring 255.
double pixel_accuracy(const Tensor& dense_logits, const std::vector<int>& labels, int height, int width);

struct SegToyConfig {
    int steps = 300;
    int batch_size = 8;
    int train_images = 256;
    int test_images = 64;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    std::function<void(int, double)> on_step;
};

struct SegToyResult {
    std::vector<double> losses;
    double pixel_accuracy = 0.0;
    double seconds = 0.0;
};

/// Fine-tunes a tiny SparseFormer trunk plus dense head on two-class discs.
SegToyResult run_segmentation_toy(const SegToyConfig& cfg);

}  // namespace sf
