#pragma once

#include "sparseformer/tensor.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace sf {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Weights of one pre-norm transformer encoder block:
/// x += proj(attn(LN1(x))); x += fc2(gelu(fc1(LN2(x)))).
struct EncoderBlockWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor qkv_w, qkv_b;    // [d, 3d], [3d]
    Tensor proj_w, proj_b;  // [d, d], [d]
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_w, fc1_b;    // [d, r*d], [r*d]
    Tensor fc2_w, fc2_b;    // [r*d, d], [d]
    int heads = 1;

    std::int64_t width() const { return qkv_w.dim(0); }
    std::int64_t hidden() const { return fc1_w.dim(1); }

    EncoderBlockWeights clone() const;
    void append_named(const std::string& prefix, NamedTensors& out) const;
    /// Throws unless the shapes describe a single consistent width divisible by `heads`.
    void validate() const;
};

EncoderBlockWeights init_encoder_block(std::int64_t width, int heads, int mlp_ratio, std::mt19937_64& rng);

/// Multi-head self-attention sublayer on [B, T, d] (no residual, no norm).
/// When `attention` is non-null it receives the [B, heads, T, T] attention weights.
Tensor self_attention(const Tensor& x, const EncoderBlockWeights& w, Tensor* attention = nullptr);

Tensor encoder_block_forward(const Tensor& x, const EncoderBlockWeights& w, Tensor* attention = nullptr);

/// N(0, stddev) initialization for weight matrices.
Tensor init_weight(const Shape& shape, std::mt19937_64& rng, double stddev = 0.02);

}  // namespace sf
