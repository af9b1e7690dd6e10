#include "sparseformer/layers.hpp"

#include "sparseformer/ops.hpp"

#include <cmath>

namespace sf {

Tensor init_weight(const Shape& shape, std::mt19937_64& rng, double stddev) {
    return Tensor::randn(shape, rng, stddev);
}

EncoderBlockWeights init_encoder_block(std::int64_t width, int heads, int mlp_ratio, std::mt19937_64& rng) {
    if (heads < 1 || width % heads != 0) {
        throw Error("encoder block width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                    " heads");
    }
    const std::int64_t hidden = width * mlp_ratio;
    EncoderBlockWeights w;
    w.heads = heads;
    w.ln1_gamma = Tensor::ones({width});
    w.ln1_beta = Tensor::zeros({width});
    w.qkv_w = init_weight({width, 3 * width}, rng);
    w.qkv_b = Tensor::zeros({3 * width});
    w.proj_w = init_weight({width, width}, rng);
    w.proj_b = Tensor::zeros({width});
    w.ln2_gamma = Tensor::ones({width});
    w.ln2_beta = Tensor::zeros({width});
    w.fc1_w = init_weight({width, hidden}, rng);
    w.fc1_b = Tensor::zeros({hidden});
    w.fc2_w = init_weight({hidden, width}, rng);
    w.fc2_b = Tensor::zeros({width});
    return w;
}

EncoderBlockWeights EncoderBlockWeights::clone() const {
    EncoderBlockWeights c;
    c.heads = heads;
    c.ln1_gamma = ln1_gamma.clone();
    c.ln1_beta = ln1_beta.clone();
    c.qkv_w = qkv_w.clone();
    c.qkv_b = qkv_b.clone();
    c.proj_w = proj_w.clone();
    c.proj_b = proj_b.clone();
    c.ln2_gamma = ln2_gamma.clone();
    c.ln2_beta = ln2_beta.clone();
    c.fc1_w = fc1_w.clone();
    c.fc1_b = fc1_b.clone();
    c.fc2_w = fc2_w.clone();
    c.fc2_b = fc2_b.clone();
    return c;
}

void EncoderBlockWeights::append_named(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + "ln1.gamma", ln1_gamma);
    out.emplace_back(prefix + "ln1.beta", ln1_beta);
    out.emplace_back(prefix + "attn.qkv.w", qkv_w);
    out.emplace_back(prefix + "attn.qkv.b", qkv_b);
    out.emplace_back(prefix + "attn.proj.w", proj_w);
    out.emplace_back(prefix + "attn.proj.b", proj_b);
    out.emplace_back(prefix + "ln2.gamma", ln2_gamma);
    out.emplace_back(prefix + "ln2.beta", ln2_beta);
    out.emplace_back(prefix + "mlp.fc1.w", fc1_w);
    out.emplace_back(prefix + "mlp.fc1.b", fc1_b);
    out.emplace_back(prefix + "mlp.fc2.w", fc2_w);
    out.emplace_back(prefix + "mlp.fc2.b", fc2_b);
}

void EncoderBlockWeights::validate() const {
    const std::int64_t d = width();
    const std::int64_t h = hidden();
    auto expect = [](const Tensor& t, const Shape& s, const char* what) {
        if (t.shape() != s) {
            throw Error(std::string("encoder block ") + what + " has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(s));
        }
    };
    if (heads < 1 || d % heads != 0) {
        throw Error("encoder block width not divisible by head count");
    }
    expect(ln1_gamma, {d}, "ln1.gamma");
    expect(ln1_beta, {d}, "ln1.beta");
    expect(qkv_w, {d, 3 * d}, "qkv.w");
    expect(qkv_b, {3 * d}, "qkv.b");
    expect(proj_w, {d, d}, "proj.w");
    expect(proj_b, {d}, "proj.b");
    expect(ln2_gamma, {d}, "ln2.gamma");
    expect(ln2_beta, {d}, "ln2.beta");
    expect(fc1_b, {h}, "fc1.b");
    expect(fc2_w, {h, d}, "fc2.w");
    expect(fc2_b, {d}, "fc2.b");
}

Tensor self_attention(const Tensor& x, const EncoderBlockWeights& w, Tensor* attention) {
    if (x.rank() != 3 || x.dim(2) != w.width()) {
        throw Error("self_attention: expected [B, T, " + std::to_string(w.width()) + "], got " + shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0);
    const std::int64_t t = x.dim(1);
    const std::int64_t d = x.dim(2);
    const std::int64_t hd = d / w.heads;
    // [B, T, 3, H, hd] -> [3, B, H, T, hd]
    Tensor qkv = permute(reshape(linear(x, w.qkv_w, w.qkv_b), {b, t, 3, w.heads, hd}), {2, 0, 3, 1, 4});
    Tensor q = select(qkv, 0, 0);
    Tensor k = select(qkv, 0, 1);
    Tensor v = select(qkv, 0, 2);
    Tensor scores = matmul(q, transpose(k, -1, -2)) * (1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor attn = softmax_lastdim(scores);
    if (attention) {
        *attention = attn;
    }
    Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {b, t, d});
    return linear(ctx, w.proj_w, w.proj_b);
}

Tensor encoder_block_forward(const Tensor& x, const EncoderBlockWeights& w, Tensor* attention) {
    Tensor h = x + self_attention(layer_norm(x, w.ln1_gamma, w.ln1_beta), w, attention);
    Tensor ff = linear(gelu(linear(layer_norm(h, w.ln2_gamma, w.ln2_beta), w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b);
    return h + ff;
}

}  // namespace sf
