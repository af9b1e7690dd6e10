#include "sparseformer/cortex.hpp"

#include "sparseformer/ops.hpp"

namespace sf {

NamedTensors CortexAssembly::named_blocks(const std::string& prefix) const {
    NamedTensors out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].append_named(prefix + "blocks." + std::to_string(first_index + static_cast<int>(i)) + ".", out);
    }
    return out;
}

NamedTensors CortexAssembly::named_head(const std::string& prefix) const {
    NamedTensors out;
    out.emplace_back(prefix + "norm.gamma", norm_gamma);
    out.emplace_back(prefix + "norm.beta", norm_beta);
    if (proj_w.defined()) {
        out.emplace_back(prefix + "proj.w", proj_w);
    }
    out.emplace_back(prefix + "head.w", head_w);
    out.emplace_back(prefix + "head.b", head_b);
    return out;
}

CortexAssembly CortexAssembly::clone() const {
    CortexAssembly c;
    c.first_index = first_index;
    c.tunable_count = tunable_count;
    for (const auto& b : blocks) {
        c.blocks.push_back(b.clone());
    }
    c.norm_gamma = norm_gamma.clone();
    c.norm_beta = norm_beta.clone();
    if (proj_w.defined()) {
        c.proj_w = proj_w.clone();
    }
    c.head_w = head_w.clone();
    c.head_b = head_b.clone();
    c.cls_token = cls_token.clone();
    return c;
}

CortexAssembly build_from_teacher(const TeacherWeights& teacher, std::mt19937_64& rng, int truncate, int tunable) {
    const int depth = static_cast<int>(teacher.blocks.size());
    if (depth < 3) {
        throw Error("build_from_teacher: donor depth " + std::to_string(depth) + " is below 3");
    }
    const int cut = truncate >= 0 ? truncate : depth / 3;
    InheritedBlocks inherited = extract_inherited_blocks(teacher, cut);
    const int kept = static_cast<int>(inherited.blocks.size());
    const int tune = tunable >= 0 ? tunable : depth / 3;
    if (tune > kept) {
        throw Error("build_from_teacher: " + std::to_string(tune) + " tunable blocks requested but only " +
                    std::to_string(kept) + " kept");
    }
    CortexAssembly c;
    c.first_index = inherited.first_index;
    c.tunable_count = tune;
    c.blocks = std::move(inherited.blocks);
    c.norm_gamma = inherited.norm_gamma;
    c.norm_beta = inherited.norm_beta;
    c.proj_w = inherited.proj_w;
    c.head_w = inherited.head_w;
    c.head_b = inherited.head_b;
    c.cls_token = init_weight({teacher.spec.width}, rng).to(teacher.cls_token.dtype());
    return c;
}

CortexAssembly init_cortex(const SparseFormerSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    const std::int64_t d = spec.cortex_width;
    CortexAssembly c;
    c.first_index = spec.resolved_truncate();
    c.tunable_count = spec.resolved_tunable();
    for (int i = 0; i < spec.kept_blocks(); ++i) {
        c.blocks.push_back(init_encoder_block(d, spec.cortex_heads, spec.mlp_ratio, rng));
    }
    c.norm_gamma = Tensor::ones({d});
    c.norm_beta = Tensor::zeros({d});
    if (spec.has_projection) {
        c.proj_w = init_weight({d, spec.out_dim}, rng);
    }
    c.head_w = init_weight({spec.output_dim(), spec.num_classes}, rng);
    c.head_b = Tensor::zeros({spec.num_classes});
    c.cls_token = init_weight({d}, rng);
    return c;
}

Tensor cortex_sequence(const Tensor& sequence, const CortexAssembly& c) {
    if (sequence.rank() != 3 || sequence.dim(2) != c.width()) {
        throw Error("cortex: expected tokens [B, T, " + std::to_string(c.width()) + "], got " +
                    shape_str(sequence.shape()));
    }
    Tensor x = sequence;
    for (const auto& block : c.blocks) {
        x = encoder_block_forward(x, block);
    }
    return layer_norm(x, c.norm_gamma, c.norm_beta);
}

Tensor cortex_encode(const Tensor& sequence, const CortexAssembly& c) {
    Tensor cls = select(cortex_sequence(sequence, c), 1, 0);
    return c.proj_w.defined() ? matmul(cls, c.proj_w) : cls;
}

Tensor cortex_forward(const Tensor& tokens, const CortexAssembly& c) {
    if (tokens.rank() != 3 || tokens.dim(2) != c.width()) {
        throw Error("cortex: expected tokens [B, N, " + std::to_string(c.width()) + "], got " +
                    shape_str(tokens.shape()));
    }
    Tensor cls = reshape(expand_leading(c.cls_token, tokens.dim(0)), {tokens.dim(0), 1, c.width()});
    return cortex_encode(concat({cls, tokens}, 1), c);
}

Tensor cortex_logits(const Tensor& representation, const CortexAssembly& c) {
    return linear(representation, c.head_w, c.head_b);
}

}  // namespace sf
