#pragma once

#include "sparseformer/layers.hpp"
#include "sparseformer/model_spec.hpp"
#include "sparseformer/synthetic.hpp"

#include <functional>
#include <random>
#include <vector>

namespace sf {

/// Reference ViT: patch embedding, learned positional embedding, pre-norm
/// blocks, final LN, optional CLIP-style projection and a linear classifier.
struct TeacherWeights {
    TeacherSpec spec;
    Tensor patch_w, patch_b;  // [p*p*3, d], [d]
    Tensor cls_token;         // [d]
    Tensor pos_embed;         // [tokens, d]
    std::vector<EncoderBlockWeights> blocks;
    Tensor norm_gamma, norm_beta;
    Tensor proj_w;            // [d, out_dim] when spec.has_projection
    Tensor head_w, head_b;    // [output_dim, classes], [classes]

    NamedTensors named() const;
    TeacherWeights clone() const;
};

TeacherWeights init_teacher(const TeacherSpec& spec, std::mt19937_64& rng);

/// Patch + [CLS] tokens with positional embedding added: [B, tokens, d].
Tensor teacher_embed(const Tensor& images, const TeacherWeights& w);
/// Token sequence after the first `n_blocks` encoder blocks.
Tensor teacher_prefix(const Tensor& images, const TeacherWeights& w, int n_blocks);
/// Final [CLS] embedding (after the final LN, and after the projection when present): [B, output_dim].
Tensor teacher_forward(const Tensor& images, const TeacherWeights& w);
Tensor teacher_logits(const Tensor& images, const TeacherWeights& w);

/// Blocks truncate..L-1 of a donor plus its output head, deep-copied.
struct InheritedBlocks {
    int first_index = 0;
    std::vector<EncoderBlockWeights> blocks;
    Tensor norm_gamma, norm_beta;
    Tensor proj_w;
    Tensor head_w, head_b;
};

InheritedBlocks extract_inherited_blocks(const TeacherWeights& w, int truncate_count);

struct TeacherTrainConfig {
    int steps = 1500;
    int batch_size = 32;
    double lr = 1e-3;
    int warmup_steps = 100;
    std::uint64_t seed = 0;
    /// Called every `log_every` steps with (step, loss).
    int log_every = 100;
    std::function<void(int, double)> on_log;
};

struct TeacherTrainResult {
    TeacherWeights weights;
    std::vector<double> losses;
};

/// Supervised classification training of the teacher on a labeled image set.
TeacherTrainResult train_toy_teacher(const ImageSet& train, const TeacherSpec& spec, const TeacherTrainConfig& cfg);

/// Top-1 accuracy of the teacher classifier.
double teacher_accuracy(const TeacherWeights& w, const ImageSet& data, int batch_size = 64);

}  // namespace sf
