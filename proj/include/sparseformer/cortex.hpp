#pragma once

#include "sparseformer/layers.hpp"
#include "sparseformer/model_spec.hpp"
#include "sparseformer/vit.hpp"

#include <random>
#include <vector>

namespace sf {

/// Inherited encoder blocks run over latent tokens plus a learnable [CLS].
/// blocks[0, tunable_count) are trained, the rest and the output head are frozen.
struct CortexAssembly {
    int first_index = 0;  // donor index of blocks[0]
    int tunable_count = 0;
    std::vector<EncoderBlockWeights> blocks;
    Tensor norm_gamma, norm_beta;
    Tensor proj_w;          // [d, out_dim] for projection-style donors
    Tensor head_w, head_b;  // classifier inherited from the donor
    Tensor cls_token;       // [d]

    std::int64_t width() const { return cls_token.dim(0); }
    std::int64_t output_dim() const { return proj_w.defined() ? proj_w.dim(1) : width(); }
    /// Tensors named "cortex.*"; the [CLS] token is listed separately by the caller.
    NamedTensors named_blocks(const std::string& prefix = "cortex.") const;
    NamedTensors named_head(const std::string& prefix = "cortex.") const;
    CortexAssembly clone() const;
};

/// Drops the leading `truncate` donor blocks (-1: floor(L/3)) and marks the next
/// `tunable` kept blocks (-1: floor(L/3)) as trainable. Requires L >= 3.
CortexAssembly build_from_teacher(const TeacherWeights& teacher, std::mt19937_64& rng, int truncate = -1,
                                  int tunable = -1);

/// Randomly initialized cortex with the shapes described by `spec`.
CortexAssembly init_cortex(const SparseFormerSpec& spec, std::mt19937_64& rng);

/// Every block then the final LN over a token sequence [B, T, d]: returns [B, T, d].
Tensor cortex_sequence(const Tensor& sequence, const CortexAssembly& c);

/// Runs a full token sequence [B, T, d] (row 0 is [CLS]) through every block, the
/// final LN and the projection: returns [B, output_dim].
Tensor cortex_encode(const Tensor& sequence, const CortexAssembly& c);

/// Prepends the learnable [CLS] to latent tokens [B, N, d] and encodes.
Tensor cortex_forward(const Tensor& tokens, const CortexAssembly& c);

Tensor cortex_logits(const Tensor& representation, const CortexAssembly& c);

}  // namespace sf
