#pragma once

#include "sparseformer/cortex.hpp"
#include "sparseformer/focusing.hpp"

#include <string>
#include <vector>

namespace sf {

enum class Role { focusing, tunable, frozen, teacher };

const char* role_name(Role r);
Role parse_role(const std::string& s);

struct RoleTensor {
    std::string name;
    Tensor tensor;
    Role role;
};

struct SparseFormer {
    SparseFormerSpec spec;
    FocusingWeights focusing;
    CortexAssembly cortex;

    /// Every tensor with its training role. The [CLS] token trains with the focusing group.
    std::vector<RoleTensor> tensors() const;
    SparseFormer clone() const;
};

/// Random focusing weights on top of a cortex inherited from `teacher`.
SparseFormer build_sparseformer(const SparseFormerSpec& spec, const TeacherWeights& teacher, std::mt19937_64& rng);
/// Fully random model (used for cost accounting and gradient checks).
SparseFormer init_sparseformer(const SparseFormerSpec& spec, std::mt19937_64& rng);

struct ParameterGroups {
    NamedTensors focusing;
    NamedTensors tunable;
    NamedTensors frozen;
};

/// Disjoint partition of the model tensors by role; throws if a tensor appears twice.
ParameterGroups parameter_groups(const SparseFormer& model);

struct SparseFormerOutput {
    Tensor representation;  // [B, output_dim]
    Tensor latent;          // final-LN latent tokens without [CLS]: [B, N, d_cortex]
    FocusingOutput focus;
};

SparseFormerOutput sparseformer_forward(const Tensor& images, const SparseFormer& model);

}  // namespace sf
