#include "sparseformer/model.hpp"

#include "sparseformer/ops.hpp"

#include <unordered_set>

namespace sf {

const char* role_name(Role r) {
    switch (r) {
        case Role::focusing:
            return "focusing";
        case Role::tunable:
            return "tunable";
        case Role::frozen:
            return "frozen";
        case Role::teacher:
            return "teacher";
    }
    return "unknown";
}

Role parse_role(const std::string& s) {
    for (Role r : {Role::focusing, Role::tunable, Role::frozen, Role::teacher}) {
        if (s == role_name(r)) {
            return r;
        }
    }
    throw Error("unknown tensor role '" + s + "'");
}

std::vector<RoleTensor> SparseFormer::tensors() const {
    std::vector<RoleTensor> out;
    for (auto& [name, t] : focusing.named()) {
        out.push_back({name, t, Role::focusing});
    }
    out.push_back({"cortex.cls_token", cortex.cls_token, Role::focusing});
    const std::size_t per_block = [&] {
        NamedTensors tmp;
        EncoderBlockWeights{}.append_named("", tmp);
        return tmp.size();
    }();
    NamedTensors blocks = cortex.named_blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const bool tune = static_cast<int>(i / per_block) < cortex.tunable_count;
        out.push_back({blocks[i].first, blocks[i].second, tune ? Role::tunable : Role::frozen});
    }
    for (auto& [name, t] : cortex.named_head()) {
        out.push_back({name, t, Role::frozen});
    }
    return out;
}

SparseFormer SparseFormer::clone() const { return {spec, focusing.clone(), cortex.clone()}; }

SparseFormer build_sparseformer(const SparseFormerSpec& spec_in, const TeacherWeights& teacher, std::mt19937_64& rng) {
    SparseFormerSpec spec = SparseFormerSpec::matching(teacher.spec, spec_in);
    spec.validate();
    SparseFormer m;
    m.spec = spec;
    m.cortex = build_from_teacher(teacher, rng, spec.resolved_truncate(), spec.resolved_tunable());
    m.focusing = init_focusing(spec, rng);
    return m;
}

SparseFormer init_sparseformer(const SparseFormerSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    SparseFormer m;
    m.spec = spec;
    m.cortex = init_cortex(spec, rng);
    m.focusing = init_focusing(spec, rng);
    return m;
}

ParameterGroups parameter_groups(const SparseFormer& model) {
    ParameterGroups g;
    std::unordered_set<TensorImpl*> seen;
    for (auto& rt : model.tensors()) {
        if (!seen.insert(rt.tensor.impl_ptr().get()).second) {
            throw Error("parameter_groups: tensor " + rt.name + " belongs to more than one group");
        }
        switch (rt.role) {
            case Role::focusing:
                g.focusing.emplace_back(rt.name, rt.tensor);
                break;
            case Role::tunable:
                g.tunable.emplace_back(rt.name, rt.tensor);
                break;
            default:
                g.frozen.emplace_back(rt.name, rt.tensor);
                break;
        }
    }
    return g;
}

SparseFormerOutput sparseformer_forward(const Tensor& images, const SparseFormer& model) {
    SparseFormerOutput out;
    out.focus = focusing_forward(images, model.focusing, model.spec.iterations);
    const CortexAssembly& c = model.cortex;
    const std::int64_t b = out.focus.tokens.dim(0);
    Tensor cls = reshape(expand_leading(c.cls_token, b), {b, 1, c.width()});
    Tensor seq = cortex_sequence(concat({cls, out.focus.tokens}, 1), c);
    Tensor head = select(seq, 1, 0);
    out.representation = c.proj_w.defined() ? matmul(head, c.proj_w) : head;
    out.latent = narrow(seq, 1, 1, seq.dim(1) - 1);
    return out;
}

}  // namespace sf
