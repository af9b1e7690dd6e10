#pragma once

#include "json.hpp"

#include <string>

namespace sf {

/// Plain ViT teacher hyperparameters.
struct TeacherSpec {
    int image_size = 32;
    int patch_size = 8;
    int width = 64;
    int depth = 6;
    int heads = 4;
    int mlp_ratio = 4;
    int num_classes = 4;
    /// CLIP-style output projection width -> out_dim applied after the final LN.
    bool has_projection = false;
    int out_dim = 0;

    int grid() const { return image_size / patch_size; }
    /// Patch tokens plus [CLS].
    int tokens() const { return grid() * grid() + 1; }
    int output_dim() const { return has_projection ? out_dim : width; }
    void validate() const;
};

/// SparseFormer architecture: focusing transformer plus inherited cortex.
struct SparseFormerSpec {
    std::string name = "custom";
    int image_size = 224;

    int cortex_width = 768;
    int cortex_heads = 12;
    /// Depth of the donor teacher; the cortex keeps depth - truncate blocks.
    int teacher_depth = 12;
    int mlp_ratio = 4;
    /// Leading donor blocks discarded; -1 resolves to floor(depth / 3).
    int truncate = -1;
    /// Leading kept blocks that are trained; -1 resolves to floor(depth / 3).
    int tunable = -1;
    int num_classes = 1000;
    bool has_projection = false;
    int out_dim = 0;

    int focus_width = 384;
    int focus_heads = 6;
    int n_tokens = 49;
    int points = 16;
    int stem_channels = 64;
    int stem_hidden = 32;
    int iterations = 4;
    double pe_max_freq = 128.0;

    int resolved_truncate() const { return truncate >= 0 ? truncate : teacher_depth / 3; }
    int resolved_tunable() const { return tunable >= 0 ? tunable : teacher_depth / 3; }
    int kept_blocks() const { return teacher_depth - resolved_truncate(); }
    int output_dim() const { return has_projection ? out_dim : cortex_width; }
    void validate() const;

    /// Architecture matching a donor teacher, with the remaining fields taken from `base`.
    static SparseFormerSpec matching(const TeacherSpec& teacher, SparseFormerSpec base);
};

/// Named presets: "sf-b", "sf-l", "tiny" (desk-scale toy) and "gradcheck".
SparseFormerSpec preset_spec(const std::string& name);
/// Teacher preset paired with "tiny".
TeacherSpec tiny_teacher_spec();

void to_json(nlohmann::json& j, const TeacherSpec& s);
void from_json(const nlohmann::json& j, TeacherSpec& s);
void to_json(nlohmann::json& j, const SparseFormerSpec& s);
void from_json(const nlohmann::json& j, SparseFormerSpec& s);

}  // namespace sf
