#include "sparseformer/vit.hpp"

#include "sparseformer/ops.hpp"
#include "sparseformer/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sf {

namespace {

Tensor match_dtype(const Tensor& t, DType dt) { return t.dtype() == dt ? t : t.to(dt); }

void check_images(const Tensor& images, const TeacherSpec& spec) {
    if (images.rank() != 4 || images.dim(1) != spec.image_size || images.dim(2) != spec.image_size ||
        images.dim(3) != 3) {
        throw Error("teacher: expected images [B," + std::to_string(spec.image_size) + "," +
                    std::to_string(spec.image_size) + ",3], got " + shape_str(images.shape()));
    }
}

}  // namespace

NamedTensors TeacherWeights::named() const {
    NamedTensors out;
    out.emplace_back("teacher.patch.w", patch_w);
    out.emplace_back("teacher.patch.b", patch_b);
    out.emplace_back("teacher.cls_token", cls_token);
    out.emplace_back("teacher.pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].append_named("teacher.blocks." + std::to_string(i) + ".", out);
    }
    out.emplace_back("teacher.norm.gamma", norm_gamma);
    out.emplace_back("teacher.norm.beta", norm_beta);
    if (spec.has_projection) {
        out.emplace_back("teacher.proj.w", proj_w);
    }
    out.emplace_back("teacher.head.w", head_w);
    out.emplace_back("teacher.head.b", head_b);
    return out;
}

TeacherWeights TeacherWeights::clone() const {
    TeacherWeights c;
    c.spec = spec;
    c.patch_w = patch_w.clone();
    c.patch_b = patch_b.clone();
    c.cls_token = cls_token.clone();
    c.pos_embed = pos_embed.clone();
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
    return c;
}

TeacherWeights init_teacher(const TeacherSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    TeacherWeights w;
    w.spec = spec;
    const std::int64_t d = spec.width;
    const std::int64_t patch_dim = static_cast<std::int64_t>(spec.patch_size) * spec.patch_size * 3;
    w.patch_w = init_weight({patch_dim, d}, rng, 1.0 / std::sqrt(static_cast<double>(patch_dim)));
    w.patch_b = Tensor::zeros({d});
    w.cls_token = init_weight({d}, rng);
    w.pos_embed = init_weight({spec.tokens(), d}, rng);
    for (int i = 0; i < spec.depth; ++i) {
        w.blocks.push_back(init_encoder_block(d, spec.heads, spec.mlp_ratio, rng));
    }
    w.norm_gamma = Tensor::ones({d});
    w.norm_beta = Tensor::zeros({d});
    if (spec.has_projection) {
        w.proj_w = init_weight({d, spec.out_dim}, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    }
    w.head_w = init_weight({spec.output_dim(), spec.num_classes}, rng);
    w.head_b = Tensor::zeros({spec.num_classes});
    return w;
}

Tensor teacher_embed(const Tensor& images_in, const TeacherWeights& w) {
    check_images(images_in, w.spec);
    const Tensor images = match_dtype(images_in, w.patch_w.dtype());
    const std::int64_t b = images.dim(0);
    const int p = w.spec.patch_size;
    Tensor patches = reshape(im2col(images, p, p, 0), {b, -1, static_cast<std::int64_t>(p) * p * 3});
    Tensor tokens = linear(patches, w.patch_w, w.patch_b);
    Tensor cls = reshape(expand_leading(w.cls_token, b), {b, 1, w.spec.width});
    return add(concat({cls, tokens}, 1), w.pos_embed);
}

Tensor teacher_prefix(const Tensor& images, const TeacherWeights& w, int n_blocks) {
    if (n_blocks < 0 || n_blocks > static_cast<int>(w.blocks.size())) {
        throw Error("teacher_prefix: block count out of range");
    }
    Tensor x = teacher_embed(images, w);
    for (int i = 0; i < n_blocks; ++i) {
        x = encoder_block_forward(x, w.blocks[i]);
    }
    return x;
}

Tensor teacher_forward(const Tensor& images, const TeacherWeights& w) {
    Tensor x = teacher_prefix(images, w, static_cast<int>(w.blocks.size()));
    Tensor cls = select(layer_norm(x, w.norm_gamma, w.norm_beta), 1, 0);
    return w.spec.has_projection ? matmul(cls, w.proj_w) : cls;
}

Tensor teacher_logits(const Tensor& images, const TeacherWeights& w) {
    return linear(teacher_forward(images, w), w.head_w, w.head_b);
}

InheritedBlocks extract_inherited_blocks(const TeacherWeights& w, int truncate_count) {
    const int depth = static_cast<int>(w.blocks.size());
    if (truncate_count < 0 || truncate_count >= depth) {
        throw Error("extract_inherited_blocks: truncate count " + std::to_string(truncate_count) +
                    " must be in [0, " + std::to_string(depth) + ")");
    }
    InheritedBlocks out;
    out.first_index = truncate_count;
    for (int i = truncate_count; i < depth; ++i) {
        out.blocks.push_back(w.blocks[i].clone());
    }
    out.norm_gamma = w.norm_gamma.clone();
    out.norm_beta = w.norm_beta.clone();
    if (w.proj_w.defined()) {
        out.proj_w = w.proj_w.clone();
    }
    out.head_w = w.head_w.clone();
    out.head_b = w.head_b.clone();
    return out;
}

TeacherTrainResult train_toy_teacher(const ImageSet& train, const TeacherSpec& spec, const TeacherTrainConfig& cfg) {
    spec.validate();
    if (train.size() == 0) {
        throw Error("train_toy_teacher: empty dataset");
    }
    if (train.labels.size() != static_cast<std::size_t>(train.size())) {
        throw Error("train_toy_teacher: dataset needs one label per image");
    }
    std::mt19937_64 rng(cfg.seed);
    TeacherTrainResult result{init_teacher(spec, rng), {}};
    NamedTensors named = result.weights.named();
    std::vector<Tensor> params;
    for (auto& [name, t] : named) {
        t.set_requires_grad(true);
        params.push_back(t);
    }
    AdamW opt({{"teacher", params, 1.0}});
    LrSchedule schedule;
    schedule.base_lr = cfg.lr;
    schedule.steps_per_epoch = 1;
    schedule.total_epochs = std::max(cfg.steps, 1);
    schedule.warmup_epochs = std::min(cfg.warmup_steps, schedule.total_epochs);

    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::int64_t> batch;
        std::vector<int> labels;
        while (static_cast<int>(batch.size()) < cfg.batch_size) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor]);
            labels.push_back(train.labels[order[cursor]]);
            ++cursor;
        }
        opt.zero_grad();
        Tensor logits = teacher_logits(gather_images(train.images, batch), result.weights);
        Tensor loss = nll_loss(log_softmax_lastdim(logits), labels);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            throw Error("train_toy_teacher: loss diverged at step " + std::to_string(step) + " (seed " +
                        std::to_string(cfg.seed) + ")");
        }
        loss.backward();
        opt.step(lr_at_step(schedule, step));
        result.losses.push_back(value);
        if (cfg.on_log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            cfg.on_log(step, value);
        }
    }
    for (auto& [name, t] : named) {
        t.zero_grad();
        t.set_requires_grad(false);
    }
    return result;
}

double teacher_accuracy(const TeacherWeights& w, const ImageSet& data, int batch_size) {
    if (data.size() == 0) {
        throw Error("teacher_accuracy: empty dataset");
    }
    NoGradGuard no_grad;
    std::int64_t correct = 0;
    for (std::int64_t start = 0; start < data.size(); start += batch_size) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < std::min<std::int64_t>(start + batch_size, data.size()); ++i) {
            idx.push_back(i);
        }
        Tensor logits = teacher_logits(gather_images(data.images, idx), w);
        const std::int64_t classes = logits.dim(1);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < classes; ++c) {
                if (logits.at(r * classes + c) > logits.at(r * classes + best)) {
                    best = c;
                }
            }
            correct += best == data.labels[idx[r]] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace sf
