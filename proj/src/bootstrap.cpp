#include "sparseformer/bootstrap.hpp"

#include "sparseformer/ops.hpp"
#include "sparseformer/optim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace sf {

namespace {

Tensor resized_batch(const Tensor& images, const std::vector<std::int64_t>& idx, int out_size,
                     const BootstrapConfig* cfg, std::mt19937_64* rng) {
    const std::int64_t h = images.dim(1);
    const std::int64_t w = images.dim(2);
    const std::int64_t per_out = static_cast<std::int64_t>(out_size) * out_size * 3;
    Tensor batch = Tensor::zeros({static_cast<std::int64_t>(idx.size()), out_size, out_size, 3}, DType::f32);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        Tensor one = reshape(narrow(images, 0, idx[i], 1), {h, w, 3});
        Tensor out = cfg ? augment(one, out_size, *cfg, *rng)
                         : apply_crop(one, {0.0, 0.0, static_cast<double>(w), static_cast<double>(h), false}, out_size);
        for (std::int64_t k = 0; k < per_out; ++k) {
            batch.set(static_cast<std::int64_t>(i) * per_out + k, out.at(k));
        }
    }
    return batch;
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named) {
        out.push_back(t);
    }
    return out;
}

void set_trainable(const NamedTensors& named, bool flag) {
    for (auto [name, t] : named) {
        t.zero_grad();
        t.set_requires_grad(flag);
    }
}

}  // namespace

const char* objective_name(AlignObjective o) {
    switch (o) {
        case AlignObjective::cosine:
            return "cosine";
        case AlignObjective::cosine_with_cls:
            return "cosine+cls";
        case AlignObjective::kl_distill:
            return "kl";
    }
    return "unknown";
}

AlignObjective parse_objective(const std::string& s) {
    for (auto o : {AlignObjective::cosine, AlignObjective::cosine_with_cls, AlignObjective::kl_distill}) {
        if (s == objective_name(o)) {
            return o;
        }
    }
    throw Error("unknown objective '" + s + "' (expected cosine, cosine+cls or kl)");
}

void BootstrapConfig::validate() const {
    if (epochs < 0 || warmup_epochs < 0 || warmup_epochs > std::max(epochs, 0)) {
        throw Error("bootstrap: warmup epochs must lie in [0, epochs]");
    }
    if (!(base_lr >= 0.0) || !(tunable_lr_multiplier >= 0.0)) {
        throw Error("bootstrap: learning rates must be >= 0");
    }
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) {
        throw Error("bootstrap: flip probability must lie in [0, 1]");
    }
    if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0)) {
        throw Error("bootstrap: crop scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(crop_aspect_min > 0.0 && crop_aspect_min <= crop_aspect_max)) {
        throw Error("bootstrap: crop aspect range must satisfy 0 < min <= max");
    }
    if (!(grad_clip >= 0.0)) {
        throw Error("bootstrap: gradient clip must be >= 0");
    }
    if (batch_size < 1) {
        throw Error("bootstrap: batch size must be >= 1");
    }
    if (!(kl_temperature > 0.0)) {
        throw Error("bootstrap: KL temperature must be > 0");
    }
}

CropParams sample_crop(int src_h, int src_w, const BootstrapConfig& cfg, std::mt19937_64& rng) {
    if (src_h < 2 || src_w < 2) {
        throw Error("augment: source image " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                    " is degenerate");
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double src_area = static_cast<double>(src_h) * src_w;
    const double area = src_area * (cfg.crop_scale_min + (cfg.crop_scale_max - cfg.crop_scale_min) * unit(rng));
    // width = sqrt(area * r) <= W and height = sqrt(area / r) <= H bound the aspect ratio r.
    double lo = std::max(cfg.crop_aspect_min, area / (static_cast<double>(src_h) * src_h));
    double hi = std::min(cfg.crop_aspect_max, static_cast<double>(src_w) * src_w / area);
    if (lo > hi) {
        lo = hi = std::clamp(static_cast<double>(src_w) / src_h, cfg.crop_aspect_min, cfg.crop_aspect_max);
    }
    const double r = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * unit(rng));
    CropParams c;
    c.width = std::min(std::sqrt(area * r), static_cast<double>(src_w));
    c.height = std::min(std::sqrt(area / r), static_cast<double>(src_h));
    c.x0 = (src_w - c.width) * unit(rng);
    c.y0 = (src_h - c.height) * unit(rng);
    c.flip = unit(rng) < cfg.flip_prob;
    return c;
}

Tensor apply_crop(const Tensor& image, const CropParams& crop, int out_size) {
    if (image.rank() != 3 || image.dim(2) != 3) {
        throw Error("augment: expected image [H, W, 3], got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.dim(0);
    const std::int64_t w = image.dim(1);
    if (h < 1 || w < 1 || out_size < 1) {
        throw Error("augment: empty image or output size");
    }
    Tensor out = Tensor::zeros({out_size, out_size, 3}, image.dtype());
    auto texel = [&](std::int64_t y, std::int64_t x, int c) { return image.at((y * w + x) * 3 + c); };
    for (int oy = 0; oy < out_size; ++oy) {
        const double sy = std::clamp(crop.y0 + (oy + 0.5) * crop.height / out_size - 0.5, 0.0, h - 1.0);
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(sy), h - 1);
        const std::int64_t y1 = std::min<std::int64_t>(y0 + 1, h - 1);
        const double fy = sy - y0;
        for (int ox = 0; ox < out_size; ++ox) {
            const double sx = std::clamp(crop.x0 + (ox + 0.5) * crop.width / out_size - 0.5, 0.0, w - 1.0);
            const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(sx), w - 1);
            const std::int64_t x1 = std::min<std::int64_t>(x0 + 1, w - 1);
            const double fx = sx - x0;
            const int dst_x = crop.flip ? out_size - 1 - ox : ox;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - fy) * ((1 - fx) * texel(y0, x0, c) + fx * texel(y0, x1, c)) +
                                 fy * ((1 - fx) * texel(y1, x0, c) + fx * texel(y1, x1, c));
                out.set((static_cast<std::int64_t>(oy) * out_size + dst_x) * 3 + c, v);
            }
        }
    }
    return out;
}

Tensor augment(const Tensor& image, int out_size, const BootstrapConfig& cfg, std::mt19937_64& rng) {
    if (image.rank() != 3) {
        throw Error("augment: expected image [H, W, 3], got " + shape_str(image.shape()));
    }
    CropParams c = sample_crop(static_cast<int>(image.dim(0)), static_cast<int>(image.dim(1)), cfg, rng);
    return apply_crop(image, c, out_size);
}

Tensor cosine_align_loss(const Tensor& student, const Tensor& target_in) {
    if (student.shape() != target_in.shape() || student.rank() < 1) {
        throw Error("cosine_align_loss: shapes " + shape_str(student.shape()) + " and " +
                    shape_str(target_in.shape()) + " differ");
    }
    const Tensor target = target_in.detach();
    const int last = student.rank() - 1;
    Tensor ss = sum(square(student), last);
    Tensor tt = sum(square(target), last);
    for (std::int64_t i = 0; i < ss.numel(); ++i) {
        if (ss.at(i) < 1e-24 || tt.at(i) < 1e-24) {
            throw Error("cosine_align_loss: zero-norm vector in row " + std::to_string(i));
        }
    }
    Tensor cos = sum(student * target, last) / sqrt(ss * tt);
    return mean(add_scalar(neg(cos), 1.0));
}

Tensor kl_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature) {
    if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
        throw Error("kl_distill_loss: expected matching [B, L] logits");
    }
    if (!(temperature > 0.0)) {
        throw Error("kl_distill_loss: temperature must be > 0");
    }
    Tensor p = softmax_lastdim(teacher_logits.detach() * (1.0 / temperature)).detach();
    return mean(neg(sum(p * log_softmax_lastdim(student_logits), 1)));
}

BootstrapResult bootstrap_run(const TeacherWeights& teacher, SparseFormer& model, const ImageSet& data,
                              const BootstrapConfig& cfg) {
    cfg.validate();
    if (data.size() == 0) {
        throw Error("bootstrap: dataset is empty");
    }
    if (cfg.objective == AlignObjective::cosine_with_cls && data.labels.size() != static_cast<std::size_t>(data.size())) {
        throw Error("bootstrap: the cosine+cls objective needs one label per image");
    }
    const int res = model.spec.image_size;
    if (teacher.spec.image_size != res) {
        throw Error("bootstrap: teacher resolution " + std::to_string(teacher.spec.image_size) +
                    " differs from model resolution " + std::to_string(res));
    }
    ParameterGroups groups = parameter_groups(model);
    set_trainable(groups.focusing, true);
    set_trainable(groups.tunable, true);
    AdamW opt({{"focusing", tensors_of(groups.focusing), 1.0},
               {"tunable", tensors_of(groups.tunable), cfg.tunable_lr_multiplier}});

    const std::int64_t n = data.size();
    const std::int64_t steps_per_epoch = std::max<std::int64_t>(1, n / cfg.batch_size);
    LrSchedule schedule;
    schedule.base_lr = cfg.base_lr;
    schedule.warmup_epochs = cfg.warmup_epochs;
    schedule.total_epochs = cfg.epochs;
    schedule.steps_per_epoch = steps_per_epoch;

    std::mt19937_64 rng(cfg.seed);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    BootstrapResult result;
    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.set_lr_multiplier("tunable", epoch < cfg.warmup_epochs ? 0.0 : cfg.tunable_lr_multiplier);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_sum = 0.0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
            std::vector<std::int64_t> idx;
            std::vector<int> labels;
            for (std::int64_t j = 0; j < cfg.batch_size && s * cfg.batch_size + j < n; ++j) {
                idx.push_back(order[s * cfg.batch_size + j]);
                if (!data.labels.empty()) {
                    labels.push_back(data.labels[idx.back()]);
                }
            }
            Tensor images = resized_batch(data.images, idx, res, cfg.augment ? &cfg : nullptr, &rng);
            Tensor target;
            Tensor teacher_out;
            {
                NoGradGuard no_grad;
                target = teacher_forward(images, teacher);
                if (cfg.objective == AlignObjective::kl_distill) {
                    teacher_out = linear(target, teacher.head_w, teacher.head_b);
                }
            }
            opt.zero_grad();
            Tensor rep = sparseformer_forward(images, model).representation;
            Tensor loss;
            switch (cfg.objective) {
                case AlignObjective::cosine:
                    loss = cosine_align_loss(rep, target);
                    break;
                case AlignObjective::cosine_with_cls:
                    loss = cosine_align_loss(rep, target) +
                           nll_loss(log_softmax_lastdim(cortex_logits(rep, model.cortex)), labels) * cfg.cls_weight;
                    break;
                case AlignObjective::kl_distill:
                    loss = kl_distill_loss(cortex_logits(rep, model.cortex), teacher_out, cfg.kl_temperature);
                    break;
            }
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw Error("bootstrap: loss diverged at step " + std::to_string(step) + " (seed " +
                            std::to_string(cfg.seed) + ")");
            }
            loss.backward();
            clip_grad_norm(opt, cfg.grad_clip);
            const double lr = lr_at_step(schedule, step);
            opt.step(lr);
            result.steps.push_back({step, epoch, lr, value});
            epoch_sum += value;
            if (cfg.on_step) {
                cfg.on_step(step, lr, value);
            }
        }
        result.epoch_mean_loss.push_back(epoch_sum / static_cast<double>(steps_per_epoch));
    }
    set_trainable(groups.focusing, false);
    set_trainable(groups.tunable, false);
    return result;
}

double evaluate_alignment(const TeacherWeights& teacher, const SparseFormer& model, const Tensor& images,
                          int batch_size) {
    if (!images.defined() || images.dim(0) == 0) {
        throw Error("evaluate_alignment: no images");
    }
    NoGradGuard no_grad;
    const std::int64_t n = images.dim(0);
    double total = 0.0;
    for (std::int64_t start = 0; start < n; start += batch_size) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = start; i < std::min<std::int64_t>(n, start + batch_size); ++i) {
            idx.push_back(i);
        }
        Tensor batch = resized_batch(images, idx, model.spec.image_size, nullptr, nullptr);
        Tensor loss = cosine_align_loss(sparseformer_forward(batch, model).representation,
                                        teacher_forward(batch, teacher));
        total += loss.item() * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(n);
}

BootstrapResult continue_with_more_tokens(const TeacherWeights& teacher, SparseFormer& model, const ImageSet& data,
                                          const ContinueConfig& cont, BootstrapConfig cfg) {
    if (cont.new_tokens <= model.spec.n_tokens) {
        throw Error("continue: new token count " + std::to_string(cont.new_tokens) + " must exceed the current " +
                    std::to_string(model.spec.n_tokens));
    }
    resize_token_state(model.focusing, cont.new_tokens);
    model.spec.n_tokens = cont.new_tokens;
    cfg.epochs = cont.epochs;
    cfg.warmup_epochs = 0;
    cfg.base_lr = cont.base_lr;
    return bootstrap_run(teacher, model, data, cfg);
}

void write_loss_csv(const std::string& path, const BootstrapResult& result) {
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write loss log " + path);
    }
    out << "step,epoch,lr,loss\n" << std::setprecision(17);
    for (const auto& r : result.steps) {
        out << r.step << ',' << r.epoch << ',' << r.lr << ',' << r.loss << '\n';
    }
    if (!out) {
        throw Error("failed while writing loss log " + path);
    }
}

}  // namespace sf
