#include "sparseformer/dense_head.hpp"

#include "sparseformer/ops.hpp"
#include "sparseformer/optim.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

namespace sf {

namespace {

Tensor roi_component(const Tensor& rois, int k) {
    const std::int64_t b = rois.dim(0);
    const std::int64_t n = rois.dim(1);
    return reshape(narrow(rois, 2, k, 1), {b, 1, n});
}

void check_labels(const std::vector<int>& labels, std::int64_t expected, std::int64_t classes) {
    if (static_cast<std::int64_t>(labels.size()) != expected) {
        throw Error("seg_loss: expected " + std::to_string(expected) + " labels, got " + std::to_string(labels.size()));
    }
    for (int v : labels) {
        if (v != kIgnoreLabel && (v < 0 || v >= classes)) {
            throw Error("seg_loss: label " + std::to_string(v) + " outside [0, " + std::to_string(classes) +
                        ") and not the ignore index");
        }
    }
}

int upsample_factor(const Tensor& dense_logits, int height, int width) {
    if (dense_logits.rank() != 4) {
        throw Error("seg_loss: expected dense logits [B, h, w, L], got " + shape_str(dense_logits.shape()));
    }
    const std::int64_t h = dense_logits.dim(1);
    const std::int64_t w = dense_logits.dim(2);
    if (height % h != 0 || width % w != 0 || height / h != width / w) {
        throw Error("seg_loss: label size " + std::to_string(height) + "x" + std::to_string(width) +
                    " is not an integer multiple of the dense grid " + std::to_string(h) + "x" + std::to_string(w));
    }
    return static_cast<int>(height / h);
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
    std::vector<Tensor> out;
    for (auto [name, t] : named) {
        t.set_requires_grad(true);
        out.push_back(t);
    }
    return out;
}

}  // namespace

NamedTensors DenseHeadWeights::named(const std::string& prefix) const {
    NamedTensors out = {{prefix + "reduce.w", reduce_w}, {prefix + "reduce.b", reduce_b}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        blocks[i].append_named(prefix + "blocks." + std::to_string(i) + ".", out);
    }
    out.insert(out.end(), {{prefix + "classifier.w", classifier_w},
                           {prefix + "classifier.b", classifier_b},
                           {prefix + "query.w", query_w},
                           {prefix + "query.b", query_b},
                           {prefix + "bias.w", bias_w},
                           {prefix + "bias.b", bias_b}});
    return out;
}

DenseHeadWeights init_dense_head(const DenseHeadSpec& spec, std::int64_t cortex_width, std::int64_t stem_channels,
                                 std::mt19937_64& rng) {
    if (spec.num_classes < 1) {
        throw Error("dense head: need at least one class");
    }
    if (spec.width < 1 || spec.heads < 1 || spec.width % spec.heads != 0 || spec.depth < 0) {
        throw Error("dense head: width must be a positive multiple of heads");
    }
    if (!(spec.sigma > 0.0)) {
        throw Error("dense head: sigma must be > 0");
    }
    DenseHeadWeights w;
    w.sigma = spec.sigma;
    w.heads = spec.heads;
    w.reduce_w = init_weight({cortex_width, spec.width}, rng);
    w.reduce_b = Tensor::zeros({spec.width});
    for (int i = 0; i < spec.depth; ++i) {
        w.blocks.push_back(init_encoder_block(spec.width, spec.heads, spec.mlp_ratio, rng));
    }
    w.classifier_w = init_weight({spec.width, spec.num_classes}, rng);
    w.classifier_b = Tensor::zeros({spec.num_classes});
    w.query_w = init_weight({9 * stem_channels, spec.width}, rng, std::sqrt(1.0 / (9.0 * stem_channels)));
    w.query_b = Tensor::zeros({spec.width});
    w.bias_w = init_weight({spec.width, 1}, rng);
    w.bias_b = Tensor::zeros({1});
    return w;
}

TokenHeadOutput token_logits(const Tensor& tokens, const DenseHeadWeights& w) {
    if (tokens.rank() != 3 || tokens.dim(2) != w.reduce_w.dim(0)) {
        throw Error("dense head: expected tokens [B, N, " + std::to_string(w.reduce_w.dim(0)) + "], got " +
                    shape_str(tokens.shape()));
    }
    Tensor x = linear(tokens, w.reduce_w, w.reduce_b);
    for (const auto& block : w.blocks) {
        x = encoder_block_forward(x, block);
    }
    return {linear(x, w.classifier_w, w.classifier_b), x};
}

Tensor geometric_bias(const Tensor& rois, int grid_h, int grid_w, double sigma) {
    if (rois.rank() != 3 || rois.dim(2) != 4) {
        throw Error("geometric_bias: expected RoIs [B, N, 4], got " + shape_str(rois.shape()));
    }
    if (grid_h < 1 || grid_w < 1 || !(sigma > 0.0)) {
        throw Error("geometric_bias: grid must be non-empty and sigma > 0");
    }
    for (std::int64_t i = 0; i < rois.numel(); i += 4) {
        if (!(rois.at(i + 2) > 0.0) || !(rois.at(i + 3) > 0.0)) {
            throw Error("geometric_bias: RoI " + std::to_string(i / 4) + " has non-positive size");
        }
    }
    const std::int64_t cells = static_cast<std::int64_t>(grid_h) * grid_w;
    Tensor px = Tensor::zeros({cells, 1}, rois.dtype());
    Tensor py = Tensor::zeros({cells, 1}, rois.dtype());
    for (int i = 0; i < grid_h; ++i) {
        for (int j = 0; j < grid_w; ++j) {
            px.set(static_cast<std::size_t>(i) * grid_w + j, (j + 0.5) / grid_w);
            py.set(static_cast<std::size_t>(i) * grid_w + j, (i + 0.5) / grid_h);
        }
    }
    Tensor dx = (px - roi_component(rois, 0)) / roi_component(rois, 2);
    Tensor dy = (py - roi_component(rois, 1)) / roi_component(rois, 3);
    return (square(dx) + square(dy)) * (-1.0 / (2.0 * sigma * sigma));
}

Tensor dense_query(const Tensor& feature_map, const DenseHeadWeights& w) {
    if (feature_map.rank() != 4 || 9 * feature_map.dim(3) != w.query_w.dim(0)) {
        throw Error("dense head: expected stem map [B, h, w, " + std::to_string(w.query_w.dim(0) / 9) + "], got " +
                    shape_str(feature_map.shape()));
    }
    Tensor q = conv2d(feature_map, w.query_w, w.query_b, 3, 1, 1);
    return reshape(q, {q.dim(0), q.dim(1) * q.dim(2), q.dim(3)});
}

Tensor dense_projection(const Tensor& token_logits, const Tensor& keys, const Tensor& queries, const Tensor& bias,
                        Tensor* attention) {
    if (keys.rank() != 3 || queries.rank() != 3 || token_logits.rank() != 3) {
        throw Error("dense_projection: expected batched [B, *, *] inputs");
    }
    if (queries.dim(2) != keys.dim(2)) {
        throw Error("dense_projection: query width " + std::to_string(queries.dim(2)) + " differs from key width " +
                    std::to_string(keys.dim(2)));
    }
    if (token_logits.dim(1) != keys.dim(1) || token_logits.dim(0) != keys.dim(0) || queries.dim(0) != keys.dim(0)) {
        throw Error("dense_projection: token logits " + shape_str(token_logits.shape()) + " and keys " +
                    shape_str(keys.shape()) + " disagree");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(keys.dim(2)));
    Tensor scores = matmul(queries, transpose(keys, 1, 2)) * scale;
    if (bias.defined()) {
        scores = scores + bias;
    }
    Tensor attn = softmax_lastdim(scores);
    if (attention) {
        *attention = attn;
    }
    return matmul(attn, token_logits);
}

DenseHeadOutput dense_head_forward(const Tensor& latent, const Tensor& rois, const Tensor& feature_map,
                                   const DenseHeadWeights& w) {
    TokenHeadOutput t = token_logits(latent, w);
    Tensor q = dense_query(feature_map, w);
    const int h = static_cast<int>(feature_map.dim(1));
    const int wd = static_cast<int>(feature_map.dim(2));
    Tensor predictive = transpose(linear(t.keys, w.bias_w, w.bias_b), 1, 2);
    Tensor bias = geometric_bias(rois, h, wd, w.sigma) + predictive;
    DenseHeadOutput out;
    Tensor dense = dense_projection(t.logits, t.keys, q, bias, &out.attention);
    out.dense_logits = reshape(dense, {dense.dim(0), h, wd, dense.dim(2)});
    out.token_logits = t.logits;
    return out;
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
    if (x.rank() != 4 || factor < 1) {
        throw Error("upsample_bilinear: expected [B, h, w, C] and factor >= 1");
    }
    if (factor == 1) {
        return x;
    }
    const std::int64_t oh = x.dim(1) * factor;
    const std::int64_t ow = x.dim(2) * factor;
    Tensor points = Tensor::zeros({oh * ow, 2}, x.dtype());
    for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
            points.set(static_cast<std::size_t>((i * ow + j) * 2), (j + 0.5) / ow);
            points.set(static_cast<std::size_t>((i * ow + j) * 2 + 1), (i + 0.5) / oh);
        }
    }
    Tensor sampled = bilinear_sample(x, expand_leading(points, x.dim(0)));
    return reshape(sampled, {x.dim(0), oh, ow, x.dim(3)});
}

Tensor seg_loss(const Tensor& dense_logits, const std::vector<int>& labels, int height, int width) {
    const int factor = upsample_factor(dense_logits, height, width);
    const std::int64_t classes = dense_logits.dim(3);
    check_labels(labels, dense_logits.dim(0) * height * width, classes);
    Tensor up = reshape(upsample_bilinear(dense_logits, factor), {-1, classes});
    return nll_loss(log_softmax_lastdim(up), labels, kIgnoreLabel);
}

double pixel_accuracy(const Tensor& dense_logits, const std::vector<int>& labels, int height, int width) {
    NoGradGuard no_grad;
    const int factor = upsample_factor(dense_logits, height, width);
    const std::int64_t classes = dense_logits.dim(3);
    check_labels(labels, dense_logits.dim(0) * height * width, classes);
    Tensor up = upsample_bilinear(dense_logits, factor);
    std::int64_t correct = 0;
    std::int64_t counted = 0;
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == kIgnoreLabel) {
            continue;
        }
        std::int64_t best = 0;
        for (std::int64_t c = 1; c < classes; ++c) {
            if (up.at(p * classes + c) > up.at(p * classes + best)) {
                best = c;
            }
        }
        correct += best == labels[p] ? 1 : 0;
        ++counted;
    }
    return counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
}

SegToyResult run_segmentation_toy(const SegToyConfig& cfg) {
    if (cfg.steps < 0 || cfg.batch_size < 1 || cfg.train_images < 1 || cfg.test_images < 1) {
        throw Error("segment-toy: steps >= 0, batch >= 1 and non-empty image sets required");
    }
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(cfg.seed);
    SparseFormerSpec spec = preset_spec("tiny");
    SparseFormer model = init_sparseformer(spec, rng);
    DenseHeadSpec head_spec;
    head_spec.width = 64;
    head_spec.heads = 4;
    head_spec.num_classes = 2;
    DenseHeadWeights head = init_dense_head(head_spec, model.cortex.width(), model.focusing.stem_channels(), rng);

    SegmentationSet train = make_disc_segmentation(cfg.train_images, spec.image_size, cfg.seed + 1);
    SegmentationSet test = make_disc_segmentation(cfg.test_images, spec.image_size, cfg.seed + 2);
    const std::int64_t pixels = static_cast<std::int64_t>(train.height) * train.width;

    std::vector<Tensor> params;
    for (const auto& rt : model.tensors()) {
        params.push_back(rt.tensor);
        params.back().set_requires_grad(true);
    }
    for (auto& t : tensors_of(head.named())) {
        params.push_back(t);
    }
    AdamW opt({{"all", params, 1.0}});
    LrSchedule schedule;
    schedule.base_lr = cfg.lr;
    schedule.warmup_epochs = 0;
    schedule.total_epochs = 1;
    schedule.steps_per_epoch = std::max(1, cfg.steps);

    auto forward = [&](const Tensor& images) {
        SparseFormerOutput out = sparseformer_forward(images, model);
        return dense_head_forward(out.latent, out.focus.roi_stages.back(), out.focus.feature_map, head);
    };

    SegToyResult result;
    std::vector<std::int64_t> order(static_cast<std::size_t>(train.size()));
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::int64_t> idx;
        std::vector<int> labels;
        while (static_cast<int>(idx.size()) < cfg.batch_size) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::int64_t i = order[cursor++];
            idx.push_back(i);
            labels.insert(labels.end(), train.label_maps.begin() + i * pixels,
                          train.label_maps.begin() + (i + 1) * pixels);
        }
        opt.zero_grad();
        Tensor loss = seg_loss(forward(gather_images(train.images, idx)).dense_logits, labels, train.height,
                               train.width);
        loss.backward();
        clip_grad_norm(opt, 1.0);
        opt.step(lr_at_step(schedule, step));
        result.losses.push_back(loss.item());
        if (cfg.on_step) {
            cfg.on_step(step, loss.item());
        }
    }
    for (Tensor& p : params) {
        p.set_requires_grad(false);
        p.zero_grad();
    }

    NoGradGuard no_grad;
    double correct = 0.0;
    for (std::int64_t s = 0; s < test.size(); s += cfg.batch_size) {
        const std::int64_t n = std::min<std::int64_t>(cfg.batch_size, test.size() - s);
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), s);
        std::vector<int> labels(test.label_maps.begin() + s * pixels, test.label_maps.begin() + (s + n) * pixels);
        correct += pixel_accuracy(forward(gather_images(test.images, idx)).dense_logits, labels, test.height,
                                  test.width) *
                   static_cast<double>(n);
    }
    result.pixel_accuracy = correct / static_cast<double>(test.size());
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace sf
