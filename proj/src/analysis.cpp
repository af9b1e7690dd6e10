#include "sparseformer/analysis.hpp"

#include "sparseformer/image_io.hpp"
#include "sparseformer/model.hpp"
#include "sparseformer/ops.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace sf {

namespace {

using i64 = std::int64_t;

// Elementwise costs in multiply-adds per element.
constexpr i64 kNormCost = 4;
constexpr i64 kGeluCost = 1;
constexpr i64 kSoftmaxCost = 1;
constexpr i64 kBilinearCost = 4;

i64 linear_params(i64 in, i64 out) { return in * out + out; }

struct BlockCost {
    CostPart attention_proj;
    CostPart attention_scores;
    CostPart ffn;
};

// Pre-LN encoder block at width d on `tokens` tokens.
BlockCost encoder_block_cost(i64 d, i64 heads, i64 ratio, i64 tokens) {
    BlockCost c;
    c.attention_proj.params = 2 * d + linear_params(d, 3 * d) + linear_params(d, d);
    c.attention_proj.macs = tokens * (kNormCost * d + 3 * d * d + d * d);
    c.attention_scores.macs = tokens * tokens * (2 * d + kSoftmaxCost * heads);
    const i64 hidden = ratio * d;
    c.ffn.params = 2 * d + linear_params(d, hidden) + linear_params(hidden, d);
    c.ffn.macs = tokens * (kNormCost * d + 2 * d * hidden + kGeluCost * hidden);
    return c;
}

void accumulate(CostPart& into, const CostPart& part, i64 times) {
    into.params += part.params * times;
    into.macs += part.macs * times;
}

CostReport build_report(const SparseFormerSpec& spec, int resolution, int n_tokens, const DenseHeadSpec* dense) {
    spec.validate();
    if (resolution < 4 || resolution % 4 != 0) {
        throw Error("cost report: resolution " + std::to_string(resolution) + " is not a positive multiple of 4");
    }
    if (n_tokens < 1) {
        throw Error("cost report: token count must be positive");
    }
    const i64 n = n_tokens;
    const i64 df = spec.focus_width;
    const i64 dc = spec.cortex_width;
    const i64 p = spec.points;
    const i64 ch = spec.stem_channels;
    const i64 hid = spec.stem_hidden;
    const i64 r = spec.mlp_ratio;
    const i64 it = spec.iterations;
    const i64 half = resolution / 2;
    const i64 quarter = resolution / 4;

    CostReport rep;
    rep.spec = spec.name;
    rep.resolution = resolution;
    rep.tokens = n_tokens;

    CostPart stem{"focusing.stem"};
    stem.params = linear_params(27, hid) + linear_params(9 * hid, ch);
    stem.macs = half * half * (27 * hid + kGeluCost * hid) + quarter * quarter * 9 * hid * ch;

    CostPart init{"focusing.init_tokens"};
    init.params = n * df + 4 * n;

    // Offsets, point placement, bilinear interpolation and the sampled-feature projection.
    CostPart sampling{"focusing.sampling"};
    sampling.params = linear_params(df, 2 * p) + linear_params(p * ch, df);
    sampling.macs = it * n * (df * 2 * p + 4 * p + kBilinearCost * p * ch + p * ch * df);

    CostPart pe{"focusing.position_encoding"};
    pe.macs = it * n * df + n * dc;

    const BlockCost fb = encoder_block_cost(df, spec.focus_heads, r, n);
    CostPart f_proj{"focusing.attention_proj"};
    CostPart f_scores{"focusing.attention_scores"};
    CostPart f_ffn{"focusing.ffn"};
    f_proj.params = fb.attention_proj.params;
    f_proj.macs = it * fb.attention_proj.macs;
    f_scores.macs = it * fb.attention_scores.macs;
    f_ffn.params = fb.ffn.params;
    f_ffn.macs = it * fb.ffn.macs;

    CostPart delta{"focusing.roi_delta"};
    delta.params = 2 * df + linear_params(df, df) + linear_params(df, 4);
    delta.macs = it * n * (kNormCost * df + df * df + kGeluCost * df + 4 * df + 8);

    CostPart final_stage{"focusing.final_sampling"};
    final_stage.params = linear_params(df, 2 * p) + linear_params(p * ch, dc) + linear_params(df, dc);
    final_stage.macs = n * (df * 2 * p + 4 * p + df * dc + kBilinearCost * p * ch + p * ch * dc);

    CostPart cls{"cortex.cls_token"};
    cls.params = dc;

    const i64 kept = spec.kept_blocks();
    const BlockCost cb = encoder_block_cost(dc, spec.cortex_heads, r, n + 1);
    CostPart c_proj{"cortex.attention_proj"};
    CostPart c_scores{"cortex.attention_scores"};
    CostPart c_ffn{"cortex.ffn"};
    accumulate(c_proj, cb.attention_proj, kept);
    accumulate(c_scores, cb.attention_scores, kept);
    accumulate(c_ffn, cb.ffn, kept);

    CostPart norm{"cortex.final_norm"};
    norm.params = 2 * dc;
    norm.macs = (n + 1) * kNormCost * dc;

    CostPart head{"cortex.head"};
    const i64 out = spec.output_dim();
    head.params = (spec.has_projection ? dc * out : 0) + linear_params(out, spec.num_classes);
    head.macs = (spec.has_projection ? dc * out : 0) + out * spec.num_classes;

    rep.parts = {stem, init, sampling, pe, f_proj, f_scores, f_ffn, delta, final_stage,
                 cls, c_proj, c_scores, c_ffn, norm, head};

    if (dense != nullptr) {
        const i64 d = dense->width;
        const i64 classes = dense->num_classes;
        const i64 hw = quarter * quarter;
        CostPart tokens{"dense.token_branch"};
        tokens.params = linear_params(dc, d) + linear_params(d, classes);
        tokens.macs = n * (dc * d + d * classes);
        const BlockCost db = encoder_block_cost(d, dense->heads, dense->mlp_ratio, n);
        CostPart blocks{"dense.blocks"};
        accumulate(blocks, db.attention_proj, dense->depth);
        accumulate(blocks, db.attention_scores, dense->depth);
        accumulate(blocks, db.ffn, dense->depth);
        CostPart query{"dense.query"};
        query.params = linear_params(9 * ch, d);
        query.macs = hw * 9 * ch * d;
        CostPart projection{"dense.projection"};
        projection.params = linear_params(d, 1);
        projection.macs = n * d + hw * n * (4 + d + kSoftmaxCost + classes);
        CostPart upsample{"dense.upsample"};
        upsample.macs = static_cast<i64>(resolution) * resolution * classes * kBilinearCost;
        for (const CostPart& c : {tokens, blocks, query, projection, upsample}) {
            rep.parts.push_back(c);
        }
    }
    return rep;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s = buf;
    if (s == "-0.00") {
        s = "0.00";
    }
    return s;
}

Tensor drop_batch(const Tensor& t, std::int64_t rank) {
    if (t.rank() == rank + 1) {
        if (t.dim(0) != 1) {
            throw Error("roi_svg: batched input must have batch size 1, got " + shape_str(t.shape()));
        }
        return select(t, 0, 0);
    }
    if (t.rank() != rank) {
        throw Error("roi_svg: unexpected shape " + shape_str(t.shape()));
    }
    return t;
}

constexpr const char* kStageColors[] = {"#ffd400", "#00e5ff", "#ff3d7f"};

}  // namespace

std::int64_t CostReport::total_params() const {
    return std::accumulate(parts.begin(), parts.end(), i64{0}, [](i64 s, const CostPart& c) { return s + c.params; });
}

std::int64_t CostReport::total_macs() const {
    return std::accumulate(parts.begin(), parts.end(), i64{0}, [](i64 s, const CostPart& c) { return s + c.macs; });
}

const CostPart& CostReport::part(const std::string& module) const {
    for (const auto& c : parts) {
        if (c.module == module) {
            return c;
        }
    }
    throw Error("cost report: no module '" + module + "'");
}

std::int64_t CostReport::params_with_prefix(const std::string& prefix) const {
    i64 s = 0;
    for (const auto& c : parts) {
        s += c.module.starts_with(prefix) ? c.params : 0;
    }
    return s;
}

std::int64_t CostReport::macs_with_prefix(const std::string& prefix) const {
    i64 s = 0;
    for (const auto& c : parts) {
        s += c.module.starts_with(prefix) ? c.macs : 0;
    }
    return s;
}

nlohmann::json CostReport::to_json() const {
    nlohmann::json modules = nlohmann::json::array();
    for (const auto& c : parts) {
        modules.push_back({{"module", c.module}, {"params", c.params}, {"macs", c.macs}, {"flops", 2 * c.macs}});
    }
    return {{"spec", spec},
            {"resolution", resolution},
            {"tokens", tokens},
            {"convention", "flops = 2 * macs; published GFLOPs figures for vision transformers usually count macs"},
            {"modules", modules},
            {"total", {{"params", total_params()}, {"macs", total_macs()}, {"flops", total_flops()}}}};
}

CostReport count_params(const SparseFormerSpec& spec, const DenseHeadSpec* dense) {
    return build_report(spec, spec.image_size, spec.n_tokens, dense);
}

CostReport count_flops(const SparseFormerSpec& spec, int resolution, int n_tokens, const DenseHeadSpec* dense) {
    return build_report(spec, resolution, n_tokens, dense);
}

std::vector<int> figure_stages(int count) {
    std::vector<int> out;
    for (int s : {0, 2, count - 1}) {
        if (s >= 0 && s < count && (out.empty() || out.back() < s)) {
            out.push_back(s);
        }
    }
    return out;
}

std::string roi_svg(const Tensor& image_in, const std::vector<Tensor>& roi_stages, const Tensor& points_in) {
    const Tensor image = drop_batch(image_in, 3);
    if (image.dim(2) != 3) {
        throw Error("roi_svg: expected an RGB image [H, W, 3], got " + shape_str(image.shape()));
    }
    if (roi_stages.empty()) {
        throw Error("roi_svg: no RoI stages recorded");
    }
    const double w = static_cast<double>(image.dim(1));
    const double h = static_cast<double>(image.dim(0));
    const Tensor points = drop_batch(points_in, 3);
    if (points.dim(2) != 2) {
        throw Error("roi_svg: sampling points must be [N, P, 2]");
    }

    std::string s;
    s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" version=\"1.1\" ";
    s += "width=\"" + fmt(w) + "\" height=\"" + fmt(h) + "\" viewBox=\"0 0 " + fmt(w) + " " + fmt(h) + "\">\n";
    s += "<image x=\"0\" y=\"0\" width=\"" + fmt(w) + "\" height=\"" + fmt(h) +
         "\" preserveAspectRatio=\"none\" xlink:href=\"data:image/png;base64," + base64_encode(encode_png(image)) +
         "\"/>\n";

    const std::vector<int> stages = figure_stages(static_cast<int>(roi_stages.size()));
    for (std::size_t k = 0; k < stages.size(); ++k) {
        const Tensor rois = drop_batch(roi_stages[static_cast<std::size_t>(stages[k])], 2);
        if (rois.dim(1) != 4) {
            throw Error("roi_svg: RoIs must be [N, 4]");
        }
        s += "<g id=\"stage" + std::to_string(stages[k]) + "\" fill=\"none\" stroke=\"" + kStageColors[k] +
             "\" stroke-width=\"0.5\">\n";
        for (std::int64_t i = 0; i < rois.dim(0); ++i) {
            const auto at = [&](int c) { return rois.at(static_cast<std::size_t>(i * 4 + c)); };
            s += "<rect x=\"" + fmt((at(0) - at(2) / 2) * w) + "\" y=\"" + fmt((at(1) - at(3) / 2) * h) +
                 "\" width=\"" + fmt(at(2) * w) + "\" height=\"" + fmt(at(3) * h) + "\"/>\n";
        }
        s += "</g>\n";
    }
    s += "<g id=\"points\" fill=\"#ff3d7f\" stroke=\"none\">\n";
    const std::int64_t total = points.dim(0) * points.dim(1);
    for (std::int64_t i = 0; i < total; ++i) {
        s += "<circle cx=\"" + fmt(points.at(static_cast<std::size_t>(2 * i)) * w) + "\" cy=\"" +
             fmt(points.at(static_cast<std::size_t>(2 * i + 1)) * h) + "\" r=\"0.6\"/>\n";
    }
    s += "</g>\n</svg>\n";
    return s;
}

void render_roi_svg(const Tensor& image, const std::vector<Tensor>& roi_stages, const Tensor& points,
                    const std::string& path) {
    const std::string svg = roi_svg(image, roi_stages, points);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("render_roi_svg: cannot open '" + path + "' for writing");
    }
    out.write(svg.data(), static_cast<std::streamsize>(svg.size()));
    if (!out) {
        throw Error("render_roi_svg: write to '" + path + "' failed");
    }
}

Timing time_call(const std::function<void()>& fn, int warmup, int reps) {
    if (reps < 1 || warmup < 0) {
        throw Error("time_call: need reps >= 1 and warmup >= 0");
    }
    for (int i = 0; i < warmup; ++i) {
        fn();
    }
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    Timing out;
    out.reps = reps;
    out.mean = std::accumulate(t.begin(), t.end(), 0.0) / reps;
    std::sort(t.begin(), t.end());
    out.min = t.front();
    out.median = reps % 2 == 1 ? t[reps / 2] : 0.5 * (t[reps / 2 - 1] + t[reps / 2]);
    return out;
}

std::vector<BenchmarkEntry> benchmark_forward(const std::vector<SparseFormerSpec>& specs, int batch, int reps,
                                              std::uint64_t seed) {
    if (batch < 1) {
        throw Error("benchmark_forward: batch must be positive");
    }
    std::vector<BenchmarkEntry> out;
    for (const auto& spec : specs) {
        std::mt19937_64 rng(seed);
        SparseFormer model = init_sparseformer(spec, rng);
        Tensor images = Tensor::randn({batch, spec.image_size, spec.image_size, 3}, rng, 0.5);
        BenchmarkEntry e;
        e.name = spec.name;
        e.macs = count_flops(spec, spec.image_size, spec.n_tokens).total_macs() * batch;
        e.timing = time_call(
            [&] {
                NoGradGuard no_grad;
                sparseformer_forward(images, model);
            },
            1, reps);
        e.ratio = out.empty() ? 1.0 : e.timing.median / out.front().timing.median;
        out.push_back(e);
    }
    return out;
}

}  // namespace sf
