#include "sparseformer/focusing.hpp"

#include "sparseformer/ops.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace sf {

namespace {

Tensor initial_rois(const FocusingWeights& w) { return concat({w.init_center, exp(w.init_log_size)}, 1); }

}  // namespace

RoI adjust_roi(const RoI& roi, const std::array<double, 4>& delta) {
    for (double d : delta) {
        if (!std::isfinite(d)) {
            throw Error("adjust_roi: non-finite delta");
        }
    }
    return {roi.x + delta[0] * roi.w, roi.y + delta[1] * roi.h, roi.w * std::exp(delta[2]),
            roi.h * std::exp(delta[3])};
}

std::vector<RoI> grid_rois(int n) {
    if (n < 1) {
        throw Error("grid_rois: token count must be >= 1");
    }
    int g = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    while (g * g < n) {
        ++g;
    }
    while (g > 1 && (g - 1) * (g - 1) >= n) {
        --g;
    }
    std::vector<RoI> out;
    for (int i = 0; i < n; ++i) {
        const int row = i / g;
        const int col = i % g;
        out.push_back({(col + 0.5) / g, (row + 0.5) / g, 1.0 / g, 1.0 / g});
    }
    return out;
}

Tensor rois_to_tensor(const std::vector<RoI>& rois) {
    std::vector<double> v;
    for (const auto& r : rois) {
        v.insert(v.end(), {r.x, r.y, r.w, r.h});
    }
    return Tensor::from_values({static_cast<std::int64_t>(rois.size()), 4}, v);
}

std::vector<RoI> tensor_to_rois(const Tensor& t) {
    if (t.rank() < 1 || t.dim(-1) != 4) {
        throw Error("tensor_to_rois: last dimension must be 4");
    }
    std::vector<RoI> out;
    for (std::int64_t i = 0; i < t.numel(); i += 4) {
        out.push_back({t.at(i), t.at(i + 1), t.at(i + 2), t.at(i + 3)});
    }
    return out;
}

Tensor adjust_rois(const Tensor& rois, const Tensor& deltas) {
    if (rois.shape() != deltas.shape() || rois.dim(-1) != 4) {
        throw Error("adjust_rois: rois " + shape_str(rois.shape()) + " and deltas " + shape_str(deltas.shape()) +
                    " must match with last dimension 4");
    }
    const int last = rois.rank() - 1;
    Tensor center = narrow(rois, last, 0, 2);
    Tensor size = narrow(rois, last, 2, 2);
    Tensor new_center = center + narrow(deltas, last, 0, 2) * size;
    Tensor new_size = size * exp(narrow(deltas, last, 2, 2));
    return concat({new_center, new_size}, last);
}

std::vector<double> pe_frequencies(int count, double max_freq) {
    if (count < 1 || !(max_freq > 0.0)) {
        throw Error("pe_frequencies: need count >= 1 and max_freq > 0");
    }
    std::vector<double> f(static_cast<std::size_t>(count), 1.0);
    for (int k = 1; k < count; ++k) {
        f[k] = std::pow(max_freq, static_cast<double>(k) / (count - 1));
    }
    return f;
}

Tensor roi_position_encoding(const Tensor& rois, std::int64_t width, double max_freq) {
    if (width < 8 || width % 8 != 0) {
        throw Error("roi_position_encoding: width " + std::to_string(width) + " must be a positive multiple of 8");
    }
    if (rois.rank() < 1 || rois.dim(-1) != 4) {
        throw Error("roi_position_encoding: rois must be [..., 4]");
    }
    const int last = rois.rank() - 1;
    const std::int64_t k = width / 8;
    Tensor center = narrow(rois, last, 0, 2);
    Tensor half = narrow(rois, last, 2, 2) * 0.5;
    Tensor edges = concat({center - half, center + half}, last);  // left, top, right, bottom

    std::vector<double> f = pe_frequencies(static_cast<int>(k), max_freq);
    for (double& x : f) {
        x *= std::numbers::pi;
    }
    Shape col = edges.shape();
    col.push_back(1);
    Tensor phase = reshape(edges, col) * Tensor::from_values({k}, f, rois.dtype());  // [..., 4, k]
    Shape pair = phase.shape();
    pair.push_back(1);
    Tensor interleaved = concat({reshape(sin(phase), pair), reshape(cos(phase), pair)}, static_cast<int>(pair.size()) - 1);
    Shape out = rois.shape();
    out.back() = width;
    return reshape(interleaved, out);
}

Tensor inject_roi_pe(const Tensor& embeddings, const Tensor& rois, double max_freq) {
    return embeddings + roi_position_encoding(rois, embeddings.dim(-1), max_freq);
}

Tensor sampling_grid_bias(int points) {
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(points))));
    if (points < 1 || g * g != points) {
        throw Error("sampling_grid_bias: point count " + std::to_string(points) + " is not a perfect square");
    }
    std::vector<double> v;
    for (int iy = 0; iy < g; ++iy) {
        for (int ix = 0; ix < g; ++ix) {
            const double ox = g == 1 ? 0.0 : -0.5 + static_cast<double>(ix) / (g - 1);
            const double oy = g == 1 ? 0.0 : -0.5 + static_cast<double>(iy) / (g - 1);
            v.push_back(ox);
            v.push_back(oy);
        }
    }
    return Tensor::from_values({points, 2}, v);
}

Tensor generate_sampling_points(const Tensor& embeddings, const Tensor& rois, const Tensor& offset_w,
                                const Tensor& offset_b) {
    if (offset_w.rank() != 2 || offset_w.dim(1) % 2 != 0) {
        throw Error("generate_sampling_points: offset weight must be [d, 2P]");
    }
    const std::int64_t p = offset_w.dim(1) / 2;
    Shape lead = embeddings.shape();
    lead.pop_back();
    Shape roi_lead = rois.shape();
    roi_lead.pop_back();
    if (lead != roi_lead || rois.dim(-1) != 4) {
        throw Error("generate_sampling_points: embeddings " + shape_str(embeddings.shape()) + " and rois " +
                    shape_str(rois.shape()) + " disagree");
    }
    Shape offset_shape = lead;
    offset_shape.push_back(p);
    offset_shape.push_back(2);
    Shape box_shape = lead;
    box_shape.push_back(1);
    box_shape.push_back(2);
    const int last = rois.rank() - 1;
    Tensor offsets = reshape(linear(embeddings, offset_w, offset_b), offset_shape);
    Tensor center = reshape(narrow(rois, last, 0, 2), box_shape);
    Tensor size = reshape(narrow(rois, last, 2, 2), box_shape);
    return center + offsets * size;
}

NamedTensors FocusingWeights::named(const std::string& prefix) const {
    NamedTensors out;
    out.emplace_back(prefix + "stem1.w", stem1_w);
    out.emplace_back(prefix + "stem1.b", stem1_b);
    out.emplace_back(prefix + "stem2.w", stem2_w);
    out.emplace_back(prefix + "stem2.b", stem2_b);
    out.emplace_back(prefix + "init.embed", init_embed);
    out.emplace_back(prefix + "init.center", init_center);
    out.emplace_back(prefix + "init.log_size", init_log_size);
    out.emplace_back(prefix + "offset.w", offset_w);
    out.emplace_back(prefix + "offset.b", offset_b);
    out.emplace_back(prefix + "sample.w", sample_w);
    out.emplace_back(prefix + "sample.b", sample_b);
    block.append_named(prefix + "block.", out);
    out.emplace_back(prefix + "delta.ln.gamma", delta_ln_gamma);
    out.emplace_back(prefix + "delta.ln.beta", delta_ln_beta);
    out.emplace_back(prefix + "delta.fc1.w", delta1_w);
    out.emplace_back(prefix + "delta.fc1.b", delta1_b);
    out.emplace_back(prefix + "delta.fc2.w", delta2_w);
    out.emplace_back(prefix + "delta.fc2.b", delta2_b);
    out.emplace_back(prefix + "final.offset.w", final_offset_w);
    out.emplace_back(prefix + "final.offset.b", final_offset_b);
    out.emplace_back(prefix + "final.sample.w", final_sample_w);
    out.emplace_back(prefix + "final.sample.b", final_sample_b);
    out.emplace_back(prefix + "final.lift.w", lift_w);
    out.emplace_back(prefix + "final.lift.b", lift_b);
    return out;
}

FocusingWeights FocusingWeights::clone() const {
    FocusingWeights c = *this;
    c.block = block.clone();
    Tensor* fields[] = {&c.stem1_w, &c.stem1_b, &c.stem2_w, &c.stem2_b, &c.init_embed, &c.init_center,
                        &c.init_log_size, &c.offset_w, &c.offset_b, &c.sample_w, &c.sample_b, &c.delta_ln_gamma,
                        &c.delta_ln_beta, &c.delta1_w, &c.delta1_b, &c.delta2_w, &c.delta2_b, &c.final_offset_w,
                        &c.final_offset_b, &c.final_sample_w, &c.final_sample_b, &c.lift_w, &c.lift_b};
    for (Tensor* t : fields) {
        *t = t->clone();
    }
    return c;
}

FocusingWeights init_focusing(const SparseFormerSpec& spec, std::mt19937_64& rng) {
    spec.validate();
    FocusingWeights w;
    w.points = spec.points;
    w.pe_max_freq = spec.pe_max_freq;
    const std::int64_t df = spec.focus_width;
    const std::int64_t dc = spec.cortex_width;
    const std::int64_t hid = spec.stem_hidden;
    const std::int64_t ch = spec.stem_channels;
    const std::int64_t p = spec.points;
    w.stem1_w = init_weight({27, hid}, rng, std::sqrt(2.0 / 27.0));
    w.stem1_b = Tensor::zeros({hid});
    w.stem2_w = init_weight({9 * hid, ch}, rng, std::sqrt(1.0 / static_cast<double>(9 * hid)));
    w.stem2_b = Tensor::zeros({ch});

    w.init_embed = init_weight({spec.n_tokens, df}, rng);
    const auto grid = grid_rois(spec.n_tokens);
    std::vector<double> centers;
    std::vector<double> sizes;
    for (const auto& r : grid) {
        centers.insert(centers.end(), {r.x, r.y});
        sizes.insert(sizes.end(), {std::log(r.w), std::log(r.h)});
    }
    w.init_center = Tensor::from_values({spec.n_tokens, 2}, centers);
    w.init_log_size = Tensor::from_values({spec.n_tokens, 2}, sizes);

    w.offset_w = Tensor::zeros({df, 2 * p});
    w.offset_b = reshape(sampling_grid_bias(spec.points), {2 * p});
    w.sample_w = init_weight({p * ch, df}, rng);
    w.sample_b = Tensor::zeros({df});
    w.block = init_encoder_block(df, spec.focus_heads, spec.mlp_ratio, rng);
    w.delta_ln_gamma = Tensor::ones({df});
    w.delta_ln_beta = Tensor::zeros({df});
    w.delta1_w = init_weight({df, df}, rng);
    w.delta1_b = Tensor::zeros({df});
    w.delta2_w = Tensor::zeros({df, 4});
    w.delta2_b = Tensor::zeros({4});
    w.final_offset_w = Tensor::zeros({df, 2 * p});
    w.final_offset_b = reshape(sampling_grid_bias(spec.points), {2 * p});
    w.final_sample_w = init_weight({p * ch, dc}, rng);
    w.final_sample_b = Tensor::zeros({dc});
    w.lift_w = init_weight({df, dc}, rng);
    w.lift_b = Tensor::zeros({dc});
    return w;
}

TokenState init_token_state(const FocusingWeights& w) { return {w.init_embed, initial_rois(w)}; }

void resize_token_state(FocusingWeights& w, int n) {
    const std::int64_t old_n = w.n_tokens();
    if (n <= old_n) {
        throw Error("resize_token_state: new token count " + std::to_string(n) + " must exceed " +
                    std::to_string(old_n));
    }
    const std::int64_t df = w.focus_width();
    const auto grid = grid_rois(n);
    Tensor embed = Tensor::zeros({n, df}, w.init_embed.dtype());
    std::vector<double> centers;
    std::vector<double> sizes;
    for (int i = 0; i < n; ++i) {
        const RoI& r = grid[i];
        std::int64_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < old_n; ++j) {
            const double dx = w.init_center.at(2 * j) - r.x;
            const double dy = w.init_center.at(2 * j + 1) - r.y;
            if (dx * dx + dy * dy < best_d) {
                best_d = dx * dx + dy * dy;
                best = j;
            }
        }
        for (std::int64_t c = 0; c < df; ++c) {
            embed.set(i * df + c, w.init_embed.at(best * df + c));
        }
        centers.insert(centers.end(), {r.x, r.y});
        sizes.insert(sizes.end(), {std::log(r.w), std::log(r.h)});
    }
    w.init_embed = embed;
    w.init_center = Tensor::from_values({n, 2}, centers, w.init_center.dtype());
    w.init_log_size = Tensor::from_values({n, 2}, sizes, w.init_log_size.dtype());
}

Tensor early_conv(const Tensor& images, const FocusingWeights& w) {
    if (images.rank() != 4 || images.dim(3) != 3) {
        throw Error("early_conv: expected images [B,H,W,3], got " + shape_str(images.shape()));
    }
    if (images.dim(1) % 4 != 0 || images.dim(2) % 4 != 0 || images.dim(1) == 0 || images.dim(2) == 0) {
        throw Error("early_conv: resolution " + std::to_string(images.dim(1)) + "x" + std::to_string(images.dim(2)) +
                    " is not divisible by 4");
    }
    Tensor h = gelu(conv2d(images, w.stem1_w, w.stem1_b, 3, 2, 1));
    return conv2d(h, w.stem2_w, w.stem2_b, 3, 2, 1);
}

Tensor sample_and_embed(const Tensor& feature_map, const Tensor& embeddings, const Tensor& points,
                        const Tensor& proj_w, const Tensor& proj_b) {
    if (feature_map.rank() != 4 || points.rank() != 4 || points.dim(3) != 2 || embeddings.rank() != 3) {
        throw Error("sample_and_embed: expected map [B,h,w,C], embeddings [B,N,d] and points [B,N,P,2]");
    }
    const std::int64_t b = points.dim(0);
    const std::int64_t n = points.dim(1);
    const std::int64_t p = points.dim(2);
    const std::int64_t c = feature_map.dim(3);
    if (feature_map.dim(0) != b || embeddings.dim(0) != b || embeddings.dim(1) != n) {
        throw Error("sample_and_embed: batch or token count mismatch");
    }
    if (proj_w.rank() != 2 || proj_w.dim(0) != p * c || proj_w.dim(1) != embeddings.dim(2)) {
        throw Error("sample_and_embed: projection " + shape_str(proj_w.shape()) + " does not map " +
                    std::to_string(p * c) + " -> " + std::to_string(embeddings.dim(2)));
    }
    Tensor samples = bilinear_sample(feature_map, reshape(points, {b, n * p, 2}));
    return embeddings + linear(reshape(samples, {b, n, p * c}), proj_w, proj_b);
}

Tensor roi_deltas(const Tensor& embeddings, const FocusingWeights& w) {
    Tensor h = layer_norm(embeddings, w.delta_ln_gamma, w.delta_ln_beta);
    return linear(gelu(linear(h, w.delta1_w, w.delta1_b)), w.delta2_w, w.delta2_b);
}

FocusingOutput focusing_forward(const Tensor& images_in, const FocusingWeights& w, int iterations) {
    if (iterations < 0) {
        throw Error("focusing_forward: negative iteration count");
    }
    const DType dt = w.init_embed.dtype();
    const Tensor images = images_in.dtype() == dt ? images_in : images_in.to(dt);
    FocusingOutput out;
    out.feature_map = early_conv(images, w);
    const std::int64_t b = images.dim(0);
    Tensor emb = expand_leading(w.init_embed, b);
    Tensor rois = expand_leading(initial_rois(w), b);
    out.roi_stages.push_back(rois);
    for (int it = 0; it < iterations; ++it) {
        Tensor pts = generate_sampling_points(emb, rois, w.offset_w, w.offset_b);
        emb = sample_and_embed(out.feature_map, emb, pts, w.sample_w, w.sample_b);
        emb = inject_roi_pe(emb, rois, w.pe_max_freq);
        emb = encoder_block_forward(emb, w.block);
        rois = adjust_rois(rois, roi_deltas(emb, w));
        out.roi_stages.push_back(rois);
    }
    out.final_points = generate_sampling_points(emb, rois, w.final_offset_w, w.final_offset_b);
    Tensor lifted = linear(emb, w.lift_w, w.lift_b);
    lifted = sample_and_embed(out.feature_map, lifted, out.final_points, w.final_sample_w, w.final_sample_b);
    out.tokens = inject_roi_pe(lifted, rois, w.pe_max_freq);
    return out;
}

}  // namespace sf
