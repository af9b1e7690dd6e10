#include "sparseformer/gradient_suite.hpp"

#include "sparseformer/bootstrap.hpp"
#include "sparseformer/dense_head.hpp"
#include "sparseformer/model.hpp"
#include "sparseformer/ops.hpp"

#include <algorithm>
#include <chrono>
#include <functional>

namespace sf {

namespace {

using Inputs = std::vector<Tensor>;

struct Case {
    std::string group;
    std::string name;
    DifferentiableFn fn;
    std::function<Inputs()> make;
    int instances = 1;
};

Tensor rand64(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(s, rng, lo, hi, DType::f64);
}

// RoIs [.., n, 4] with centers in [0.2, 0.8] and sizes in [0.2, 0.6].
Tensor rand_rois(const Shape& lead, std::int64_t n, std::mt19937_64& rng) {
    Shape shape = lead;
    shape.push_back(n);
    Shape half = shape;
    half.push_back(2);
    return concat({rand64(half, rng, 0.2, 0.8), rand64(half, rng, 0.2, 0.6)}, -1);
}

std::vector<Case> op_cases(std::mt19937_64& rng, int k) {
    auto op = [k](std::string name, DifferentiableFn fn, std::function<Inputs()> make) {
        return Case{"ops", std::move(name), std::move(fn), std::move(make), k};
    };
    return {
        op("add_broadcast", [](const Inputs& v) { return add(v[0], v[1]); },
           [&] { return Inputs{rand64({3, 4}, rng), rand64({4}, rng)}; }),
        op("sub_broadcast", [](const Inputs& v) { return sub(v[0], v[1]); },
           [&] { return Inputs{rand64({2, 1, 3}, rng), rand64({4, 1}, rng)}; }),
        op("mul", [](const Inputs& v) { return mul(v[0], v[1]); },
           [&] { return Inputs{rand64({3, 4}, rng), rand64({3, 1}, rng)}; }),
        op("div", [](const Inputs& v) { return div(v[0], v[1]); },
           [&] { return Inputs{rand64({3, 4}, rng), rand64({4}, rng, 0.5, 2.0)}; }),
        op("scalar_ops", [](const Inputs& v) { return (v[0] * 1.7 + 0.3) / 2.0 - v[0]; },
           [&] { return Inputs{rand64({5}, rng)}; }),
        op("exp", [](const Inputs& v) { return sf::exp(v[0]); }, [&] { return Inputs{rand64({6}, rng)}; }),
        op("log", [](const Inputs& v) { return sf::log(v[0]); }, [&] { return Inputs{rand64({6}, rng, 0.3, 3.0)}; }),
        op("sqrt", [](const Inputs& v) { return sf::sqrt(v[0]); },
           [&] { return Inputs{rand64({6}, rng, 0.3, 3.0)}; }),
        op("sin_cos", [](const Inputs& v) { return sf::sin(v[0]) * sf::cos(v[0] * 3.0); },
           [&] { return Inputs{rand64({6}, rng, -3.0, 3.0)}; }),
        op("square_neg", [](const Inputs& v) { return -square(v[0]); }, [&] { return Inputs{rand64({6}, rng)}; }),
        op("gelu", [](const Inputs& v) { return gelu(v[0]); },
           [&] { return Inputs{rand64({3, 5}, rng, -3.0, 3.0)}; }),
        op("sum_mean", [](const Inputs& v) { return add(sum(v[0], 1, true), mean(v[0])); },
           [&] { return Inputs{rand64({3, 4, 2}, rng)}; }),
        op("mean_dim", [](const Inputs& v) { return mean(v[0], 0); }, [&] { return Inputs{rand64({3, 4}, rng)}; }),
        op("reshape_permute", [](const Inputs& v) { return permute(reshape(v[0], {2, 3, 4}), {2, 0, 1}); },
           [&] { return Inputs{rand64({6, 4}, rng)}; }),
        op("narrow_select",
           [](const Inputs& v) { return add(narrow(v[0], 1, 1, 2), reshape(select(v[0], 1, 0), {3, 1})); },
           [&] { return Inputs{rand64({3, 4}, rng)}; }),
        op("concat", [](const Inputs& v) { return concat({v[0], v[1], v[0]}, 1); },
           [&] { return Inputs{rand64({2, 3}, rng), rand64({2, 1}, rng)}; }),
        op("expand_leading", [](const Inputs& v) { return mul(expand_leading(v[0], 3), v[1]); },
           [&] { return Inputs{rand64({2, 2}, rng), rand64({3, 2, 2}, rng)}; }),
        op("matmul_shared", [](const Inputs& v) { return matmul(v[0], v[1]); },
           [&] { return Inputs{rand64({2, 3, 4}, rng), rand64({4, 5}, rng)}; }),
        op("matmul_batched", [](const Inputs& v) { return matmul(v[0], v[1]); },
           [&] { return Inputs{rand64({2, 3, 4}, rng), rand64({2, 4, 2}, rng)}; }),
        op("linear", [](const Inputs& v) { return linear(v[0], v[1], v[2]); },
           [&] { return Inputs{rand64({3, 4}, rng), rand64({4, 2}, rng), rand64({2}, rng)}; }),
        op("softmax", [](const Inputs& v) { return softmax_lastdim(v[0]); },
           [&] { return Inputs{rand64({3, 5}, rng, -3.0, 3.0)}; }),
        op("log_softmax", [](const Inputs& v) { return log_softmax_lastdim(v[0]); },
           [&] { return Inputs{rand64({3, 5}, rng, -3.0, 3.0)}; }),
        op("layer_norm", [](const Inputs& v) { return layer_norm(v[0], v[1], v[2], 1e-6); },
           [&] { return Inputs{rand64({3, 6}, rng), rand64({6}, rng), rand64({6}, rng)}; }),
        op("bilinear_map_and_points", [](const Inputs& v) { return bilinear_sample(v[0], v[1]); },
           [&] { return Inputs{rand64({2, 5, 4, 3}, rng), rand64({2, 3, 2}, rng, 0.15, 0.85)}; }),
        op("conv2d", [](const Inputs& v) { return conv2d(v[0], v[1], v[2], 3, 2, 1); },
           [&] { return Inputs{rand64({1, 5, 6, 2}, rng), rand64({18, 3}, rng), rand64({3}, rng)}; }),
        op("nll_of_log_softmax",
           [](const Inputs& v) { return nll_loss(log_softmax_lastdim(v[0]), {0, 2, 255, 1}, 255); },
           [&] { return Inputs{rand64({4, 3}, rng)}; }),
    };
}

std::vector<Case> model_cases(std::mt19937_64& rng, int k) {
    auto op = [k](std::string name, DifferentiableFn fn, std::function<Inputs()> make) {
        return Case{"model", std::move(name), std::move(fn), std::move(make), k};
    };
    return {
        op("roi_adjust", [](const Inputs& v) { return adjust_rois(v[0], v[1]); },
           [&] { return Inputs{rand_rois({}, 5, rng), rand64({5, 4}, rng, -1.0, 1.0)}; }),
        op("roi_position_encoding", [](const Inputs& v) { return roi_position_encoding(v[0], 16, 8.0); },
           [&] { return Inputs{rand_rois({}, 3, rng)}; }),
        op("sampling_points", [](const Inputs& v) { return generate_sampling_points(v[0], v[1], v[2], v[3]); },
           [&] {
               return Inputs{rand64({1, 3, 8}, rng), rand_rois({1}, 3, rng), rand64({8, 8}, rng, -0.3, 0.3),
                             reshape(sampling_grid_bias(4), {8}).to(DType::f64)};
           }),
        op("sample_and_embed", [](const Inputs& v) { return sample_and_embed(v[0], v[1], v[2], v[3], v[4]); },
           [&] {
               return Inputs{rand64({1, 4, 5, 3}, rng), rand64({1, 2, 6}, rng), rand64({1, 2, 4, 2}, rng, 0.15, 0.85),
                             rand64({12, 6}, rng), rand64({6}, rng)};
           }),
        op("cosine_align_loss",
           [target = rand64({3, 6}, rng)](const Inputs& v) { return cosine_align_loss(v[0], target); },
           [&] { return Inputs{rand64({3, 6}, rng)}; }),
        op("geometric_bias", [](const Inputs& v) { return geometric_bias(v[0], 3, 4, 0.5); },
           [&] { return Inputs{rand_rois({1}, 3, rng)}; }),
        op("dense_projection", [](const Inputs& v) { return dense_projection(v[0], v[1], v[2], v[3]); },
           [&] {
               return Inputs{rand64({1, 3, 2}, rng), rand64({1, 3, 4}, rng), rand64({1, 5, 4}, rng),
                             rand64({1, 5, 3}, rng)};
           }),
        op("upsample_bilinear", [](const Inputs& v) { return upsample_bilinear(v[0], 2); },
           [&] { return Inputs{rand64({1, 3, 2, 2}, rng)}; }),
    };
}

// Encoder block with every weight as a checked input.
Case encoder_block_case(std::mt19937_64& rng) {
    return Case{"model", "encoder_block",
                [](const Inputs& v) {
                    EncoderBlockWeights w;
                    w.heads = 2;
                    w.ln1_gamma = v[1];
                    w.ln1_beta = v[2];
                    w.qkv_w = v[3];
                    w.qkv_b = v[4];
                    w.proj_w = v[5];
                    w.proj_b = v[6];
                    w.ln2_gamma = v[7];
                    w.ln2_beta = v[8];
                    w.fc1_w = v[9];
                    w.fc1_b = v[10];
                    w.fc2_w = v[11];
                    w.fc2_b = v[12];
                    return encoder_block_forward(v[0], w);
                },
                [&rng] {
                    const std::int64_t d = 8;
                    auto r = [&](const Shape& s) { return rand64(s, rng, -0.5, 0.5); };
                    return Inputs{r({2, 3, d}), rand64({d}, rng, 0.5, 1.5), r({d}), r({d, 3 * d}), r({3 * d}),
                                  r({d, d}),    r({d}),                    rand64({d}, rng, 0.5, 1.5), r({d}),
                                  r({d, 2 * d}), r({2 * d}),               r({2 * d, d}), r({d})};
                },
                1};
}

// Focusing weights of the gradcheck preset with active RoI and offset heads.
SparseFormer pipeline_model(std::mt19937_64& rng) {
    SparseFormer m = init_sparseformer(preset_spec("gradcheck"), rng);
    m.focusing.offset_w = init_weight(m.focusing.offset_w.shape(), rng, 0.05);
    m.focusing.delta2_w = init_weight(m.focusing.delta2_w.shape(), rng, 0.05);
    m.focusing.final_offset_w = init_weight(m.focusing.final_offset_w.shape(), rng, 0.05);
    return m;
}

std::vector<Case> pipeline_cases(std::mt19937_64& rng) {
    auto model = std::make_shared<SparseFormer>(pipeline_model(rng));
    auto with_inputs = [model](const Inputs& v) {
        SparseFormer m = *model;
        m.focusing.init_embed = v[1];
        m.focusing.init_center = v[2];
        m.focusing.init_log_size = v[3];
        return m;
    };
    auto make = [model, &rng] {
        const int s = model->spec.image_size;
        return Inputs{rand64({1, s, s, 3}, rng, 0.0, 1.0), model->focusing.init_embed.clone(),
                      model->focusing.init_center.clone(), model->focusing.init_log_size.clone()};
    };
    std::vector<Case> cases;
    cases.push_back({"pipeline", "focusing_end_to_end",
                     [with_inputs](const Inputs& v) {
                         const SparseFormer m = with_inputs(v);
                         return sum(focusing_forward(v[0], m.focusing, m.spec.iterations).tokens);
                     },
                     make, 1});
    cases.push_back({"pipeline", "focusing_cortex_end_to_end",
                     [with_inputs](const Inputs& v) { return sparseformer_forward(v[0], with_inputs(v)).representation; },
                     make, 1});

    DenseHeadSpec hs;
    hs.width = 8;
    hs.heads = 2;
    hs.num_classes = 3;
    auto head = std::make_shared<DenseHeadWeights>(init_dense_head(hs, 16, 4, rng));
    head->classifier_w = init_weight(head->classifier_w.shape(), rng, 0.5);
    head->bias_w = init_weight(head->bias_w.shape(), rng, 0.5);
    auto labels = std::make_shared<std::vector<int>>();
    std::uniform_int_distribution<int> cls(0, 3);
    for (int i = 0; i < 16 * 16; ++i) {
        const int c = cls(rng);
        labels->push_back(c == 3 ? kIgnoreLabel : c);
    }
    cases.push_back({"pipeline", "dense_head_end_to_end",
                     [head, labels](const Inputs& v) {
                         DenseHeadOutput out = dense_head_forward(v[0], v[1], v[2], *head);
                         return seg_loss(out.dense_logits, *labels, 16, 16);
                     },
                     [&rng] {
                         return Inputs{rand64({1, 4, 16}, rng), rand_rois({1}, 4, rng), rand64({1, 8, 8, 4}, rng)};
                     },
                     1});
    return cases;
}

bool selected(const GradientSuiteOptions& opts, const std::string& group) {
    return opts.groups.empty() || std::find(opts.groups.begin(), opts.groups.end(), group) != opts.groups.end();
}

}  // namespace

bool GradientSuiteResult::passed() const {
    return !reports.empty() && std::all_of(reports.begin(), reports.end(), [](const auto& r) { return r.passed; });
}

const GradCheckReport* GradientSuiteResult::worst() const {
    const GradCheckReport* w = nullptr;
    for (const auto& r : reports) {
        if (w == nullptr || r.max_rel_error > w->max_rel_error) {
            w = &r;
        }
    }
    return w;
}

GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    PrecisionScope p64(DType::f64);
    std::mt19937_64 rng(opts.seed);
    std::vector<Case> cases;
    if (selected(opts, "ops")) {
        for (auto& c : op_cases(rng, opts.instances)) {
            cases.push_back(std::move(c));
        }
    }
    if (selected(opts, "model")) {
        for (auto& c : model_cases(rng, opts.instances)) {
            cases.push_back(std::move(c));
        }
        cases.push_back(encoder_block_case(rng));
    }
    if (selected(opts, "pipeline")) {
        for (auto& c : pipeline_cases(rng)) {
            cases.push_back(std::move(c));
        }
    }
    GradientSuiteResult result;
    std::uint64_t check_seed = opts.seed;
    for (const auto& c : cases) {
        const double tol = c.group == "pipeline" ? opts.pipeline_tol : opts.op_tol;
        for (int i = 0; i < c.instances; ++i) {
            GradCheckReport r = finite_diff_check(c.group + "/" + c.name, c.fn, c.make(), 1e-6, tol, ++check_seed);
            result.reports.push_back(std::move(r));
        }
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

}  // namespace sf
