#include "doctest.h"

#include "sparseformer/focusing.hpp"
#include "sparseformer/ops.hpp"

#include <cmath>
#include <numbers>

using namespace sf;

namespace {

SparseFormerSpec tiny_spec() { return preset_spec("tiny"); }

// Straight transcription of the RoI encoding, one scalar at a time.
std::vector<double> pe_oracle(const RoI& r, int width, double fmax) {
    const int k = width / 8;
    const double edges[4] = {r.x - r.w / 2, r.y - r.h / 2, r.x + r.w / 2, r.y + r.h / 2};
    std::vector<double> out;
    for (double v : edges) {
        for (int i = 0; i < k; ++i) {
            const double f = k == 1 ? 1.0 : std::exp(std::log(fmax) * i / (k - 1));
            out.push_back(std::sin(std::numbers::pi * f * v));
            out.push_back(std::cos(std::numbers::pi * f * v));
        }
    }
    return out;
}

}  // namespace

TEST_CASE("grid_rois layouts") {
    auto g49 = grid_rois(49);
    REQUIRE(g49.size() == 49);
    for (int i = 0; i < 49; ++i) {
        CHECK(g49[i].w == doctest::Approx(1.0 / 7));
        CHECK(g49[i].h == doctest::Approx(1.0 / 7));
        CHECK(g49[i].x == doctest::Approx((i % 7 + 0.5) / 7));
        CHECK(g49[i].y == doctest::Approx((i / 7 + 0.5) / 7));
    }
    auto g1 = grid_rois(1);
    CHECK(g1[0].x == 0.5);
    CHECK(g1[0].y == 0.5);
    CHECK(g1[0].w == 1.0);
    CHECK(g1[0].h == 1.0);
    auto g80 = grid_rois(80);
    REQUIRE(g80.size() == 80);
    CHECK(g80[79].x == doctest::Approx(7.5 / 9));
    CHECK(g80[79].y == doctest::Approx(8.5 / 9));
    CHECK(g80[0].w == doctest::Approx(1.0 / 9));
    CHECK_THROWS_AS(grid_rois(0), Error);
}

TEST_CASE("init_token_state reproduces the grid") {
    PrecisionScope p64(DType::f64);
    auto spec = preset_spec("sf-b");
    spec.focus_width = 16;
    spec.focus_heads = 2;
    spec.cortex_width = 16;
    spec.cortex_heads = 2;
    std::mt19937_64 rng(1);
    auto w = init_focusing(spec, rng);
    auto state = init_token_state(w);
    CHECK(state.embeddings.shape() == Shape{49, 16});
    CHECK(max_abs(state.embeddings) < 0.2);
    auto rois = tensor_to_rois(state.rois);
    auto grid = grid_rois(49);
    for (int i = 0; i < 49; ++i) {
        CHECK(rois[i].x == doctest::Approx(grid[i].x).epsilon(1e-12));
        CHECK(rois[i].w == doctest::Approx(grid[i].w).epsilon(1e-12));
    }
}

TEST_CASE("early_conv shapes") {
    std::mt19937_64 rng(2);
    auto w = init_focusing(tiny_spec(), rng);
    CHECK(early_conv(Tensor::zeros({1, 32, 32, 3}), w).shape() == Shape{1, 8, 8, 64});
    CHECK(max_abs(early_conv(Tensor::zeros({2, 32, 32, 3}), w)) == 0.0);
    CHECK(early_conv(Tensor::zeros({1, 224, 224, 3}), w).shape() == Shape{1, 56, 56, 64});
    CHECK_THROWS_AS(early_conv(Tensor::zeros({1, 30, 32, 3}), w), Error);
}

TEST_CASE("generate_sampling_points") {
    PrecisionScope p64(DType::f64);
    auto bias = reshape(sampling_grid_bias(16), {32});
    auto zero_w = Tensor::zeros({8, 32});
    auto emb = Tensor::zeros({1, 8});
    auto full = generate_sampling_points(emb, rois_to_tensor({{0.5, 0.5, 1.0, 1.0}}), zero_w, bias);
    REQUIRE(full.shape() == Shape{1, 16, 2});
    for (int j = 0; j < 16; ++j) {
        CHECK(full.at(2 * j) == doctest::Approx((j % 4) / 3.0).epsilon(1e-12));
        CHECK(full.at(2 * j + 1) == doctest::Approx((j / 4) / 3.0).epsilon(1e-12));
    }
    auto half = generate_sampling_points(emb, rois_to_tensor({{0.5, 0.5, 0.5, 0.5}}), zero_w, bias);
    for (int j = 0; j < 32; ++j) {
        CHECK(half.at(j) - 0.5 == doctest::Approx(0.5 * (full.at(j) - 0.5)).epsilon(1e-12));
    }
    auto many = generate_sampling_points(Tensor::zeros({49, 8}), rois_to_tensor(grid_rois(49)), zero_w, bias);
    CHECK(many.numel() / 2 == 784);
    CHECK_THROWS_AS(sampling_grid_bias(15), Error);
}

TEST_CASE("sample_and_embed") {
    PrecisionScope p64(DType::f64);
    std::mt19937_64 rng(3);
    auto bias = reshape(sampling_grid_bias(4), {8});
    auto off_w = Tensor::zeros({8, 8});
    auto proj_w = Tensor::randn({4 * 3, 8}, rng);
    auto proj_b = Tensor::zeros({8});
    auto emb = Tensor::zeros({1, 2, 8});
    auto rois = reshape(rois_to_tensor({{0.25, 0.5, 0.3, 0.3}, {0.75, 0.5, 0.3, 0.3}}), {1, 2, 4});
    auto pts = generate_sampling_points(emb, rois, off_w, bias);

    auto constant = Tensor::full({1, 6, 6, 3}, 0.7);
    auto out = sample_and_embed(constant, emb, pts, proj_w, proj_b);
    CHECK(max_abs_diff(narrow(out, 1, 0, 1), narrow(out, 1, 1, 1)) < 1e-12);

    auto halves = Tensor::zeros({1, 6, 6, 3});
    for (int y = 0; y < 6; ++y) {
        for (int x = 3; x < 6; ++x) {
            for (int c = 0; c < 3; ++c) {
                halves.set((y * 6 + x) * 3 + c, 1.0);
            }
        }
    }
    auto split = sample_and_embed(halves, emb, pts, proj_w, proj_b);
    CHECK(max_abs_diff(narrow(split, 1, 0, 1), narrow(split, 1, 1, 1)) > 1e-3);

    auto start = Tensor::randn({1, 2, 8}, rng);
    auto same = sample_and_embed(halves, start, pts, Tensor::zeros({12, 8}), proj_b);
    CHECK(max_abs_diff(same, start) == 0.0);
    CHECK_THROWS_AS(sample_and_embed(halves, start, pts, Tensor::zeros({10, 8}), proj_b), Error);
}

TEST_CASE("RoI position encoding") {
    PrecisionScope p64(DType::f64);
    auto f = pe_frequencies(48, 128.0);
    CHECK(f.front() == 1.0);
    CHECK(f.back() == doctest::Approx(128.0).epsilon(1e-12));

    auto pe = roi_position_encoding(rois_to_tensor({{0.5, 0.5, 1.0, 1.0}}), 32, 128.0);
    for (int i = 0; i < 8; ++i) {
        CHECK(pe.at(i) == doctest::Approx(i % 2 == 0 ? 0.0 : 1.0));
        CHECK(pe.at(i) == pe.at(8 + i));
    }

    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<RoI> rois;
    for (int i = 0; i < 100; ++i) {
        rois.push_back({u(rng), u(rng), 0.05 + u(rng), 0.05 + u(rng)});
    }
    auto got = roi_position_encoding(rois_to_tensor(rois), 64, 128.0);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        auto want = pe_oracle(rois[i], 64, 128.0);
        for (int j = 0; j < 64; ++j) {
            worst = std::max(worst, std::abs(got.at(i * 64 + j) - want[j]));
        }
    }
    CHECK(worst < 1e-6);
    CHECK_THROWS_AS(roi_position_encoding(rois_to_tensor(rois), 20, 128.0), Error);
    CHECK_THROWS_AS(inject_roi_pe(Tensor::zeros({100, 12}), rois_to_tensor(rois), 128.0), Error);
}

TEST_CASE("RoI adjustment examples") {
    RoI r{0.3, 0.6, 0.2, 0.4};
    auto same = adjust_roi(r, {0, 0, 0, 0});
    CHECK(same.x == r.x);
    CHECK(same.y == r.y);
    CHECK(same.w == r.w);
    CHECK(same.h == r.h);
    auto moved = adjust_roi({0.5, 0.5, 0.4, 0.6}, {0.5, -0.5, std::numbers::ln2, -std::numbers::ln2});
    CHECK(moved.x == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(moved.y == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(moved.w == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(moved.h == doctest::Approx(0.3).epsilon(1e-12));
    CHECK_THROWS_AS(adjust_roi(r, {0, std::nan(""), 0, 0}), Error);

    PrecisionScope p64(DType::f64);
    auto t = adjust_rois(rois_to_tensor({{0.5, 0.5, 0.4, 0.6}}),
                         Tensor::from_values({1, 4}, {0.5, -0.5, std::numbers::ln2, -std::numbers::ln2}));
    CHECK(t.at(0) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(t.at(3) == doctest::Approx(0.3).epsilon(1e-12));
}

TEST_CASE("RoI updates keep positive sizes and are translation/scale consistent") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> d(-10.0, 10.0);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    std::uniform_real_distribution<double> size(1e-3, 1.0);
    int positive = 0;
    double equiv = 0.0;
    double cov = 0.0;
    for (int i = 0; i < 100000; ++i) {
        RoI r{pos(rng), pos(rng), size(rng), size(rng)};
        std::array<double, 4> delta{d(rng), d(rng), d(rng), d(rng)};
        RoI a = adjust_roi(r, delta);
        positive += (a.w > 0.0 && a.h > 0.0) ? 1 : 0;
        const double tx = d(rng), ty = d(rng);
        RoI b = adjust_roi({r.x + tx, r.y + ty, r.w, r.h}, delta);
        equiv = std::max({equiv, std::abs(b.x - (a.x + tx)), std::abs(b.y - (a.y + ty))});
        const double s = std::exp(d(rng) / 5.0);
        RoI c = adjust_roi({r.x, r.y, r.w * s, r.h * s}, delta);
        cov = std::max({cov, std::abs((c.x - r.x) - s * (a.x - r.x)), std::abs((c.y - r.y) - s * (a.y - r.y))});
    }
    CHECK(positive == 100000);
    CHECK(equiv < 1e-6);
    CHECK(cov < 1e-6);
}

TEST_CASE("focusing_forward contracts") {
    std::mt19937_64 rng(6);
    auto spec = tiny_spec();
    auto w = init_focusing(spec, rng);
    Tensor images = Tensor::uniform({2, 32, 32, 3}, rng, 0.0, 1.0);
    auto out = focusing_forward(images, w, spec.iterations);
    CHECK(out.tokens.shape() == Shape{2, spec.n_tokens, spec.cortex_width});
    CHECK(out.feature_map.shape() == Shape{2, 8, 8, 64});
    REQUIRE(out.roi_stages.size() == static_cast<std::size_t>(spec.iterations + 1));
    for (const auto& stage : out.roi_stages) {
        CHECK(stage.shape() == Shape{2, spec.n_tokens, 4});
    }
    CHECK(out.final_points.shape() == Shape{2, spec.n_tokens, spec.points, 2});
    // Zero-initialized delta head: the first adjustment is the identity.
    CHECK(max_abs_diff(out.roi_stages[1], out.roi_stages[0]) == 0.0);
    auto again = focusing_forward(images, w, spec.iterations);
    CHECK(max_abs_diff(again.tokens, out.tokens) == 0.0);
}

TEST_CASE("gradients reach the initial RoIs") {
    std::mt19937_64 rng(7);
    auto spec = tiny_spec();
    auto w = init_focusing(spec, rng);
    w.delta2_w = init_weight(w.delta2_w.shape(), rng);
    w.offset_w = init_weight(w.offset_w.shape(), rng);
    w.init_center.set_requires_grad(true);
    w.init_log_size.set_requires_grad(true);
    Tensor images = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
    Tensor loss = sum(focusing_forward(images, w, spec.iterations).tokens);
    loss.backward();
    CHECK(max_abs(w.init_center.grad()) > 0.0);
    CHECK(max_abs(w.init_log_size.grad()) > 0.0);
}

TEST_CASE("resize_token_state") {
    std::mt19937_64 rng(8);
    auto w = init_focusing(tiny_spec(), rng);
    auto old = w.init_embed.clone();
    resize_token_state(w, 32);
    CHECK(w.init_embed.shape() == Shape{32, 32});
    CHECK(w.init_center.shape() == Shape{32, 2});
    // Cell 0 of the 6x6 grid is nearest to cell 0 of the old 4x4 grid.
    CHECK(max_abs_diff(narrow(w.init_embed, 0, 0, 1), narrow(old, 0, 0, 1)) == 0.0);
    CHECK_THROWS_AS(resize_token_state(w, 32), Error);
    Tensor images = Tensor::uniform({1, 32, 32, 3}, rng, 0.0, 1.0);
    CHECK(focusing_forward(images, w, 4).tokens.shape() == Shape{1, 32, 64});
}
