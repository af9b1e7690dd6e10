#include "doctest.h"

#include "sparseformer/dense_head.hpp"
#include "sparseformer/ops.hpp"

#include <cmath>

using namespace sf;

namespace {

DenseHeadWeights small_head(std::mt19937_64& rng, int classes = 4) {
    DenseHeadSpec spec;
    spec.width = 16;
    spec.heads = 2;
    spec.num_classes = classes;
    return init_dense_head(spec, 24, 8, rng);
}

Tensor one_roi(double x, double y, double w, double h) { return Tensor::from_values({1, 1, 4}, {x, y, w, h}); }

// Reference bilinear lookup with texel centers at (i + 0.5) / size and border clamping.
double bilinear_ref(const Tensor& map, int b, int c, double u, double v) {
    const auto h = map.dim(1);
    const auto w = map.dim(2);
    const auto ch = map.dim(3);
    const double sx = std::clamp(u * w - 0.5, 0.0, w - 1.0);
    const double sy = std::clamp(v * h - 0.5, 0.0, h - 1.0);
    const auto x0 = static_cast<std::int64_t>(std::floor(sx));
    const auto y0 = static_cast<std::int64_t>(std::floor(sy));
    const auto x1 = std::min<std::int64_t>(x0 + 1, w - 1);
    const auto y1 = std::min<std::int64_t>(y0 + 1, h - 1);
    const double fx = sx - x0;
    const double fy = sy - y0;
    auto at = [&](std::int64_t y, std::int64_t x) { return map.at(((b * h + y) * w + x) * ch + c); };
    return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST_CASE("token logits shapes and bias-only classifier") {
    std::mt19937_64 rng(1);
    DenseHeadWeights w = small_head(rng);
    Tensor tokens = Tensor::randn({2, 8, 24}, rng);
    TokenHeadOutput out = token_logits(tokens, w);
    CHECK(out.logits.shape() == Shape{2, 8, 4});
    CHECK(out.keys.shape() == Shape{2, 8, 16});

    w.classifier_w = Tensor::zeros({16, 4});
    w.classifier_b = Tensor::from_values({4}, {0.5, -1.0, 2.0, 0.0});
    Tensor logits = token_logits(tokens, w).logits;
    for (std::int64_t i = 0; i < logits.numel(); ++i) {
        CHECK(logits.at(i) == w.classifier_b.at(i % 4));
    }
    DenseHeadSpec bad;
    bad.num_classes = 0;
    CHECK_THROWS_AS(init_dense_head(bad, 24, 8, rng), Error);
    CHECK_THROWS_AS(token_logits(Tensor::zeros({2, 8, 23}), w), Error);
}

TEST_CASE("geometric bias formula") {
    // 4x4 grid: cell centers at 0.125, 0.375, 0.625, 0.875.
    Tensor center = geometric_bias(one_roi(0.375, 0.625, 0.25, 0.5), 4, 4, 0.5);
    REQUIRE(center.shape() == Shape{1, 16, 1});
    const std::size_t at_center = 2 * 4 + 1;
    CHECK(center.at(at_center) == doctest::Approx(0.0));
    for (std::size_t p = 0; p < 16; ++p) {
        CHECK(center.at(p) <= center.at(at_center));
    }

    // One full width to the right of the center: -1 / (2 sigma^2) = -2.
    Tensor away = geometric_bias(one_roi(0.375, 0.625, 0.5, 0.5), 4, 4, 0.5);
    CHECK(away.at(2 * 4 + 3) == doctest::Approx(-2.0).epsilon(1e-6));

    Tensor wide = geometric_bias(one_roi(0.375, 0.625, 0.5, 1.0), 4, 4, 0.5);
    for (std::size_t p = 0; p < 16; ++p) {
        if (p != at_center) {
            CHECK(wide.at(p) > center.at(p));
        }
    }
    CHECK_THROWS_AS(geometric_bias(one_roi(0.5, 0.5, 0.0, 0.5), 4, 4, 0.5), Error);
    CHECK_THROWS_AS(geometric_bias(one_roi(0.5, 0.5, 0.5, -1.0), 4, 4, 0.5), Error);
}

TEST_CASE("dense projection examples") {
    std::mt19937_64 rng(2);
    Tensor q = Tensor::randn({1, 6, 8}, rng);

    SUBCASE("a single token is copied to every position") {
        Tensor p = Tensor::randn({1, 1, 3}, rng);
        Tensor out = dense_projection(p, Tensor::randn({1, 1, 8}, rng), q, Tensor::randn({1, 6, 1}, rng));
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.at(i) == doctest::Approx(p.at(i % 3)).epsilon(1e-6));
        }
    }
    SUBCASE("a saturating predictive bias selects its token") {
        Tensor p = Tensor::randn({1, 5, 3}, rng);
        Tensor bias = Tensor::from_values({1, 1, 5}, {0.0, 0.0, 1e4, 0.0, 0.0});
        Tensor out = dense_projection(p, Tensor::randn({1, 5, 8}, rng), q, bias);
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            CHECK(out.at(i) == doctest::Approx(p.at(2 * 3 + i % 3)).epsilon(1e-6));
        }
    }
    SUBCASE("uniform scores average the token logits") {
        Tensor p = Tensor::randn({1, 4, 3}, rng);
        Tensor out = dense_projection(p, Tensor::zeros({1, 4, 8}), q, Tensor::zeros({1, 6, 4}));
        for (std::int64_t i = 0; i < out.numel(); ++i) {
            const std::int64_t c = i % 3;
            const double mean = (p.at(c) + p.at(3 + c) + p.at(6 + c) + p.at(9 + c)) / 4.0;
            CHECK(out.at(i) == doctest::Approx(mean).epsilon(1e-6));
        }
    }
    CHECK_THROWS_AS(dense_projection(Tensor::zeros({1, 4, 3}), Tensor::zeros({1, 4, 7}), q, {}), Error);
}

TEST_CASE("attention rows are stochastic and outputs stay inside the token logit range") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> n_dist(1, 12);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double worst_row = 0.0;
    bool bounded = true;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = n_dist(rng);
        const int hw = n_dist(rng);
        const int classes = 1 + trial % 5;
        Tensor p = Tensor::randn({1, n, classes}, rng, 3.0);
        Tensor k = Tensor::randn({1, n, 8}, rng, 2.0);
        Tensor q = Tensor::randn({1, hw, 8}, rng, 2.0);
        Tensor bias = Tensor::randn({1, hw, n}, rng, 5.0 * unit(rng));
        Tensor attn;
        Tensor out = dense_projection(p, k, q, bias, &attn);
        for (int r = 0; r < hw; ++r) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) {
                s += attn.at(static_cast<std::size_t>(r) * n + j);
            }
            worst_row = std::max(worst_row, std::abs(s - 1.0));
            for (int c = 0; c < classes; ++c) {
                double lo = 1e300;
                double hi = -1e300;
                for (int j = 0; j < n; ++j) {
                    lo = std::min(lo, p.at(static_cast<std::size_t>(j) * classes + c));
                    hi = std::max(hi, p.at(static_cast<std::size_t>(j) * classes + c));
                }
                const double v = out.at(static_cast<std::size_t>(r) * classes + c);
                bounded = bounded && v >= lo - 1e-5 && v <= hi + 1e-5;
            }
        }
    }
    CHECK(worst_row < 1e-6);
    CHECK(bounded);
}

TEST_CASE("attention to a small far-away token decays with distance") {
    std::mt19937_64 rng(4);
    Tensor p = Tensor::randn({1, 2, 2}, rng, 1.0, DType::f64);
    Tensor k = Tensor::zeros({1, 2, 8}, DType::f64);
    Tensor q = Tensor::zeros({1, 64, 8}, DType::f64);
    double previous = 1.0;
    for (double x : {0.1, 0.3, 0.5, 0.7, 0.9}) {
        Tensor rois =
            Tensor::from_values({1, 2, 4}, {0.0625, 0.0625, 0.5, 0.5, x, 0.0625, 0.1, 0.1}, DType::f64);
        Tensor attn;
        dense_projection(p, k, q, geometric_bias(rois, 8, 8, 0.5), &attn);
        const double weight = attn.at(1);  // position (0, 0), token 1
        CHECK(weight < previous);
        previous = weight;
    }
    CHECK(previous < 1e-6);
}

TEST_CASE("bilinear upsampling matches a reference lookup") {
    std::mt19937_64 rng(5);
    Tensor x = Tensor::randn({2, 3, 4, 2}, rng);
    Tensor up = upsample_bilinear(x, 4);
    REQUIRE(up.shape() == Shape{2, 12, 16, 2});
    for (int b = 0; b < 2; ++b) {
        for (int i = 0; i < 12; ++i) {
            for (int j = 0; j < 16; ++j) {
                for (int c = 0; c < 2; ++c) {
                    const double ref = bilinear_ref(x, b, c, (j + 0.5) / 16.0, (i + 0.5) / 12.0);
                    CHECK(up.at(static_cast<std::size_t>(((b * 12 + i) * 16 + j) * 2 + c)) ==
                          doctest::Approx(ref).epsilon(1e-6));
                }
            }
        }
    }
}

TEST_CASE("segmentation loss examples") {
    const int classes = 3;
    Tensor uniform = Tensor::zeros({1, 2, 2, classes}, DType::f64);
    std::vector<int> labels(64);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<int>(i % classes);
    }
    CHECK(seg_loss(uniform, labels, 8, 8).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));

    Tensor confident = Tensor::full({1, 2, 2, classes}, -40.0, DType::f64);
    for (std::size_t i = 0; i < 4; ++i) {
        confident.set(i * classes + 1, 40.0);
    }
    std::vector<int> ones(64, 1);
    CHECK(seg_loss(confident, ones, 8, 8).item() < 1e-12);
    CHECK(pixel_accuracy(confident, ones, 8, 8) == 1.0);

    std::mt19937_64 rng(6);
    Tensor logits = Tensor::randn({1, 2, 2, classes}, rng, 1.0, DType::f64);
    logits.set_requires_grad();
    std::vector<int> ignored(64, kIgnoreLabel);
    Tensor loss = seg_loss(logits, ignored, 8, 8);
    CHECK(loss.item() == 0.0);
    loss.backward();
    CHECK(max_abs(logits.grad()) == 0.0);

    labels[5] = 3;
    CHECK_THROWS_AS(seg_loss(uniform, labels, 8, 8), Error);
    CHECK_THROWS_AS(seg_loss(uniform, ones, 8, 6), Error);
}

TEST_CASE("dense head forward on a tiny trunk") {
    std::mt19937_64 rng(7);
    SparseFormer model = init_sparseformer(preset_spec("tiny"), rng);
    DenseHeadSpec spec;
    spec.width = 32;
    spec.heads = 4;
    spec.num_classes = 5;
    DenseHeadWeights head = init_dense_head(spec, model.cortex.width(), model.focusing.stem_channels(), rng);
    Tensor images = make_shape_dataset(2, 32, 4, 1).images;
    SparseFormerOutput trunk = sparseformer_forward(images, model);
    CHECK(trunk.latent.shape() == Shape{2, 16, 64});
    DenseHeadOutput out = dense_head_forward(trunk.latent, trunk.focus.roi_stages.back(), trunk.focus.feature_map, head);
    CHECK(out.dense_logits.shape() == Shape{2, 8, 8, 5});
    CHECK(out.token_logits.shape() == Shape{2, 16, 5});
    CHECK(out.attention.shape() == Shape{2, 64, 16});
    CHECK(head.named().size() == 2 + 2 * 12 + 6);
}
