#include "doctest.h"

#include "sparseformer/gradcheck.hpp"
#include "sparseformer/gradient_suite.hpp"
#include "sparseformer/ops.hpp"
#include "sparseformer/optim.hpp"

#include <cmath>
#include <limits>
#include <numbers>

using namespace sf;

namespace {

// Independent bilinear oracle: tent-weighted sum over every texel of the map.
std::vector<double> tent_sample(const std::vector<double>& map, int h, int w, int c, double u, double v) {
    double px = std::clamp(u * w - 0.5, 0.0, static_cast<double>(w - 1));
    double py = std::clamp(v * h - 0.5, 0.0, static_cast<double>(h - 1));
    std::vector<double> out(c, 0.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double wt = std::max(0.0, 1.0 - std::abs(px - x)) * std::max(0.0, 1.0 - std::abs(py - y));
            for (int ch = 0; ch < c; ++ch) {
                out[ch] += wt * map[(y * w + x) * c + ch];
            }
        }
    }
    return out;
}

Tensor rand64(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(s, rng, lo, hi, DType::f64);
}

void require_check(const GradCheckReport& r, double tol) {
    INFO(r.name << " rel err " << r.max_rel_error);
    CHECK(r.max_rel_error <= tol);
}

}  // namespace

TEST_CASE("softmax examples") {
    auto y = softmax_lastdim(Tensor::from_values({3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) {
        CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
    }
    auto big = softmax_lastdim(Tensor::from_values({2}, {1000, 0}));
    CHECK(big.at(0) == doctest::Approx(1.0));
    CHECK(big.at(1) < 1e-30);
    auto l2 = softmax_lastdim(Tensor::from_values({2}, {std::numbers::ln2, 0}, DType::f64));
    const double oracle = std::exp(std::numbers::ln2) / (std::exp(std::numbers::ln2) + std::exp(0.0));
    CHECK(l2.at(0) == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(l2.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(l2.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax errors") {
    CHECK_THROWS_AS(softmax_lastdim(Tensor::zeros({2, 0})), Error);
    auto bad = Tensor::from_values({2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    CHECK_THROWS_AS(softmax_lastdim(bad), Error);
}

TEST_CASE("softmax rows sum to one for large magnitudes") {
    std::mt19937_64 rng(3);
    auto x = Tensor::uniform({64, 17}, rng, -1e4, 1e4);
    auto y = softmax_lastdim(x);
    for (int r = 0; r < 64; ++r) {
        double s = 0.0;
        for (int j = 0; j < 17; ++j) {
            s += y.at(r * 17 + j);
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer_norm examples") {
    auto one = Tensor::ones({3});
    auto zero = Tensor::zeros({3});
    auto y = layer_norm(Tensor::from_values({3}, {5, 5, 5}), one, zero);
    CHECK(max_abs(y) == 0.0);

    PrecisionScope p64(DType::f64);
    auto fixed = layer_norm(Tensor::from_values({2}, {1, -1}), Tensor::ones({2}), Tensor::zeros({2}), 1e-12);
    CHECK(fixed.at(0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(fixed.at(1) == doctest::Approx(-1.0).epsilon(1e-10));

    std::mt19937_64 rng(1);
    auto x = rand64({4, 6}, rng);
    auto beta = rand64({6}, rng);
    auto gated = layer_norm(x, Tensor::zeros({6}), beta);
    for (int r = 0; r < 4; ++r) {
        for (int j = 0; j < 6; ++j) {
            CHECK(gated.at(r * 6 + j) == beta.at(j));
        }
    }
    auto norm = layer_norm(x, Tensor::ones({6}), Tensor::zeros({6}), 0.0);
    for (int r = 0; r < 4; ++r) {
        double m = 0.0;
        double v = 0.0;
        for (int j = 0; j < 6; ++j) {
            m += norm.at(r * 6 + j) / 6.0;
        }
        for (int j = 0; j < 6; ++j) {
            v += (norm.at(r * 6 + j) - m) * (norm.at(r * 6 + j) - m) / 6.0;
        }
        CHECK(std::abs(m) < 1e-5);
        CHECK(std::abs(v - 1.0) < 1e-5);
    }
    CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 0}), Tensor::zeros({0}), Tensor::zeros({0})), Error);
    CHECK_THROWS_AS(layer_norm(x, Tensor::ones({5}), Tensor::zeros({6})), Error);
}

TEST_CASE("bilinear_sample examples") {
    auto constant = Tensor::full({3, 5, 2}, 4.25);
    auto pts = Tensor::from_values({3, 2}, {0.1, 0.9, 0.5, 0.5, -3.0, 7.0});
    auto y = bilinear_sample(constant, pts);
    for (int i = 0; i < 6; ++i) {
        CHECK(y.at(i) == doctest::Approx(4.25));
    }
    auto map = Tensor::from_values({2, 2, 1}, {1, 2, 3, 4});
    auto center = bilinear_sample(map, Tensor::from_values({1, 2}, {0.5, 0.5}));
    CHECK(center.item() == doctest::Approx(2.5));
    // Texel (row 1, col 0) center is at ((0 + 0.5) / 2, (1 + 0.5) / 2).
    auto texel = bilinear_sample(map, Tensor::from_values({1, 2}, {0.25, 0.75}));
    CHECK(texel.item() == 3.0);
    CHECK_THROWS_AS(bilinear_sample(Tensor::zeros({0, 2, 1}), Tensor::zeros({1, 2})), Error);
    auto inf_pt = Tensor::from_values({1, 2}, {std::numeric_limits<double>::infinity(), 0.5});
    CHECK_THROWS_AS(bilinear_sample(map, inf_pt), Error);
}

TEST_CASE("bilinear_sample agrees with tent-weight oracle on random pairs") {
    PrecisionScope p64(DType::f64);
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> dim(1, 7);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int h = dim(rng);
        const int w = dim(rng);
        const int c = 1 + trial % 3;
        auto map = rand64({h, w, c}, rng, -2.0, 2.0);
        auto pt = rand64({1, 2}, rng, -0.2, 1.2);
        auto got = bilinear_sample(map, pt);
        auto want = tent_sample(map.to_vector(), h, w, c, pt.at(0), pt.at(1));
        for (int ch = 0; ch < c; ++ch) {
            worst = std::max(worst, std::abs(got.at(ch) - want[ch]));
        }
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("finite_diff_check examples") {
    PrecisionScope p64(DType::f64);
    std::mt19937_64 rng(5);
    auto soft = finite_diff_check("softmax", [](const std::vector<Tensor>& in) { return softmax_lastdim(in[0]); },
                                  {rand64({8}, rng)}, 1e-5, 1e-6);
    CHECK(soft.passed);
    CHECK(soft.max_rel_error < 1e-6);

    auto map = rand64({4, 4, 3}, rng);
    auto interior = Tensor::from_values({2, 2}, {0.41, 0.57, 0.33, 0.62}, DType::f64);
    auto bil = finite_diff_check(
        "bilinear_points", [map](const std::vector<Tensor>& in) { return bilinear_sample(map, in[0]); }, {interior},
        1e-6, 1e-5);
    CHECK(bil.max_rel_error < 1e-5);

    auto ident = finite_diff_check("identity", [](const std::vector<Tensor>& in) { return in[0]; },
                                   {rand64({5}, rng)});
    CHECK(ident.max_rel_error == 0.0);

    int calls = 0;
    auto flaky = [&calls](const std::vector<Tensor>& in) { return in[0] * static_cast<double>(++calls); };
    CHECK_THROWS_AS(finite_diff_check("flaky", flaky, {rand64({2}, rng)}), Error);
    CHECK_THROWS_AS(finite_diff_check("f32", [](const std::vector<Tensor>& in) { return in[0]; },
                                      {Tensor::zeros({2}, DType::f32)}),
                    Error);
}

TEST_CASE("every differentiable primitive passes gradient checks") {
    GradientSuiteOptions opts;
    opts.instances = 10;
    opts.groups = {"ops"};
    for (const auto& report : run_gradient_suite(opts).reports) {
        require_check(report, 1e-4);
    }
}

TEST_CASE("nll_loss edge cases") {
    auto uniform = log_softmax_lastdim(Tensor::zeros({4, 5}));
    CHECK(nll_loss(uniform, {0, 1, 2, 3}).item() == doctest::Approx(std::log(5.0)));
    auto x = Tensor::zeros({2, 3});
    x.set_requires_grad(true);
    auto loss = nll_loss(log_softmax_lastdim(x), {255, 255}, 255);
    CHECK(loss.item() == 0.0);
    loss.backward();
    CHECK(max_abs(x.grad()) == 0.0);
    CHECK_THROWS_AS(nll_loss(uniform, {0, 1, 7, 0}), Error);
}

TEST_CASE("conv2d matches direct convolution") {
    PrecisionScope p64(DType::f64);
    std::mt19937_64 rng(8);
    auto x = rand64({1, 4, 4, 2}, rng);
    auto w = rand64({18, 1}, rng);
    auto b = Tensor::zeros({1});
    auto y = conv2d(x, w, b, 3, 2, 1);
    REQUIRE(y.shape() == Shape{1, 2, 2, 1});
    for (int oy = 0; oy < 2; ++oy) {
        for (int ox = 0; ox < 2; ++ox) {
            double acc = 0.0;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const int iy = oy * 2 + ky - 1;
                    const int ix = ox * 2 + kx - 1;
                    if (iy < 0 || ix < 0 || iy >= 4 || ix >= 4) {
                        continue;
                    }
                    for (int c = 0; c < 2; ++c) {
                        acc += x.at((iy * 4 + ix) * 2 + c) * w.at((ky * 3 + kx) * 2 + c);
                    }
                }
            }
            CHECK(y.at(oy * 2 + ox) == doctest::Approx(acc).epsilon(1e-12));
        }
    }
}

TEST_CASE("adamw examples") {
    SUBCASE("zero learning rate leaves parameters unchanged") {
        auto w = Tensor::from_values({2}, {1.0, -2.0});
        w.set_requires_grad(true);
        AdamW opt({{"focusing", {w}, 1.0}});
        sum(square(w)).backward();
        opt.step(0.0);
        CHECK(w.at(0) == 1.0);
        CHECK(w.at(1) == -2.0);
        CHECK(opt.step_count() == 1);
    }
    SUBCASE("descent on w^2") {
        auto w = Tensor::from_values({1}, {1.0});
        w.set_requires_grad(true);
        AdamW opt({{"focusing", {w}, 1.0}});
        sum(square(w)).backward();
        opt.step(1e-3);
        CHECK(w.at(0) < 1.0);
    }
    SUBCASE("0.1 multiplier moves ten times less on the first step") {
        PrecisionScope p64(DType::f64);
        auto a = Tensor::from_values({1, 2}, {0.5, -0.25});
        auto b = a.clone();
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        AdamW opt({{"focusing", {a}, 1.0}, {"tunable", {b}, 0.1}}, {0.9, 0.999, 1e-8, 0.05});
        sum(mul(a, Tensor::from_values({1, 2}, {3.0, -1.5}))).backward();
        sum(mul(b, Tensor::from_values({1, 2}, {3.0, -1.5}))).backward();
        const double lr = 1e-3;
        opt.step(lr);
        // Closed-form first AdamW step: m_hat = g, v_hat = g^2.
        const double g[2] = {3.0, -1.5};
        const double w0[2] = {0.5, -0.25};
        for (int i = 0; i < 2; ++i) {
            auto expected = [&](double mult) {
                double x = w0[i];
                x -= lr * mult * 0.05 * x;
                return x - lr * mult * g[i] / (std::abs(g[i]) + 1e-8);
            };
            CHECK(a.at(i) == doctest::Approx(expected(1.0)).epsilon(1e-14));
            CHECK(b.at(i) == doctest::Approx(expected(0.1)).epsilon(1e-14));
            CHECK((w0[i] - a.at(i)) / (w0[i] - b.at(i)) == doctest::Approx(10.0).epsilon(1e-9));
        }
    }
    SUBCASE("errors and bookkeeping") {
        auto w = Tensor::zeros({2});
        w.set_requires_grad(true);
        CHECK_THROWS_AS(AdamW({{"a", {w}, 1.0}, {"b", {w}, 1.0}}), Error);
        AdamW opt({{"a", {w}, 1.0}});
        CHECK_THROWS_AS(opt.step(-1.0), Error);
        w.impl().grad = std::make_unique<Storage>(DType::f32, 3);
        CHECK_THROWS_AS(opt.step(1e-3), Error);
    }
}

TEST_CASE("frozen parameters are bit-identical after many steps") {
    std::mt19937_64 rng(4);
    auto trained = Tensor::randn({4, 4}, rng).set_requires_grad(true);
    auto frozen = Tensor::randn({4, 4}, rng).set_requires_grad(true);
    auto silenced = Tensor::randn({4}, rng).set_requires_grad(true);
    const auto frozen_before = frozen.to_vector();
    const auto silenced_before = silenced.to_vector();
    AdamW opt({{"focusing", {trained}, 1.0}, {"tunable", {silenced}, 0.0}});
    for (int step = 0; step < 25; ++step) {
        opt.zero_grad();
        frozen.zero_grad();
        auto loss = sum(square(matmul(trained, frozen) + silenced));
        loss.backward();
        opt.step(1e-2);
    }
    CHECK(frozen.to_vector() == frozen_before);
    CHECK(silenced.to_vector() == silenced_before);
    CHECK(opt.step_count() == 25);
    CHECK(opt.first_moment(0, 0).shape() == trained.shape());
    CHECK(opt.second_moment(1, 0).shape() == silenced.shape());
}

TEST_CASE("lr schedule") {
    LrSchedule s;  // 2e-4 base, 1 warmup epoch of 20
    s.steps_per_epoch = 1;
    CHECK(lr_at_step(s, 0) == 0.0);
    CHECK(lr_at_step(s, s.warmup_steps()) == doctest::Approx(2e-4).epsilon(1e-15));
    CHECK(lr_at_step(s, s.total_steps() - 1) == doctest::Approx(0.0));
    CHECK(std::abs(lr_at_step(s, s.total_steps() - 1)) < 1e-20);
    // decay span = 20 - 1 - 1 = 18 steps, midpoint at step 1 + 9.
    CHECK(lr_at_step(s, 10) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at_step(s, -1), Error);
    CHECK_THROWS_AS(lr_at_step(s, s.total_steps()), Error);

    s.steps_per_epoch = 37;
    double prev = lr_at_step(s, s.warmup_steps());
    for (std::int64_t t = 0; t < s.total_steps(); ++t) {
        const double lr = lr_at_step(s, t);
        CHECK(lr >= 0.0);
        if (t > s.warmup_steps()) {
            CHECK(lr <= prev);
            prev = lr;
        }
    }
}
