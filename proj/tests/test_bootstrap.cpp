#include "doctest.h"

#include "sparseformer/bootstrap.hpp"
#include "sparseformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

using namespace sf;

namespace {

struct Setup {
    TeacherWeights teacher;
    SparseFormer model;
    ImageSet data;
};

Setup tiny_setup(std::uint64_t seed, int images = 32) {
    std::mt19937_64 rng(seed);
    Setup s;
    s.teacher = init_teacher(tiny_teacher_spec(), rng);
    s.model = build_sparseformer(preset_spec("tiny"), s.teacher, rng);
    s.data = make_shape_dataset(images, 32, 4, seed + 100);
    return s;
}

BootstrapConfig quick_config() {
    BootstrapConfig cfg;
    cfg.epochs = 2;
    cfg.warmup_epochs = 1;
    cfg.base_lr = 1e-3;
    cfg.batch_size = 8;
    cfg.seed = 5;
    return cfg;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
        return false;
    }
    const std::size_t bytes = static_cast<std::size_t>(a.numel()) * (a.dtype() == DType::f32 ? 4 : 8);
    return std::memcmp(a.data<float>(), b.data<float>(), bytes) == 0;
}

std::vector<Tensor> snapshot(const NamedTensors& named) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named) {
        out.push_back(t.clone());
    }
    return out;
}

bool unchanged(const NamedTensors& named, const std::vector<Tensor>& before) {
    for (std::size_t i = 0; i < named.size(); ++i) {
        if (!bit_equal(named[i].second, before[i])) {
            return false;
        }
    }
    return true;
}

NamedTensors all_tensors(const SparseFormer& m) {
    NamedTensors out;
    for (const auto& rt : m.tensors()) {
        out.emplace_back(rt.name, rt.tensor);
    }
    return out;
}

Tensor gradient_image(int h, int w) {
    Tensor img = Tensor::zeros({h, w, 3}, DType::f32);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                img.set((static_cast<std::size_t>(y) * w + x) * 3 + c, (x * 7 + y * 3 + c * 11) % 17 / 16.0);
            }
        }
    }
    return img;
}

}  // namespace

TEST_CASE("a full-image crop without flip is the identity") {
    Tensor img = gradient_image(12, 12);
    Tensor out = apply_crop(img, {0.0, 0.0, 12.0, 12.0, false}, 12);
    CHECK(bit_equal(out, img));

    BootstrapConfig cfg;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.crop_aspect_min = cfg.crop_aspect_max = 1.0;
    cfg.flip_prob = 0.0;
    std::mt19937_64 rng(1);
    CHECK(bit_equal(augment(img, 12, cfg, rng), img));
}

TEST_CASE("flipping twice restores the image") {
    Tensor img = gradient_image(9, 9);
    Tensor once = apply_crop(img, {0.0, 0.0, 9.0, 9.0, true}, 9);
    CHECK_FALSE(bit_equal(once, img));
    CHECK(once.at(0) == img.at(8 * 3));
    CHECK(bit_equal(apply_crop(once, {0.0, 0.0, 9.0, 9.0, true}, 9), img));
}

TEST_CASE("crop sampling: flip rate and uniform area fraction") {
    BootstrapConfig cfg;
    std::mt19937_64 rng(7);
    const int draws = 10000;
    const int side = 48;
    std::vector<double> fractions;
    int flips = 0;
    for (int i = 0; i < draws; ++i) {
        CropParams c = sample_crop(side, side, cfg, rng);
        flips += c.flip ? 1 : 0;
        const double aspect = c.width / c.height;
        CHECK(aspect >= cfg.crop_aspect_min - 1e-12);
        CHECK(aspect <= cfg.crop_aspect_max + 1e-12);
        fractions.push_back(c.width * c.height / (side * side));
    }
    CHECK(std::abs(flips / static_cast<double>(draws) - 0.5) < 0.02);

    // Kolmogorov-Smirnov against U(0.5, 1); 1.63/sqrt(n) is the 1% critical value.
    std::sort(fractions.begin(), fractions.end());
    double d = 0.0;
    for (int i = 0; i < draws; ++i) {
        const double cdf = (fractions[i] - 0.5) / 0.5;
        d = std::max({d, std::abs(cdf - i / static_cast<double>(draws)),
                      std::abs((i + 1) / static_cast<double>(draws) - cdf)});
    }
    CHECK(d < 1.63 / std::sqrt(static_cast<double>(draws)));

    for (int i = 0; i < 2000; ++i) {
        CropParams c = sample_crop(40, 64, cfg, rng);
        CHECK(c.x0 >= 0.0);
        CHECK(c.y0 >= 0.0);
        CHECK(c.x0 + c.width <= 64 + 1e-9);
        CHECK(c.y0 + c.height <= 40 + 1e-9);
    }
    CHECK_THROWS_AS(sample_crop(1, 10, cfg, rng), Error);
}

TEST_CASE("cosine alignment loss examples") {
    Tensor a = Tensor::from_values({2, 2}, {1.0, 0.0, 0.0, 2.0}, DType::f64);
    CHECK(cosine_align_loss(a, a).item() == doctest::Approx(0.0).epsilon(1e-12));
    Tensor orth = Tensor::from_values({2, 2}, {0.0, 3.0, 5.0, 0.0}, DType::f64);
    CHECK(cosine_align_loss(a, orth).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_align_loss(a, neg(a)).item() == doctest::Approx(2.0).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_align_loss(a, Tensor::zeros({2, 2}, DType::f64)), Error);
    CHECK_THROWS_AS(cosine_align_loss(a, Tensor::zeros({2, 3}, DType::f64)), Error);
}

TEST_CASE("cosine loss does not propagate into the target") {
    std::mt19937_64 rng(3);
    Tensor s = Tensor::randn({3, 5}, rng, 1.0, DType::f64).set_requires_grad();
    Tensor t = Tensor::randn({3, 5}, rng, 1.0, DType::f64).set_requires_grad();
    cosine_align_loss(s, t).backward();
    CHECK(s.has_grad());
    CHECK_FALSE(t.has_grad());
}

TEST_CASE("KL distillation at low temperature approaches cross-entropy on the teacher argmax") {
    Tensor s = Tensor::from_values({2, 3}, {0.3, -1.2, 2.0, 0.5, 0.1, -0.4}, DType::f64);
    Tensor t = Tensor::from_values({2, 3}, {0.0, 4.0, 1.0, 3.0, 2.5, -1.0}, DType::f64);
    auto log_softmax_at = [](const std::vector<double>& row, int k) {
        double m = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) {
            z += std::exp(v - m);
        }
        return row[k] - m - std::log(z);
    };
    const double ce = -0.5 * (log_softmax_at({0.3, -1.2, 2.0}, 1) + log_softmax_at({0.5, 0.1, -0.4}, 0));
    CHECK(kl_distill_loss(s, t, 1e-3).item() == doctest::Approx(ce).epsilon(1e-9));
    CHECK(kl_distill_loss(s, t, 1.0).item() < ce);
    CHECK_THROWS_AS(kl_distill_loss(s, t, 0.0), Error);
}

TEST_CASE("zero epochs leaves the model untouched") {
    Setup s = tiny_setup(1);
    auto before = snapshot(all_tensors(s.model));
    BootstrapConfig cfg = quick_config();
    cfg.epochs = 0;
    cfg.warmup_epochs = 0;
    auto r = bootstrap_run(s.teacher, s.model, s.data, cfg);
    CHECK(r.steps.empty());
    CHECK(unchanged(all_tensors(s.model), before));
}

TEST_CASE("bootstrap runs are deterministic and follow the warmup-cosine schedule") {
    Setup a = tiny_setup(2);
    Setup b = tiny_setup(2);
    BootstrapConfig cfg = quick_config();
    cfg.epochs = 3;
    auto ra = bootstrap_run(a.teacher, a.model, a.data, cfg);
    auto rb = bootstrap_run(b.teacher, b.model, b.data, cfg);
    REQUIRE(ra.steps.size() == 12);
    REQUIRE(rb.steps.size() == ra.steps.size());
    for (std::size_t i = 0; i < ra.steps.size(); ++i) {
        CHECK(ra.steps[i].loss == rb.steps[i].loss);
    }

    const double warm = 4.0;
    const double total = 12.0;
    for (const auto& rec : ra.steps) {
        const double k = static_cast<double>(rec.step);
        const double expect = k < warm ? cfg.base_lr * k / warm
                                       : cfg.base_lr * 0.5 *
                                             (1.0 + std::cos(std::numbers::pi * (k - warm) / (total - warm - 1.0)));
        CHECK(std::abs(rec.lr - expect) < 1e-9);
    }
    CHECK(ra.steps[4].lr == doctest::Approx(cfg.base_lr));
    CHECK(ra.steps.back().lr == doctest::Approx(0.0));
    CHECK(ra.epoch_mean_loss.size() == 3);
}

TEST_CASE("warmup epochs hold tunable blocks fixed while focusing trains") {
    Setup s = tiny_setup(3);
    ParameterGroups g = parameter_groups(s.model);
    auto tunable = snapshot(g.tunable);
    auto focusing = snapshot(g.focusing);
    BootstrapConfig cfg = quick_config();
    cfg.epochs = 1;
    cfg.warmup_epochs = 1;
    bootstrap_run(s.teacher, s.model, s.data, cfg);
    CHECK(unchanged(g.tunable, tunable));
    CHECK_FALSE(unchanged(g.focusing, focusing));
}

TEST_CASE("frozen tensors stay bit-identical and tunable blocks move after warmup") {
    Setup s = tiny_setup(4);
    ParameterGroups g = parameter_groups(s.model);
    auto frozen = snapshot(g.frozen);
    auto tunable = snapshot(g.tunable);
    BootstrapConfig cfg = quick_config();
    bootstrap_run(s.teacher, s.model, s.data, cfg);
    CHECK(unchanged(g.frozen, frozen));
    CHECK_FALSE(unchanged(g.tunable, tunable));
    for (const auto& [name, t] : g.focusing) {
        CHECK_FALSE(t.requires_grad());
    }
}

TEST_CASE("continuing with more tokens grows the token state and keeps training") {
    Setup s = tiny_setup(5);
    BootstrapConfig cfg = quick_config();
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    bootstrap_run(s.teacher, s.model, s.data, cfg);
    ContinueConfig cont;
    cont.new_tokens = 25;
    cont.epochs = 1;
    cont.base_lr = 2e-4;
    auto r = continue_with_more_tokens(s.teacher, s.model, s.data, cont, cfg);
    CHECK(s.model.spec.n_tokens == 25);
    CHECK(s.model.focusing.n_tokens() == 25);
    CHECK(r.steps.size() == 4);
    CHECK(std::isfinite(evaluate_alignment(s.teacher, s.model, s.data.images)));
    cont.new_tokens = 9;
    CHECK_THROWS_AS(continue_with_more_tokens(s.teacher, s.model, s.data, cont, cfg), Error);
}

TEST_CASE("bootstrap input validation") {
    Setup s = tiny_setup(6);
    BootstrapConfig cfg = quick_config();
    ImageSet empty;
    CHECK_THROWS_AS(bootstrap_run(s.teacher, s.model, empty, cfg), Error);
    cfg.warmup_epochs = 5;
    CHECK_THROWS_AS(bootstrap_run(s.teacher, s.model, s.data, cfg), Error);
    cfg = quick_config();
    cfg.crop_scale_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    CHECK(parse_objective("kl") == AlignObjective::kl_distill);
    CHECK_THROWS_AS(parse_objective("cosin"), Error);
}

TEST_CASE("KL and cls objectives run") {
    Setup s = tiny_setup(7, 16);
    BootstrapConfig cfg = quick_config();
    cfg.epochs = 1;
    cfg.warmup_epochs = 0;
    for (auto obj : {AlignObjective::kl_distill, AlignObjective::cosine_with_cls}) {
        cfg.objective = obj;
        auto r = bootstrap_run(s.teacher, s.model, s.data, cfg);
        CHECK(r.steps.size() == 2);
        CHECK(std::isfinite(r.steps.back().loss));
    }
}
