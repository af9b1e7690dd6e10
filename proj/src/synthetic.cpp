#include "sparseformer/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace sf {

namespace {

bool inside(ShapeKind kind, double dx, double dy, double r) {
    switch (kind) {
        case ShapeKind::disc:
            return dx * dx + dy * dy <= r * r;
        case ShapeKind::square:
            return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
        case ShapeKind::triangle:
            return dy <= r && dy >= -r && std::abs(dx) <= 0.5 * (dy + r);
        case ShapeKind::cross:
            return (std::abs(dx) <= r / 3.0 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3.0 && std::abs(dx) <= r);
    }
    return false;
}

// Foreground colors lean toward a per-class hue.
constexpr double kClassTint = 0.35;
constexpr double kPalette[4][3] = {{1.0, 0.45, 0.45}, {0.45, 1.0, 0.45}, {0.45, 0.45, 1.0}, {1.0, 1.0, 0.45}};

std::array<double, 3> random_color(std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    return {u(rng), u(rng), u(rng)};
}

}  // namespace

Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& indices) {
    const std::int64_t h = images.dim(1);
    const std::int64_t w = images.dim(2);
    const std::int64_t c = images.dim(3);
    const std::int64_t per = h * w * c;
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(indices.size()), h, w, c}, images.dtype());
    dispatch(images.dtype(), [&]<class T>(std::type_identity<T>) {
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] < 0 || indices[i] >= images.dim(0)) {
                throw Error("gather_images: index out of range");
            }
            std::copy_n(images.data<T>() + indices[i] * per, per, out.data<T>() + static_cast<std::int64_t>(i) * per);
        }
    });
    return out;
}

ImageSet make_shape_dataset(int count, int image_size, int num_classes, std::uint64_t seed) {
    if (num_classes < 1 || num_classes > 4) {
        throw Error("make_shape_dataset: num_classes must be in [1, 4]");
    }
    if (count < 0 || image_size < 4) {
        throw Error("make_shape_dataset: invalid count or image size");
    }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick_class(0, num_classes - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.04);
    ImageSet set;
    set.num_classes = num_classes;
    set.images = Tensor::zeros({count, image_size, image_size, 3}, DType::f32);
    float* px = set.images.data<float>();
    const int ss = 3;  // supersampling per axis
    for (int n = 0; n < count; ++n) {
        const int label = pick_class(rng);
        set.labels.push_back(label);
        const double r = 0.22 + 0.14 * unit(rng);
        const double cx = r + (1.0 - 2.0 * r) * unit(rng);
        const double cy = r + (1.0 - 2.0 * r) * unit(rng);
        auto fg = random_color(rng, 0.45, 1.0);
        auto bg = random_color(rng, 0.0, 0.35);
        for (int ch = 0; ch < 3; ++ch) {
            fg[ch] = (1.0 - kClassTint) * fg[ch] + kClassTint * kPalette[label][ch];
        }
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                int hits = 0;
                for (int sy = 0; sy < ss; ++sy) {
                    for (int sx = 0; sx < ss; ++sx) {
                        const double u = (x + (sx + 0.5) / ss) / image_size;
                        const double v = (y + (sy + 0.5) / ss) / image_size;
                        hits += inside(static_cast<ShapeKind>(label), u - cx, v - cy, r) ? 1 : 0;
                    }
                }
                const double cover = static_cast<double>(hits) / (ss * ss);
                for (int ch = 0; ch < 3; ++ch) {
                    const double val = cover * fg[ch] + (1.0 - cover) * bg[ch] + noise(rng);
                    px[((static_cast<std::int64_t>(n) * image_size + y) * image_size + x) * 3 + ch] =
                        static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        }
    }
    return set;
}

SegmentationSet make_disc_segmentation(int count, int image_size, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.04);
    SegmentationSet set;
    set.height = image_size;
    set.width = image_size;
    set.images = Tensor::zeros({count, image_size, image_size, 3}, DType::f32);
    set.label_maps.assign(static_cast<std::size_t>(count) * image_size * image_size, 0);
    float* px = set.images.data<float>();
    for (int n = 0; n < count; ++n) {
        const int discs = 1 + static_cast<int>(unit(rng) * 2.0);
        std::vector<std::array<double, 3>> geo;
        for (int d = 0; d < discs; ++d) {
            const double r = 0.12 + 0.13 * unit(rng);
            geo.push_back({r + (1.0 - 2.0 * r) * unit(rng), r + (1.0 - 2.0 * r) * unit(rng), r});
        }
        auto fg = random_color(rng, 0.5, 1.0);
        auto bg = random_color(rng, 0.0, 0.35);
        for (int y = 0; y < image_size; ++y) {
            for (int x = 0; x < image_size; ++x) {
                const double u = (x + 0.5) / image_size;
                const double v = (y + 0.5) / image_size;
                bool in = false;
                for (const auto& g : geo) {
                    in = in || (u - g[0]) * (u - g[0]) + (v - g[1]) * (v - g[1]) <= g[2] * g[2];
                }
                const std::size_t pix = (static_cast<std::size_t>(n) * image_size + y) * image_size + x;
                set.label_maps[pix] = in ? 1 : 0;
                for (int ch = 0; ch < 3; ++ch) {
                    const double val = (in ? fg[ch] : bg[ch]) + noise(rng);
                    px[pix * 3 + ch] = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        }
    }
    return set;
}

}  // namespace sf
