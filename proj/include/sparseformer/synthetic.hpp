#pragma once

#include "sparseformer/tensor.hpp"

#include <random>
#include <vector>

namespace sf {

/// Images stacked as [N, H, W, 3] with values in [0, 1]; labels may be empty.
struct ImageSet {
    Tensor images;
    std::vector<int> labels;
    int num_classes = 0;

    std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

/// Copies the listed images into a fresh [B, H, W, 3] batch.
Tensor gather_images(const Tensor& images, const std::vector<std::int64_t>& indices);

enum class ShapeKind { disc = 0, square = 1, triangle = 2, cross = 3 };

/// Procedural shapes: one shape (class id = ShapeKind) in a random color tinted
/// toward a per-class hue, on a noisy background. `num_classes` in [1, 4] restricts the classes used.
ImageSet make_shape_dataset(int count, int image_size, int num_classes, std::uint64_t seed);

/// Two-class segmentation toy: discs (class 1) on background (class 0).
struct SegmentationSet {
    Tensor images;               // [N, H, W, 3]
    std::vector<int> label_maps;  // N * H * W
    int height = 0;
    int width = 0;
    std::int64_t size() const { return images.defined() ? images.dim(0) : 0; }
};

SegmentationSet make_disc_segmentation(int count, int image_size, std::uint64_t seed);

}  // namespace sf
