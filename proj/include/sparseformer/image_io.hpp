#pragma once

#include "sparseformer/synthetic.hpp"

#include <string>
#include <vector>

namespace sf {

/// Reads a PNG or binary/ASCII PPM (P6/P3) file as [H, W, 3] f32 in [0, 1].
Tensor load_image(const std::string& path);

/// Writes [H, W, 3] values clamped to [0, 1] as 8-bit RGB.
void save_png(const std::string& path, const Tensor& image);
void save_ppm(const std::string& path, const Tensor& image);
std::vector<unsigned char> encode_png(const Tensor& image);

/// Every .png/.ppm/.pnm file directly inside `dir`, sorted by name, each resized
/// to size x size. No labels are read.
ImageSet load_image_dir(const std::string& dir, int size);

/// Writes each image of the set as NNNNN.png into `dir` (created if missing).
void save_image_dir(const std::string& dir, const Tensor& images);

/// Single-channel 8-bit label maps (class ids, 255 = ignore).
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<int> labels;
};
LabelMap load_label_png(const std::string& path);
void save_label_png(const std::string& path, const LabelMap& map);

std::string base64_encode(const std::vector<unsigned char>& bytes);

}  // namespace sf
