#include "sparseformer/image_io.hpp"

#include "sparseformer/bootstrap.hpp"
#include "sparseformer/ops.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

namespace sf {

namespace {

namespace fs = std::filesystem;

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::string& path, const char* mode) {
    FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
    if (!f) {
        throw Error("cannot open " + path);
    }
    return f;
}

std::string lower_ext(const std::string& path) {
    std::string ext = fs::path(path).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void check_rgb(const Tensor& image, const char* what) {
    if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) < 1 || image.dim(1) < 1) {
        throw Error(std::string(what) + ": expected image [H, W, 3], got " + shape_str(image.shape()));
    }
}

// Decodes any PNG to 8-bit rows with `channels` channels (1 = gray, 3 = RGB).
std::vector<unsigned char> read_png(const std::string& path, int channels, int& width, int& height) {
    FilePtr f = open_file(path, "rb");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw Error(path + " is not a PNG file");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng initialization failed");
    }
    std::vector<unsigned char> pixels;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("corrupt PNG data in " + path);
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    if (png_get_bit_depth(png, info) == 16) {
        png_set_strip_16(png);
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS) || (color & PNG_COLOR_MASK_ALPHA)) {
        png_set_strip_alpha(png);
    }
    const bool gray = color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA;
    if (channels == 3 && gray) {
        png_set_gray_to_rgb(png);
    }
    if (channels == 1 && !gray) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error(path + ": expected a single-channel PNG");
    }
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    pixels.resize(stride * static_cast<std::size_t>(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) {
        rows[y] = pixels.data() + stride * static_cast<std::size_t>(y);
    }
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return pixels;
}

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
    auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
    out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

std::vector<unsigned char> write_png(const std::vector<unsigned char>& pixels, int width, int height, int channels) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng initialization failed");
    }
    std::vector<unsigned char> out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("PNG encoding failed");
    }
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error("cannot write " + path);
    }
}

std::vector<unsigned char> rgb_bytes(const Tensor& image) {
    std::vector<unsigned char> px(static_cast<std::size_t>(image.numel()));
    for (std::size_t i = 0; i < px.size(); ++i) {
        px[i] = to_byte(image.at(i));
    }
    return px;
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open " + path);
    }
    auto token = [&]() {
        std::string t;
        while (in >> t) {
            if (t[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return t;
        }
        throw Error(path + ": truncated PPM header");
    };
    const std::string magic = token();
    if (magic != "P6" && magic != "P3") {
        throw Error(path + ": unsupported PPM variant " + magic);
    }
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::logic_error&) {
        throw Error(path + ": malformed PPM header");
    }
    if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
        throw Error(path + ": unsupported PPM dimensions or depth");
    }
    Tensor img = Tensor::zeros({h, w, 3}, DType::f32);
    const std::size_t n = static_cast<std::size_t>(w) * h * 3;
    if (magic == "P6") {
        in.get();
        std::vector<unsigned char> buf(n);
        if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n))) {
            throw Error(path + ": truncated PPM pixel data");
        }
        for (std::size_t i = 0; i < n; ++i) {
            img.set(i, buf[i] / static_cast<double>(maxval));
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            img.set(i, std::stoi(token()) / static_cast<double>(maxval));
        }
    }
    return img;
}

}  // namespace

Tensor load_image(const std::string& path) {
    const std::string ext = lower_ext(path);
    if (ext == ".ppm" || ext == ".pnm") {
        return read_ppm(path);
    }
    if (ext != ".png") {
        throw Error("unsupported image format: " + path);
    }
    int w = 0, h = 0;
    auto px = read_png(path, 3, w, h);
    Tensor img = Tensor::zeros({h, w, 3}, DType::f32);
    for (std::size_t i = 0; i < px.size(); ++i) {
        img.set(i, px[i] / 255.0);
    }
    return img;
}

std::vector<unsigned char> encode_png(const Tensor& image) {
    check_rgb(image, "encode_png");
    return write_png(rgb_bytes(image), static_cast<int>(image.dim(1)), static_cast<int>(image.dim(0)), 3);
}

void save_png(const std::string& path, const Tensor& image) { write_bytes(path, encode_png(image)); }

void save_ppm(const std::string& path, const Tensor& image) {
    check_rgb(image, "save_ppm");
    std::ostringstream head;
    head << "P6\n" << image.dim(1) << ' ' << image.dim(0) << "\n255\n";
    const std::string h = head.str();
    std::vector<unsigned char> bytes(h.begin(), h.end());
    auto px = rgb_bytes(image);
    bytes.insert(bytes.end(), px.begin(), px.end());
    write_bytes(path, bytes);
}

ImageSet load_image_dir(const std::string& dir, int size) {
    if (!fs::is_directory(dir)) {
        throw Error("image directory not found: " + dir);
    }
    std::vector<std::string> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string ext = lower_ext(entry.path().string());
        if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm" || ext == ".pnm")) {
            files.push_back(entry.path().string());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
        throw Error("no PNG/PPM images in " + dir);
    }
    ImageSet set;
    const std::int64_t per = static_cast<std::int64_t>(size) * size * 3;
    set.images = Tensor::zeros({static_cast<std::int64_t>(files.size()), size, size, 3}, DType::f32);
    for (std::size_t i = 0; i < files.size(); ++i) {
        Tensor img = load_image(files[i]);
        Tensor fit = apply_crop(img, {0.0, 0.0, static_cast<double>(img.dim(1)), static_cast<double>(img.dim(0)), false},
                                size);
        std::copy_n(fit.data<float>(), per, set.images.data<float>() + static_cast<std::int64_t>(i) * per);
    }
    return set;
}

void save_image_dir(const std::string& dir, const Tensor& images) {
    fs::create_directories(dir);
    for (std::int64_t i = 0; i < images.dim(0); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05lld.png", static_cast<long long>(i));
        save_png((fs::path(dir) / name).string(),
                 select(images, 0, i));
    }
}

LabelMap load_label_png(const std::string& path) {
    LabelMap m;
    auto px = read_png(path, 1, m.width, m.height);
    m.labels.assign(px.begin(), px.end());
    return m;
}

void save_label_png(const std::string& path, const LabelMap& map) {
    std::vector<unsigned char> px;
    for (int v : map.labels) {
        if (v < 0 || v > 255) {
            throw Error("save_label_png: label " + std::to_string(v) + " does not fit in 8 bits");
        }
        px.push_back(static_cast<unsigned char>(v));
    }
    if (px.size() != static_cast<std::size_t>(map.width) * map.height) {
        throw Error("save_label_png: label count does not match dimensions");
    }
    write_bytes(path, write_png(px, map.width, map.height, 1));
}

std::string base64_encode(const std::vector<unsigned char>& bytes) {
    static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    for (std::size_t i = 0; i < bytes.size(); i += 3) {
        const std::uint32_t b0 = bytes[i];
        const std::uint32_t b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
        const std::uint32_t b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
        const std::uint32_t v = (b0 << 16) | (b1 << 8) | b2;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += i + 1 < bytes.size() ? table[(v >> 6) & 63] : '=';
        out += i + 2 < bytes.size() ? table[v & 63] : '=';
    }
    return out;
}

}  // namespace sf
