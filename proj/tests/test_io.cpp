#include "doctest.h"

#include "sparseformer/checkpoint.hpp"
#include "sparseformer/config.hpp"
#include "sparseformer/image_io.hpp"
#include "sparseformer/ops.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

using namespace sf;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
    static const fs::path dir = [] {
        fs::path p = fs::temp_directory_path() / ("sf_test_io_" + std::to_string(::getpid()));
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return dir;
}

std::string scratch(const std::string& name) { return (scratch_dir() / name).string(); }

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() && a.dtype() == b.dtype() &&
           std::memcmp(a.data<float>(), b.data<float>(), static_cast<std::size_t>(a.numel()) * 4) == 0;
}

CheckpointArchive three_tensors() {
    std::mt19937_64 rng(1);
    CheckpointArchive a;
    a.metadata["kind"] = "test";
    a.entries.push_back({"a.w", Tensor::randn({3, 4}, rng, 1.0, DType::f32), "focusing"});
    a.entries.push_back({"b", Tensor::randn({5}, rng, 1.0, DType::f32), "frozen"});
    a.entries.push_back({"c.scalarish", Tensor::randn({1, 1, 2}, rng, 1.0, DType::f32), "tunable"});
    return a;
}

CheckpointError::Kind load_error(const std::string& path) {
    try {
        load_checkpoint(path);
    } catch (const CheckpointError& e) {
        return e.kind();
    }
    FAIL("load_checkpoint accepted a damaged archive");
    return CheckpointError::Kind::io;
}

Tensor test_image(int h, int w) {
    Tensor img = Tensor::zeros({h, w, 3}, DType::f32);
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        img.set(static_cast<std::size_t>(i), static_cast<double>((i * 37) % 256) / 255.0);
    }
    return img;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-identical") {
    auto a = three_tensors();
    save_checkpoint(scratch("three.ckpt"), a);
    auto b = load_checkpoint(scratch("three.ckpt"));
    REQUIRE(b.entries.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(b.entries[i].name == a.entries[i].name);
        CHECK(b.entries[i].role == a.entries[i].role);
        CHECK(bit_equal(b.entries[i].tensor, a.entries[i].tensor));
    }
    CHECK(b.metadata["kind"] == "test");
    CHECK(b.find("missing") == nullptr);
    CHECK_THROWS_AS(b.get("missing"), CheckpointError);

    save_checkpoint(scratch("three_again.ckpt"), b);
    CHECK(read_file(scratch("three.ckpt")) == read_file(scratch("three_again.ckpt")));
}

TEST_CASE("an empty tensor set is a valid archive") {
    save_checkpoint(scratch("empty.ckpt"), CheckpointArchive{});
    auto b = load_checkpoint(scratch("empty.ckpt"));
    CHECK(b.entries.empty());
}

TEST_CASE("checkpoint damage is reported with distinct errors") {
    using Kind = CheckpointError::Kind;
    save_checkpoint(scratch("good.ckpt"), three_tensors());
    const std::string good = read_file(scratch("good.ckpt"));

    write_file(scratch("trunc.ckpt"), good.substr(0, good.size() - 1));
    CHECK(load_error(scratch("trunc.ckpt")) == Kind::truncated_payload);

    write_file(scratch("long.ckpt"), good + "x");
    CHECK(load_error(scratch("long.ckpt")) == Kind::corrupt_manifest);

    std::string magic = good;
    magic[0] = 'X';
    write_file(scratch("magic.ckpt"), magic);
    CHECK(load_error(scratch("magic.ckpt")) == Kind::bad_magic);

    std::string manifest = good;
    manifest[16] = '!';
    write_file(scratch("manifest.ckpt"), manifest);
    CHECK(load_error(scratch("manifest.ckpt")) == Kind::corrupt_manifest);

    std::string version = good;
    const auto pos = version.find("\"format_version\":1");
    REQUIRE(pos != std::string::npos);
    version[pos + std::strlen("\"format_version\":")] = '7';
    write_file(scratch("version.ckpt"), version);
    CHECK(load_error(scratch("version.ckpt")) == Kind::version_mismatch);

    CHECK(load_error(scratch("does_not_exist.ckpt")) == Kind::io);

    auto dup = three_tensors();
    dup.entries[2].name = "b";
    try {
        save_checkpoint(scratch("dup.ckpt"), dup);
        FAIL("duplicate names were accepted");
    } catch (const CheckpointError& e) {
        CHECK(e.kind() == Kind::duplicate_name);
    }
}

TEST_CASE("teacher and model archives restore identical forwards") {
    std::mt19937_64 rng(2);
    TeacherWeights teacher = init_teacher(tiny_teacher_spec(), rng);
    SparseFormer model = build_sparseformer(preset_spec("tiny"), teacher, rng);
    save_checkpoint(scratch("teacher.ckpt"), teacher_archive(teacher));
    save_checkpoint(scratch("model.ckpt"), model_archive(model));
    TeacherWeights t2 = teacher_from_archive(load_checkpoint(scratch("teacher.ckpt")));
    SparseFormer m2 = model_from_archive(load_checkpoint(scratch("model.ckpt")));

    Tensor images = make_shape_dataset(3, 32, 4, 9).images;
    NoGradGuard no_grad;
    CHECK(bit_equal(teacher_forward(images, teacher), teacher_forward(images, t2)));
    CHECK(bit_equal(sparseformer_forward(images, model).representation, sparseformer_forward(images, m2).representation));
    CHECK(m2.cortex.tunable_count == model.cortex.tunable_count);
    CHECK(m2.cortex.first_index == model.cortex.first_index);

    auto archive = model_archive(model);
    for (const auto& e : archive.entries) {
        if (e.name.find("focus.init.center") != std::string::npos) {
            CHECK(e.role == "focusing");
        }
    }
    CHECK_THROWS_AS(teacher_from_archive(archive), CheckpointError);
}

TEST_CASE("PNG and PPM round trips are exact for 8-bit values") {
    Tensor img = test_image(5, 7);
    save_png(scratch("img.png"), img);
    save_ppm(scratch("img.ppm"), img);
    CHECK(bit_equal(load_image(scratch("img.png")), img));
    CHECK(bit_equal(load_image(scratch("img.ppm")), img));

    write_file(scratch("ascii.ppm"), "P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n");
    Tensor ascii = load_image(scratch("ascii.ppm"));
    REQUIRE(ascii.shape() == Shape{1, 2, 3});
    CHECK(ascii.at(0) == 1.0);
    CHECK(ascii.at(1) == 0.0);
    CHECK(ascii.at(5) == 1.0);

    write_file(scratch("short.ppm"), "P6\n4 4\n255\nabc");
    CHECK_THROWS_AS(load_image(scratch("short.ppm")), Error);
    write_file(scratch("fake.png"), "not a png");
    CHECK_THROWS_AS(load_image(scratch("fake.png")), Error);
    CHECK_THROWS_AS(load_image(scratch("img.jpg")), Error);
}

TEST_CASE("grayscale PNGs load as RGB and label maps round trip") {
    LabelMap map{2, 3, {0, 1, 2, 255, 1, 0}};
    save_label_png(scratch("labels.png"), map);
    LabelMap back = load_label_png(scratch("labels.png"));
    CHECK(back.height == 2);
    CHECK(back.width == 3);
    CHECK(back.labels == map.labels);

    Tensor rgb = load_image(scratch("labels.png"));
    REQUIRE(rgb.shape() == Shape{2, 3, 3});
    CHECK(rgb.at(3 * 3 + 0) == 1.0);
    CHECK(rgb.at(3 * 3 + 2) == 1.0);

    map.labels[0] = 300;
    CHECK_THROWS_AS(save_label_png(scratch("bad.png"), map), Error);
}

TEST_CASE("image directories load sorted and resized") {
    const std::string dir = scratch("images");
    Tensor batch = make_shape_dataset(3, 16, 4, 4).images;
    save_image_dir(dir, batch);
    write_file(scratch("images/notes.txt"), "ignored");
    ImageSet set = load_image_dir(dir, 16);
    REQUIRE(set.size() == 3);
    CHECK(set.labels.empty());
    for (std::int64_t i = 0; i < batch.numel(); ++i) {
        CHECK(std::abs(set.images.at(static_cast<std::size_t>(i)) - batch.at(static_cast<std::size_t>(i))) <=
              0.5 / 255.0 + 1e-6);
    }
    CHECK(load_image_dir(dir, 8).images.shape() == Shape{3, 8, 8, 3});
    CHECK_THROWS_AS(load_image_dir(scratch("nowhere"), 8), Error);
    fs::create_directories(scratch("blank"));
    CHECK_THROWS_AS(load_image_dir(scratch("blank"), 8), Error);
}

TEST_CASE("base64 known vectors") {
    auto enc = [](const std::string& s) { return base64_encode(std::vector<unsigned char>(s.begin(), s.end())); };
    CHECK(enc("") == "");
    CHECK(enc("M") == "TQ==");
    CHECK(enc("Ma") == "TWE=");
    CHECK(enc("Man") == "TWFu");
    CHECK(enc("any carnal pleasure.") == "YW55IGNhcm5hbCBwbGVhc3VyZS4=");
}

TEST_CASE("run config parsing is strict") {
    RunConfig cfg = parse_run_config("# toy run\nepochs = 5\nbase_lr=1e-3 # inline\n\nbatch_size = 8\n"
                                     "augment = false\nobjective = kl\nspec = tiny\nimages = /data/x\n");
    CHECK(cfg.bootstrap.epochs == 5);
    CHECK(cfg.bootstrap.base_lr == 1e-3);
    CHECK(cfg.bootstrap.batch_size == 8);
    CHECK_FALSE(cfg.bootstrap.augment);
    CHECK(cfg.bootstrap.objective == AlignObjective::kl_distill);
    CHECK(cfg.images == "/data/x");

    auto message = [](const std::string& text) {
        try {
            parse_run_config(text);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message("epochs = 5\nbase_lrr = 1\n").find("'base_lrr'") != std::string::npos);
    CHECK(message("epochs = 5\nepochs = 6\n").find("twice") != std::string::npos);
    CHECK(message("epochs = five\n").find("'epochs'") != std::string::npos);
    CHECK(message("epochs\n").find("line 1") != std::string::npos);
    CHECK(message("augment = maybe\n").find("'augment'") != std::string::npos);
    CHECK(message("epochs = 2\nwarmup_epochs = 9\n").find("warmup") != std::string::npos);

    RunConfig again = parse_run_config(format_run_config(cfg));
    CHECK(again.bootstrap.base_lr == cfg.bootstrap.base_lr);
    CHECK(again.bootstrap.objective == cfg.bootstrap.objective);
    CHECK(again.images == cfg.images);
    CHECK(again.spec == cfg.spec);
}
