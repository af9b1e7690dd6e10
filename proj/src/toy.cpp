#include "sparseformer/toy.hpp"

#include "sparseformer/checkpoint.hpp"
#include "sparseformer/ops.hpp"

#include <chrono>
#include <cstring>
#include <filesystem>
#include <sstream>

namespace sf {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

bool bit_identical(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) {
        return false;
    }
    return dispatch(a.dtype(), [&]<class T>(std::type_identity<T>) {
        return std::memcmp(a.data<T>(), b.data<T>(), static_cast<std::size_t>(a.numel()) * sizeof(T)) == 0;
    });
}

ToyExperimentResult run_toy_experiment(const ToyExperimentConfig& cfg) {
    auto log = [&](const std::string& s) {
        if (cfg.log) {
            cfg.log(s);
        }
    };
    ToyExperimentResult res;
    const std::uint64_t seed = cfg.seed;

    auto t0 = std::chrono::steady_clock::now();
    TeacherWeights teacher;
    if (!cfg.teacher_cache.empty() && std::filesystem::exists(cfg.teacher_cache)) {
        teacher = teacher_from_archive(load_checkpoint(cfg.teacher_cache));
        log("teacher loaded from " + cfg.teacher_cache);
    } else {
        TeacherTrainConfig tc;
        tc.steps = cfg.teacher_steps;
        tc.seed = seed;
        tc.on_log = [&](int step, double loss) {
            std::ostringstream os;
            os << "teacher step " << step << " loss " << loss;
            log(os.str());
        };
        const ImageSet train = make_shape_dataset(cfg.teacher_train_images, 32, 4, seed + 1);
        teacher = train_toy_teacher(train, tiny_teacher_spec(), tc).weights;
        if (!cfg.teacher_cache.empty()) {
            save_checkpoint(cfg.teacher_cache, teacher_archive(teacher));
        }
    }
    res.teacher_accuracy = teacher_accuracy(teacher, make_shape_dataset(cfg.teacher_test_images, 32, 4, seed + 2));
    res.teacher_seconds = seconds_since(t0);

    const ImageSet data = make_shape_dataset(cfg.bootstrap_images, 32, 4, seed + 11);
    ImageSet unlabeled{data.images, {}, 0};
    const ImageSet held = make_shape_dataset(cfg.held_out_images, 32, 4, seed + 12);
    std::mt19937_64 rng(seed + 3);
    SparseFormer model = build_sparseformer(preset_spec("tiny"), teacher, rng);
    res.initial_loss = evaluate_alignment(teacher, model, held.images);

    std::vector<RoleTensor> before;
    for (const auto& t : model.tensors()) {
        before.push_back({t.name, t.tensor.clone(), t.role});
    }

    BootstrapConfig bc;
    bc.epochs = cfg.epochs;
    bc.warmup_epochs = cfg.warmup_epochs;
    bc.base_lr = cfg.base_lr;
    bc.batch_size = cfg.batch_size;
    bc.seed = seed;
    t0 = std::chrono::steady_clock::now();
    res.bootstrap = bootstrap_run(teacher, model, unlabeled, bc);
    res.bootstrap_seconds = seconds_since(t0);
    res.bootstrapped_loss = evaluate_alignment(teacher, model, held.images);

    const auto after = model.tensors();
    res.frozen_unchanged = true;
    bool tunable_moved = false;
    bool focusing_moved = false;
    for (std::size_t i = 0; i < after.size(); ++i) {
        const bool same = bit_identical(before[i].tensor, after[i].tensor);
        if (after[i].role == Role::frozen) {
            res.frozen_unchanged = res.frozen_unchanged && same;
        } else if (after[i].role == Role::tunable) {
            tunable_moved = tunable_moved || !same;
        } else {
            focusing_moved = focusing_moved || !same;
        }
    }
    res.trained_groups_moved = tunable_moved && focusing_moved;

    ContinueConfig cc;
    cc.new_tokens = cfg.continue_tokens;
    cc.epochs = cfg.continue_epochs;
    cc.base_lr = cfg.continue_lr;
    t0 = std::chrono::steady_clock::now();
    continue_with_more_tokens(teacher, model, unlabeled, cc, bc);
    res.continue_seconds = seconds_since(t0);
    res.continued_loss = evaluate_alignment(teacher, model, held.images);
    return res;
}

}  // namespace sf
