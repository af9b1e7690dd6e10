#pragma once

#include "sparseformer/model.hpp"
#include "sparseformer/synthetic.hpp"
#include "sparseformer/vit.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace sf {

enum class AlignObjective { cosine, cosine_with_cls, kl_distill };

const char* objective_name(AlignObjective o);
AlignObjective parse_objective(const std::string& s);

struct BootstrapConfig {
    int epochs = 20;
    int warmup_epochs = 1;
    double base_lr = 2e-4;
    double tunable_lr_multiplier = 0.1;
    double flip_prob = 0.5;
    double crop_scale_min = 0.5;
    double crop_scale_max = 1.0;
    double crop_aspect_min = 3.0 / 4.0;
    double crop_aspect_max = 4.0 / 3.0;
    bool augment = true;
    int batch_size = 32;
    /// Global gradient-norm clip over the trained groups; 0 disables.
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    AlignObjective objective = AlignObjective::cosine;
    double cls_weight = 1.0;
    double kl_temperature = 1.0;
    /// Called after every optimizer step with (step, lr, loss).
    std::function<void(std::int64_t, double, double)> on_step;

    void validate() const;
};

/// A crop box in source pixels plus the flip decision.
struct CropParams {
    double x0 = 0.0;
    double y0 = 0.0;
    double width = 0.0;
    double height = 0.0;
    bool flip = false;
};

/// Area fraction uniform in the scale range; log-aspect uniform over the part of
/// the aspect range that fits inside the source at that area; then a uniform position.
CropParams sample_crop(int src_h, int src_w, const BootstrapConfig& cfg, std::mt19937_64& rng);

/// Bilinear resample of `crop` from image [H, W, 3] to [out, out, 3], then optional flip.
Tensor apply_crop(const Tensor& image, const CropParams& crop, int out_size);

/// Random resized crop + horizontal flip of one image [H, W, 3].
Tensor augment(const Tensor& image, int out_size, const BootstrapConfig& cfg, std::mt19937_64& rng);

/// Mean over rows of 1 - cos(student, target); the target is detached.
Tensor cosine_align_loss(const Tensor& student, const Tensor& target);

/// Mean over rows of -sum softmax(teacher / tau) * log_softmax(student).
Tensor kl_distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, double temperature);

struct StepRecord {
    std::int64_t step = 0;
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct BootstrapResult {
    std::vector<StepRecord> steps;
    std::vector<double> epoch_mean_loss;
};

/// Aligns the model's final representation with the frozen teacher's on the same
/// augmented images. Labels are only read for the cosine_with_cls objective.
BootstrapResult bootstrap_run(const TeacherWeights& teacher, SparseFormer& model, const ImageSet& data,
                              const BootstrapConfig& cfg);

/// Mean cosine alignment loss on un-augmented images (resized to the model resolution).
double evaluate_alignment(const TeacherWeights& teacher, const SparseFormer& model, const Tensor& images,
                          int batch_size = 64);

struct ContinueConfig {
    int new_tokens = 80;
    int epochs = 5;
    double base_lr = 5e-5;
};

/// Re-grids the initial token state to more tokens and keeps bootstrapping.
BootstrapResult continue_with_more_tokens(const TeacherWeights& teacher, SparseFormer& model, const ImageSet& data,
                                          const ContinueConfig& cont, BootstrapConfig cfg);

void write_loss_csv(const std::string& path, const BootstrapResult& result);

}  // namespace sf
