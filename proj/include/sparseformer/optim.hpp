#pragma once

#include "sparseformer/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sf {

struct ParamGroup {
    std::string name;
    std::vector<Tensor> params;
    /// Scales the global learning rate for this group (1.0 focusing, 0.1 tunable blocks).
    double lr_multiplier = 1.0;
};

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
};

/// Decoupled-weight-decay Adam. Only tensors registered in a group are ever
/// written. Weight decay applies to tensors of rank >= 2; biases and norm
/// parameters are not decayed.
class AdamW {
public:
    AdamW(std::vector<ParamGroup> groups, AdamWOptions options = {});

    /// One update with the given base learning rate. Parameters without an
    /// accumulated gradient are skipped.
    void step(double lr);
    void zero_grad();

    void set_lr_multiplier(const std::string& group, double multiplier);
    double lr_multiplier(const std::string& group) const;

    std::int64_t step_count() const { return step_; }
    const std::vector<ParamGroup>& groups() const { return groups_; }
    const AdamWOptions& options() const { return options_; }

    /// First/second moment buffers of group g, parameter i.
    const Tensor& first_moment(std::size_t g, std::size_t i) const { return m_[g][i]; }
    const Tensor& second_moment(std::size_t g, std::size_t i) const { return v_[g][i]; }

    static bool decays(const Tensor& param) { return param.rank() >= 2; }

private:
    std::vector<ParamGroup> groups_;
    AdamWOptions options_;
    std::vector<std::vector<Tensor>> m_;
    std::vector<std::vector<Tensor>> v_;
    std::int64_t step_ = 0;
};

/// Scales every group's gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. max_norm <= 0 only measures.
double clip_grad_norm(AdamW& optimizer, double max_norm);

/// Linear warmup followed by half-cosine decay to zero at the final step.
struct LrSchedule {
    double base_lr = 2e-4;
    int warmup_epochs = 1;
    int total_epochs = 20;
    int steps_per_epoch = 1;

    std::int64_t total_steps() const { return static_cast<std::int64_t>(total_epochs) * steps_per_epoch; }
    std::int64_t warmup_steps() const { return static_cast<std::int64_t>(warmup_epochs) * steps_per_epoch; }
};

/// Learning rate at optimizer step `step` (0-based). The ramp is base_lr * step / warmup
/// during warmup; afterwards base_lr * 0.5 * (1 + cos(pi * t)) with t running from 0
/// at the first post-warmup step to 1 at the last step.
double lr_at_step(const LrSchedule& schedule, std::int64_t step);

}  // namespace sf
