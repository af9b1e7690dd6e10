#include "sparseformer/optim.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace sf {

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWOptions options)
    : groups_(std::move(groups)), options_(options) {
    std::unordered_set<TensorImpl*> seen;
    for (const auto& g : groups_) {
        if (g.lr_multiplier < 0.0) {
            throw Error("AdamW: negative lr multiplier for group " + g.name);
        }
        std::vector<Tensor> m;
        std::vector<Tensor> v;
        for (const auto& p : g.params) {
            if (!seen.insert(p.impl_ptr().get()).second) {
                throw Error("AdamW: parameter registered twice (group " + g.name + ")");
            }
            m.push_back(Tensor::zeros(p.shape(), p.dtype()));
            v.push_back(Tensor::zeros(p.shape(), p.dtype()));
        }
        m_.push_back(std::move(m));
        v_.push_back(std::move(v));
    }
}

void AdamW::step(double lr) {
    if (!(lr >= 0.0)) {
        throw Error("AdamW: learning rate must be >= 0");
    }
    ++step_;
    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
        const double group_lr = lr * groups_[gi].lr_multiplier;
        for (std::size_t pi = 0; pi < groups_[gi].params.size(); ++pi) {
            Tensor& p = groups_[gi].params[pi];
            if (!p.has_grad()) {
                continue;
            }
            TensorImpl& impl = p.impl();
            if (impl.grad->size() != impl.data.size()) {
                throw Error("AdamW: gradient/parameter shape mismatch for group " + groups_[gi].name);
            }
            const double wd = decays(p) ? options_.weight_decay : 0.0;
            dispatch(p.dtype(), [&]<class T>(std::type_identity<T>) {
                T* w = impl.data.template data<T>();
                const T* g = impl.grad->template data<T>();
                T* m = m_[gi][pi].data<T>();
                T* v = v_[gi][pi].data<T>();
                for (std::size_t i = 0, n = impl.data.size(); i < n; ++i) {
                    m[i] = static_cast<T>(b1 * m[i] + (1.0 - b1) * g[i]);
                    v[i] = static_cast<T>(b2 * v[i] + (1.0 - b2) * g[i] * g[i]);
                    if (group_lr == 0.0) {
                        continue;
                    }
                    const double mhat = m[i] / bc1;
                    const double vhat = v[i] / bc2;
                    double x = w[i];
                    x -= group_lr * wd * x;
                    x -= group_lr * mhat / (std::sqrt(vhat) + options_.eps);
                    w[i] = static_cast<T>(x);
                }
            });
        }
    }
}

void AdamW::zero_grad() {
    for (auto& g : groups_) {
        for (auto& p : g.params) {
            p.zero_grad();
        }
    }
}

void AdamW::set_lr_multiplier(const std::string& group, double multiplier) {
    for (auto& g : groups_) {
        if (g.name == group) {
            g.lr_multiplier = multiplier;
            return;
        }
    }
    throw Error("AdamW: unknown parameter group " + group);
}

double AdamW::lr_multiplier(const std::string& group) const {
    for (const auto& g : groups_) {
        if (g.name == group) {
            return g.lr_multiplier;
        }
    }
    throw Error("AdamW: unknown parameter group " + group);
}

double lr_at_step(const LrSchedule& s, std::int64_t step) {
    const std::int64_t total = s.total_steps();
    if (s.base_lr < 0.0 || s.steps_per_epoch < 1 || s.warmup_epochs < 0 || s.warmup_epochs > s.total_epochs) {
        throw Error("lr_at_step: invalid schedule");
    }
    if (step < 0 || step >= total) {
        throw Error("lr_at_step: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + ")");
    }
    const std::int64_t warm = s.warmup_steps();
    if (step < warm) {
        return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
    }
    const std::int64_t decay_span = total - warm - 1;
    const double t = decay_span > 0 ? static_cast<double>(step - warm) / static_cast<double>(decay_span) : 0.0;
    return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double clip_grad_norm(AdamW& optimizer, double max_norm) {
    double sq = 0.0;
    for (const auto& g : optimizer.groups()) {
        for (const auto& p : g.params) {
            if (!p.has_grad()) {
                continue;
            }
            const Storage& grad = *p.impl().grad;
            for (std::size_t i = 0, n = grad.size(); i < n; ++i) {
                const double v = grad.get(i);
                sq += v * v;
            }
        }
    }
    const double norm = std::sqrt(sq);
    if (max_norm <= 0.0 || norm <= max_norm) {
        return norm;
    }
    const double scale = max_norm / norm;
    for (const auto& g : optimizer.groups()) {
        for (const auto& p : g.params) {
            if (!p.has_grad()) {
                continue;
            }
            Storage& grad = *p.impl().grad;
            for (std::size_t i = 0, n = grad.size(); i < n; ++i) {
                grad.set(i, grad.get(i) * scale);
            }
        }
    }
    return norm;
}

}  // namespace sf
