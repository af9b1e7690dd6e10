#include "sparseformer/gradcheck.hpp"

#include "sparseformer/ops.hpp"

#include <algorithm>
#include <cmath>

namespace sf {

namespace {

// Projection of the central-difference Jacobian column onto `weights`. Each output
// slope is formed before weighting so an exact map yields an exact slope.
double weighted_slope(const Tensor& plus, const Tensor& minus, double step, const std::vector<double>& weights) {
    double acc = 0.0;
    for (std::int64_t i = 0; i < plus.numel(); ++i) {
        acc += weights[i] * ((plus.at(i) - minus.at(i)) / step);
    }
    return acc;
}

std::vector<Tensor> fresh_copies(const std::vector<Tensor>& inputs) {
    std::vector<Tensor> copies;
    copies.reserve(inputs.size());
    for (const auto& t : inputs) {
        copies.push_back(t.clone());
    }
    return copies;
}

}  // namespace

GradCheckReport finite_diff_check(const std::string& name, const DifferentiableFn& fn,
                                  const std::vector<Tensor>& inputs, double h, double tol, std::uint64_t seed) {
    for (const auto& t : inputs) {
        if (t.dtype() != DType::f64) {
            throw Error("finite_diff_check(" + name + "): inputs must be f64 (64-bit mode)");
        }
    }
    PrecisionScope precision(DType::f64);
    GradCheckReport report;
    report.name = name;

    Tensor reference;
    {
        NoGradGuard no_grad;
        reference = fn(fresh_copies(inputs));
        Tensor again = fn(fresh_copies(inputs));
        report.evaluations += 2;
        if (again.shape() != reference.shape() || reference.impl().data.dtype() != DType::f64) {
            throw Error("finite_diff_check(" + name + "): output must be f64 with a stable shape");
        }
        for (std::int64_t i = 0; i < reference.numel(); ++i) {
            if (reference.data<double>()[i] != again.data<double>()[i]) {
                throw Error("finite_diff_check(" + name + "): op is not deterministic across calls");
            }
        }
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> weights(static_cast<std::size_t>(reference.numel()));
    for (auto& w : weights) {
        w = dist(rng);
    }

    std::vector<Tensor> leaves = fresh_copies(inputs);
    for (auto& t : leaves) {
        t.set_requires_grad(true);
    }
    Tensor out = fn(leaves);
    if (out.requires_grad()) {
        Tensor seed_grad = Tensor::from_values(out.shape(), weights, DType::f64);
        out.backward(seed_grad);
    }
    report.evaluations += 1;

    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Tensor& x = inputs[k];
        const std::int64_t n = x.numel();
        std::vector<double> analytic(static_cast<std::size_t>(n), 0.0);
        if (leaves[k].has_grad()) {
            analytic = leaves[k].grad().to_vector();
        }
        double max_diff = 0.0;
        double max_a = 0.0;
        double max_n = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            std::vector<Tensor> probe = fresh_copies(inputs);
            const double x0 = x.at(i);
            const double xp = x0 + h;
            const double xm = x0 - h;
            double numeric = 0.0;
            {
                NoGradGuard no_grad;
                probe[k].set(i, xp);
                Tensor plus = fn(probe).clone();
                probe[k].set(i, xm);
                Tensor minus = fn(probe);
                numeric = weighted_slope(plus, minus, xp - xm, weights);
            }
            report.evaluations += 2;
            max_diff = std::max(max_diff, std::abs(numeric - analytic[i]));
            max_a = std::max(max_a, std::abs(analytic[i]));
            max_n = std::max(max_n, std::abs(numeric));
        }
        const double rel = max_diff / std::max({max_a, max_n, 1e-12});
        report.per_input_rel_error.push_back(rel);
        report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    report.passed = report.max_rel_error <= tol;
    return report;
}

}  // namespace sf
