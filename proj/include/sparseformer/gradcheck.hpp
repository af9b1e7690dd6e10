#pragma once

#include "sparseformer/tensor.hpp"

#include <functional>
#include <string>
#include <vector>

namespace sf {

struct GradCheckReport {
    std::string name;
    /// max |analytic - numeric| / max(max|analytic|, max|numeric|, 1e-12), per input, then max.
    double max_rel_error = 0.0;
    std::vector<double> per_input_rel_error;
    std::size_t evaluations = 0;
    bool passed = false;
};

using DifferentiableFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares reverse-mode gradients against central differences. The output of
/// `fn` is contracted with a fixed random weighting, so the whole Jacobian is
/// probed rather than a single row. Inputs must be f64; the check runs under
/// f64 default precision. Numeric slopes divide by the perturbation that was
/// actually representable, so an identity map reports exactly zero error.
/// Throws if `fn` is not bit-reproducible across two calls.
GradCheckReport finite_diff_check(const std::string& name, const DifferentiableFn& fn,
                                  const std::vector<Tensor>& inputs, double h = 1e-5, double tol = 1e-4,
                                  std::uint64_t seed = 7);

}  // namespace sf
