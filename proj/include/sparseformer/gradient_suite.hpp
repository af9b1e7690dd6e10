#pragma once

#include "sparseformer/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sf {

struct GradientSuiteOptions {
    std::uint64_t seed = 2024;
    /// Random instances per primitive case.
    int instances = 3;
    double op_tol = 1e-4;
    double pipeline_tol = 1e-3;
    /// Run only cases whose group ("ops", "model" or "pipeline") is listed; empty runs all.
    std::vector<std::string> groups;
};

struct GradientSuiteResult {
    std::vector<GradCheckReport> reports;
    double seconds = 0.0;

    bool passed() const;
    const GradCheckReport* worst() const;
};

/// Central-difference checks in 64-bit mode over every differentiable primitive,
/// the RoI/sampling/PE/encoder operations, the end-to-end focusing + cortex pipeline
/// of the "gradcheck" preset, and a 4-token dense head on an 8x8 grid.
GradientSuiteResult run_gradient_suite(const GradientSuiteOptions& opts = {});

}  // namespace sf
