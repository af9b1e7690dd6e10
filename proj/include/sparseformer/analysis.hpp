#pragma once

#include "sparseformer/dense_head.hpp"
#include "sparseformer/model_spec.hpp"
#include "sparseformer/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace sf {

struct CostPart {
    std::string module;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

/// Parameter and multiply-add accounting for one model at one (resolution, token count).
/// FLOPs are reported as 2 x MACs; `macs` is the figure comparable to the usual
/// published GFLOPs budgets of vision transformers.
struct CostReport {
    std::string spec;
    int resolution = 0;
    int tokens = 0;
    std::vector<CostPart> parts;

    std::int64_t total_params() const;
    std::int64_t total_macs() const;
    std::int64_t total_flops() const { return 2 * total_macs(); }
    const CostPart& part(const std::string& module) const;
    /// Sum over parts whose name starts with `prefix`.
    std::int64_t params_with_prefix(const std::string& prefix) const;
    std::int64_t macs_with_prefix(const std::string& prefix) const;
    nlohmann::json to_json() const;
};

/// Closed-form counts at the spec's own resolution and token count. No weights are built.
CostReport count_params(const SparseFormerSpec& spec, const DenseHeadSpec* dense = nullptr);
/// Closed-form counts at `resolution` (divisible by 4) with `n_tokens` latent tokens.
CostReport count_flops(const SparseFormerSpec& spec, int resolution, int n_tokens,
                       const DenseHeadSpec* dense = nullptr);

/// Stage indices drawn in the figure: first, third and last of `count` recorded RoI sets.
std::vector<int> figure_stages(int count);

/// SVG overlay of token RoIs and sampling points on `image` [H, W, 3] (values in [0, 1]).
/// `roi_stages` are [N, 4] or [1, N, 4] sets in (x, y, w, h); only figure_stages() of them
/// are drawn. `points` is [N, P, 2] or [1, N, P, 2] in normalized coordinates.
std::string roi_svg(const Tensor& image, const std::vector<Tensor>& roi_stages, const Tensor& points);
void render_roi_svg(const Tensor& image, const std::vector<Tensor>& roi_stages, const Tensor& points,
                    const std::string& path);

struct Timing {
    double median = 0.0;
    double min = 0.0;
    double mean = 0.0;
    int reps = 0;
};

/// Wall-clock seconds per call after `warmup` untimed calls.
Timing time_call(const std::function<void()>& fn, int warmup, int reps);

struct BenchmarkEntry {
    std::string name;
    std::int64_t macs = 0;
    Timing timing;
    double ratio = 1.0;  // median relative to the first entry
};

/// Forward-pass timing of each spec (random weights, no grad) at its own resolution.
std::vector<BenchmarkEntry> benchmark_forward(const std::vector<SparseFormerSpec>& specs, int batch, int reps,
                                              std::uint64_t seed);

}  // namespace sf
