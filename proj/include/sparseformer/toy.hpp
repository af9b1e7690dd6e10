#pragma once

#include "sparseformer/bootstrap.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace sf {

/// Desk-scale end-to-end run on synthetic shapes: supervised tiny teacher, label-free
/// bootstrap of a tiny SparseFormer, then continued bootstrapping with more tokens.
struct ToyExperimentConfig {
    int teacher_steps = 700;
    int teacher_train_images = 4000;
    int teacher_test_images = 500;
    int bootstrap_images = 512;
    int held_out_images = 256;
    int epochs = 5;
    int warmup_epochs = 1;
    double base_lr = 1e-3;
    int batch_size = 8;
    int continue_tokens = 32;
    int continue_epochs = 2;
    double continue_lr = 2.5e-4;
    std::uint64_t seed = 0;
    /// Reuse this teacher archive when it exists; write it after training otherwise. Empty disables.
    std::string teacher_cache;
    std::function<void(const std::string&)> log;
};

struct ToyExperimentResult {
    double teacher_accuracy = 0.0;
    double initial_loss = 0.0;
    double bootstrapped_loss = 0.0;
    double continued_loss = 0.0;
    double teacher_seconds = 0.0;
    double bootstrap_seconds = 0.0;
    double continue_seconds = 0.0;
    /// Every frozen tensor bit-identical before and after the main bootstrap.
    bool frozen_unchanged = false;
    /// At least one tunable and one focusing tensor moved.
    bool trained_groups_moved = false;
    BootstrapResult bootstrap;
};

ToyExperimentResult run_toy_experiment(const ToyExperimentConfig& cfg);

/// Snapshot-based comparison: true iff every tensor has the same bytes as its snapshot.
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace sf
