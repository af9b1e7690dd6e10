#include "sparseformer/analysis.hpp"
#include "sparseformer/checkpoint.hpp"
#include "sparseformer/config.hpp"
#include "sparseformer/dense_head.hpp"
#include "sparseformer/gradient_suite.hpp"
#include "sparseformer/image_io.hpp"
#include "sparseformer/ops.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace sf;
namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 2;

std::vector<int> read_labels(const std::string& dir, std::int64_t expected) {
    const std::string path = (fs::path(dir) / "labels.txt").string();
    std::ifstream in(path);
    if (!in) {
        throw Error("missing " + path + " (one class id per image, in file-name order)");
    }
    std::vector<int> labels;
    int v = 0;
    while (in >> v) {
        labels.push_back(v);
    }
    if (!in.eof()) {
        throw Error("malformed label in " + path);
    }
    if (static_cast<std::int64_t>(labels.size()) != expected) {
        throw Error(path + " has " + std::to_string(labels.size()) + " labels for " + std::to_string(expected) +
                    " images");
    }
    return labels;
}

ImageSet labeled_dir(const std::string& dir, int size) {
    ImageSet set = load_image_dir(dir, size);
    set.labels = read_labels(dir, set.size());
    set.num_classes = 1 + *std::max_element(set.labels.begin(), set.labels.end());
    return set;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

struct BootstrapArgs {
    std::string config;
    std::vector<std::string> sets;
    std::string images, teacher, out, loss_csv, spec;
    int epochs = -1;
    int batch = -1;
    double lr = -1.0;
    std::uint64_t seed = 0;
};

RunConfig apply_run_args(const BootstrapArgs& a, const CLI::App& sub, bool continuing);

RunConfig resolve_run_config(const BootstrapArgs& a, const CLI::App& sub, bool continuing) {
    RunConfig cfg;
    try {
        cfg = apply_run_args(a, sub, continuing);
    } catch (const CLI::ParseError&) {
        throw;
    } catch (const Error& e) {
        throw CLI::ValidationError("config", e.what());
    }
    for (auto [value, flag] : {std::pair{&cfg.images, "--images"}, {&cfg.teacher, "--teacher"}, {&cfg.out, "--out"}}) {
        if (value->empty()) {
            throw CLI::RequiredError(flag);
        }
        if (std::string(flag) != "--out" && !fs::exists(*value)) {
            throw CLI::ValidationError(flag, "path does not exist: " + *value);
        }
    }
    if (cfg.loss_csv.empty()) {
        cfg.loss_csv = cfg.out + ".loss.csv";
    }
    return cfg;
}

// Config file first, then --set assignments, then dedicated flags.
RunConfig apply_run_args(const BootstrapArgs& a, const CLI::App& sub, bool continuing) {
    RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
    for (const auto& kv : a.sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw CLI::ValidationError("--set", "expected key=value, got '" + kv + "'");
        }
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    auto given = [&](const char* name) {
        const CLI::Option* opt = sub.get_option_no_throw(name);
        return opt != nullptr && opt->count() > 0;
    };
    if (given("--images")) cfg.images = a.images;
    if (given("--teacher")) cfg.teacher = a.teacher;
    if (given("--out")) cfg.out = a.out;
    if (given("--loss-csv")) cfg.loss_csv = a.loss_csv;
    if (given("--spec")) cfg.spec = a.spec;
    if (given("--epochs")) set_config_value(cfg, continuing ? "continue_epochs" : "epochs", std::to_string(a.epochs));
    if (given("--batch")) set_config_value(cfg, "batch_size", std::to_string(a.batch));
    if (given("--lr")) (continuing ? cfg.cont.base_lr : cfg.bootstrap.base_lr) = a.lr;
    if (given("--seed")) cfg.bootstrap.seed = a.seed;
    cfg.bootstrap.validate();
    return cfg;
}

void add_bootstrap_options(CLI::App* sub, BootstrapArgs& a) {
    sub->add_option("--config", a.config, "key = value run config")->check(CLI::ExistingFile);
    sub->add_option("--set", a.sets, "extra config assignment key=value (repeatable)");
    sub->add_option("--images", a.images, "directory of PNG/PPM images");
    sub->add_option("--teacher", a.teacher, "teacher checkpoint");
    sub->add_option("--out", a.out, "output checkpoint");
    sub->add_option("--loss-csv", a.loss_csv, "per-step loss log (default: <out>.loss.csv)");
    sub->add_option("--epochs", a.epochs)->check(CLI::NonNegativeNumber);
    sub->add_option("--batch", a.batch)->check(CLI::PositiveNumber);
    sub->add_option("--lr", a.lr)->check(CLI::NonNegativeNumber);
    sub->add_option("--seed", a.seed);
}

void log_steps(BootstrapConfig& cfg, std::int64_t steps_per_log) {
    cfg.on_step = [steps_per_log](std::int64_t step, double lr, double loss) {
        if (step % steps_per_log == 0) {
            std::cerr << "step " << step << " lr " << lr << " loss " << loss << '\n';
        }
    };
}

int cmd_bootstrap(const BootstrapArgs& a, const CLI::App& sub) {
    RunConfig cfg = resolve_run_config(a, sub, false);
    SparseFormerSpec spec = preset_spec(cfg.spec);
    const TeacherWeights teacher = teacher_from_archive(load_checkpoint(cfg.teacher));
    const ImageSet data = load_image_dir(cfg.images, cfg.image_size > 0 ? cfg.image_size : spec.image_size);
    std::mt19937_64 rng(cfg.bootstrap.seed + 3);
    SparseFormer model = build_sparseformer(spec, teacher, rng);
    log_steps(cfg.bootstrap, 50);
    const BootstrapResult result = bootstrap_run(teacher, model, data, cfg.bootstrap);
    save_checkpoint(cfg.out, model_archive(model));
    write_loss_csv(cfg.loss_csv, result);
    print_json({{"checkpoint", cfg.out},
                {"loss_csv", cfg.loss_csv},
                {"steps", result.steps.size()},
                {"epoch_mean_loss", result.epoch_mean_loss}});
    return 0;
}

int cmd_continue(const BootstrapArgs& a, const std::string& model_path, const CLI::App& sub) {
    RunConfig cfg = resolve_run_config(a, sub, true);
    const TeacherWeights teacher = teacher_from_archive(load_checkpoint(cfg.teacher));
    SparseFormer model = model_from_archive(load_checkpoint(model_path));
    const ImageSet data = load_image_dir(cfg.images, cfg.image_size > 0 ? cfg.image_size : model.spec.image_size);
    log_steps(cfg.bootstrap, 50);
    const BootstrapResult result = continue_with_more_tokens(teacher, model, data, cfg.cont, cfg.bootstrap);
    save_checkpoint(cfg.out, model_archive(model));
    write_loss_csv(cfg.loss_csv, result);
    print_json({{"checkpoint", cfg.out},
                {"tokens", model.spec.n_tokens},
                {"loss_csv", cfg.loss_csv},
                {"epoch_mean_loss", result.epoch_mean_loss}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SparseFormer bootstrapping toolkit"};
    app.require_subcommand(1);

    // synth-images
    int synth_count = 512;
    int synth_size = 32;
    int synth_classes = 4;
    std::string synth_out;
    std::uint64_t synth_seed = 0;
    auto* synth = app.add_subcommand("synth-images", "write synthetic shape images and labels.txt");
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count)->check(CLI::PositiveNumber);
    synth->add_option("--size", synth_size)->check(CLI::PositiveNumber);
    synth->add_option("--classes", synth_classes)->check(CLI::Range(1, 4));
    synth->add_option("--seed", synth_seed);

    // teacher-train
    TeacherTrainConfig tcfg;
    tcfg.steps = 700;
    std::string teacher_images;
    std::string teacher_out;
    int teacher_train_count = 4000;
    auto* ttrain = app.add_subcommand("teacher-train", "supervised training of the tiny ViT teacher");
    ttrain->add_option("--out", teacher_out, "output checkpoint")->required();
    ttrain->add_option("--images", teacher_images, "labeled image directory (default: synthetic shapes)")
        ->check(CLI::ExistingDirectory);
    ttrain->add_option("--train-count", teacher_train_count, "synthetic training images")->check(CLI::PositiveNumber);
    ttrain->add_option("--steps", tcfg.steps)->check(CLI::NonNegativeNumber);
    ttrain->add_option("--batch", tcfg.batch_size)->check(CLI::PositiveNumber);
    ttrain->add_option("--lr", tcfg.lr)->check(CLI::NonNegativeNumber);
    ttrain->add_option("--seed", tcfg.seed);

    // bootstrap / continue
    BootstrapArgs boot_args;
    auto* boot = app.add_subcommand("bootstrap", "align a new SparseFormer with a frozen teacher");
    add_bootstrap_options(boot, boot_args);
    boot->add_option("--spec", boot_args.spec, "model preset");

    BootstrapArgs cont_args;
    std::string cont_model;
    int cont_tokens = -1;
    auto* cont = app.add_subcommand("continue", "raise the token count and keep bootstrapping");
    add_bootstrap_options(cont, cont_args);
    cont->add_option("--model", cont_model, "bootstrapped checkpoint")->required()->check(CLI::ExistingFile);
    cont->add_option("--tokens", cont_tokens, "new latent token count")->check(CLI::PositiveNumber);

    // eval-align
    std::string eval_model;
    std::string eval_teacher;
    std::string eval_images;
    std::uint64_t eval_seed = 0;
    auto* eval = app.add_subcommand("eval-align", "mean cosine alignment loss over an image directory");
    eval->add_option("--model", eval_model)->required()->check(CLI::ExistingFile);
    eval->add_option("--teacher", eval_teacher)->required()->check(CLI::ExistingFile);
    eval->add_option("--images", eval_images)->required()->check(CLI::ExistingDirectory);
    eval->add_option("--seed", eval_seed, "unused; evaluation is deterministic");

    // gradcheck
    GradientSuiteOptions gopts;
    bool grad_verbose = false;
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite in 64-bit mode");
    grad->add_option("--seed", gopts.seed);
    grad->add_option("--instances", gopts.instances, "random instances per primitive")->check(CLI::PositiveNumber);
    grad->add_flag("--verbose", grad_verbose, "print every check");

    // count
    std::string count_spec = "sf-b";
    int count_res = 224;
    int count_tokens = 49;
    int count_truncate = -1;
    bool count_no_trunc = false;
    int dense_classes = 0;
    std::uint64_t count_seed = 0;
    auto* count = app.add_subcommand("count", "parameter and FLOPs report as JSON");
    count->add_option("--spec", count_spec, "sf-b, sf-l, tiny or gradcheck");
    count->add_option("--res", count_res)->check(CLI::PositiveNumber);
    count->add_option("--tokens", count_tokens)->check(CLI::PositiveNumber);
    count->add_option("--truncate", count_truncate, "leading donor blocks discarded");
    count->add_flag("--no-truncation", count_no_trunc, "keep every donor block");
    count->add_option("--dense-classes", dense_classes, "include a dense head with this many classes")
        ->check(CLI::NonNegativeNumber);
    count->add_option("--seed", count_seed, "unused; counts are analytic");

    // visualize
    std::string vis_model;
    std::string vis_spec = "tiny";
    std::string vis_image;
    std::string vis_out;
    std::uint64_t vis_seed = 0;
    auto* vis = app.add_subcommand("visualize", "SVG of token RoIs and final sampling points");
    vis->add_option("--model", vis_model, "checkpoint (default: random weights for --spec)")
        ->check(CLI::ExistingFile);
    vis->add_option("--spec", vis_spec, "preset used without --model");
    vis->add_option("--image", vis_image, "PNG/PPM input (default: a synthetic shape)")->check(CLI::ExistingFile);
    vis->add_option("--out", vis_out, "output SVG")->required();
    vis->add_option("--seed", vis_seed);

    // segment-toy
    SegToyConfig seg;
    auto* segc = app.add_subcommand("segment-toy", "dense-head smoke test on two-class discs");
    segc->add_option("--steps", seg.steps)->check(CLI::NonNegativeNumber);
    segc->add_option("--batch", seg.batch_size)->check(CLI::PositiveNumber);
    segc->add_option("--lr", seg.lr)->check(CLI::NonNegativeNumber);
    segc->add_option("--seed", seg.seed);

    // bench
    std::vector<std::string> bench_specs = {"tiny"};
    int bench_batch = 4;
    int bench_reps = 5;
    std::uint64_t bench_seed = 0;
    auto* bench = app.add_subcommand("bench", "forward wall-clock per preset, relative to the first");
    bench->add_option("--specs", bench_specs)->delimiter(',');
    bench->add_option("--batch", bench_batch)->check(CLI::PositiveNumber);
    bench->add_option("--reps", bench_reps)->check(CLI::PositiveNumber);
    bench->add_option("--seed", bench_seed);

    try {
        app.parse(argc, argv);
        if (synth->parsed()) {
            const ImageSet set = make_shape_dataset(synth_count, synth_size, synth_classes, synth_seed);
            save_image_dir(synth_out, set.images);
            std::ofstream labels(fs::path(synth_out) / "labels.txt");
            for (int l : set.labels) {
                labels << l << '\n';
            }
            if (!labels) {
                throw Error("cannot write labels.txt in " + synth_out);
            }
            print_json({{"out", synth_out}, {"images", set.size()}});
        } else if (ttrain->parsed()) {
            const TeacherSpec spec = tiny_teacher_spec();
            const ImageSet train = teacher_images.empty()
                                       ? make_shape_dataset(teacher_train_count, spec.image_size, 4, tcfg.seed + 1)
                                       : labeled_dir(teacher_images, spec.image_size);
            tcfg.on_log = [](int step, double loss) { std::cerr << "step " << step << " loss " << loss << '\n'; };
            const TeacherWeights teacher = train_toy_teacher(train, spec, tcfg).weights;
            save_checkpoint(teacher_out, teacher_archive(teacher));
            const ImageSet held = make_shape_dataset(500, spec.image_size, 4, tcfg.seed + 2);
            print_json({{"checkpoint", teacher_out}, {"synthetic_held_out_accuracy", teacher_accuracy(teacher, held)}});
        } else if (boot->parsed()) {
            return cmd_bootstrap(boot_args, *boot);
        } else if (cont->parsed()) {
            BootstrapArgs a = cont_args;
            // --set may override continue_* keys; --tokens wins over both.
            if (cont_tokens > 0) {
                a.sets.push_back("continue_tokens=" + std::to_string(cont_tokens));
            }
            return cmd_continue(a, cont_model, *cont);
        } else if (eval->parsed()) {
            const TeacherWeights teacher = teacher_from_archive(load_checkpoint(eval_teacher));
            const SparseFormer model = model_from_archive(load_checkpoint(eval_model));
            const ImageSet data = load_image_dir(eval_images, model.spec.image_size);
            print_json({{"images", data.size()},
                        {"mean_cosine_loss", evaluate_alignment(teacher, model, data.images)}});
        } else if (grad->parsed()) {
            const GradientSuiteResult r = run_gradient_suite(gopts);
            int failed = 0;
            for (const auto& rep : r.reports) {
                failed += rep.passed ? 0 : 1;
                if (grad_verbose || !rep.passed) {
                    std::cout << (rep.passed ? "ok   " : "FAIL ") << rep.name << " rel_err " << rep.max_rel_error
                              << '\n';
                }
            }
            const GradCheckReport* worst = r.worst();
            std::cout << r.reports.size() - failed << "/" << r.reports.size() << " checks passed in " << r.seconds
                      << " s; worst " << (worst ? worst->name : "-") << " rel_err "
                      << (worst ? worst->max_rel_error : 0.0) << '\n';
            return r.passed() ? 0 : 1;
        } else if (count->parsed()) {
            SparseFormerSpec spec = preset_spec(count_spec);
            if (count_no_trunc) {
                spec.truncate = 0;
            } else if (count_truncate >= 0) {
                spec.truncate = count_truncate;
            }
            DenseHeadSpec dense;
            dense.num_classes = dense_classes;
            const CostReport rep = count_flops(spec, count_res, count_tokens, dense_classes > 0 ? &dense : nullptr);
            print_json(rep.to_json());
        } else if (vis->parsed()) {
            std::mt19937_64 rng(vis_seed);
            const SparseFormer model = vis_model.empty() ? init_sparseformer(preset_spec(vis_spec), rng)
                                                         : model_from_archive(load_checkpoint(vis_model));
            const int size = model.spec.image_size;
            Tensor image;
            if (vis_image.empty()) {
                image = select(make_shape_dataset(1, size, 4, vis_seed).images, 0, 0);
            } else {
                CropParams full;
                const Tensor raw = load_image(vis_image);
                full.width = static_cast<double>(raw.dim(1));
                full.height = static_cast<double>(raw.dim(0));
                image = apply_crop(raw, full, size);
            }
            NoGradGuard no_grad;
            const SparseFormerOutput out = sparseformer_forward(reshape(image, {1, size, size, 3}), model);
            render_roi_svg(image, out.focus.roi_stages, out.focus.final_points, vis_out);
            print_json({{"svg", vis_out}, {"stages", figure_stages(static_cast<int>(out.focus.roi_stages.size()))}});
        } else if (segc->parsed()) {
            seg.on_step = [](int step, double loss) {
                if (step % 50 == 0) {
                    std::cerr << "step " << step << " loss " << loss << '\n';
                }
            };
            const SegToyResult r = run_segmentation_toy(seg);
            print_json({{"pixel_accuracy", r.pixel_accuracy},
                        {"seconds", r.seconds},
                        {"final_loss", r.losses.empty() ? 0.0 : r.losses.back()}});
        } else if (bench->parsed()) {
            std::vector<SparseFormerSpec> specs;
            for (const auto& s : bench_specs) {
                specs.push_back(preset_spec(s));
            }
            nlohmann::json rows = nlohmann::json::array();
            for (const auto& e : benchmark_forward(specs, bench_batch, bench_reps, bench_seed)) {
                rows.push_back({{"spec", e.name},
                                {"macs", e.macs},
                                {"median_s", e.timing.median},
                                {"min_s", e.timing.min},
                                {"ratio", e.ratio}});
            }
            print_json(rows);
        }
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\nrun with --help for usage\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
