// Command-line front end. Everything goes through the shared-library C API
// (tinydistill.h); this translation unit never touches the C++ core.

#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "tinydistill.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int from_status(td_status status) {
    switch (status) {
        case TD_OK:
            return kExitOk;
        case TD_BAD_ARGS:
            std::fprintf(stderr, "error: %s\n", td_last_error());
            return kExitUsage;
        default:
            std::fprintf(stderr, "error: %s\n", td_last_error());
            return kExitRuntime;
    }
}

void print_owned(char* s) {
    if (!s) return;
    std::fputs(s, stdout);
    std::fputc('\n', stdout);
    td_string_free(s);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tinydistill: layer-wise transformer distillation at desk scale"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(td_version()));

    std::string log_level = "info";
    app.add_option("--log-level", log_level, "debug|info|warn|error|off")
        ->capture_default_str();

    // Shared per-command state.
    std::string config_path, out_dir = "out", split = "dev", checkpoint;
    std::int64_t seed = -1;

    auto add_stage_opts = [&](CLI::App* cmd, bool config_required = true) {
        auto* c = cmd->add_option("--config", config_path, "stage config (JSON)");
        if (config_required) c->required();
        cmd->add_option("--seed", seed, "override the config seed");
        cmd->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    };

    CLI::App* train_teacher =
        app.add_subcommand("train-teacher", "supervised fine-tune or toy MLM pre-train");
    add_stage_opts(train_teacher);

    CLI::App* general =
        app.add_subcommand("general-distill", "intermediate-layer distillation on a "
                                              "general corpus (no prediction loss)");
    add_stage_opts(general);

    CLI::App* task = app.add_subcommand(
        "task-distill", "two-phase task distillation: intermediate layers, then logits");
    add_stage_opts(task);

    CLI::App* evaluate = app.add_subcommand("evaluate", "metrics on a labeled split");
    add_stage_opts(evaluate);
    evaluate->add_option("--split", split, "train|dev|test")->capture_default_str();
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint override");

    std::string aug_in, aug_out, glove, teacher;
    double p_t = 0.4;
    std::int32_t n_a = 20, k = 15;
    std::uint64_t aug_seed = 0;
    bool include_original = true;
    CLI::App* augment =
        app.add_subcommand("augment", "word-replacement data augmentation");
    augment->add_option("--in", aug_in, "input TSV")->required();
    augment->add_option("--out", aug_out, "output TSV")->required();
    augment->add_option("--glove", glove, "GloVe-format vectors");
    augment->add_option("--teacher", teacher, "MLM-headed teacher checkpoint")->required();
    augment->add_option("--pt", p_t, "replacement threshold")->capture_default_str();
    augment->add_option("--na", n_a, "variants per example")->capture_default_str();
    augment->add_option("--k", k, "candidate set size")->capture_default_str();
    augment->add_option("--seed", aug_seed, "augmentation seed")->capture_default_str();
    augment
        ->add_option("--include-original", include_original,
                     "keep originals alongside variants")
        ->capture_default_str();
    augment->add_option("--out-dir", out_dir, "run manifest directory");

    std::string recipe;
    std::int32_t threads = 0;
    CLI::App* ablate = app.add_subcommand("ablate", "toy-scale ablation grids");
    ablate->add_option("--recipe", recipe, "procedures|objectives|mapping")->required();
    ablate->add_option("--config", config_path, "ablation config (JSON)")->required();
    ablate->add_option("--out-dir", out_dir, "output directory")->capture_default_str();
    ablate->add_option("--threads", threads, "parallel runs (0 = DISTILL_THREADS)");

    std::string inspect_path;
    CLI::App* inspect =
        app.add_subcommand("inspect-checkpoint", "print a checkpoint summary");
    inspect->add_option("path", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    if (td_set_log_level(log_level.c_str()) != TD_OK) {
        std::fprintf(stderr, "error: %s\n", td_last_error());
        return kExitUsage;
    }

    if (train_teacher->parsed()) {
        return from_status(td_train_teacher(config_path.c_str(), out_dir.c_str(), seed));
    }
    if (general->parsed()) {
        return from_status(td_general_distill(config_path.c_str(), out_dir.c_str(), seed));
    }
    if (task->parsed()) {
        return from_status(td_task_distill(config_path.c_str(), out_dir.c_str(), seed));
    }
    if (evaluate->parsed()) {
        char* metrics = nullptr;
        td_status s = td_evaluate(config_path.c_str(), split.c_str(),
                                  checkpoint.empty() ? nullptr : checkpoint.c_str(),
                                  out_dir.c_str(), &metrics);
        if (s == TD_OK) print_owned(metrics);
        return from_status(s);
    }
    if (augment->parsed()) {
        return from_status(td_augment(aug_in.c_str(), aug_out.c_str(),
                                      glove.empty() ? nullptr : glove.c_str(),
                                      teacher.c_str(), p_t, n_a, k, aug_seed,
                                      include_original ? 1 : 0, out_dir.c_str()));
    }
    if (ablate->parsed()) {
        char* report = nullptr;
        td_status s = td_ablate(recipe.c_str(), config_path.c_str(), out_dir.c_str(),
                                threads, &report);
        if (s == TD_OK) print_owned(report);
        return from_status(s);
    }
    if (inspect->parsed()) {
        char* summary = nullptr;
        td_status s = td_inspect_checkpoint(inspect_path.c_str(), &summary);
        if (s == TD_OK) print_owned(summary);
        return from_status(s);
    }
    return kExitUsage;
}
