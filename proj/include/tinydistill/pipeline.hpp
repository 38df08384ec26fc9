#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tinydistill/augment.hpp"
#include "tinydistill/data.hpp"
#include "tinydistill/distill.hpp"
#include "tinydistill/transformer.hpp"

namespace tinydistill {

struct OptimSettings {
    std::size_t epochs = 1;
    std::size_t batch_size = 8;
    double learning_rate = 1e-3;
    double warmup_fraction = 0.1;
    double clip_norm = 1.0;
    double mlm_mask_prob = 0.15;  // teacher-mlm stage only
    std::size_t max_steps = 0;    // 0 = no cap; epochs repeat until cap when > 0
};

struct PhaseSettings {
    std::size_t epochs = 1;
    double learning_rate = 1e-3;
    std::size_t batch_size = 0;  // 0 = inherit train.batch_size
};

struct DistillSettings {
    std::string mapping = "uniform";
    std::vector<std::size_t> mapping_table;  // explicit table overrides strategy
    std::vector<double> lambda;              // empty = all ones
    double temperature = 1.0;
    bool include_prediction = false;
    bool shared_hidden_projection = false;
    bool identity_projection_init = false;
    bool use_attn = true;
    bool use_hidn = true;
};

struct DataSettings {
    std::string train;
    std::string dev;
    std::string test;
    std::string vocab;        // optional when a checkpoint provides one
    std::size_t max_len = 0;  // 0 = model max_len
};

// One training stage. stage is one of: teacher-finetune | finetune |
// teacher-mlm | general | task-intermediate | task-prediction | task-distill
// (the two-phase compound).
struct TrainConfig {
    std::string stage;
    DataSettings data;
    TransformerConfig model;
    bool has_model = false;
    std::string teacher_checkpoint;
    std::string init_checkpoint;
    OptimSettings train;
    PhaseSettings phase1;
    PhaseSettings phase2;
    DistillSettings distill;
    std::uint64_t seed = 0;
    std::string output_name;  // checkpoint filename; default derived from stage

    // Full validation before any data is touched.
    void validate() const;
};

// Strict parser: unknown keys are errors.
TrainConfig parse_train_config(const std::string& json_text, const std::string& origin);
TrainConfig load_train_config(const std::string& path);
// Applies a command-line seed override (flag beats file); re-derives the
// model seed when the config did not pin one explicitly.
void override_seed(TrainConfig& config, std::uint64_t seed);

struct Metrics {
    double accuracy = 0.0;
    double loss = 0.0;        // mean cross-entropy against gold labels
    bool has_mcc = false;     // binary tasks only
    double mcc = 0.0;
    std::size_t count = 0;
};

double binary_mcc(long tp, long tn, long fp, long fn);

// Deterministic metrics over a labeled split; raises on an empty split.
Metrics evaluate_model(const TransformerModel& model, const Vocab& vocab,
                       const std::vector<Example>& examples,
                       std::size_t batch_size, std::size_t max_len);

struct StageOutcome {
    std::string checkpoint_path;
    std::optional<double> dev_accuracy;
    std::optional<double> dev_mcc;
    std::string metrics_path;
};

// Runs one stage end to end: trains, logs one JSON record per step (and per
// dev evaluation) to <out_dir>/<stage>.metrics.jsonl, writes the checkpoint
// and a run manifest under out_dir.
StageOutcome run_stage(const TrainConfig& config, const std::string& out_dir);

// --- non-stage commands -----------------------------------------------------

struct AugmentCommandArgs {
    std::string input_tsv;
    std::string output_tsv;
    std::string glove_path;          // optional
    std::string teacher_checkpoint;  // must carry an MLM head
    AugmentConfig config;
    std::string out_dir;  // run manifest location; default = output directory
};

void run_augment_command(const AugmentCommandArgs& args);

Metrics run_evaluate_command(const TrainConfig& config, const std::string& split,
                             const std::string& checkpoint_override,
                             const std::string& out_dir);

// --- ablation harness -------------------------------------------------------

struct AblationConfig {
    std::string task_name = "task";
    DataSettings data;            // train/dev/vocab of the task
    std::string general_corpus;   // unlabeled text for MLM + general distillation
    std::string glove;            // optional
    TransformerConfig teacher;
    TransformerConfig student;
    OptimSettings teacher_mlm;
    OptimSettings teacher_finetune;
    OptimSettings general;
    PhaseSettings phase1;
    PhaseSettings phase2;
    std::size_t batch_size = 16;
    AugmentConfig augment;
    DistillSettings distill;
    std::vector<std::uint64_t> seeds;

    void validate() const;
};

AblationConfig parse_ablation_config(const std::string& json_text,
                                     const std::string& origin);
AblationConfig load_ablation_config(const std::string& path);

struct AblationCell {
    std::string variant;
    std::uint64_t seed = 0;
    double dev_accuracy = 0.0;
};

struct AblationReport {
    std::string recipe;
    std::vector<std::string> variants;  // row order
    std::vector<AblationCell> cells;
    std::string tsv;  // rendered table, byte-stable across reruns

    double mean(const std::string& variant) const;
};

// recipe is one of {procedures, objectives, mapping}. Runs the variant grid
// over the configured seeds (parallelism capped by max_threads), writes
// report.tsv plus all run artifacts under out_dir.
AblationReport run_ablation(const std::string& recipe, const AblationConfig& config,
                            const std::string& out_dir, std::size_t max_threads);

}  // namespace tinydistill
