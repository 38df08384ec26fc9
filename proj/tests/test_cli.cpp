// End-to-end coverage of the command-line binary (exit codes, file outputs,
// determinism). The binary path comes from the build system.

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "tinydistill/checkpoint.hpp"
#include "tinydistill/data.hpp"
#include "tinydistill/toycorpus.hpp"
#include "tmpdir.hpp"

using nlohmann::json;
namespace td = tinydistill;

namespace {

int run_cli(const std::string& args, const std::string& stdout_file = "") {
    std::string cmd = std::string(TINYDISTILL_CLI_PATH) + " " + args;
    cmd += stdout_file.empty() ? " > /dev/null 2>&1"
                               : " > " + stdout_file + " 2> /dev/null";
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

struct Workbench {
    testutil::TempDir tmp{"cli"};
    td::ToyTaskFiles files;

    Workbench() {
        td::ToyTaskSpec spec;
        spec.kind = td::ToyTaskSpec::Kind::kUnigram;
        spec.train_examples = 48;
        spec.dev_examples = 48;
        spec.test_examples = 16;
        spec.unlabeled_examples = 64;
        spec.seed = 5;
        files = td::write_toy_task(tmp.file("task"), spec);
    }

    std::string write_config(const std::string& name, json j) {
        return tmp.write(name, j.dump(2));
    }

    json model_json(bool mlm) {
        return json{{"num_layers", 2}, {"hidden", 16}, {"ffn", 32},   {"heads", 2},
                    {"max_len", 16},   {"num_classes", 2}, {"mlm_head", mlm}};
    }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("") == 2);                       // missing subcommand
    CHECK(run_cli("no-such-command") == 2);        // unknown command
    CHECK(run_cli("evaluate") == 2);               // missing required --config
    CHECK(run_cli("train-teacher --config x --no-such-flag") == 2);
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("--version") == 0);
}

TEST_CASE("full toy pipeline, rerun determinism and inspection") {
    Workbench wb;

    // --- teacher MLM pre-training
    std::string mlm_cfg = wb.write_config(
        "mlm.json",
        json{{"stage", "teacher-mlm"},
             {"seed", 3},
             {"data", {{"train", wb.files.general}, {"vocab", wb.files.vocab}}},
             {"model", wb.model_json(true)},
             {"train", {{"epochs", 3}, {"batch_size", 16}, {"learning_rate", 2e-3}}}});
    REQUIRE(run_cli("train-teacher --config " + mlm_cfg + " --out-dir " +
                    wb.tmp.file("mlm")) == 0);
    std::string mlm_ckpt = wb.tmp.file("mlm/teacher_mlm.ckpt");

    // --- teacher fine-tuning, warm-started from the MLM checkpoint
    std::string ft_cfg = wb.write_config(
        "ft.json",
        json{{"stage", "teacher-finetune"},
             {"seed", 4},
             {"data",
              {{"train", wb.files.train}, {"dev", wb.files.dev},
               {"vocab", wb.files.vocab}}},
             {"init_checkpoint", mlm_ckpt},
             {"train", {{"epochs", 8}, {"batch_size", 16}, {"learning_rate", 5e-3}}}});
    REQUIRE(run_cli("train-teacher --config " + ft_cfg + " --out-dir " +
                    wb.tmp.file("ft")) == 0);
    std::string teacher_ckpt = wb.tmp.file("ft/teacher_finetune.ckpt");

    // --- general distillation from the un-fine-tuned teacher
    std::string gd_cfg = wb.write_config(
        "gd.json",
        json{{"stage", "general"},
             {"seed", 5},
             {"data", {{"train", wb.files.general}, {"vocab", wb.files.vocab}}},
             {"teacher_checkpoint", mlm_ckpt},
             {"model",
              {{"num_layers", 1}, {"hidden", 8}, {"ffn", 16}, {"heads", 2},
               {"max_len", 16}, {"num_classes", 2}}},
             {"train", {{"epochs", 3}, {"batch_size", 16}, {"learning_rate", 2e-3}}}});
    REQUIRE(run_cli("general-distill --config " + gd_cfg + " --out-dir " +
                    wb.tmp.file("gd")) == 0);
    std::string general_ckpt = wb.tmp.file("gd/general.ckpt");

    // --- data augmentation via the MLM teacher
    std::string aug_tsv = wb.tmp.file("train.aug.tsv");
    REQUIRE(run_cli("augment --in " + wb.files.train + " --out " + aug_tsv +
                    " --teacher " + mlm_ckpt +
                    " --pt 0.4 --na 2 --k 5 --seed 9 --out-dir " +
                    wb.tmp.file("aug")) == 0);
    CHECK(td::load_tsv(aug_tsv).size() == 48 * 3);

    // --- two-phase task distillation on the augmented data
    std::string td_cfg = wb.write_config(
        "td.json",
        json{{"stage", "task-distill"},
             {"seed", 6},
             {"data",
              {{"train", aug_tsv}, {"dev", wb.files.dev}, {"vocab", wb.files.vocab}}},
             {"teacher_checkpoint", teacher_ckpt},
             {"init_checkpoint", general_ckpt},
             {"train", {{"batch_size", 16}}},
             {"phase1", {{"epochs", 2}, {"learning_rate", 2e-3}}},
             {"phase2", {{"epochs", 2}, {"learning_rate", 1e-3}}}});
    REQUIRE(run_cli("task-distill --config " + td_cfg + " --out-dir " +
                    wb.tmp.file("td")) == 0);
    std::string student_ckpt = wb.tmp.file("td/task_prediction.ckpt");

    // lineage: final -> intermediate -> general -> root
    CHECK_NOTHROW(td::verify_lineage({student_ckpt,
                                      wb.tmp.file("td/task_intermediate.ckpt"),
                                      general_ckpt}));

    // --- evaluate the final student; stdout carries the metrics JSON
    std::string eval_out = wb.tmp.file("eval.json");
    REQUIRE(run_cli("evaluate --config " + td_cfg + " --checkpoint " + student_ckpt +
                        " --split dev --out-dir " + wb.tmp.file("eval"),
                    eval_out) == 0);
    json metrics = json::parse(testutil::read_file(eval_out));
    CHECK(metrics["accuracy"].get<double>() >= 0.0);
    CHECK(metrics["count"].get<int>() == 48);

    // --- rerun the distillation stages: byte-identical logs and checkpoints
    REQUIRE(run_cli("general-distill --config " + gd_cfg + " --out-dir " +
                    wb.tmp.file("gd2")) == 0);
    CHECK(testutil::read_file(wb.tmp.file("gd2/general.ckpt")) ==
          testutil::read_file(general_ckpt));
    CHECK(testutil::read_file(wb.tmp.file("gd2/general.metrics.jsonl")) ==
          testutil::read_file(wb.tmp.file("gd/general.metrics.jsonl")));

    REQUIRE(run_cli("task-distill --config " + td_cfg + " --out-dir " +
                    wb.tmp.file("td2")) == 0);
    CHECK(testutil::read_file(wb.tmp.file("td2/task_prediction.ckpt")) ==
          testutil::read_file(student_ckpt));

    // --- inspect-checkpoint prints a summary with the parameter count
    std::string inspect_out = wb.tmp.file("inspect.json");
    REQUIRE(run_cli("inspect-checkpoint " + student_ckpt, inspect_out) == 0);
    json summary = json::parse(testutil::read_file(inspect_out));
    CHECK(summary["stage"] == "task-prediction");
    CHECK(summary["parameter_count"].get<std::int64_t>() > 0);

    // tampering with the blob turns inspection into a runtime failure
    std::string bytes = testutil::read_file(student_ckpt);
    bytes[bytes.size() - 3] ^= 0x20;
    std::string tampered = wb.tmp.write("tampered.ckpt", bytes);
    CHECK(run_cli("inspect-checkpoint " + tampered) == 1);
    CHECK(run_cli("inspect-checkpoint " + wb.tmp.file("missing.ckpt")) == 1);

    // evaluating a missing checkpoint is a runtime failure as well
    CHECK(run_cli("evaluate --config " + td_cfg + " --checkpoint " +
                  wb.tmp.file("missing.ckpt") + " --split dev") == 1);
}

TEST_CASE("seed flag beats the config file") {
    Workbench wb;
    std::string cfg = wb.write_config(
        "seeded.json",
        json{{"stage", "teacher-finetune"},
             {"seed", 4},
             {"data", {{"train", wb.files.train}, {"vocab", wb.files.vocab}}},
             {"model", wb.model_json(false)},
             {"train", {{"epochs", 1}, {"batch_size", 16}, {"learning_rate", 1e-3}}}});
    REQUIRE(run_cli("train-teacher --config " + cfg + " --seed 123 --out-dir " +
                    wb.tmp.file("s")) == 0);
    json manifest = json::parse(testutil::read_file(wb.tmp.file("s/run.json")));
    CHECK(manifest["config"]["seed"].get<int>() == 123);

    // pair-schema preservation through augment: build a pair task first
    std::vector<td::Example> pairs = {{"good day here", "bad night there", 1},
                                      {"bad rain now", "good sun then", 0}};
    td::save_tsv(wb.tmp.file("pairs.tsv"), pairs, true);
    // teacher over the pair vocabulary
    std::vector<std::string> texts;
    for (const auto& e : pairs) {
        texts.push_back(e.text_a);
        texts.push_back(e.text_b);
    }
    td::Vocab::build(texts, 64).save(wb.tmp.file("pair_vocab.txt"));
    std::string mlm_cfg = wb.write_config(
        "pair_mlm.json",
        json{{"stage", "teacher-mlm"},
             {"seed", 8},
             {"data",
              {{"train", wb.tmp.file("pairs.tsv")},
               {"vocab", wb.tmp.file("pair_vocab.txt")}}},
             {"model", wb.model_json(true)},
             {"train", {{"epochs", 1}, {"batch_size", 4}, {"learning_rate", 1e-3}}}});
    REQUIRE(run_cli("train-teacher --config " + mlm_cfg + " --out-dir " +
                    wb.tmp.file("pair_mlm")) == 0);
    REQUIRE(run_cli("augment --in " + wb.tmp.file("pairs.tsv") + " --out " +
                    wb.tmp.file("pairs.aug.tsv") + " --teacher " +
                    wb.tmp.file("pair_mlm/teacher_mlm.ckpt") +
                    " --na 2 --k 3 --seed 1") == 0);
    CHECK(td::tsv_has_pair_column(wb.tmp.file("pairs.aug.tsv")));
    auto aug = td::load_tsv(wb.tmp.file("pairs.aug.tsv"));
    CHECK(aug.size() == 2 * 3);
    for (const auto& e : aug) CHECK_FALSE(e.text_b.empty());
}

}  // TEST_SUITE
