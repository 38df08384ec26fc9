// Exercises the shared-library surface strictly through the C header; the
// core library is used only to prepare fixtures.

#include <doctest.h>

#include <cstring>
#include <string>

#include <json.hpp>

#include "tinydistill.h"
#include "tinydistill/data.hpp"
#include "tinydistill/toycorpus.hpp"
#include "tinydistill/transformer.hpp"
#include "tmpdir.hpp"

using nlohmann::json;

namespace {

std::string owned(char* s) {
    REQUIRE(s != nullptr);
    std::string out = s;
    td_string_free(s);
    return out;
}

struct Fixture {
    testutil::TempDir tmp{"capi"};
    tinydistill::ToyTaskFiles files;

    Fixture() {
        tinydistill::ToyTaskSpec spec;
        spec.kind = tinydistill::ToyTaskSpec::Kind::kUnigram;
        spec.train_examples = 48;
        spec.dev_examples = 48;
        spec.test_examples = 16;
        spec.unlabeled_examples = 64;
        spec.seed = 77;
        files = tinydistill::write_toy_task(tmp.file("task"), spec);
    }

    std::string mlm_config() {
        json j{{"stage", "teacher-mlm"},
               {"seed", 3},
               {"data", {{"train", files.general}, {"vocab", files.vocab}}},
               {"model",
                {{"num_layers", 2}, {"hidden", 16}, {"ffn", 32}, {"heads", 2},
                 {"max_len", 16}, {"num_classes", 2}, {"mlm_head", true}}},
               {"train", {{"epochs", 2}, {"batch_size", 16}, {"learning_rate", 2e-3}}}};
        return tmp.write("mlm.json", j.dump());
    }

    std::string finetune_config() {
        json j{{"stage", "teacher-finetune"},
               {"seed", 4},
               {"data",
                {{"train", files.train}, {"dev", files.dev}, {"vocab", files.vocab}}},
               {"model",
                {{"num_layers", 2}, {"hidden", 16}, {"ffn", 32}, {"heads", 2},
                 {"max_len", 16}, {"num_classes", 2}}},
               {"train", {{"epochs", 4}, {"batch_size", 16}, {"learning_rate", 5e-3}}}};
        return tmp.write("ft.json", j.dump());
    }
};

}  // namespace

TEST_SUITE("capi") {

TEST_CASE("version and log level") {
    CHECK(std::strlen(td_version()) > 0);
    CHECK(td_set_log_level("off") == TD_OK);
    CHECK(td_set_log_level("verbose") == TD_BAD_ARGS);
    CHECK(std::strlen(td_last_error()) > 0);
    CHECK(td_set_log_level("off") == TD_OK);
}

TEST_CASE("argument and config errors surface as TD_BAD_ARGS") {
    td_set_log_level("off");
    CHECK(td_train_teacher(nullptr, "out", -1) == TD_BAD_ARGS);
    CHECK(td_augment(nullptr, nullptr, nullptr, nullptr, 0.4, 20, 15, 0, 1, nullptr) ==
          TD_BAD_ARGS);

    testutil::TempDir tmp("capierr");
    std::string bad = tmp.write("bad.json", R"({"stage": "unknown-stage"})");
    CHECK(td_train_teacher(bad.c_str(), tmp.file("out").c_str(), -1) == TD_BAD_ARGS);
    CHECK(std::string(td_last_error()).find("stage") != std::string::npos);

    std::string unknown_key =
        tmp.write("ukey.json", R"({"stage": "teacher-mlm", "surprise": 1})");
    CHECK(td_train_teacher(unknown_key.c_str(), tmp.file("out").c_str(), -1) ==
          TD_BAD_ARGS);

    // missing files are runtime failures, not usage errors
    CHECK(td_train_teacher(tmp.file("absent.json").c_str(), tmp.file("out").c_str(),
                           -1) == TD_ERROR);
    CHECK(td_inspect_checkpoint(tmp.file("absent.ckpt").c_str(), nullptr) == TD_ERROR);
}

TEST_CASE("stage/command pairing is enforced") {
    td_set_log_level("off");
    Fixture fx;
    std::string mlm = fx.mlm_config();
    // an mlm config cannot drive general-distill
    CHECK(td_general_distill(mlm.c_str(), fx.tmp.file("out").c_str(), -1) ==
          TD_BAD_ARGS);
    CHECK(td_task_distill(mlm.c_str(), fx.tmp.file("out").c_str(), -1) == TD_BAD_ARGS);
}

TEST_CASE("train, inspect, model handle, augment and evaluate round-trip") {
    td_set_log_level("off");
    Fixture fx;

    // 1. MLM teacher
    std::string mlm_cfg = fx.mlm_config();
    std::string mlm_dir = fx.tmp.file("mlm");
    REQUIRE(td_train_teacher(mlm_cfg.c_str(), mlm_dir.c_str(), -1) == TD_OK);
    std::string mlm_ckpt = mlm_dir + "/teacher_mlm.ckpt";

    // 2. inspect: parameter count equals the formula
    char* summary_raw = nullptr;
    REQUIRE(td_inspect_checkpoint(mlm_ckpt.c_str(), &summary_raw) == TD_OK);
    json summary = json::parse(owned(summary_raw));
    CHECK(summary["stage"] == "teacher-mlm");
    CHECK(summary["lineage"]["parent"] == "root");
    tinydistill::TransformerConfig expect;
    expect.num_layers = 2;
    expect.hidden = 16;
    expect.ffn = 32;
    expect.heads = 2;
    expect.vocab_size = summary["config"]["vocab_size"].get<std::size_t>();
    expect.max_len = 16;
    expect.num_classes = 2;
    expect.mlm_head = true;
    CHECK(summary["parameter_count"].get<std::int64_t>() ==
          tinydistill::parameter_count(expect));

    // 3. model handle
    td_model* model = nullptr;
    REQUIRE(td_model_load(mlm_ckpt.c_str(), &model) == TD_OK);
    CHECK(td_model_parameter_count(model) ==
          summary["parameter_count"].get<std::int64_t>());
    char* cfg_raw = nullptr;
    REQUIRE(td_model_config_json(model, &cfg_raw) == TD_OK);
    json cfg = json::parse(owned(cfg_raw));
    CHECK(cfg["mlm_head"] == true);
    char* metrics_raw = nullptr;
    REQUIRE(td_model_evaluate_tsv(model, fx.files.dev.c_str(), 16, &metrics_raw) ==
            TD_OK);
    json metrics = json::parse(owned(metrics_raw));
    CHECK(metrics["accuracy"].get<double>() >= 0.0);
    CHECK(metrics["accuracy"].get<double>() <= 1.0);
    CHECK(metrics["count"].get<int>() == 48);
    td_model_free(model);

    // 4. augmentation through the C surface
    std::string aug_out = fx.tmp.file("train.aug.tsv");
    REQUIRE(td_augment(fx.files.train.c_str(), aug_out.c_str(), nullptr,
                       mlm_ckpt.c_str(), 0.4, 3, 5, 9, 1,
                       fx.tmp.file("augrun").c_str()) == TD_OK);
    auto examples = tinydistill::load_tsv(aug_out);
    CHECK(examples.size() == 48 * 4);  // originals + 3 variants each

    // a teacher without an MLM head is rejected
    std::string ft_cfg = fx.finetune_config();
    std::string ft_dir = fx.tmp.file("ft");
    REQUIRE(td_train_teacher(ft_cfg.c_str(), ft_dir.c_str(), -1) == TD_OK);
    std::string ft_ckpt = ft_dir + "/teacher_finetune.ckpt";
    CHECK(td_augment(fx.files.train.c_str(), aug_out.c_str(), nullptr, ft_ckpt.c_str(),
                     0.4, 3, 5, 9, 1, nullptr) == TD_BAD_ARGS);

    // 5. evaluate against the fine-tuned teacher
    char* eval_raw = nullptr;
    REQUIRE(td_evaluate(ft_cfg.c_str(), "dev", ft_ckpt.c_str(),
                        fx.tmp.file("eval").c_str(), &eval_raw) == TD_OK);
    json eval = json::parse(owned(eval_raw));
    CHECK(eval["count"].get<int>() == 48);
    CHECK(eval.contains("mcc"));

    CHECK(td_evaluate(ft_cfg.c_str(), "nope", ft_ckpt.c_str(), nullptr, nullptr) ==
          TD_BAD_ARGS);
    CHECK(td_evaluate(ft_cfg.c_str(), "dev", fx.tmp.file("none.ckpt").c_str(), nullptr,
                      nullptr) == TD_ERROR);
}

TEST_CASE("seed override changes the run") {
    td_set_log_level("off");
    Fixture fx;
    std::string cfg = fx.finetune_config();
    REQUIRE(td_train_teacher(cfg.c_str(), fx.tmp.file("a").c_str(), 100) == TD_OK);
    REQUIRE(td_train_teacher(cfg.c_str(), fx.tmp.file("b").c_str(), 100) == TD_OK);
    REQUIRE(td_train_teacher(cfg.c_str(), fx.tmp.file("c").c_str(), 101) == TD_OK);
    std::string a = testutil::read_file(fx.tmp.file("a/teacher_finetune.ckpt"));
    std::string b = testutil::read_file(fx.tmp.file("b/teacher_finetune.ckpt"));
    std::string c = testutil::read_file(fx.tmp.file("c/teacher_finetune.ckpt"));
    CHECK(a == b);
    CHECK(a != c);
}

TEST_CASE("ablate rejects unknown recipes") {
    td_set_log_level("off");
    testutil::TempDir tmp("ablerr");
    CHECK(td_ablate("nonsense", tmp.file("absent.json").c_str(),
                    tmp.file("out").c_str(), 1, nullptr) == TD_ERROR);  // missing file
    std::string cfg = tmp.write("a.json", R"({"seeds": [1]})");
    CHECK(td_ablate("procedures", cfg.c_str(), tmp.file("out").c_str(), 1, nullptr) ==
          TD_BAD_ARGS);  // incomplete config
}

}  // TEST_SUITE
