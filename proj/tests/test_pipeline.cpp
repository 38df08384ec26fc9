#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tinydistill/checkpoint.hpp"
#include "tinydistill/error.hpp"
#include "tinydistill/optimizer.hpp"
#include "tinydistill/pipeline.hpp"
#include "tinydistill/toycorpus.hpp"
#include "tmpdir.hpp"

using namespace tinydistill;
using nlohmann::json;

namespace {

TransformerConfig small_model(std::size_t layers, std::size_t hidden,
                              std::uint64_t seed) {
    TransformerConfig c;
    c.num_layers = layers;
    c.hidden = hidden;
    c.ffn = hidden * 2;
    c.heads = 2;
    c.vocab_size = 0;  // resolved from the vocab file
    c.max_len = 16;
    c.num_classes = 2;
    c.seed = seed;
    return c;
}

ToyTaskFiles make_unigram_task(const testutil::TempDir& tmp, std::uint64_t seed) {
    ToyTaskSpec spec;
    spec.kind = ToyTaskSpec::Kind::kUnigram;
    spec.train_examples = 96;
    spec.dev_examples = 96;
    spec.test_examples = 32;
    spec.unlabeled_examples = 128;
    spec.seed = seed;
    return write_toy_task(tmp.file("task"), spec);
}

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in);
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("config parser enforces the schema") {
    std::string good = R"({
        "stage": "teacher-finetune",
        "seed": 9,
        "data": {"train": "t.tsv", "dev": "d.tsv", "vocab": "v.txt"},
        "model": {"num_layers": 2, "hidden": 16, "ffn": 32, "heads": 2,
                   "max_len": 16, "num_classes": 2},
        "train": {"epochs": 3, "batch_size": 8, "learning_rate": 0.001}
    })";
    TrainConfig cfg = parse_train_config(good, "test");
    CHECK(cfg.stage == "teacher-finetune");
    CHECK(cfg.seed == 9);
    CHECK(cfg.model.hidden == 16);
    CHECK(cfg.train.epochs == 3);
    // model seed defaults to a derivation of the top-level seed
    CHECK(cfg.model.seed == mix_seed(9, 0x6d6f64ULL));

    CHECK_THROWS_AS(parse_train_config("{\"stage\": \"nope\"}", "test"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("not json", "test"), ConfigError);
    // unknown keys are errors, at every level
    CHECK_THROWS_AS(
        parse_train_config(R"({"stage":"teacher-finetune","bogus":1})", "test"),
        ConfigError);
    CHECK_THROWS_AS(parse_train_config(
                        R"({"stage":"teacher-finetune",
                            "data":{"train":"t","vocab":"v","nope":1}})",
                        "test"),
                    ConfigError);
    CHECK_THROWS_AS(parse_train_config(
                        R"({"stage":"teacher-finetune",
                            "data":{"train":"t","vocab":"v"},
                            "model":{"hidden":16,"window":9}})",
                        "test"),
                    ConfigError);
}

TEST_CASE("seed override: flag beats file, derived model seed follows") {
    std::string text = R"({
        "stage": "teacher-finetune",
        "seed": 9,
        "data": {"train": "t.tsv", "vocab": "v.txt"},
        "model": {"num_layers": 1, "hidden": 8, "ffn": 8, "heads": 2}
    })";
    TrainConfig cfg = parse_train_config(text, "test");
    override_seed(cfg, 123);
    CHECK(cfg.seed == 123);
    CHECK(cfg.model.seed == mix_seed(123, 0x6d6f64ULL));

    // explicitly pinned model seed survives the override
    std::string pinned = R"({
        "stage": "teacher-finetune",
        "seed": 9,
        "data": {"train": "t.tsv", "vocab": "v.txt"},
        "model": {"num_layers": 1, "hidden": 8, "ffn": 8, "heads": 2, "seed": 5}
    })";
    TrainConfig cfg2 = parse_train_config(pinned, "test");
    override_seed(cfg2, 123);
    CHECK(cfg2.seed == 123);
    CHECK(cfg2.model.seed == 5);
}

TEST_CASE("binary Matthews correlation") {
    CHECK(binary_mcc(1, 1, 1, 1) == 0.0);  // hand-built confusion matrix
    CHECK(binary_mcc(10, 10, 0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(binary_mcc(0, 0, 10, 10) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(binary_mcc(10, 0, 10, 0) == 0.0);  // constant predictor, balanced
    CHECK(binary_mcc(0, 0, 0, 0) == 0.0);    // degenerate: defined as 0
}

TEST_CASE("evaluate_model on a rigged model") {
    // vocabulary with two marker words
    Vocab vocab = Vocab::build({"yes no pad pad"}, 8);
    TransformerConfig c = small_model(1, 8, 4);
    c.vocab_size = vocab.size();
    TransformerModel model(c);
    std::vector<Example> dev = {{"yes", "", 1}, {"no", "", 0}, {"yes", "", 1},
                                {"no", "", 0}};
    Metrics m = evaluate_model(model, vocab, dev, 2, 16);
    CHECK(m.count == 4);
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    CHECK(m.has_mcc);
    CHECK(m.loss > 0.0);
    CHECK_THROWS_AS(evaluate_model(model, vocab, {}, 2, 16), ValueError);
}

TEST_CASE("teacher fine-tune solves a linearly separable task") {
    testutil::TempDir tmp("teacher");
    ToyTaskFiles files = make_unigram_task(tmp, 1);

    TrainConfig cfg;
    cfg.stage = "teacher-finetune";
    cfg.seed = 7;
    cfg.data.train = files.train;
    cfg.data.dev = files.dev;
    cfg.data.vocab = files.vocab;
    cfg.model = small_model(2, 16, 70);
    cfg.has_model = true;
    cfg.train.epochs = 20;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 1e-2;

    StageOutcome out = run_stage(cfg, tmp.file("out"));
    REQUIRE(out.dev_accuracy.has_value());
    CHECK(*out.dev_accuracy >= 0.95);

    // checkpoint carries the dev accuracy and a root lineage
    CheckpointSummary s = inspect_checkpoint(out.checkpoint_path);
    CHECK(s.meta.stage == "teacher-finetune");
    CHECK(s.meta.parent_hash == "root");
    REQUIRE(s.meta.dev_accuracy.has_value());
    CHECK(*s.meta.dev_accuracy == *out.dev_accuracy);

    // the run manifest exists and echoes the config
    json manifest = json::parse(testutil::read_file(tmp.file("out/run.json")));
    CHECK(manifest["command"] == "teacher-finetune");
    CHECK(manifest["config"]["seed"] == 7);
}

TEST_CASE("zero epochs returns the initialized model unchanged") {
    testutil::TempDir tmp("zeroep");
    ToyTaskFiles files = make_unigram_task(tmp, 2);
    TrainConfig cfg;
    cfg.stage = "teacher-finetune";
    cfg.seed = 7;
    cfg.data.train = files.train;
    cfg.data.vocab = files.vocab;
    cfg.model = small_model(1, 8, 70);
    cfg.has_model = true;
    cfg.train.epochs = 0;
    StageOutcome out = run_stage(cfg, tmp.file("out"));

    Vocab vocab = Vocab::load(files.vocab);
    TransformerConfig mc = cfg.model;
    mc.vocab_size = vocab.size();
    TransformerModel fresh(mc);
    LoadedCheckpoint loaded = load_checkpoint(out.checkpoint_path);
    auto a = fresh.named_parameters();
    auto b = loaded.model.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].second.numel(); ++j) {
            CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
        }
    }
}

TEST_CASE("reruns with a fixed seed are byte-identical") {
    testutil::TempDir tmp("determinism");
    ToyTaskFiles files = make_unigram_task(tmp, 3);
    TrainConfig cfg;
    cfg.stage = "teacher-finetune";
    cfg.seed = 11;
    cfg.data.train = files.train;
    cfg.data.dev = files.dev;
    cfg.data.vocab = files.vocab;
    cfg.model = small_model(2, 16, 71);
    cfg.has_model = true;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 1e-3;

    StageOutcome a = run_stage(cfg, tmp.file("a"));
    StageOutcome b = run_stage(cfg, tmp.file("b"));
    CHECK(testutil::read_file(a.checkpoint_path) ==
          testutil::read_file(b.checkpoint_path));
    CHECK(testutil::read_file(a.metrics_path) == testutil::read_file(b.metrics_path));

    // and a different seed changes the outcome
    TrainConfig other = cfg;
    other.seed = 12;
    StageOutcome c = run_stage(other, tmp.file("c"));
    CHECK(testutil::read_file(a.checkpoint_path) !=
          testutil::read_file(c.checkpoint_path));
}

TEST_CASE("mlm stage trains and its loss falls") {
    testutil::TempDir tmp("mlm");
    ToyTaskFiles files = make_unigram_task(tmp, 4);
    TrainConfig cfg;
    cfg.stage = "teacher-mlm";
    cfg.seed = 5;
    cfg.data.train = files.general;
    cfg.data.vocab = files.vocab;
    cfg.model = small_model(2, 16, 72);
    cfg.model.mlm_head = true;
    cfg.has_model = true;
    cfg.train.epochs = 12;
    cfg.train.batch_size = 16;
    cfg.train.learning_rate = 3e-3;
    StageOutcome out = run_stage(cfg, tmp.file("out"));

    auto records = read_jsonl(out.metrics_path);
    REQUIRE(records.size() > 10);
    double first = records.front()["loss"].get<double>();
    double last = records.back()["loss"].get<double>();
    CHECK(last < first * 0.8);
    CHECK(inspect_checkpoint(out.checkpoint_path).config.mlm_head);

    // the mlm stage requires an mlm head
    TrainConfig bad = cfg;
    bad.model.mlm_head = false;
    CHECK_THROWS_AS(run_stage(bad, tmp.file("bad")), ConfigError);
}

TEST_CASE("general distillation: losses fall, components logged, teacher frozen") {
    testutil::TempDir tmp("gd");
    ToyTaskFiles files = make_unigram_task(tmp, 5);

    // teacher: brief supervised training, then freeze
    TrainConfig tcfg;
    tcfg.stage = "teacher-finetune";
    tcfg.seed = 21;
    tcfg.data.train = files.train;
    tcfg.data.vocab = files.vocab;
    tcfg.model = small_model(2, 16, 73);
    tcfg.has_model = true;
    tcfg.train.epochs = 10;
    tcfg.train.learning_rate = 3e-3;
    tcfg.train.batch_size = 16;
    StageOutcome teacher = run_stage(tcfg, tmp.file("teacher"));
    std::string teacher_bytes = testutil::read_file(teacher.checkpoint_path);

    TrainConfig gcfg;
    gcfg.stage = "general";
    gcfg.seed = 22;
    gcfg.data.train = files.general;
    gcfg.data.vocab = files.vocab;
    gcfg.teacher_checkpoint = teacher.checkpoint_path;
    gcfg.model = small_model(1, 8, 74);
    gcfg.has_model = true;
    gcfg.train.epochs = 10;
    gcfg.train.batch_size = 16;
    gcfg.train.learning_rate = 2e-3;
    gcfg.distill.mapping = "uniform";
    StageOutcome out = run_stage(gcfg, tmp.file("gd"));

    auto records = read_jsonl(out.metrics_path);
    std::vector<json> steps;
    for (const json& r : records) {
        if (r["type"] == "step") steps.push_back(r);
    }
    REQUIRE(steps.size() >= 20);

    // prediction loss is absent from general-distillation logs
    for (const json& s : steps) {
        CHECK_FALSE(s.contains("pred"));
        CHECK(s.contains("embd"));
        CHECK(s.contains("attn"));
        CHECK(s.contains("hidn"));
        // decomposition: total equals sum(lambda_m * layer_m) within 1e-9
        double total = s["loss"].get<double>();
        auto layers = s["layers"].get<std::vector<double>>();
        auto lambda = s["lambda"].get<std::vector<double>>();
        REQUIRE(layers.size() == lambda.size());
        double sum = 0.0;
        for (std::size_t i = 0; i < layers.size(); ++i) sum += lambda[i] * layers[i];
        CHECK(std::abs(total - sum) < 1e-9);
        CHECK(std::abs(total - (s["embd"].get<double>() + s["attn"].get<double>() +
                                s["hidn"].get<double>())) < 1e-9);
    }

    // every intermediate loss decreased (first-10 vs last-10 averages)
    auto mean_of = [&](const char* key, bool head) {
        double sum = 0.0;
        for (std::size_t i = 0; i < 10; ++i) {
            const json& s = steps[head ? i : steps.size() - 1 - i];
            sum += s[key].get<double>();
        }
        return sum / 10.0;
    };
    for (const char* key : {"embd", "attn", "hidn", "loss"}) {
        CHECK(mean_of(key, false) < mean_of(key, true));
    }

    // the teacher checkpoint is bit-identical after distillation
    CHECK(testutil::read_file(teacher.checkpoint_path) == teacher_bytes);
    CHECK(inspect_checkpoint(out.checkpoint_path).meta.stage == "general");
}

TEST_CASE("all-zero lambda leaves the student parameters unchanged") {
    testutil::TempDir tmp("zerolambda");
    ToyTaskFiles files = make_unigram_task(tmp, 6);
    TrainConfig tcfg;
    tcfg.stage = "teacher-finetune";
    tcfg.seed = 31;
    tcfg.data.train = files.train;
    tcfg.data.vocab = files.vocab;
    tcfg.model = small_model(1, 8, 75);
    tcfg.has_model = true;
    tcfg.train.epochs = 1;
    StageOutcome teacher = run_stage(tcfg, tmp.file("teacher"));

    TrainConfig gcfg;
    gcfg.stage = "general";
    gcfg.seed = 32;
    gcfg.data.train = files.general;
    gcfg.data.vocab = files.vocab;
    gcfg.teacher_checkpoint = teacher.checkpoint_path;
    gcfg.model = small_model(1, 8, 76);
    gcfg.has_model = true;
    gcfg.train.epochs = 1;
    gcfg.distill.lambda = {0.0, 0.0, 0.0};
    StageOutcome out = run_stage(gcfg, tmp.file("gd"));

    Vocab vocab = Vocab::load(files.vocab);
    TransformerConfig mc = gcfg.model;
    mc.vocab_size = vocab.size();
    TransformerModel fresh(mc);
    LoadedCheckpoint trained = load_checkpoint(out.checkpoint_path);
    auto a = fresh.named_parameters();
    auto b = trained.model.named_parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].second.numel(); ++j) {
            CHECK(a[i].second.data()[j] == b[i].second.data()[j]);
        }
    }
}

TEST_CASE("task-distill runs two phases with verifiable lineage") {
    testutil::TempDir tmp("td");
    ToyTaskFiles files = make_unigram_task(tmp, 7);

    TrainConfig tcfg;
    tcfg.stage = "teacher-finetune";
    tcfg.seed = 41;
    tcfg.data.train = files.train;
    tcfg.data.dev = files.dev;
    tcfg.data.vocab = files.vocab;
    tcfg.model = small_model(2, 16, 80);
    tcfg.has_model = true;
    tcfg.train.epochs = 6;
    tcfg.train.learning_rate = 3e-3;
    tcfg.train.batch_size = 16;
    StageOutcome teacher = run_stage(tcfg, tmp.file("teacher"));

    TrainConfig gcfg;
    gcfg.stage = "general";
    gcfg.seed = 42;
    gcfg.data.train = files.general;
    gcfg.data.vocab = files.vocab;
    gcfg.teacher_checkpoint = teacher.checkpoint_path;
    gcfg.model = small_model(1, 8, 81);
    gcfg.has_model = true;
    gcfg.train.epochs = 2;
    gcfg.train.batch_size = 16;
    StageOutcome general = run_stage(gcfg, tmp.file("gd"));

    TrainConfig td;
    td.stage = "task-distill";
    td.seed = 43;
    td.data.train = files.train;
    td.data.dev = files.dev;
    td.data.vocab = files.vocab;
    td.teacher_checkpoint = teacher.checkpoint_path;
    td.init_checkpoint = general.checkpoint_path;
    td.train.batch_size = 16;
    td.phase1.epochs = 2;
    td.phase1.learning_rate = 2e-3;
    td.phase2.epochs = 2;
    td.phase2.learning_rate = 1e-3;
    StageOutcome final = run_stage(td, tmp.file("td"));
    REQUIRE(final.dev_accuracy.has_value());

    // chain: task_prediction -> task_intermediate -> general -> root
    CHECK_NOTHROW(verify_lineage({final.checkpoint_path,
                                  tmp.file("td/task_intermediate.ckpt"),
                                  general.checkpoint_path}));
    CHECK(inspect_checkpoint(final.checkpoint_path).meta.stage == "task-prediction");

    // phase 2 refuses a checkpoint that is not a phase-1 output
    TrainConfig p2;
    p2.stage = "task-prediction";
    p2.seed = 44;
    p2.data.train = files.train;
    p2.data.vocab = files.vocab;
    p2.teacher_checkpoint = teacher.checkpoint_path;
    p2.init_checkpoint = general.checkpoint_path;  // wrong stage
    p2.train.batch_size = 16;
    CHECK_THROWS_AS(run_stage(p2, tmp.file("p2")), ConfigError);
}

TEST_CASE("evaluate command writes metrics and a manifest") {
    testutil::TempDir tmp("evalcmd");
    ToyTaskFiles files = make_unigram_task(tmp, 8);
    TrainConfig tcfg;
    tcfg.stage = "teacher-finetune";
    tcfg.seed = 51;
    tcfg.data.train = files.train;
    tcfg.data.dev = files.dev;
    tcfg.data.vocab = files.vocab;
    tcfg.model = small_model(2, 16, 82);
    tcfg.has_model = true;
    tcfg.train.epochs = 6;
    tcfg.train.learning_rate = 3e-3;
    tcfg.train.batch_size = 16;
    StageOutcome teacher = run_stage(tcfg, tmp.file("teacher"));

    TrainConfig ecfg;
    ecfg.stage = "teacher-finetune";  // reused for data paths only
    ecfg.data = tcfg.data;
    ecfg.train.batch_size = 16;
    Metrics m = run_evaluate_command(ecfg, "dev", teacher.checkpoint_path,
                                     tmp.file("eval"));
    CHECK(m.accuracy == *teacher.dev_accuracy);
    json rec = json::parse(testutil::read_file(tmp.file("eval/evaluate.dev.json")));
    CHECK(rec["accuracy"].get<double>() == m.accuracy);
    CHECK(json::parse(testutil::read_file(tmp.file("eval/run.json")))["command"] ==
          "evaluate");

    CHECK_THROWS_AS(run_evaluate_command(ecfg, "nope", teacher.checkpoint_path,
                                         tmp.file("e2")),
                    ConfigError);
    CHECK_THROWS_AS(run_evaluate_command(ecfg, "dev", tmp.file("missing.ckpt"),
                                         tmp.file("e3")),
                    IoError);
}

TEST_CASE("distillation steps never touch teacher parameters in memory") {
    // three manual steps against a frozen teacher, then compare snapshots
    testutil::TempDir tmp("freeze");
    ToyTaskFiles files = make_unigram_task(tmp, 9);
    Vocab vocab = Vocab::load(files.vocab);
    TransformerConfig tc = small_model(2, 16, 90);
    tc.vocab_size = vocab.size();
    TransformerModel teacher(tc);
    TransformerConfig sc = small_model(1, 8, 91);
    sc.vocab_size = vocab.size();
    TransformerModel student(sc);

    std::vector<std::vector<double>> before;
    for (const Tensor& p : teacher.parameters()) {
        before.emplace_back(p.data().begin(), p.data().end());
    }

    LayerMapping mapping = LayerMapping::uniform(1, 2);
    DistillParams params = DistillParams::create(1, 8, 16, 92);
    std::vector<Tensor> trainable = student.parameters();
    for (const Tensor& t : params.trainable()) trainable.push_back(t);
    AdamConfig ac;
    ac.learning_rate = 1e-3;
    ac.total_steps = 3;
    Adam adam(trainable, ac);

    auto batches = make_batches(load_tsv(files.train), vocab, 16, 8, 1);
    for (int step = 0; step < 3; ++step) {
        const Batch& b = batches[static_cast<std::size_t>(step)];
        ModelActivations ta;
        {
            NoGradGuard ng;
            ta = teacher.forward(b.tokens, b.pad_mask, b.batch, b.len);
        }
        ModelActivations sa = student.forward(b.tokens, b.pad_mask, b.batch, b.len);
        backward(model_loss(mapping, sa, ta, params, b.pad_mask).total);
        adam.step();
    }

    auto after = teacher.parameters();
    for (std::size_t i = 0; i < after.size(); ++i) {
        for (std::size_t j = 0; j < after[i].numel(); ++j) {
            CHECK(after[i].data()[j] == before[i][j]);
        }
        CHECK_FALSE(after[i].has_grad());
    }
}

}  // TEST_SUITE
