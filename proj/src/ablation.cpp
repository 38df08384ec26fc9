#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

#include <json.hpp>

#include "tinydistill/checkpoint.hpp"
#include "tinydistill/error.hpp"
#include "tinydistill/pipeline.hpp"
#include "tinydistill/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tinydistill {

namespace {

void expect_object(const json& j, const std::string& where) {
    if (!j.is_object()) throw ConfigError("config: " + where + " must be an object");
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config: bad value for '" + std::string(key) + "': " + e.what());
    }
}

TransformerConfig parse_model_section(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where,
               {"num_layers", "hidden", "ffn", "heads", "vocab_size", "max_len",
                "num_classes", "dropout", "seed", "mlm_head"});
    TransformerConfig c;
    c.vocab_size = 0;
    read_field(j, "num_layers", c.num_layers);
    read_field(j, "hidden", c.hidden);
    read_field(j, "ffn", c.ffn);
    read_field(j, "heads", c.heads);
    read_field(j, "vocab_size", c.vocab_size);
    read_field(j, "max_len", c.max_len);
    read_field(j, "num_classes", c.num_classes);
    read_field(j, "dropout", c.dropout);
    read_field(j, "seed", c.seed);
    read_field(j, "mlm_head", c.mlm_head);
    return c;
}

OptimSettings parse_optim_section(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where,
               {"epochs", "batch_size", "learning_rate", "warmup_fraction", "clip_norm",
                "mlm_mask_prob", "max_steps"});
    OptimSettings s;
    read_field(j, "epochs", s.epochs);
    read_field(j, "batch_size", s.batch_size);
    read_field(j, "learning_rate", s.learning_rate);
    read_field(j, "warmup_fraction", s.warmup_fraction);
    read_field(j, "clip_norm", s.clip_norm);
    read_field(j, "mlm_mask_prob", s.mlm_mask_prob);
    read_field(j, "max_steps", s.max_steps);
    return s;
}

std::string sanitize(const std::string& name) {
    std::string out;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (!out.empty() && out.back() != '_') {
            out.push_back('_');
        }
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out;
}

// One row of a recipe grid.
struct VariantSpec {
    std::string name;
    bool use_gd = true;
    bool use_td = true;   // false: supervised fine-tuning replaces TD
    bool use_da = true;   // false: TD runs on the original train set
    bool scratch = false; // supervised from scratch, full-pipeline step budget
    std::string mapping;  // empty = config default
    bool embd = true;     // lambda_0 on/off
    bool use_attn = true;
    bool use_hidn = true;
    bool gd_interior = true;          // w/o Trm: embedding-only GD
    bool pred_as_supervised = false;  // w/o Pred: phase 2 = CE on original data
};

std::vector<VariantSpec> recipe_variants(const std::string& recipe) {
    auto make = [](const std::string& name, auto&& tweak) {
        VariantSpec v;
        v.name = name;
        tweak(v);
        return v;
    };
    std::vector<VariantSpec> v;
    if (recipe == "procedures") {
        v.push_back(make("full", [](VariantSpec&) {}));
        v.push_back(make("w/o GD", [](VariantSpec& s) { s.use_gd = false; }));
        v.push_back(make("w/o TD", [](VariantSpec& s) { s.use_td = false; }));
        v.push_back(make("w/o DA", [](VariantSpec& s) { s.use_da = false; }));
        v.push_back(make("scratch", [](VariantSpec& s) {
            s.use_gd = s.use_td = s.use_da = false;
            s.scratch = true;
        }));
        return v;
    }
    if (recipe == "objectives") {
        v.push_back(make("full", [](VariantSpec&) {}));
        v.push_back(make("w/o Embd", [](VariantSpec& s) { s.embd = false; }));
        v.push_back(make("w/o Pred",
                         [](VariantSpec& s) { s.pred_as_supervised = true; }));
        v.push_back(make("w/o Trm", [](VariantSpec& s) {
            s.use_attn = s.use_hidn = false;
            s.gd_interior = false;
        }));
        v.push_back(make("w/o Attn", [](VariantSpec& s) { s.use_attn = false; }));
        v.push_back(make("w/o Hidn", [](VariantSpec& s) { s.use_hidn = false; }));
        return v;
    }
    if (recipe == "mapping") {
        v.push_back(make("uniform", [](VariantSpec& s) { s.mapping = "uniform"; }));
        v.push_back(make("top", [](VariantSpec& s) { s.mapping = "top"; }));
        v.push_back(make("bottom", [](VariantSpec& s) { s.mapping = "bottom"; }));
        return v;
    }
    throw ConfigError("ablate: unknown recipe '" + recipe +
                      "' (expected procedures, objectives or mapping)");
}

struct SeedArtifacts {
    std::string mlm_teacher;
    std::string task_teacher;
    std::string train_tsv;      // original
    std::string aug_train_tsv;  // augmented
};

}  // namespace

void AblationConfig::validate() const {
    if (data.train.empty() || data.dev.empty()) {
        throw ConfigError("ablate: data.train and data.dev are required");
    }
    if (data.vocab.empty()) throw ConfigError("ablate: data.vocab is required");
    if (general_corpus.empty()) throw ConfigError("ablate: general_corpus is required");
    if (seeds.empty()) throw ConfigError("ablate: seeds must be non-empty");
    if (batch_size == 0) throw ConfigError("ablate: batch_size must be >= 1");
    augment.validate();
}

AblationConfig parse_ablation_config(const std::string& json_text,
                                     const std::string& origin) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError("config: " + origin + ": " + e.what());
    }
    expect_object(j, origin);
    check_keys(j, origin,
               {"task_name", "data", "general_corpus", "glove", "teacher", "student",
                "teacher_mlm", "teacher_finetune", "general", "phase1", "phase2",
                "batch_size", "augment", "distill", "seeds"});
    AblationConfig c;
    read_field(j, "task_name", c.task_name);
    read_field(j, "general_corpus", c.general_corpus);
    read_field(j, "glove", c.glove);
    read_field(j, "batch_size", c.batch_size);
    read_field(j, "seeds", c.seeds);
    if (j.contains("data")) {
        const json& d = j["data"];
        expect_object(d, "data");
        check_keys(d, "data", {"train", "dev", "test", "vocab", "max_len"});
        read_field(d, "train", c.data.train);
        read_field(d, "dev", c.data.dev);
        read_field(d, "test", c.data.test);
        read_field(d, "vocab", c.data.vocab);
        read_field(d, "max_len", c.data.max_len);
    }
    if (j.contains("teacher")) c.teacher = parse_model_section(j["teacher"], "teacher");
    if (j.contains("student")) c.student = parse_model_section(j["student"], "student");
    if (j.contains("teacher_mlm"))
        c.teacher_mlm = parse_optim_section(j["teacher_mlm"], "teacher_mlm");
    if (j.contains("teacher_finetune"))
        c.teacher_finetune = parse_optim_section(j["teacher_finetune"], "teacher_finetune");
    if (j.contains("general")) c.general = parse_optim_section(j["general"], "general");
    if (j.contains("phase1")) {
        const json& p = j["phase1"];
        expect_object(p, "phase1");
        check_keys(p, "phase1", {"epochs", "learning_rate", "batch_size"});
        read_field(p, "epochs", c.phase1.epochs);
        read_field(p, "learning_rate", c.phase1.learning_rate);
        read_field(p, "batch_size", c.phase1.batch_size);
    }
    if (j.contains("phase2")) {
        const json& p = j["phase2"];
        expect_object(p, "phase2");
        check_keys(p, "phase2", {"epochs", "learning_rate", "batch_size"});
        read_field(p, "epochs", c.phase2.epochs);
        read_field(p, "learning_rate", c.phase2.learning_rate);
        read_field(p, "batch_size", c.phase2.batch_size);
    }
    if (j.contains("augment")) {
        const json& a = j["augment"];
        expect_object(a, "augment");
        check_keys(a, "augment", {"p_t", "n_a", "k", "include_original"});
        read_field(a, "p_t", c.augment.p_t);
        read_field(a, "n_a", c.augment.n_a);
        read_field(a, "k", c.augment.k);
        read_field(a, "include_original", c.augment.include_original);
    }
    if (j.contains("distill")) {
        const json& d = j["distill"];
        expect_object(d, "distill");
        check_keys(d, "distill",
                   {"mapping", "lambda", "temperature", "include_prediction",
                    "shared_hidden_projection", "identity_projection_init", "use_attn",
                    "use_hidn", "mapping_table"});
        read_field(d, "mapping", c.distill.mapping);
        read_field(d, "mapping_table", c.distill.mapping_table);
        read_field(d, "lambda", c.distill.lambda);
        read_field(d, "temperature", c.distill.temperature);
        read_field(d, "shared_hidden_projection", c.distill.shared_hidden_projection);
        read_field(d, "identity_projection_init", c.distill.identity_projection_init);
        read_field(d, "use_attn", c.distill.use_attn);
        read_field(d, "use_hidn", c.distill.use_hidn);
    }
    c.validate();
    return c;
}

AblationConfig load_ablation_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return parse_ablation_config(text, path);
}

namespace {

// Teacher preparation and data augmentation, shared by every variant of a
// seed: MLM pre-training on the general corpus, supervised fine-tuning on
// the task, then Algorithm-1 expansion of the train set.
SeedArtifacts prepare_seed(const AblationConfig& cfg, std::uint64_t seed,
                           const fs::path& seed_dir) {
    fs::path shared = seed_dir / "shared";
    fs::create_directories(shared);
    SeedArtifacts art;
    art.train_tsv = cfg.data.train;

    TrainConfig mlm;
    mlm.stage = "teacher-mlm";
    mlm.seed = mix_seed(seed, 101);
    mlm.data.train = cfg.general_corpus;
    mlm.data.vocab = cfg.data.vocab;
    mlm.data.max_len = cfg.data.max_len;
    mlm.model = cfg.teacher;
    mlm.model.mlm_head = true;
    mlm.model.seed = mix_seed(seed, 11);
    mlm.has_model = true;
    mlm.train = cfg.teacher_mlm;
    mlm.train.batch_size = cfg.teacher_mlm.batch_size ? cfg.teacher_mlm.batch_size
                                                      : cfg.batch_size;
    mlm.output_name = "teacher_mlm.ckpt";
    art.mlm_teacher = run_stage(mlm, shared.string()).checkpoint_path;

    TrainConfig ft;
    ft.stage = "teacher-finetune";
    ft.seed = mix_seed(seed, 102);
    ft.data = cfg.data;
    ft.init_checkpoint = art.mlm_teacher;
    ft.train = cfg.teacher_finetune;
    ft.train.batch_size = cfg.teacher_finetune.batch_size ? cfg.teacher_finetune.batch_size
                                                          : cfg.batch_size;
    ft.output_name = "teacher_task.ckpt";
    art.task_teacher = run_stage(ft, shared.string()).checkpoint_path;

    AugmentCommandArgs aug;
    aug.input_tsv = cfg.data.train;
    aug.output_tsv = (shared / "train.aug.tsv").string();
    aug.glove_path = cfg.glove;
    aug.teacher_checkpoint = art.mlm_teacher;
    aug.config = cfg.augment;
    aug.config.seed = mix_seed(seed, 103);
    aug.out_dir = shared.string();
    run_augment_command(aug);
    art.aug_train_tsv = aug.output_tsv;
    return art;
}

std::size_t count_examples(const std::string& tsv) { return load_tsv(tsv).size(); }

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Dev accuracy of one variant for one seed.
double run_variant(const AblationConfig& cfg, const VariantSpec& var,
                   std::uint64_t seed, const SeedArtifacts& art,
                   const fs::path& seed_dir,
                   std::map<std::string, std::string>& gd_cache) {
    fs::path dir = seed_dir / sanitize(var.name);
    fs::create_directories(dir);

    DistillSettings distill = cfg.distill;
    if (!var.mapping.empty()) {
        distill.mapping = var.mapping;
        distill.mapping_table.clear();
    }
    distill.use_attn = var.use_attn && cfg.distill.use_attn;
    distill.use_hidn = var.use_hidn && cfg.distill.use_hidn;

    TransformerConfig student = cfg.student;
    student.seed = mix_seed(seed, 21);  // identical init across variants of a seed

    auto student_lambda = [&](bool embd_on, bool interior_on) {
        std::vector<double> lambda(student.num_layers + 2, interior_on ? 1.0 : 0.0);
        lambda.front() = embd_on ? 1.0 : 0.0;
        lambda.back() = 1.0;  // prediction weight; phases gate its use
        return lambda;
    };

    const std::string& td_train = var.use_da ? art.aug_train_tsv : art.train_tsv;

    // General distillation (cached across variants with identical settings).
    std::string gd_ckpt;
    if (var.use_gd) {
        bool gd_interior = var.gd_interior;
        std::string key = distill.mapping + "|" + (var.embd ? "e1" : "e0") + "|" +
                          (gd_interior ? "i1" : "i0") + "|" +
                          (distill.use_attn ? "a1" : "a0") + "|" +
                          (distill.use_hidn ? "h1" : "h0");
        auto it = gd_cache.find(key);
        if (it != gd_cache.end()) {
            gd_ckpt = it->second;
        } else {
            TrainConfig gd;
            gd.stage = "general";
            gd.seed = mix_seed(seed, 104);
            gd.data.train = cfg.general_corpus;
            gd.data.vocab = cfg.data.vocab;
            gd.data.max_len = cfg.data.max_len;
            gd.model = student;
            gd.has_model = true;
            gd.teacher_checkpoint = art.mlm_teacher;
            gd.train = cfg.general;
            gd.train.batch_size = cfg.general.batch_size ? cfg.general.batch_size
                                                         : cfg.batch_size;
            gd.distill = distill;
            gd.distill.lambda = student_lambda(var.embd, gd_interior);
            gd.output_name = "general.ckpt";
            gd_ckpt = run_stage(gd, dir.string()).checkpoint_path;
            gd_cache.emplace(key, gd_ckpt);
        }
    }

    if (var.scratch) {
        // Supervised training on the original data with the step budget of
        // the full pipeline (general distillation plus both task phases).
        std::size_t general_steps =
            cfg.general.epochs *
            ceil_div(count_examples(cfg.general_corpus),
                     cfg.general.batch_size ? cfg.general.batch_size : cfg.batch_size);
        std::size_t aug_examples = count_examples(art.aug_train_tsv);
        std::size_t p1_bs = cfg.phase1.batch_size ? cfg.phase1.batch_size : cfg.batch_size;
        std::size_t p2_bs = cfg.phase2.batch_size ? cfg.phase2.batch_size : cfg.batch_size;
        std::size_t budget = general_steps +
                             cfg.phase1.epochs * ceil_div(aug_examples, p1_bs) +
                             cfg.phase2.epochs * ceil_div(aug_examples, p2_bs);
        TrainConfig sc;
        sc.stage = "finetune";
        sc.seed = mix_seed(seed, 105);
        sc.data = cfg.data;
        sc.model = student;
        sc.has_model = true;
        sc.train.batch_size = cfg.batch_size;
        sc.train.learning_rate = cfg.teacher_finetune.learning_rate;
        sc.train.epochs = 1;
        sc.train.max_steps = budget;
        sc.output_name = "scratch.ckpt";
        StageOutcome out = run_stage(sc, dir.string());
        return out.dev_accuracy.value();
    }

    if (!var.use_td) {
        // Standard supervised fine-tuning in place of task distillation.
        TrainConfig ft;
        ft.stage = "finetune";
        ft.seed = mix_seed(seed, 106);
        ft.data = cfg.data;
        ft.data.train = td_train;
        if (var.use_gd) {
            ft.init_checkpoint = gd_ckpt;
        } else {
            ft.model = student;
            ft.has_model = true;
        }
        ft.train.batch_size = cfg.batch_size;
        ft.train.learning_rate = cfg.teacher_finetune.learning_rate;
        ft.train.epochs = cfg.phase1.epochs + cfg.phase2.epochs;
        ft.output_name = "finetune.ckpt";
        StageOutcome out = run_stage(ft, dir.string());
        return out.dev_accuracy.value();
    }

    // Task distillation phase 1 (intermediate layers on the chosen data).
    TrainConfig p1;
    p1.stage = "task-intermediate";
    p1.seed = mix_seed(seed, 107);
    p1.data = cfg.data;
    p1.data.train = td_train;
    p1.teacher_checkpoint = art.task_teacher;
    if (var.use_gd) {
        p1.init_checkpoint = gd_ckpt;
    } else {
        p1.model = student;
        p1.has_model = true;
    }
    p1.train.batch_size = cfg.phase1.batch_size ? cfg.phase1.batch_size : cfg.batch_size;
    p1.train.learning_rate = cfg.phase1.learning_rate;
    p1.train.epochs = cfg.phase1.epochs;
    p1.distill = distill;
    p1.distill.lambda = student_lambda(var.embd, var.use_attn || var.use_hidn);
    p1.output_name = "task_intermediate.ckpt";
    StageOutcome p1_out = run_stage(p1, dir.string());

    if (var.pred_as_supervised) {
        // Prediction distillation replaced by plain cross-entropy against the
        // ground truth of the original train set, at the step budget phase 2
        // would have spent on its (augmented) data.
        std::size_t p2_bs = cfg.phase2.batch_size ? cfg.phase2.batch_size : cfg.batch_size;
        TrainConfig ft;
        ft.stage = "finetune";
        ft.seed = mix_seed(seed, 108);
        ft.data = cfg.data;
        ft.init_checkpoint = p1_out.checkpoint_path;
        ft.train.batch_size = p2_bs;
        ft.train.learning_rate = cfg.phase2.learning_rate;
        ft.train.epochs = 1;
        ft.train.max_steps =
            cfg.phase2.epochs * ceil_div(count_examples(td_train), p2_bs);
        ft.output_name = "finetune.ckpt";
        StageOutcome out = run_stage(ft, dir.string());
        return out.dev_accuracy.value();
    }

    // Phase 2: prediction-layer distillation.
    TrainConfig p2;
    p2.stage = "task-prediction";
    p2.seed = mix_seed(seed, 109);
    p2.data = cfg.data;
    p2.data.train = td_train;
    p2.teacher_checkpoint = art.task_teacher;
    p2.init_checkpoint = p1_out.checkpoint_path;
    p2.train.batch_size = cfg.phase2.batch_size ? cfg.phase2.batch_size : cfg.batch_size;
    p2.train.learning_rate = cfg.phase2.learning_rate;
    p2.train.epochs = cfg.phase2.epochs;
    p2.distill = distill;
    p2.output_name = "task_prediction.ckpt";
    StageOutcome out = run_stage(p2, dir.string());
    return out.dev_accuracy.value();
}

std::string render_report(const std::string& recipe, const AblationConfig& cfg,
                          const std::vector<std::string>& variants,
                          const std::vector<AblationCell>& cells) {
    std::string tsv = "# recipe\t" + recipe + "\n# task\t" + cfg.task_name + "\n";
    tsv += "variant";
    for (std::uint64_t s : cfg.seeds) tsv += "\tseed_" + std::to_string(s);
    tsv += "\tmean\n";
    char buf[32];
    for (const std::string& v : variants) {
        tsv += v;
        double sum = 0.0;
        std::size_t n = 0;
        for (std::uint64_t s : cfg.seeds) {
            for (const AblationCell& c : cells) {
                if (c.variant == v && c.seed == s) {
                    std::snprintf(buf, sizeof(buf), "%.4f", c.dev_accuracy);
                    tsv += std::string("\t") + buf;
                    sum += c.dev_accuracy;
                    ++n;
                }
            }
        }
        std::snprintf(buf, sizeof(buf), "%.4f", n ? sum / static_cast<double>(n) : 0.0);
        tsv += std::string("\t") + buf + "\n";
    }
    return tsv;
}

}  // namespace

double AblationReport::mean(const std::string& variant) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const AblationCell& c : cells) {
        if (c.variant == variant) {
            sum += c.dev_accuracy;
            ++n;
        }
    }
    if (n == 0) throw ValueError("ablation: no cells for variant '" + variant + "'");
    return sum / static_cast<double>(n);
}

AblationReport run_ablation(const std::string& recipe, const AblationConfig& cfg,
                            const std::string& out_dir, std::size_t max_threads) {
    auto t0 = std::chrono::steady_clock::now();
    cfg.validate();
    std::vector<VariantSpec> variants = recipe_variants(recipe);
    fs::create_directories(out_dir);

    // One job per seed; every variant of a seed shares the prepared teacher
    // and augmented data. Jobs are independent, so any worker count yields
    // the same artifacts.
    struct SeedResult {
        std::vector<double> accuracy;  // per variant
        std::exception_ptr error;
    };
    std::vector<SeedResult> results(cfg.seeds.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= cfg.seeds.size()) return;
            SeedResult& r = results[i];
            try {
                std::uint64_t seed = cfg.seeds[i];
                fs::path seed_dir = fs::path(out_dir) / ("seed" + std::to_string(seed));
                SeedArtifacts art = prepare_seed(cfg, seed, seed_dir);
                std::map<std::string, std::string> gd_cache;
                for (const VariantSpec& var : variants) {
                    r.accuracy.push_back(
                        run_variant(cfg, var, seed, art, seed_dir, gd_cache));
                }
            } catch (...) {
                r.error = std::current_exception();
            }
        }
    };
    std::size_t workers = std::max<std::size_t>(1, std::min(max_threads, cfg.seeds.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    for (const SeedResult& r : results) {
        if (r.error) std::rethrow_exception(r.error);
    }

    AblationReport report;
    report.recipe = recipe;
    for (const VariantSpec& v : variants) report.variants.push_back(v.name);
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        for (std::size_t k = 0; k < variants.size(); ++k) {
            report.cells.push_back(
                AblationCell{variants[k].name, cfg.seeds[i], results[i].accuracy[k]});
        }
    }
    report.tsv = render_report(recipe, cfg, report.variants, report.cells);

    fs::path report_path = fs::path(out_dir) / "report.tsv";
    {
        std::ofstream out(report_path);
        if (!out) throw IoError("ablate: cannot write " + report_path.string());
        out << report.tsv;
    }
    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    json manifest_cfg{{"recipe", recipe},
                      {"task_name", cfg.task_name},
                      {"seeds", cfg.seeds},
                      {"threads", workers}};
    json j{{"command", "ablate"},   {"version", kVersion},
           {"config", manifest_cfg}, {"inputs", json::array({cfg.data.train, cfg.data.dev})},
           {"outputs", json::array({report_path.string()})},
           {"wall_time_ms", wall_ms}};
    std::ofstream mf(fs::path(out_dir) / "run.json");
    mf << j.dump(2) << "\n";
    return report;
}

}  // namespace tinydistill
