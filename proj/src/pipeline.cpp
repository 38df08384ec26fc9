#include "tinydistill/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tinydistill/checkpoint.hpp"
#include "tinydistill/error.hpp"
#include "tinydistill/optimizer.hpp"
#include "tinydistill/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tinydistill {

namespace {

// --- strict JSON helpers ------------------------------------------------

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
        if (!ok) {
            throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
        }
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

TransformerConfig parse_model(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where,
               {"num_layers", "hidden", "ffn", "heads", "vocab_size", "max_len",
                "num_classes", "dropout", "seed", "mlm_head"});
    TransformerConfig c;
    c.vocab_size = 0;  // 0 = resolve from the vocab file / teacher checkpoint
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

OptimSettings parse_optim(const json& j, const std::string& where) {
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

PhaseSettings parse_phase(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where, {"epochs", "learning_rate", "batch_size"});
    PhaseSettings s;
    read_field(j, "epochs", s.epochs);
    read_field(j, "learning_rate", s.learning_rate);
    read_field(j, "batch_size", s.batch_size);
    return s;
}

DistillSettings parse_distill(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where,
               {"mapping", "mapping_table", "lambda", "temperature", "include_prediction",
                "shared_hidden_projection", "identity_projection_init", "use_attn",
                "use_hidn"});
    DistillSettings s;
    read_field(j, "mapping", s.mapping);
    read_field(j, "mapping_table", s.mapping_table);
    read_field(j, "lambda", s.lambda);
    read_field(j, "temperature", s.temperature);
    read_field(j, "include_prediction", s.include_prediction);
    read_field(j, "shared_hidden_projection", s.shared_hidden_projection);
    read_field(j, "identity_projection_init", s.identity_projection_init);
    read_field(j, "use_attn", s.use_attn);
    read_field(j, "use_hidn", s.use_hidn);
    return s;
}

DataSettings parse_data(const json& j, const std::string& where) {
    expect_object(j, where);
    check_keys(j, where, {"train", "dev", "test", "vocab", "max_len"});
    DataSettings s;
    read_field(j, "train", s.train);
    read_field(j, "dev", s.dev);
    read_field(j, "test", s.test);
    read_field(j, "vocab", s.vocab);
    read_field(j, "max_len", s.max_len);
    return s;
}

json model_to_json(const TransformerConfig& c) {
    return json{{"num_layers", c.num_layers}, {"hidden", c.hidden},
                {"ffn", c.ffn},               {"heads", c.heads},
                {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
                {"num_classes", c.num_classes}, {"dropout", c.dropout},
                {"seed", c.seed},             {"mlm_head", c.mlm_head}};
}

json optim_to_json(const OptimSettings& s) {
    return json{{"epochs", s.epochs},
                {"batch_size", s.batch_size},
                {"learning_rate", s.learning_rate},
                {"warmup_fraction", s.warmup_fraction},
                {"clip_norm", s.clip_norm},
                {"mlm_mask_prob", s.mlm_mask_prob},
                {"max_steps", s.max_steps}};
}

json config_to_json(const TrainConfig& c) {
    json j{{"stage", c.stage}, {"seed", c.seed}};
    if (!c.output_name.empty()) j["output_name"] = c.output_name;
    json d;
    if (!c.data.train.empty()) d["train"] = c.data.train;
    if (!c.data.dev.empty()) d["dev"] = c.data.dev;
    if (!c.data.test.empty()) d["test"] = c.data.test;
    if (!c.data.vocab.empty()) d["vocab"] = c.data.vocab;
    if (c.data.max_len) d["max_len"] = c.data.max_len;
    j["data"] = d;
    if (c.has_model) j["model"] = model_to_json(c.model);
    if (!c.teacher_checkpoint.empty()) j["teacher_checkpoint"] = c.teacher_checkpoint;
    if (!c.init_checkpoint.empty()) j["init_checkpoint"] = c.init_checkpoint;
    j["train"] = optim_to_json(c.train);
    j["phase1"] = json{{"epochs", c.phase1.epochs},
                       {"learning_rate", c.phase1.learning_rate},
                       {"batch_size", c.phase1.batch_size}};
    j["phase2"] = json{{"epochs", c.phase2.epochs},
                       {"learning_rate", c.phase2.learning_rate},
                       {"batch_size", c.phase2.batch_size}};
    j["distill"] = json{{"mapping", c.distill.mapping},
                        {"mapping_table", c.distill.mapping_table},
                        {"lambda", c.distill.lambda},
                        {"temperature", c.distill.temperature},
                        {"include_prediction", c.distill.include_prediction},
                        {"shared_hidden_projection", c.distill.shared_hidden_projection},
                        {"identity_projection_init", c.distill.identity_projection_init},
                        {"use_attn", c.distill.use_attn},
                        {"use_hidn", c.distill.use_hidn}};
    return j;
}

bool is_distill_stage(const std::string& stage) {
    return stage == "general" || stage == "task-intermediate" ||
           stage == "task-prediction";
}

bool is_known_stage(const std::string& stage) {
    return is_distill_stage(stage) || stage == "teacher-finetune" ||
           stage == "finetune" || stage == "teacher-mlm" || stage == "task-distill";
}

}  // namespace

TrainConfig parse_train_config(const std::string& json_text, const std::string& origin) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError("config: " + origin + ": " + e.what());
    }
    expect_object(j, origin);
    check_keys(j, origin,
               {"stage", "seed", "output_name", "data", "model", "teacher_checkpoint",
                "init_checkpoint", "train", "phase1", "phase2", "distill"});
    TrainConfig c;
    read_field(j, "stage", c.stage);
    read_field(j, "seed", c.seed);
    read_field(j, "output_name", c.output_name);
    read_field(j, "teacher_checkpoint", c.teacher_checkpoint);
    read_field(j, "init_checkpoint", c.init_checkpoint);
    if (j.contains("data")) c.data = parse_data(j["data"], "data");
    if (j.contains("model")) {
        c.model = parse_model(j["model"], "model");
        c.has_model = true;
        if (!j["model"].contains("seed")) c.model.seed = mix_seed(c.seed, 0x6d6f64ULL);
    }
    if (j.contains("train")) c.train = parse_optim(j["train"], "train");
    if (j.contains("phase1")) c.phase1 = parse_phase(j["phase1"], "phase1");
    if (j.contains("phase2")) c.phase2 = parse_phase(j["phase2"], "phase2");
    if (j.contains("distill")) c.distill = parse_distill(j["distill"], "distill");
    if (j.contains("model") && j["model"].contains("seed")) {
        // remember that the model seed was pinned explicitly
        c.model.seed = j["model"]["seed"].get<std::uint64_t>();
    }
    c.validate();
    return c;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    TrainConfig c = parse_train_config(text, path);
    // model seed defaults are derived from the top-level seed in
    // parse_train_config; nothing further here.
    return c;
}

void override_seed(TrainConfig& config, std::uint64_t seed) {
    std::uint64_t derived = mix_seed(config.seed, 0x6d6f64ULL);
    bool model_seed_was_derived = config.has_model && config.model.seed == derived;
    config.seed = seed;
    if (model_seed_was_derived) config.model.seed = mix_seed(seed, 0x6d6f64ULL);
}

void TrainConfig::validate() const {
    if (!is_known_stage(stage)) {
        throw ConfigError("config: unknown stage '" + stage +
                          "' (expected teacher-finetune, finetune, teacher-mlm, general, "
                          "task-intermediate, task-prediction or task-distill)");
    }
    if (train.batch_size == 0) throw ConfigError("config: train.batch_size must be >= 1");
    if (train.learning_rate <= 0.0) {
        throw ConfigError("config: train.learning_rate must be positive");
    }
    if (data.train.empty() && stage != "task-prediction") {
        throw ConfigError("config: data.train is required for stage " + stage);
    }
    if (is_distill_stage(stage) || stage == "task-distill") {
        if (teacher_checkpoint.empty()) {
            throw ConfigError("config: stage " + stage + " requires teacher_checkpoint");
        }
    }
    if (stage == "task-prediction") {
        if (init_checkpoint.empty()) {
            throw ConfigError("config: task-prediction requires init_checkpoint "
                              "(a task-intermediate output)");
        }
        if (data.train.empty()) {
            throw ConfigError("config: data.train is required for stage task-prediction");
        }
    }
    if ((stage == "teacher-mlm") && has_model && !model.mlm_head) {
        throw ConfigError("config: teacher-mlm requires model.mlm_head = true");
    }
    if (!has_model && init_checkpoint.empty() && !is_distill_stage(stage) &&
        stage != "task-distill") {
        throw ConfigError("config: stage " + stage +
                          " needs a model section or init_checkpoint");
    }
    if (distill.temperature <= 0.0) {
        throw ConfigError("config: distill.temperature must be positive");
    }
}

// --- metrics ------------------------------------------------------------

double binary_mcc(long tp, long tn, long fp, long fn) {
    double denom = std::sqrt(static_cast<double>(tp + fp)) *
                   std::sqrt(static_cast<double>(tp + fn)) *
                   std::sqrt(static_cast<double>(tn + fp)) *
                   std::sqrt(static_cast<double>(tn + fn));
    if (denom == 0.0) return 0.0;
    return (static_cast<double>(tp) * tn - static_cast<double>(fp) * fn) / denom;
}

Metrics evaluate_model(const TransformerModel& model, const Vocab& vocab,
                       const std::vector<Example>& examples,
                       std::size_t batch_size, std::size_t max_len) {
    if (examples.empty()) throw ValueError("evaluate: empty split");
    NoGradGuard no_grad;
    std::size_t classes = model.config().num_classes;
    long correct = 0, tp = 0, tn = 0, fp = 0, fn = 0;
    double loss_sum = 0.0;
    for (const Batch& batch : make_eval_batches(examples, vocab, max_len, batch_size)) {
        ModelActivations acts =
            model.forward(batch.tokens, batch.pad_mask, batch.batch, batch.len);
        loss_sum += cross_entropy(acts.logits, batch.labels).value() *
                    static_cast<double>(batch.batch);
        auto logits = acts.logits.data();
        for (std::size_t r = 0; r < batch.batch; ++r) {
            std::size_t pred = 0;
            for (std::size_t c = 1; c < classes; ++c) {
                if (logits[r * classes + c] > logits[r * classes + pred]) pred = c;
            }
            std::int32_t gold = batch.labels[r];
            if (static_cast<std::int32_t>(pred) == gold) ++correct;
            if (classes == 2) {
                if (gold == 1 && pred == 1) ++tp;
                else if (gold == 0 && pred == 0) ++tn;
                else if (gold == 0 && pred == 1) ++fp;
                else ++fn;
            }
        }
    }
    Metrics m;
    m.count = examples.size();
    m.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
    m.loss = loss_sum / static_cast<double>(examples.size());
    if (classes == 2) {
        m.has_mcc = true;
        m.mcc = binary_mcc(tp, tn, fp, fn);
    }
    return m;
}

// --- shared stage machinery ----------------------------------------------

namespace {

class MetricsLogger {
public:
    explicit MetricsLogger(const fs::path& path) : out_(path) {
        if (!out_) throw IoError("metrics: cannot write " + path.string());
        path_ = path.string();
    }
    void log(const json& record) { out_ << record.dump() << "\n"; }
    const std::string& path() const { return path_; }

private:
    std::ofstream out_;
    std::string path_;
};

json metrics_to_json(const Metrics& m) {
    json j{{"accuracy", m.accuracy}, {"loss", m.loss}, {"count", m.count}};
    if (m.has_mcc) j["mcc"] = m.mcc;
    return j;
}

void write_run_manifest(const fs::path& out_dir, const std::string& command,
                        const json& config, const std::vector<std::string>& inputs,
                        const std::vector<std::string>& outputs, double wall_ms) {
    json j{{"command", command}, {"version", kVersion},     {"config", config},
           {"inputs", inputs},   {"outputs", outputs},      {"wall_time_ms", wall_ms}};
    std::ofstream out(out_dir / "run.json");
    if (!out) throw IoError("manifest: cannot write " + (out_dir / "run.json").string());
    out << j.dump(2) << "\n";
}

struct ResolvedModel {
    TransformerModel model;
    Vocab vocab;
    std::string parent_hash = "root";
    std::string init_stage;
};

// Fresh model from the config section (vocab file required) or a warm start
// from init_checkpoint.
ResolvedModel resolve_model(const TrainConfig& cfg) {
    if (!cfg.init_checkpoint.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(cfg.init_checkpoint);
        return ResolvedModel{std::move(loaded.model), std::move(loaded.vocab),
                             loaded.self_hash, loaded.meta.stage};
    }
    if (!cfg.has_model) {
        throw ConfigError("config: stage " + cfg.stage +
                          " needs a model section or init_checkpoint");
    }
    if (cfg.data.vocab.empty()) {
        throw ConfigError("config: a fresh model needs data.vocab");
    }
    Vocab vocab = Vocab::load(cfg.data.vocab);
    TransformerConfig mc = cfg.model;
    if (mc.vocab_size == 0) mc.vocab_size = vocab.size();
    if (mc.vocab_size != vocab.size()) {
        throw ConfigError("config: model.vocab_size " + std::to_string(mc.vocab_size) +
                          " != vocabulary size " + std::to_string(vocab.size()));
    }
    return ResolvedModel{TransformerModel(mc), std::move(vocab), "root", ""};
}

std::size_t effective_max_len(const TrainConfig& cfg, const TransformerConfig& mc) {
    std::size_t len = cfg.data.max_len ? cfg.data.max_len : mc.max_len;
    if (len > mc.max_len) {
        throw ConfigError("config: data.max_len " + std::to_string(len) +
                          " exceeds model.max_len " + std::to_string(mc.max_len));
    }
    return len;
}

std::string default_output_name(const std::string& stage) {
    std::string name = stage;
    for (char& c : name)
        if (c == '-') c = '_';
    return name + ".ckpt";
}

[[noreturn]] void rethrow_diverged(const std::string& stage, std::size_t step,
                                   const Error& e) {
    throw Error("stage " + stage + " aborted at step " + std::to_string(step) + ": " +
                e.what());
}

std::size_t steps_in(std::size_t examples, std::size_t batch_size) {
    return (examples + batch_size - 1) / batch_size;
}

struct Snapshot {
    std::vector<std::vector<double>> values;
};

Snapshot take_snapshot(const std::vector<Tensor>& params) {
    Snapshot s;
    s.values.reserve(params.size());
    for (const Tensor& p : params) {
        auto d = p.data();
        s.values.emplace_back(d.begin(), d.end());
    }
    return s;
}

void restore_snapshot(std::vector<Tensor>& params, const Snapshot& s) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].mutable_data();
        std::copy(s.values[i].begin(), s.values[i].end(), w.begin());
    }
}

// --- supervised fine-tuning (teachers, ablation baselines) ----------------

StageOutcome run_finetune(const TrainConfig& cfg, const fs::path& out_dir) {
    ResolvedModel rm = resolve_model(cfg);
    TransformerModel& model = rm.model;
    const Vocab& vocab = rm.vocab;
    std::vector<Example> train = load_tsv(cfg.data.train);
    std::vector<Example> dev;
    if (!cfg.data.dev.empty()) dev = load_tsv(cfg.data.dev);
    std::size_t max_len = effective_max_len(cfg, model.config());
    std::size_t per_epoch = steps_in(train.size(), cfg.train.batch_size);
    std::size_t total_steps = cfg.train.max_steps
                                  ? cfg.train.max_steps
                                  : cfg.train.epochs * per_epoch;

    AdamConfig ac;
    ac.learning_rate = cfg.train.learning_rate;
    ac.warmup_fraction = cfg.train.warmup_fraction;
    ac.clip_norm = cfg.train.clip_norm;
    ac.total_steps = total_steps;
    Adam adam(model.parameters(), ac);

    MetricsLogger logger(out_dir / (cfg.stage + ".metrics.jsonl"));
    Rng dropout_rng(mix_seed(cfg.seed, 2000));
    std::vector<Tensor> model_params = model.parameters();
    Snapshot best;
    double best_acc = -1.0, best_loss = 0.0;
    bool have_best = false;
    std::size_t step = 0;
    for (std::size_t epoch = 0;; ++epoch) {
        if (cfg.train.max_steps == 0 && epoch >= cfg.train.epochs) break;
        if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
        auto batches = make_batches(train, vocab, max_len, cfg.train.batch_size,
                                    mix_seed(cfg.seed, 1000 + epoch));
        for (const Batch& b : batches) {
            if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
            try {
                ModelActivations acts =
                    model.forward(b.tokens, b.pad_mask, b.batch, b.len,
                                  model.config().dropout > 0 ? &dropout_rng : nullptr);
                Tensor loss = cross_entropy(acts.logits, b.labels);
                logger.log(json{{"type", "step"},
                                {"stage", cfg.stage},
                                {"step", step},
                                {"epoch", epoch},
                                {"lr", adam.next_lr()},
                                {"loss", loss.value()}});
                backward(loss);
                adam.step();
            } catch (const Error& e) {
                rethrow_diverged(cfg.stage, step, e);
            }
            ++step;
        }
        if (!dev.empty()) {
            Metrics m = evaluate_model(model, vocab, dev, cfg.train.batch_size, max_len);
            json rec = metrics_to_json(m);
            rec["type"] = "epoch";
            rec["stage"] = cfg.stage;
            rec["epoch"] = epoch;
            logger.log(rec);
            // Model selection: best dev accuracy, ties to the lower dev loss.
            if (!have_best || m.accuracy > best_acc ||
                (m.accuracy == best_acc && m.loss < best_loss)) {
                best = take_snapshot(model_params);
                best_acc = m.accuracy;
                best_loss = m.loss;
                have_best = true;
            }
        }
    }
    if (have_best) restore_snapshot(model_params, best);

    StageOutcome outcome;
    outcome.metrics_path = logger.path();
    CheckpointMeta meta;
    meta.stage = cfg.stage;
    meta.parent_hash = rm.parent_hash;
    if (!dev.empty()) {
        Metrics m = evaluate_model(model, vocab, dev, cfg.train.batch_size, max_len);
        meta.dev_accuracy = m.accuracy;
        outcome.dev_accuracy = m.accuracy;
        if (m.has_mcc) outcome.dev_mcc = m.mcc;
    }
    std::string name = cfg.output_name.empty() ? default_output_name(cfg.stage)
                                               : cfg.output_name;
    outcome.checkpoint_path = (out_dir / name).string();
    save_checkpoint(outcome.checkpoint_path, model, vocab, meta);
    return outcome;
}

// --- toy masked-language-model pre-training --------------------------------

StageOutcome run_mlm(const TrainConfig& cfg, const fs::path& out_dir) {
    ResolvedModel rm = resolve_model(cfg);
    TransformerModel& model = rm.model;
    const Vocab& vocab = rm.vocab;
    if (!model.config().mlm_head) {
        throw ConfigError("config: teacher-mlm requires a model with mlm_head");
    }
    std::vector<Example> train = load_tsv(cfg.data.train);
    std::size_t max_len = effective_max_len(cfg, model.config());
    std::size_t per_epoch = steps_in(train.size(), cfg.train.batch_size);
    std::size_t total_steps = cfg.train.max_steps
                                  ? cfg.train.max_steps
                                  : cfg.train.epochs * per_epoch;

    AdamConfig ac;
    ac.learning_rate = cfg.train.learning_rate;
    ac.warmup_fraction = cfg.train.warmup_fraction;
    ac.clip_norm = cfg.train.clip_norm;
    ac.total_steps = total_steps;
    Adam adam(model.parameters(), ac);

    MetricsLogger logger(out_dir / (cfg.stage + ".metrics.jsonl"));
    Rng mask_rng(mix_seed(cfg.seed, 3000));
    Rng dropout_rng(mix_seed(cfg.seed, 2000));
    std::size_t step = 0;
    for (std::size_t epoch = 0;; ++epoch) {
        if (cfg.train.max_steps == 0 && epoch >= cfg.train.epochs) break;
        if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
        auto batches = make_batches(train, vocab, max_len, cfg.train.batch_size,
                                    mix_seed(cfg.seed, 1000 + epoch));
        for (Batch b : batches) {
            if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
            // Mask eligible positions; force one per row so every row trains.
            std::vector<std::int32_t> targets(b.tokens);
            std::vector<std::uint8_t> include(b.tokens.size(), 0);
            for (std::size_t r = 0; r < b.batch; ++r) {
                std::vector<std::size_t> eligible;
                for (std::size_t i = 0; i < b.len; ++i) {
                    std::size_t at = r * b.len + i;
                    if (!b.pad_mask[at]) continue;
                    if (b.tokens[at] == Vocab::kCls || b.tokens[at] == Vocab::kSep)
                        continue;
                    eligible.push_back(at);
                }
                bool any = false;
                for (std::size_t at : eligible) {
                    if (uniform01(mask_rng) < cfg.train.mlm_mask_prob) {
                        include[at] = 1;
                        b.tokens[at] = Vocab::kMask;
                        any = true;
                    }
                }
                if (!any && !eligible.empty()) {
                    std::size_t at = eligible[bounded(mask_rng, eligible.size())];
                    include[at] = 1;
                    b.tokens[at] = Vocab::kMask;
                }
            }
            try {
                ModelActivations acts =
                    model.forward(b.tokens, b.pad_mask, b.batch, b.len,
                                  model.config().dropout > 0 ? &dropout_rng : nullptr);
                Tensor logits = model.mlm_logits(acts.hiddens.back());
                Tensor loss = cross_entropy_masked(logits, targets, include);
                logger.log(json{{"type", "step"},
                                {"stage", cfg.stage},
                                {"step", step},
                                {"epoch", epoch},
                                {"lr", adam.next_lr()},
                                {"loss", loss.value()}});
                backward(loss);
                adam.step();
            } catch (const Error& e) {
                rethrow_diverged(cfg.stage, step, e);
            }
            ++step;
        }
    }

    StageOutcome outcome;
    outcome.metrics_path = logger.path();
    CheckpointMeta meta;
    meta.stage = cfg.stage;
    meta.parent_hash = rm.parent_hash;
    std::string name = cfg.output_name.empty() ? default_output_name(cfg.stage)
                                               : cfg.output_name;
    outcome.checkpoint_path = (out_dir / name).string();
    save_checkpoint(outcome.checkpoint_path, model, vocab, meta);
    return outcome;
}

// --- transformer distillation stages ---------------------------------------

LayerMapping build_mapping(const DistillSettings& s, std::size_t m_layers,
                           std::size_t n_layers) {
    if (!s.mapping_table.empty()) {
        return LayerMapping(m_layers, n_layers, s.mapping_table);
    }
    return LayerMapping::from_strategy(s.mapping, m_layers, n_layers);
}

StageOutcome run_distill(const TrainConfig& cfg, const fs::path& out_dir) {
    LoadedCheckpoint teacher = load_checkpoint(cfg.teacher_checkpoint);
    const bool prediction_stage = cfg.stage == "task-prediction";

    // Student: warm start or fresh, always sharing the teacher's vocabulary.
    TransformerModel* student_ptr = nullptr;
    Vocab vocab = teacher.vocab;
    std::string parent_hash = "root";
    std::optional<TransformerModel> fresh;
    std::optional<LoadedCheckpoint> warm;
    if (!cfg.init_checkpoint.empty()) {
        warm = load_checkpoint(cfg.init_checkpoint);
        if (warm->vocab.pieces() != teacher.vocab.pieces()) {
            throw ConfigError("distill: student and teacher vocabularies differ");
        }
        if (prediction_stage && warm->meta.stage != "task-intermediate") {
            throw ConfigError("distill: task-prediction requires a task-intermediate "
                              "checkpoint, got stage '" + warm->meta.stage + "' from " +
                              cfg.init_checkpoint);
        }
        parent_hash = warm->self_hash;
        student_ptr = &warm->model;
    } else {
        if (prediction_stage) {
            throw ConfigError("distill: task-prediction requires init_checkpoint");
        }
        if (!cfg.has_model) {
            throw ConfigError("distill: stage " + cfg.stage +
                              " needs a model section or init_checkpoint");
        }
        TransformerConfig mc = cfg.model;
        if (mc.vocab_size == 0) mc.vocab_size = teacher.vocab.size();
        if (mc.vocab_size != teacher.vocab.size()) {
            throw ConfigError("distill: student vocab_size " +
                              std::to_string(mc.vocab_size) +
                              " != teacher vocabulary size " +
                              std::to_string(teacher.vocab.size()));
        }
        if (mc.num_classes != teacher.model.config().num_classes) {
            throw ConfigError("distill: student num_classes " +
                              std::to_string(mc.num_classes) + " != teacher's " +
                              std::to_string(teacher.model.config().num_classes));
        }
        fresh.emplace(mc);
        student_ptr = &*fresh;
    }
    TransformerModel& student = *student_ptr;

    // Eq. 7 compares [l x l] score matrices head by head.
    if (student.config().heads != teacher.model.config().heads) {
        throw ConfigError("distill: student and teacher must share the head count (" +
                          std::to_string(student.config().heads) + " vs " +
                          std::to_string(teacher.model.config().heads) + ")");
    }
    if (student.config().max_len > teacher.model.config().max_len) {
        throw ConfigError("distill: student max_len exceeds teacher max_len");
    }

    LayerMapping mapping = build_mapping(cfg.distill, student.config().num_layers,
                                         teacher.model.config().num_layers);
    mapping.validate();

    DistillParams params = DistillParams::create(
        student.config().num_layers, student.config().hidden,
        teacher.model.config().hidden, cfg.seed, cfg.distill.shared_hidden_projection,
        cfg.distill.identity_projection_init);
    params.temperature = cfg.distill.temperature;
    params.use_attn = cfg.distill.use_attn;
    params.use_hidn = cfg.distill.use_hidn;
    if (!cfg.distill.lambda.empty()) {
        if (cfg.distill.lambda.size() != student.config().num_layers + 2) {
            throw ConfigError("distill: lambda needs M+2 = " +
                              std::to_string(student.config().num_layers + 2) +
                              " entries, got " + std::to_string(cfg.distill.lambda.size()));
        }
        params.lambda = cfg.distill.lambda;
    }
    if (prediction_stage) {
        // Phase 2 distills only the prediction layer.
        double pred_weight = params.lambda.back();
        std::fill(params.lambda.begin(), params.lambda.end(), 0.0);
        params.lambda.back() = pred_weight == 0.0 ? 1.0 : pred_weight;
        params.include_prediction = true;
    } else {
        // General distillation and the intermediate phase skip Eq. 10.
        params.include_prediction = false;
        params.lambda.back() = 0.0;
    }
    params.validate(student.config().num_layers);

    std::vector<Example> train = load_tsv(cfg.data.train);
    std::vector<Example> dev;
    if (!cfg.data.dev.empty()) dev = load_tsv(cfg.data.dev);
    std::size_t max_len = effective_max_len(cfg, student.config());
    if (max_len > teacher.model.config().max_len) {
        throw ConfigError("distill: batching length exceeds teacher max_len");
    }
    std::size_t per_epoch = steps_in(train.size(), cfg.train.batch_size);
    std::size_t total_steps = cfg.train.max_steps
                                  ? cfg.train.max_steps
                                  : cfg.train.epochs * per_epoch;

    std::vector<Tensor> trainable = student.parameters();
    if (!prediction_stage) {
        for (const Tensor& t : params.trainable()) trainable.push_back(t);
    }
    AdamConfig ac;
    ac.learning_rate = cfg.train.learning_rate;
    ac.warmup_fraction = cfg.train.warmup_fraction;
    ac.clip_norm = cfg.train.clip_norm;
    ac.total_steps = total_steps;
    Adam adam(trainable, ac);

    MetricsLogger logger(out_dir / (cfg.stage + ".metrics.jsonl"));
    Rng dropout_rng(mix_seed(cfg.seed, 2000));

    std::vector<Tensor> student_params = student.parameters();
    Snapshot best;
    double best_acc = -1.0, best_loss = 0.0;
    bool have_best = false;

    std::size_t step = 0;
    for (std::size_t epoch = 0;; ++epoch) {
        if (cfg.train.max_steps == 0 && epoch >= cfg.train.epochs) break;
        if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
        auto batches = make_batches(train, vocab, max_len, cfg.train.batch_size,
                                    mix_seed(cfg.seed, 1000 + epoch));
        for (const Batch& b : batches) {
            if (cfg.train.max_steps > 0 && step >= cfg.train.max_steps) break;
            try {
                ModelActivations teacher_acts;
                {
                    NoGradGuard no_grad;
                    teacher_acts =
                        teacher.model.forward(b.tokens, b.pad_mask, b.batch, b.len);
                }
                ModelActivations student_acts = student.forward(
                    b.tokens, b.pad_mask, b.batch, b.len,
                    student.config().dropout > 0 ? &dropout_rng : nullptr);
                ModelLossBreakdown loss =
                    model_loss(mapping, student_acts, teacher_acts, params, b.pad_mask);
                json rec{{"type", "step"},     {"stage", cfg.stage},
                         {"step", step},       {"epoch", epoch},
                         {"lr", adam.next_lr()}, {"loss", loss.total.value()},
                         {"embd", loss.embd},  {"hidn", loss.hidn},
                         {"attn", loss.attn},  {"layers", loss.layer_losses},
                         {"lambda", params.lambda}};
                if (params.include_prediction) rec["pred"] = loss.pred;
                logger.log(rec);
                backward(loss.total);
                adam.step();
            } catch (const Error& e) {
                rethrow_diverged(cfg.stage, step, e);
            }
            ++step;
        }
        if (!dev.empty()) {
            Metrics m = evaluate_model(student, vocab, dev, cfg.train.batch_size, max_len);
            json rec = metrics_to_json(m);
            rec["type"] = "epoch";
            rec["stage"] = cfg.stage;
            rec["epoch"] = epoch;
            logger.log(rec);
            if (prediction_stage) {
                // Model selection: best dev accuracy, ties broken by lower
                // dev loss.
                if (!have_best || m.accuracy > best_acc ||
                    (m.accuracy == best_acc && m.loss < best_loss)) {
                    best = take_snapshot(student_params);
                    best_acc = m.accuracy;
                    best_loss = m.loss;
                    have_best = true;
                }
            }
        }
    }
    if (prediction_stage && have_best) restore_snapshot(student_params, best);

    StageOutcome outcome;
    outcome.metrics_path = logger.path();
    CheckpointMeta meta;
    meta.stage = cfg.stage;
    meta.parent_hash = parent_hash;
    if (!dev.empty()) {
        Metrics m = evaluate_model(student, vocab, dev, cfg.train.batch_size, max_len);
        meta.dev_accuracy = m.accuracy;
        outcome.dev_accuracy = m.accuracy;
        if (m.has_mcc) outcome.dev_mcc = m.mcc;
        json rec = metrics_to_json(m);
        rec["type"] = "final";
        rec["stage"] = cfg.stage;
        logger.log(rec);
    }
    std::string name = cfg.output_name.empty() ? default_output_name(cfg.stage)
                                               : cfg.output_name;
    outcome.checkpoint_path = (out_dir / name).string();
    save_checkpoint(outcome.checkpoint_path, student, vocab, meta);
    return outcome;
}

StageOutcome run_task_distill(const TrainConfig& cfg, const fs::path& out_dir) {
    TrainConfig phase1 = cfg;
    phase1.stage = "task-intermediate";
    phase1.train.epochs = cfg.phase1.epochs;
    phase1.train.learning_rate = cfg.phase1.learning_rate;
    if (cfg.phase1.batch_size) phase1.train.batch_size = cfg.phase1.batch_size;
    phase1.train.max_steps = 0;
    phase1.output_name = "task_intermediate.ckpt";

    StageOutcome p1 = run_distill(phase1, out_dir);

    TrainConfig phase2 = cfg;
    phase2.stage = "task-prediction";
    phase2.init_checkpoint = p1.checkpoint_path;
    phase2.train.epochs = cfg.phase2.epochs;
    phase2.train.learning_rate = cfg.phase2.learning_rate;
    if (cfg.phase2.batch_size) phase2.train.batch_size = cfg.phase2.batch_size;
    phase2.train.max_steps = 0;
    phase2.output_name = cfg.output_name.empty() ? "task_prediction.ckpt"
                                                 : cfg.output_name;
    return run_distill(phase2, out_dir);
}

StageOutcome run_stage_impl(const TrainConfig& cfg, const fs::path& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    if (cfg.stage == "teacher-finetune" || cfg.stage == "finetune") {
        return run_finetune(cfg, out_dir);
    }
    if (cfg.stage == "teacher-mlm") return run_mlm(cfg, out_dir);
    if (cfg.stage == "task-distill") return run_task_distill(cfg, out_dir);
    return run_distill(cfg, out_dir);
}

}  // namespace

StageOutcome run_stage(const TrainConfig& cfg, const std::string& out_dir) {
    auto t0 = std::chrono::steady_clock::now();
    StageOutcome outcome = run_stage_impl(cfg, out_dir);
    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    std::vector<std::string> inputs;
    if (!cfg.data.train.empty()) inputs.push_back(cfg.data.train);
    if (!cfg.data.dev.empty()) inputs.push_back(cfg.data.dev);
    if (!cfg.data.vocab.empty()) inputs.push_back(cfg.data.vocab);
    if (!cfg.teacher_checkpoint.empty()) inputs.push_back(cfg.teacher_checkpoint);
    if (!cfg.init_checkpoint.empty()) inputs.push_back(cfg.init_checkpoint);
    write_run_manifest(out_dir, cfg.stage, config_to_json(cfg), inputs,
                       {outcome.checkpoint_path, outcome.metrics_path}, wall_ms);
    return outcome;
}

// --- augment command ------------------------------------------------------

void run_augment_command(const AugmentCommandArgs& args) {
    auto t0 = std::chrono::steady_clock::now();
    args.config.validate();
    LoadedCheckpoint teacher = load_checkpoint(args.teacher_checkpoint);
    if (!teacher.model.config().mlm_head) {
        throw ConfigError("augment: teacher checkpoint has no MLM head");
    }
    EmbeddingStore store;
    if (!args.glove_path.empty()) store = EmbeddingStore::load(args.glove_path);
    std::vector<Example> input = load_tsv(args.input_tsv);
    bool pair = tsv_has_pair_column(args.input_tsv);
    ModelReplacementSource source(teacher.model, teacher.vocab,
                                  args.glove_path.empty() ? nullptr : &store,
                                  args.config.k);
    std::vector<Example> output = augment_dataset(input, args.config, source);
    save_tsv(args.output_tsv, output, pair);

    fs::path out_dir = args.out_dir.empty()
                           ? fs::path(args.output_tsv).parent_path()
                           : fs::path(args.out_dir);
    if (out_dir.empty()) out_dir = ".";
    fs::create_directories(out_dir);
    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    json cfg{{"p_t", args.config.p_t},
             {"n_a", args.config.n_a},
             {"k", args.config.k},
             {"seed", args.config.seed},
             {"include_original", args.config.include_original}};
    std::vector<std::string> inputs{args.input_tsv, args.teacher_checkpoint};
    if (!args.glove_path.empty()) inputs.push_back(args.glove_path);
    write_run_manifest(out_dir, "augment", cfg, inputs, {args.output_tsv}, wall_ms);
}

// --- evaluate command -------------------------------------------------------

Metrics run_evaluate_command(const TrainConfig& cfg, const std::string& split,
                             const std::string& checkpoint_override,
                             const std::string& out_dir) {
    auto t0 = std::chrono::steady_clock::now();
    std::string ckpt = checkpoint_override.empty() ? cfg.init_checkpoint
                                                   : checkpoint_override;
    if (ckpt.empty()) {
        throw ConfigError("evaluate: no checkpoint (set init_checkpoint or --checkpoint)");
    }
    std::string path;
    if (split == "train") path = cfg.data.train;
    else if (split == "dev") path = cfg.data.dev;
    else if (split == "test") path = cfg.data.test;
    else throw ConfigError("evaluate: unknown split '" + split + "'");
    if (path.empty()) {
        throw ConfigError("evaluate: config has no data path for split '" + split + "'");
    }
    LoadedCheckpoint loaded = load_checkpoint(ckpt);
    std::vector<Example> examples = load_tsv(path);
    std::size_t max_len = effective_max_len(cfg, loaded.model.config());
    Metrics m = evaluate_model(loaded.model, loaded.vocab, examples,
                               cfg.train.batch_size, max_len);

    fs::path dir(out_dir.empty() ? "." : out_dir);
    fs::create_directories(dir);
    json rec = metrics_to_json(m);
    rec["split"] = split;
    // filename + content hash rather than an absolute path, so reruns into
    // different directories stay byte-identical
    rec["checkpoint"] = fs::path(ckpt).filename().string();
    rec["checkpoint_hash"] = loaded.self_hash;
    std::ofstream out(dir / ("evaluate." + split + ".json"));
    if (!out) throw IoError("evaluate: cannot write metrics file");
    out << rec.dump(2) << "\n";
    double wall_ms = std::chrono::duration<double, std::milli>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
    write_run_manifest(dir, "evaluate", config_to_json(cfg), {path, ckpt},
                       {(dir / ("evaluate." + split + ".json")).string()}, wall_ms);
    return m;
}

}  // namespace tinydistill
