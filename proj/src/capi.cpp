#include "tinydistill.h"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <thread>

#include <json.hpp>

#include "tinydistill/checkpoint.hpp"
#include "tinydistill/error.hpp"
#include "tinydistill/pipeline.hpp"
#include "tinydistill/version.hpp"

using nlohmann::json;
namespace td = tinydistill;

namespace {

thread_local std::string g_last_error;

enum class LogLevel { kDebug = 0, kInfo, kWarn, kError, kOff };
LogLevel g_log_level = LogLevel::kInfo;

void log_line(LogLevel level, const std::string& msg) {
    static const char* names[] = {"debug", "info", "warn", "error"};
    if (level < g_log_level || g_log_level == LogLevel::kOff) return;
    std::fprintf(stderr, "[tinydistill:%s] %s\n", names[static_cast<int>(level)],
                 msg.c_str());
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

td_status failure(const std::exception& e, td_status code) {
    g_last_error = e.what();
    log_line(LogLevel::kError, g_last_error);
    return code;
}

// ConfigError and friends are the caller's fault; everything else is a
// runtime failure.
template <typename Fn>
td_status guarded(Fn&& fn) {
    try {
        fn();
        return TD_OK;
    } catch (const td::ConfigError& e) {
        return failure(e, TD_BAD_ARGS);
    } catch (const td::ValueError& e) {
        return failure(e, TD_ERROR);
    } catch (const td::Error& e) {
        return failure(e, TD_ERROR);
    } catch (const std::exception& e) {
        return failure(e, TD_ERROR);
    }
}

td::TrainConfig load_config_with_seed(const char* config_path, int64_t seed_override) {
    if (!config_path) throw td::ConfigError("config path is null");
    td::TrainConfig cfg = td::load_train_config(config_path);
    if (seed_override >= 0) {
        td::override_seed(cfg, static_cast<std::uint64_t>(seed_override));
    }
    return cfg;
}

td_status run_stage_command(const char* config_path, const char* out_dir,
                            int64_t seed_override,
                            std::initializer_list<const char*> allowed_stages,
                            const char* command) {
    return guarded([&] {
        if (!out_dir) throw td::ConfigError("out_dir is null");
        td::TrainConfig cfg = load_config_with_seed(config_path, seed_override);
        bool ok = false;
        for (const char* s : allowed_stages) {
            if (cfg.stage == s) ok = true;
        }
        if (!ok) {
            throw td::ConfigError(std::string(command) + ": config stage '" + cfg.stage +
                                  "' does not belong to this command");
        }
        log_line(LogLevel::kInfo, std::string(command) + ": stage " + cfg.stage +
                                      " -> " + out_dir);
        td::StageOutcome outcome = td::run_stage(cfg, out_dir);
        log_line(LogLevel::kInfo, std::string(command) + ": wrote " +
                                      outcome.checkpoint_path);
    });
}

json metrics_json(const td::Metrics& m) {
    json j{{"accuracy", m.accuracy}, {"loss", m.loss}, {"count", m.count}};
    if (m.has_mcc) j["mcc"] = m.mcc;
    return j;
}

}  // namespace

struct td_model {
    td::LoadedCheckpoint loaded;
};

extern "C" {

const char* td_last_error(void) { return g_last_error.c_str(); }

const char* td_version(void) { return td::kVersion; }

td_status td_set_log_level(const char* level) {
    return guarded([&] {
        if (!level) throw td::ConfigError("log level is null");
        std::string l = level;
        if (l == "debug") g_log_level = LogLevel::kDebug;
        else if (l == "info") g_log_level = LogLevel::kInfo;
        else if (l == "warn") g_log_level = LogLevel::kWarn;
        else if (l == "error") g_log_level = LogLevel::kError;
        else if (l == "off") g_log_level = LogLevel::kOff;
        else throw td::ConfigError("unknown log level '" + l + "'");
    });
}

void td_string_free(char* s) { std::free(s); }

td_status td_train_teacher(const char* config_path, const char* out_dir,
                           int64_t seed_override) {
    return run_stage_command(config_path, out_dir, seed_override,
                             {"teacher-finetune", "teacher-mlm", "finetune"},
                             "train-teacher");
}

td_status td_general_distill(const char* config_path, const char* out_dir,
                             int64_t seed_override) {
    return run_stage_command(config_path, out_dir, seed_override, {"general"},
                             "general-distill");
}

td_status td_task_distill(const char* config_path, const char* out_dir,
                          int64_t seed_override) {
    return run_stage_command(config_path, out_dir, seed_override,
                             {"task-distill", "task-intermediate", "task-prediction"},
                             "task-distill");
}

td_status td_evaluate(const char* config_path, const char* split,
                      const char* checkpoint, const char* out_dir,
                      char** metrics_json_out) {
    return guarded([&] {
        if (!split) throw td::ConfigError("split is null");
        td::TrainConfig cfg = load_config_with_seed(config_path, -1);
        td::Metrics m = td::run_evaluate_command(cfg, split,
                                                 checkpoint ? checkpoint : "",
                                                 out_dir ? out_dir : "");
        if (metrics_json_out) *metrics_json_out = dup_string(metrics_json(m).dump());
    });
}

td_status td_augment(const char* input_tsv, const char* output_tsv,
                     const char* glove_path, const char* teacher_checkpoint,
                     double p_t, int32_t n_a, int32_t k, uint64_t seed,
                     int32_t include_original, const char* out_dir) {
    return guarded([&] {
        if (!input_tsv || !output_tsv || !teacher_checkpoint) {
            throw td::ConfigError("augment: input, output and teacher are required");
        }
        if (n_a < 1 || k < 1) {
            throw td::ConfigError("augment: n_a and k must be >= 1");
        }
        td::AugmentCommandArgs args;
        args.input_tsv = input_tsv;
        args.output_tsv = output_tsv;
        args.glove_path = glove_path ? glove_path : "";
        args.teacher_checkpoint = teacher_checkpoint;
        args.config.p_t = p_t;
        args.config.n_a = static_cast<std::size_t>(n_a);
        args.config.k = static_cast<std::size_t>(k);
        args.config.seed = seed;
        args.config.include_original = include_original != 0;
        args.out_dir = out_dir ? out_dir : "";
        td::run_augment_command(args);
    });
}

td_status td_ablate(const char* recipe, const char* config_path, const char* out_dir,
                    int32_t max_threads, char** report_tsv) {
    return guarded([&] {
        if (!recipe || !config_path || !out_dir) {
            throw td::ConfigError("ablate: recipe, config and out_dir are required");
        }
        std::size_t threads;
        if (max_threads > 0) {
            threads = static_cast<std::size_t>(max_threads);
        } else if (const char* env = std::getenv("DISTILL_THREADS")) {
            long v = std::atol(env);
            if (v < 1) throw td::ConfigError("DISTILL_THREADS must be >= 1");
            threads = static_cast<std::size_t>(v);
        } else {
            threads = std::max(1u, std::thread::hardware_concurrency());
        }
        td::AblationConfig cfg = td::load_ablation_config(config_path);
        log_line(LogLevel::kInfo, std::string("ablate: recipe ") + recipe + " with " +
                                      std::to_string(cfg.seeds.size()) + " seeds, " +
                                      std::to_string(threads) + " thread(s)");
        td::AblationReport report = td::run_ablation(recipe, cfg, out_dir, threads);
        if (report_tsv) *report_tsv = dup_string(report.tsv);
    });
}

td_status td_inspect_checkpoint(const char* path, char** summary_json) {
    return guarded([&] {
        if (!path) throw td::ConfigError("inspect: path is null");
        td::CheckpointSummary s = td::inspect_checkpoint(path);
        json j;
        j["config"] = json{{"num_layers", s.config.num_layers},
                           {"hidden", s.config.hidden},
                           {"ffn", s.config.ffn},
                           {"heads", s.config.heads},
                           {"vocab_size", s.config.vocab_size},
                           {"max_len", s.config.max_len},
                           {"num_classes", s.config.num_classes},
                           {"dropout", s.config.dropout},
                           {"seed", s.config.seed},
                           {"mlm_head", s.config.mlm_head}};
        j["stage"] = s.meta.stage;
        j["lineage"] = json{{"self", s.self_hash}, {"parent", s.meta.parent_hash}};
        j["parameter_count"] = s.param_count;
        j["vocab_size"] = s.vocab_size;
        j["blob_bytes"] = s.blob_bytes;
        if (s.meta.dev_accuracy) j["dev_accuracy"] = *s.meta.dev_accuracy;
        json tensors = json::array();
        for (const auto& [name, shape] : s.tensors) {
            tensors.push_back(json{{"name", name}, {"shape", shape}});
        }
        j["tensors"] = tensors;
        if (summary_json) *summary_json = dup_string(j.dump(2));
    });
}

td_status td_model_load(const char* checkpoint_path, td_model** out) {
    return guarded([&] {
        if (!checkpoint_path || !out) {
            throw td::ConfigError("model_load: path and out are required");
        }
        *out = new td_model{td::load_checkpoint(checkpoint_path)};
    });
}

void td_model_free(td_model* model) { delete model; }

int64_t td_model_parameter_count(const td_model* model) {
    if (!model) return -1;
    return model->loaded.model.parameter_count();
}

td_status td_model_config_json(const td_model* model, char** config_json) {
    return guarded([&] {
        if (!model || !config_json) {
            throw td::ConfigError("model_config: model and out are required");
        }
        const td::TransformerConfig& c = model->loaded.model.config();
        json j{{"num_layers", c.num_layers}, {"hidden", c.hidden},
               {"ffn", c.ffn},               {"heads", c.heads},
               {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
               {"num_classes", c.num_classes}, {"dropout", c.dropout},
               {"seed", c.seed},             {"mlm_head", c.mlm_head}};
        *config_json = dup_string(j.dump());
    });
}

td_status td_model_evaluate_tsv(const td_model* model, const char* tsv_path,
                                int32_t batch_size, char** metrics_json_out) {
    return guarded([&] {
        if (!model || !tsv_path) {
            throw td::ConfigError("model_evaluate: model and tsv_path are required");
        }
        if (batch_size < 1) throw td::ConfigError("model_evaluate: batch_size must be >= 1");
        std::vector<td::Example> examples = td::load_tsv(tsv_path);
        td::Metrics m = td::evaluate_model(model->loaded.model, model->loaded.vocab,
                                           examples, static_cast<std::size_t>(batch_size),
                                           model->loaded.model.config().max_len);
        if (metrics_json_out) *metrics_json_out = dup_string(metrics_json(m).dump());
    });
}

}  // extern "C"
