#include "akd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "akd/errors.hpp"

namespace akd {

namespace {

struct KeyBinding {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> apply;
};

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const std::uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected real, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

const std::vector<KeyBinding>& bindings() {
    static const std::vector<KeyBinding> table = [] {
        std::vector<KeyBinding> b;
        auto u64 = [&](const char* key, auto member) {
            b.push_back({key, [key, member](RunConfig& c, const std::string& v) {
                             member(c) = parse_u64(key, v);
                         }});
        };
        auto real = [&](const char* key, auto member) {
            b.push_back({key, [key, member](RunConfig& c, const std::string& v) {
                             member(c) = parse_real(key, v);
                         }});
        };
        auto boolean = [&](const char* key, auto member) {
            b.push_back({key, [key, member](RunConfig& c, const std::string& v) {
                             member(c) = parse_bool(key, v);
                         }});
        };
        auto str = [&](const char* key, auto member) {
            b.push_back({key, [member](RunConfig& c, const std::string& v) { member(c) = v; }});
        };

        // Shared geometry: applied to both model blocks.
        auto shared_u64 = [&](const char* key, auto pick) {
            b.push_back({key, [key, pick](RunConfig& c, const std::string& v) {
                             const std::uint64_t x = parse_u64(key, v);
                             pick(c.teacher) = x;
                             pick(c.student) = x;
                         }});
        };
        shared_u64("model.shared.vocab_size", [](VlmConfig& m) -> std::size_t& { return m.vocab_size; });
        shared_u64("model.shared.patch_rows", [](VlmConfig& m) -> std::size_t& { return m.patch_rows; });
        shared_u64("model.shared.patch_cols", [](VlmConfig& m) -> std::size_t& { return m.patch_cols; });
        shared_u64("model.shared.d_patch", [](VlmConfig& m) -> std::size_t& { return m.d_patch; });
        shared_u64("model.shared.n_vision_tokens",
                   [](VlmConfig& m) -> std::size_t& { return m.n_vision_tokens; });
        shared_u64("model.shared.max_text_tokens",
                   [](VlmConfig& m) -> std::size_t& { return m.max_text_tokens; });

        u64("model.teacher.d_model", [](RunConfig& c) -> std::size_t& { return c.teacher.d_model; });
        u64("model.teacher.n_heads", [](RunConfig& c) -> std::size_t& { return c.teacher.n_heads; });
        u64("model.teacher.n_layers", [](RunConfig& c) -> std::size_t& { return c.teacher.n_layers; });
        u64("model.teacher.seed", [](RunConfig& c) -> std::uint64_t& { return c.teacher.seed; });
        u64("model.student.d_model", [](RunConfig& c) -> std::size_t& { return c.student.d_model; });
        u64("model.student.n_heads", [](RunConfig& c) -> std::size_t& { return c.student.n_heads; });
        u64("model.student.n_layers", [](RunConfig& c) -> std::size_t& { return c.student.n_layers; });
        u64("model.student.seed", [](RunConfig& c) -> std::uint64_t& { return c.student.seed; });

        u64("train.steps", [](RunConfig& c) -> std::size_t& { return c.train.steps; });
        u64("train.batch_size", [](RunConfig& c) -> std::size_t& { return c.train.batch_size; });
        u64("train.accumulation_steps",
            [](RunConfig& c) -> std::size_t& { return c.train.accumulation_steps; });
        real("train.lr_projector_max",
             [](RunConfig& c) -> double& { return c.train.lr_projector_max; });
        real("train.lr_other_max", [](RunConfig& c) -> double& { return c.train.lr_other_max; });
        real("train.lr_finetune_max",
             [](RunConfig& c) -> double& { return c.train.lr_finetune_max; });
        real("train.warmup_frac", [](RunConfig& c) -> double& { return c.train.warmup_frac; });
        real("train.weight_decay", [](RunConfig& c) -> double& { return c.train.weight_decay; });
        u64("train.seed", [](RunConfig& c) -> std::uint64_t& { return c.train.seed; });
        u64("train.checkpoint_every",
            [](RunConfig& c) -> std::size_t& { return c.train.checkpoint_every; });
        b.push_back({"train.precision", [](RunConfig& c, const std::string& v) {
                         c.train.precision = precision_from_string(v);
                     }});
        b.push_back({"train.stage", [](RunConfig& c, const std::string& v) {
                         c.train.stage = stage_from_string(v);
                     }});

        boolean("losses.enable_rkld",
                [](RunConfig& c) -> bool& { return c.train.losses.enable_rkld; });
        boolean("losses.enable_attn_tv",
                [](RunConfig& c) -> bool& { return c.train.losses.enable_attn_tv; });
        boolean("losses.enable_v_all",
                [](RunConfig& c) -> bool& { return c.train.losses.enable_v_all; });
        boolean("losses.enable_v_focus",
                [](RunConfig& c) -> bool& { return c.train.losses.enable_v_focus; });
        b.push_back({"losses.attn_block", [](RunConfig& c, const std::string& v) {
                         c.train.losses.attn_block = attn_block_from_string(v);
                     }});
        b.push_back({"losses.focus_head_reduce", [](RunConfig& c, const std::string& v) {
                         c.train.losses.focus_head_reduce = head_reduce_from_string(v);
                     }});
        real("losses.lambda", [](RunConfig& c) -> double& { return c.train.losses.lambda; });
        u64("losses.k", [](RunConfig& c) -> std::size_t& { return c.train.losses.k; });

        str("data.train_path", [](RunConfig& c) -> std::string& { return c.train_path; });
        str("data.eval_path", [](RunConfig& c) -> std::string& { return c.eval_path; });
        str("data.pretrain_path", [](RunConfig& c) -> std::string& { return c.pretrain_path; });
        str("data.finetune_path", [](RunConfig& c) -> std::string& { return c.finetune_path; });
        u64("data.synth.n_samples", [](RunConfig& c) -> std::size_t& { return c.synth.n_samples; });
        u64("data.synth.seed", [](RunConfig& c) -> std::uint64_t& { return c.synth.seed; });
        u64("data.synth.max_prompt_tokens",
            [](RunConfig& c) -> std::size_t& { return c.synth.max_prompt_tokens; });
        real("data.synth.w_caption", [](RunConfig& c) -> double& { return c.synth.w_caption; });
        real("data.synth.w_attribute",
             [](RunConfig& c) -> double& { return c.synth.w_attribute; });
        real("data.synth.w_position",
             [](RunConfig& c) -> double& { return c.synth.w_position; });

        u64("probe.max_samples", [](RunConfig& c) -> std::size_t& { return c.probe_max_samples; });
        str("output.dir", [](RunConfig& c) -> std::string& { return c.out_dir; });
        return b;
    }();
    return table;
}

std::string env_name(const std::string& key) {
    std::string out = "AKD_";
    for (char c : key) {
        out.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(c)));
    }
    return out;
}

}  // namespace

std::string RunConfig::stage_train_path() const {
    if (train.stage == Stage::pretrain && !pretrain_path.empty()) return pretrain_path;
    if (train.stage == Stage::finetune && !finetune_path.empty()) return finetune_path;
    return train_path;
}

void RunConfig::validate() const {
    teacher.validate();
    student.validate();
    train.validate();
    if (teacher.vocab_size != student.vocab_size ||
        teacher.n_vision_tokens != student.n_vision_tokens ||
        teacher.patch_rows != student.patch_rows ||
        teacher.patch_cols != student.patch_cols || teacher.d_patch != student.d_patch ||
        teacher.max_text_tokens != student.max_text_tokens) {
        throw ConfigError("teacher and student must share the token interface");
    }
    if (train.losses.k > student.n_vision_tokens) {
        throw ConfigError("losses.k exceeds n_vision_tokens");
    }
}

RunConfig RunConfig::defaults() {
    RunConfig c;
    c.teacher.d_model = 128;
    c.teacher.n_heads = 8;
    c.teacher.n_layers = 8;
    c.teacher.seed = 1;
    c.student.d_model = 64;
    c.student.n_heads = 4;
    c.student.n_layers = 4;
    c.student.seed = 2;
    return c;
}

RunConfig RunConfig::parse_text(const std::string& text, bool apply_env) {
    RunConfig cfg = defaults();
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    bool saw_schema = false;
    std::map<std::string, std::string> kv;
    while (std::getline(in, line)) {
        ++line_no;
        // strip whitespace
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
        }
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (!saw_schema) {
            if (key != "schema" || value != "1") {
                throw ConfigError("config must start with 'schema=1'");
            }
            saw_schema = true;
            continue;
        }
        kv[key] = value;  // later lines win
    }
    if (!saw_schema) throw ConfigError("config missing 'schema=1' line");

    for (const auto& [key, value] : kv) {
        bool known = false;
        for (const auto& binding : bindings()) {
            if (binding.key == key) {
                binding.apply(cfg, value);
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError("unknown config key '" + key + "'");
    }
    if (apply_env) {
        for (const auto& binding : bindings()) {
            if (const char* v = std::getenv(env_name(binding.key).c_str())) {
                binding.apply(cfg, v);
            }
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path, bool apply_env) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_text(text, apply_env);
}

}  // namespace akd
