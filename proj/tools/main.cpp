#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "akd/config.hpp"
#include "akd/data.hpp"
#include "akd/gradcheck_suite.hpp"
#include "akd/probe.hpp"
#include "akd/synth.hpp"
#include "akd/trainer.hpp"

namespace fs = std::filesystem;
using namespace akd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError(what + " path not set");
    if (!fs::exists(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

struct SynthFlags {
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> n;
    std::optional<std::size_t> max_prompt_tokens;
    std::string out;
};

int cmd_synth(const RunConfig& cfg_in, const SynthFlags& flags) {
    RunConfig cfg = cfg_in;
    if (flags.seed) cfg.synth.seed = *flags.seed;
    if (flags.n) cfg.synth.n_samples = *flags.n;
    if (flags.max_prompt_tokens) cfg.synth.max_prompt_tokens = *flags.max_prompt_tokens;
    std::string out = flags.out;
    if (out.empty()) {
        out = cfg.train_path.empty() ? cfg.out_dir + "/dataset.jsonl" : cfg.train_path;
    }
    fs::create_directories(fs::path(out).parent_path().empty()
                               ? "."
                               : fs::path(out).parent_path().string());

    auto samples = synth_generate(cfg.synth, cfg.student.patch_rows, cfg.student.patch_cols,
                                  cfg.student.d_patch);
    for (const auto& s : samples) {
        if (!synth_self_check(s)) throw IoError("generator self-check failed");
        if (s.prompt_ids.size() + s.response_ids.size() > cfg.student.max_text_tokens) {
            throw ConfigError("generated sample exceeds max_text_tokens");
        }
    }
    if (samples.empty()) {
        std::cerr << "warning: every candidate prompt exceeded max_prompt_tokens; "
                     "dataset is empty\n";
    }
    save_dataset(out, samples, cfg.synth.seed);
    std::cout << "wrote " << samples.size() << " samples to " << out << "\n";
    return kExitOk;
}

struct TrainFlags {
    std::string stage;
    std::string teacher_ckpt;
    std::string resume_ckpt;
    bool cache_teacher = false;
};

template <class T>
int run_train(RunConfig cfg, const TrainFlags& flags) {
    const std::string data_path = cfg.stage_train_path();
    require_file(data_path, "training dataset");
    auto samples = load_samples(data_path, cfg.student.vocab_size, cfg.student.max_text_tokens);

    std::optional<VlmT<T>> teacher;
    std::optional<VlmConfig> teacher_cfg;
    if (cfg.train.losses.any_kd()) {
        if (flags.teacher_ckpt.empty()) {
            throw ConfigError("KD losses enabled: --teacher <checkpoint> is required");
        }
        require_file(flags.teacher_ckpt, "teacher checkpoint");
        teacher = VlmT<T>::from_archive(read_archive(flags.teacher_ckpt));
        teacher_cfg = teacher->config();
    }

    auto student = VlmT<T>::init(cfg.student);
    DistillTrainerT<T> trainer(std::move(student), std::move(teacher), teacher_cfg, cfg.train);
    if (!flags.resume_ckpt.empty()) {
        require_file(flags.resume_ckpt, "resume checkpoint");
        trainer.restore(read_archive(flags.resume_ckpt));
    }
    if (flags.cache_teacher && cfg.train.losses.any_kd()) {
        const std::string cache_dir = cfg.out_dir + "/teacher_cache";
        trainer.build_teacher_cache(samples, cache_dir);
        trainer.load_teacher_cache(cache_dir, samples);
        trainer.release_teacher();
    }
    trainer.train(samples, cfg.out_dir);
    std::cout << "checkpoint=" << cfg.out_dir << "/ckpt_final.akd\n";
    std::cout << "metrics=" << cfg.out_dir << "/metrics.csv\n";
    return kExitOk;
}

int cmd_train(RunConfig cfg, const TrainFlags& flags) {
    if (!flags.stage.empty()) cfg.train.stage = stage_from_string(flags.stage);
    if (cfg.train.precision == Precision::f64) return run_train<double>(cfg, flags);
    return run_train<float>(cfg, flags);
}

int cmd_probe(const RunConfig& cfg, const std::string& ckpt, const std::string& data,
              const std::string& out) {
    require_file(ckpt, "checkpoint");
    const std::string data_path =
        !data.empty() ? data : (!cfg.eval_path.empty() ? cfg.eval_path : cfg.train_path);
    require_file(data_path, "probe dataset");

    Archive archive = read_archive(ckpt);
    auto model = Vlm64::from_archive(archive);
    auto samples =
        load_samples(data_path, model.config().vocab_size, model.config().max_text_tokens);
    std::vector<ProbeSample> probe_samples;
    for (const auto& s : samples) {
        auto tf = teacher_forcing(s.prompt_ids, s.response_ids);
        probe_samples.push_back({s.image, tf.text_ids});
    }
    auto report = probe_aggregate(model, probe_samples, cfg.probe_max_samples);
    const std::string out_path = out.empty() ? cfg.out_dir + "/probe.csv" : out;
    fs::create_directories(fs::path(out_path).parent_path().empty()
                               ? "."
                               : fs::path(out_path).parent_path().string());
    write_probe_csv(out_path, report, archive_checksum(archive), model.config().seed);
    std::cout << "probe_csv=" << out_path << "\n";
    return kExitOk;
}

int cmd_gradcheck() {
    auto rows = run_gradcheck_suite(1e-6, 1e-5);
    bool all_pass = true;
    std::printf("%-20s %8s %14s  %s\n", "term", "checked", "max_rel_err", "status");
    for (const auto& row : rows) {
        std::printf("%-20s %8zu %14.3e  %s\n", row.term.c_str(), row.checked, row.max_rel_err,
                    row.pass ? "PASS" : "FAIL");
        all_pass = all_pass && row.pass;
    }
    return all_pass ? kExitOk : kExitRuntime;
}

template <class T>
int run_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& data) {
    require_file(ckpt, "checkpoint");
    const std::string data_path =
        !data.empty() ? data : (!cfg.eval_path.empty() ? cfg.eval_path : cfg.train_path);
    require_file(data_path, "eval dataset");
    auto model = VlmT<T>::from_archive(read_archive(ckpt));
    auto samples =
        load_samples(data_path, model.config().vocab_size, model.config().max_text_tokens);
    auto result = evaluate(model, samples);
    std::printf("cross_entropy=%.10g\n", result.cross_entropy);
    std::printf("exact_match=%.10g\n", result.exact_match);
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& ckpt, const std::string& data) {
    if (cfg.train.precision == Precision::f64) return run_eval<double>(cfg, ckpt, data);
    return run_eval<float>(cfg, ckpt, data);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"alignkd: desk-scale cross-modal distillation laboratory"};
    app.require_subcommand(1);

    std::string config_path;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    SynthFlags synth_flags;
    synth->add_option("-c,--config", config_path, "run config file")->required();
    std::uint64_t seed_opt = 0;
    std::size_t n_opt = 0, mpt_opt = 0;
    auto* seed_flag = synth->add_option("--seed", seed_opt, "generator seed");
    auto* n_flag = synth->add_option("--n", n_opt, "sample count");
    auto* mpt_flag =
        synth->add_option("--max-prompt-tokens", mpt_opt, "prompt length cap (drops overlong)");
    synth->add_option("--out", synth_flags.out, "output dataset path");

    auto* train = app.add_subcommand("train", "run one training stage");
    TrainFlags train_flags;
    train->add_option("-c,--config", config_path, "run config file")->required();
    train->add_option("--stage", train_flags.stage, "pretrain or finetune")
        ->check(CLI::IsMember({"pretrain", "finetune"}));
    train->add_option("--teacher", train_flags.teacher_ckpt, "teacher checkpoint");
    train->add_option("--resume", train_flags.resume_ckpt, "resume from checkpoint");
    train->add_flag("--cache-teacher", train_flags.cache_teacher,
                    "precompute teacher traces and train without the teacher resident");

    auto* probe = app.add_subcommand("probe", "layer feature-shift analysis");
    std::string probe_ckpt, probe_data, probe_out;
    probe->add_option("-c,--config", config_path, "run config file")->required();
    probe->add_option("--checkpoint", probe_ckpt, "model checkpoint")->required();
    probe->add_option("--data", probe_data, "dataset override");
    probe->add_option("--out", probe_out, "output CSV path");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");

    auto* eval = app.add_subcommand("eval", "masked cross-entropy and exact match");
    std::string eval_ckpt, eval_data;
    eval->add_option("-c,--config", config_path, "run config file")->required();
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
    eval->add_option("--data", eval_data, "dataset override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gradcheck->parsed()) return cmd_gradcheck();

        RunConfig cfg = RunConfig::parse_file(config_path);
        if (synth->parsed()) {
            if (*seed_flag) synth_flags.seed = seed_opt;
            if (*n_flag) synth_flags.n = n_opt;
            if (*mpt_flag) synth_flags.max_prompt_tokens = mpt_opt;
            return cmd_synth(cfg, synth_flags);
        }
        if (train->parsed()) return cmd_train(cfg, train_flags);
        if (probe->parsed()) return cmd_probe(cfg, probe_ckpt, probe_data, probe_out);
        if (eval->parsed()) return cmd_eval(cfg, eval_ckpt, eval_data);
        return kExitConfig;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
