#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

namespace fs = std::filesystem;

namespace {

#ifndef AKD_BIN
#error "AKD_BIN must point at the CLI binary"
#endif

int run(const std::string& args) {
    const std::string cmd = std::string(AKD_BIN) + " " + args + " >cli_stdout.txt 2>cli_stderr.txt";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

const char* kConfig = R"(schema=1
model.shared.vocab_size=64
model.shared.patch_rows=2
model.shared.patch_cols=2
model.shared.d_patch=16
model.shared.n_vision_tokens=2
model.shared.max_text_tokens=16
model.teacher.d_model=16
model.teacher.n_heads=4
model.teacher.n_layers=3
model.teacher.seed=51
model.student.d_model=8
model.student.n_heads=2
model.student.n_layers=2
model.student.seed=52
train.steps=4
train.batch_size=4
train.accumulation_steps=1
train.lr_projector_max=0.002
train.lr_other_max=0.002
train.warmup_frac=0.1
train.seed=11
train.precision=f32
losses.k=2
data.synth.n_samples=24
data.synth.seed=7
data.synth.max_prompt_tokens=8
data.train_path=cli_ws/train.jsonl
data.eval_path=cli_ws/train.jsonl
probe.max_samples=8
output.dir=cli_ws/out
)";

// Teacher pretraining config: the trained block carries the teacher's shape.
const char* kTeacherConfig = R"(schema=1
model.shared.vocab_size=64
model.shared.patch_rows=2
model.shared.patch_cols=2
model.shared.d_patch=16
model.shared.n_vision_tokens=2
model.shared.max_text_tokens=16
model.teacher.d_model=16
model.teacher.n_heads=4
model.teacher.n_layers=3
model.teacher.seed=51
model.student.d_model=16
model.student.n_heads=4
model.student.n_layers=3
model.student.seed=51
train.steps=4
train.batch_size=4
train.lr_projector_max=0.002
train.lr_other_max=0.002
train.warmup_frac=0.1
train.seed=12
train.precision=f32
losses.enable_rkld=false
losses.enable_attn_tv=false
losses.enable_v_all=false
losses.enable_v_focus=false
losses.k=2
data.train_path=cli_ws/train.jsonl
output.dir=cli_ws/teacher
)";

struct Workspace {
    Workspace() {
        fs::remove_all("cli_ws");
        fs::create_directories("cli_ws");
        std::ofstream("cli_ws/config.cfg") << kConfig;
        std::ofstream("cli_ws/teacher.cfg") << kTeacherConfig;
    }
};

}  // namespace

TEST_CASE("cli end to end") {
    Workspace ws;

    SUBCASE("synth determinism and validation") {
        CHECK(run("synth -c cli_ws/config.cfg --n 100 --seed 7 --out cli_ws/a.jsonl") == 0);
        CHECK(run("synth -c cli_ws/config.cfg --n 100 --seed 7 --out cli_ws/b.jsonl") == 0);
        CHECK(slurp("cli_ws/a.jsonl") == slurp("cli_ws/b.jsonl"));
        CHECK(run("synth -c cli_ws/config.cfg --n 0") == 2);
        CHECK(run("synth -c missing.cfg --n 4") == 2);
    }

    SUBCASE("full train/probe/eval pipeline") {
        REQUIRE(run("synth -c cli_ws/config.cfg") == 0);

        // KD enabled without a teacher checkpoint is a config error
        CHECK(run("train -c cli_ws/config.cfg") == 2);

        // pretrain the teacher-shaped model with KD off
        REQUIRE(run("train -c cli_ws/teacher.cfg --stage pretrain") == 0);
        REQUIRE(fs::exists("cli_ws/teacher/ckpt_final.akd"));

        // distill with the teacher
        REQUIRE(run("train -c cli_ws/config.cfg --teacher cli_ws/teacher/ckpt_final.akd") == 0);
        REQUIRE(fs::exists("cli_ws/out/ckpt_final.akd"));
        {
            std::ifstream m("cli_ws/out/metrics.csv");
            std::string header;
            std::getline(m, header);
            CHECK(header.rfind("# seed=", 0) == 0);
            std::getline(m, header);
            CHECK(header == "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total");
            std::size_t rows = 0;
            std::string line;
            while (std::getline(m, line)) {
                if (!line.empty()) ++rows;
            }
            CHECK(rows == 4);
        }

        // cached-teacher training produces the same final checkpoint
        const std::string direct = slurp("cli_ws/out/ckpt_final.akd");
        REQUIRE(run("train -c cli_ws/config.cfg --teacher cli_ws/teacher/ckpt_final.akd "
                    "--cache-teacher") == 0);
        CHECK(slurp("cli_ws/out/ckpt_final.akd") == direct);
        CHECK(fs::exists("cli_ws/out/teacher_cache"));

        // resume from the final checkpoint is a no-op
        REQUIRE(run("train -c cli_ws/config.cfg --teacher cli_ws/teacher/ckpt_final.akd "
                    "--resume cli_ws/out/ckpt_final.akd") == 0);
        CHECK(slurp("cli_ws/out/ckpt_final.akd") == direct);

        // probe
        CHECK(run("probe -c cli_ws/config.cfg --checkpoint missing.akd") == 2);
        REQUIRE(run("probe -c cli_ws/config.cfg --checkpoint cli_ws/out/ckpt_final.akd "
                    "--out cli_ws/probe.csv") == 0);
        {
            std::ifstream f("cli_ws/probe.csv");
            std::string line;
            std::getline(f, line);
            CHECK(line.rfind("# sample_count=", 0) == 0);
            std::getline(f, line);
            CHECK(line == "layer_index,adjacent_cos,segment_cos,segment_dist");
            std::size_t rows = 0;
            while (std::getline(f, line)) {
                if (!line.empty()) ++rows;
            }
            CHECK(rows == 2 + 1);  // student n_layers + 1
        }
        // idempotent probe output
        REQUIRE(run("probe -c cli_ws/config.cfg --checkpoint cli_ws/out/ckpt_final.akd "
                    "--out cli_ws/probe2.csv") == 0);
        CHECK(slurp("cli_ws/probe.csv") == slurp("cli_ws/probe2.csv"));

        // eval prints key=value lines
        REQUIRE(run("eval -c cli_ws/config.cfg --checkpoint cli_ws/out/ckpt_final.akd") == 0);
        const std::string out = slurp("cli_stdout.txt");
        CHECK(out.find("cross_entropy=") != std::string::npos);
        CHECK(out.find("exact_match=") != std::string::npos);
    }

    SUBCASE("environment override") {
        REQUIRE(run("synth -c cli_ws/config.cfg") == 0);
        setenv("AKD_TRAIN_STEPS", "2", 1);
        REQUIRE(run("train -c cli_ws/teacher.cfg") == 0);
        unsetenv("AKD_TRAIN_STEPS");
        std::ifstream m("cli_ws/teacher/metrics.csv");
        std::string line;
        std::size_t rows = 0;
        std::getline(m, line);  // seed comment
        std::getline(m, line);  // header
        while (std::getline(m, line)) {
            if (!line.empty()) ++rows;
        }
        CHECK(rows == 2);
    }

    fs::remove_all("cli_ws");
    std::remove("cli_stdout.txt");
    std::remove("cli_stderr.txt");
}
