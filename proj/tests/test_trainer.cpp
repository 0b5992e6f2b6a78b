#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "akd/config.hpp"
#include "akd/data.hpp"
#include "akd/trainer.hpp"

using namespace akd;
namespace fs = std::filesystem;

namespace {

VlmConfig tiny_model(bool is_teacher) {
    VlmConfig cfg;
    cfg.vocab_size = 64;
    cfg.patch_rows = 2;
    cfg.patch_cols = 2;
    cfg.d_patch = 16;
    cfg.n_vision_tokens = 2;
    cfg.max_text_tokens = 16;
    if (is_teacher) {
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.n_layers = 3;
        cfg.seed = 51;
    } else {
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 2;
        cfg.seed = 52;
    }
    return cfg;
}

SynthSpec tiny_spec(std::uint64_t seed, std::size_t n) {
    SynthSpec spec;
    spec.n_samples = n;
    spec.seed = seed;
    spec.max_prompt_tokens = 8;
    return spec;
}

std::vector<Sample> tiny_dataset(std::uint64_t seed, std::size_t n) {
    auto cfg = tiny_model(false);
    return synth_generate(tiny_spec(seed, n), cfg.patch_rows, cfg.patch_cols, cfg.d_patch);
}

TrainConfig tiny_train(std::size_t steps) {
    TrainConfig cfg;
    cfg.steps = steps;
    cfg.batch_size = 4;
    cfg.accumulation_steps = 1;
    cfg.lr_projector_max = 2e-3;
    cfg.lr_other_max = 2e-3;
    cfg.warmup_frac = 0.1;
    cfg.seed = 11;
    cfg.precision = Precision::f64;
    cfg.losses.k = 2;
    return cfg;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

template <class T>
std::string serialize_params(std::vector<std::pair<std::string, TensorT<T>>> params) {
    std::string out;
    for (auto& [name, t] : params) {
        out += name;
        const auto d = t.data();
        out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(T));
    }
    return out;
}

}  // namespace

TEST_CASE("synth determinism and self-check") {
    auto a = tiny_dataset(7, 40);
    auto b = tiny_dataset(7, 40);
    REQUIRE(a.size() == b.size());
    save_dataset("synth_a.jsonl", a, 7);
    save_dataset("synth_b.jsonl", b, 7);
    CHECK(slurp("synth_a.jsonl") == slurp("synth_b.jsonl"));
    std::remove("synth_a.jsonl");
    std::remove("synth_b.jsonl");

    for (const auto& s : a) CHECK(synth_self_check(s));

    // a different seed changes the content
    auto c = tiny_dataset(8, 40);
    bool same = a.size() == c.size();
    if (same) {
        for (std::size_t i = 0; i < a.size() && same; ++i) {
            same = a[i].prompt_ids == c[i].prompt_ids && a[i].response_ids == c[i].response_ids;
        }
    }
    CHECK_FALSE(same);
}

TEST_CASE("synth prompt cap drops instead of truncating") {
    SynthSpec spec = tiny_spec(3, 60);
    spec.max_prompt_tokens = 1;  // only single-token caption prompts survive
    auto cfg = tiny_model(false);
    auto kept = synth_generate(spec, cfg.patch_rows, cfg.patch_cols, cfg.d_patch);
    CHECK(!kept.empty());
    CHECK(kept.size() < 60);
    for (const auto& s : kept) CHECK(s.prompt_ids.size() == 1);

    spec.max_prompt_tokens = 0;
    CHECK(synth_generate(spec, cfg.patch_rows, cfg.patch_cols, cfg.d_patch).empty());
}

TEST_CASE("dataset save/load round trip and errors") {
    auto samples = tiny_dataset(5, 12);
    save_dataset("ds_test.jsonl", samples, 5);
    auto loaded = load_samples("ds_test.jsonl", 64, 16);
    REQUIRE(loaded.size() == samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(loaded[i].prompt_ids == samples[i].prompt_ids);
        CHECK(loaded[i].response_ids == samples[i].response_ids);
        REQUIRE(loaded[i].image.patch_features.size() ==
                samples[i].image.patch_features.size());
        for (std::size_t j = 0; j < samples[i].image.patch_features.size(); ++j) {
            CHECK(loaded[i].image.patch_features[j] == samples[i].image.patch_features[j]);
        }
    }
    std::remove("ds_test.jsonl");

    CHECK_THROWS_AS(load_samples("missing_file.jsonl", 64, 16), IoError);
    {
        std::ofstream f("empty.jsonl");
    }
    CHECK_THROWS_AS(load_samples("empty.jsonl", 64, 16), EmptyDataset);
    std::remove("empty.jsonl");
    {
        std::ofstream f("bad_vocab.jsonl");
        f << R"({"schema":1})" << "\n";
        f << R"({"grid":[1,1],"image_patches":[[0.0]],"prompt_ids":[99],"response_ids":[1]})"
          << "\n";
    }
    CHECK_THROWS_AS(load_samples("bad_vocab.jsonl", 64, 16), InvalidTokenId);
    std::remove("bad_vocab.jsonl");
}

TEST_CASE("teacher forcing layout") {
    auto tf = teacher_forcing({10, 11}, {12, 13, 2});
    CHECK(tf.text_ids == std::vector<int>{10, 11, 12, 13, 2});
    CHECK(tf.targets == std::vector<int>{11, 12, 13, 2, 0});
    CHECK(tf.mask == std::vector<std::uint8_t>{0, 1, 1, 1, 0});
    CHECK_THROWS_AS(teacher_forcing({}, {1}), EmptySequence);
}

TEST_CASE("batching: sizes, masks, determinism") {
    auto samples = tiny_dataset(9, 5);
    REQUIRE(samples.size() >= 3);
    auto batches = make_batches(samples, 2, 1, 0);
    std::size_t total = 0;
    for (const auto& b : batches) total += b.size();
    CHECK(total == samples.size());
    CHECK(batches[0].size() == 2);
    const std::size_t expected_tail = samples.size() % 2 == 0 ? 2 : 1;
    CHECK(batches.back().size() == expected_tail);

    for (const auto& b : batches) {
        const std::size_t pad = b.padded_len();
        for (std::size_t i = 0; i < b.size(); ++i) {
            CHECK(b.loss_mask[i].size() == pad);
            for (std::size_t t = 0; t < pad; ++t) {
                const bool in_response = t >= b.prompt_ids[i].size() &&
                                         t < b.prompt_ids[i].size() + b.response_ids[i].size();
                CHECK(static_cast<bool>(b.loss_mask[i][t]) == in_response);
            }
        }
    }

    auto again = make_batches(samples, 2, 1, 0);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
        for (std::size_t i = 0; i < batches[bi].size(); ++i) {
            CHECK(batches[bi].prompt_ids[i] == again[bi].prompt_ids[i]);
        }
    }
    auto other_epoch = make_batches(samples, 2, 1, 1);
    bool differs = false;
    for (std::size_t bi = 0; bi < batches.size() && !differs; ++bi) {
        for (std::size_t i = 0; i < batches[bi].size() && !differs; ++i) {
            differs = batches[bi].prompt_ids[i] != other_epoch[bi].prompt_ids[i] ||
                      batches[bi].response_ids[i] != other_epoch[bi].response_ids[i];
        }
    }
    CHECK(differs);
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 1.0, 100, 10) == 0.0);
    CHECK(cosine_lr(10, 1.0, 100, 10) == 1.0);
    CHECK(cosine_lr(100, 1.0, 100, 10) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(cosine_lr(55, 1.0, 100, 10) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_lr(5, 1.0, 10, 10), BadSchedule);
    CHECK_THROWS_AS(cosine_lr(11, 1.0, 10, 0), BadSchedule);
}

TEST_CASE("adamw converges and applies per-group rates") {
    auto x = Tensor64::from_data({1}, {0.0});
    x.set_requires_grad(true);
    AdamWT<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.add("x", x, ParamGroup::other);
    for (int i = 0; i < 400; ++i) {
        opt.zero_grad();
        auto loss = mse(x, Tensor64::from_data({1}, {3.0}));
        backward(loss);
        opt.step(0.0, 0.05);
    }
    CHECK(std::abs(x.data()[0] - 3.0) < 1e-3);
    CHECK(opt.last_lr(ParamGroup::other) == 0.05);
    CHECK(opt.last_lr(ParamGroup::projector) == 0.0);

    // identical gradients, different groups: displacement tracks the group lr
    auto a = Tensor64::from_data({1}, {1.0});
    auto b = Tensor64::from_data({1}, {1.0});
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    AdamWT<double> opt2;
    opt2.add("a", a, ParamGroup::projector);
    opt2.add("b", b, ParamGroup::other);
    opt2.zero_grad();
    backward(add(mse(a, Tensor64::zeros({1})), mse(b, Tensor64::zeros({1}))));
    opt2.step(1e-3, 1e-5);
    const double da = 1.0 - a.data()[0];
    const double db = 1.0 - b.data()[0];
    CHECK(da == doctest::Approx(100.0 * db).epsilon(1e-6));
}

TEST_CASE("micro_step with KD off skips the teacher entirely") {
    auto student = Vlm64::init(tiny_model(false));
    TrainConfig cfg = tiny_train(4);
    cfg.losses.enable_rkld = cfg.losses.enable_attn_tv = false;
    cfg.losses.enable_v_all = cfg.losses.enable_v_focus = false;
    DistillTrainerT<double> trainer(std::move(student), std::nullopt, std::nullopt, cfg);

    auto samples = tiny_dataset(13, 8);
    auto batches = make_batches(samples, 4, 11, 0);
    auto report = trainer.micro_step(batches[0]);
    CHECK(report.total == report.l_sup);
    CHECK(report.l_attn_tv == 0.0);
    CHECK(report.l_v == 0.0);
    CHECK(report.l_rkld == 0.0);
    CHECK(trainer.completed_steps() == 1);
}

TEST_CASE("gradient accumulation equals the combined batch") {
    auto samples = tiny_dataset(17, 8);
    REQUIRE(samples.size() == 8);

    auto teacher = Vlm64::init(tiny_model(true));

    auto params_of = [&](std::size_t batch, std::size_t acc) {
        TrainConfig cfg = tiny_train(5);
        cfg.batch_size = batch;
        cfg.accumulation_steps = acc;
        auto t2 = teacher;
        DistillTrainerT<double> tr(Vlm64::init(tiny_model(false)), t2, std::nullopt, cfg);
        const std::size_t per_epoch = (samples.size() + batch - 1) / batch;
        std::vector<DistillBatch> epoch;
        std::uint64_t loaded = ~0ull;
        for (std::size_t s = 0; s < 5; ++s) {
            for (std::size_t m = 0; m < acc; ++m) {
                const std::uint64_t gbi = s * acc + m;
                if (gbi / per_epoch != loaded) {
                    loaded = gbi / per_epoch;
                    epoch = make_batches(samples, batch, cfg.seed, loaded);
                }
                tr.micro_step(epoch[gbi % per_epoch]);
            }
        }
        std::vector<double> flat;
        for (auto& [name, t] : tr.student().trainable_params()) {
            flat.insert(flat.end(), t.data().begin(), t.data().end());
        }
        return flat;
    };
    auto pa = params_of(8, 1);
    auto pb = params_of(2, 4);
    REQUIRE(pa.size() == pb.size());
    double max_diff = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(pa[i] - pb[i]));
    }
    CHECK(max_diff < 1e-6);
}

TEST_CASE("train determinism, frozen invariance, loss decrease") {
    auto samples = tiny_dataset(19, 16);
    auto teacher = Vlm64::init(tiny_model(true));

    auto run_into = [&](const std::string& dir) {
        TrainConfig cfg = tiny_train(12);
        auto t2 = teacher;
        DistillTrainerT<double> tr(Vlm64::init(tiny_model(false)), t2, std::nullopt, cfg);
        const std::string frozen_before = serialize_params(tr.student().frozen_params());
        auto teacher_before = serialize_params(t2.trainable_params());
        tr.train(samples, dir);
        CHECK(serialize_params(tr.student().frozen_params()) == frozen_before);
        CHECK(serialize_params(t2.trainable_params()) == teacher_before);
    };
    run_into("run_a");
    run_into("run_b");
    CHECK(slurp("run_a/ckpt_final.akd") == slurp("run_b/ckpt_final.akd"));
    CHECK(slurp("run_a/metrics.csv") == slurp("run_b/metrics.csv"));

    // seed comment line first, then the documented header bytes
    std::ifstream m("run_a/metrics.csv");
    std::string header;
    std::getline(m, header);
    CHECK(header.rfind("# seed=", 0) == 0);
    std::getline(m, header);
    CHECK(header == "step,lr,l_sup,l_attn_tv,l_v_focus,l_v_all,l_v,l_rkld,total");

    // parse first/last totals: training should reduce the objective
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(m, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    REQUIRE(lines.size() == 12);
    auto total_of = [](const std::string& row) {
        const auto pos = row.rfind(',');
        return std::stod(row.substr(pos + 1));
    };
    CHECK(total_of(lines.back()) < total_of(lines.front()));

    fs::remove_all("run_a");
    fs::remove_all("run_b");
}

TEST_CASE("resume from final checkpoint is a no-op") {
    auto samples = tiny_dataset(23, 8);
    TrainConfig cfg = tiny_train(6);
    cfg.precision = Precision::f32;
    cfg.losses.enable_rkld = cfg.losses.enable_attn_tv = false;
    cfg.losses.enable_v_all = cfg.losses.enable_v_focus = false;

    DistillTrainerT<float> tr(Vlm32::init(tiny_model(false)), std::nullopt, std::nullopt, cfg);
    tr.train(samples, "resume_a");
    const std::string first = slurp("resume_a/ckpt_final.akd");

    DistillTrainerT<float> tr2(Vlm32::init(tiny_model(false)), std::nullopt, std::nullopt, cfg);
    tr2.restore(read_archive("resume_a/ckpt_final.akd"));
    CHECK(tr2.completed_steps() == 6);
    tr2.train(samples, "resume_b");
    CHECK(slurp("resume_b/ckpt_final.akd") == first);

    fs::remove_all("resume_a");
    fs::remove_all("resume_b");
}

TEST_CASE("steps=0 writes the initial checkpoint only") {
    auto samples = tiny_dataset(29, 4);
    TrainConfig cfg = tiny_train(1);
    cfg.steps = 0;
    cfg.losses.enable_rkld = cfg.losses.enable_attn_tv = false;
    cfg.losses.enable_v_all = cfg.losses.enable_v_focus = false;
    DistillTrainerT<double> tr(Vlm64::init(tiny_model(false)), std::nullopt, std::nullopt, cfg);
    const std::string before = serialize_params(tr.student().trainable_params());
    tr.train(samples, "zero_steps");
    CHECK(serialize_params(tr.student().trainable_params()) == before);
    CHECK(fs::exists("zero_steps/ckpt_final.akd"));
    std::ifstream m("zero_steps/metrics.csv");
    std::string seed_line, header, extra;
    std::getline(m, seed_line);
    std::getline(m, header);
    CHECK_FALSE(std::getline(m, extra));  // no data rows
    fs::remove_all("zero_steps");
}

TEST_CASE("teacher cache reproduces live distillation exactly in f32") {
    auto samples = tiny_dataset(31, 8);
    TrainConfig cfg = tiny_train(2);
    cfg.precision = Precision::f32;

    auto teacher = Vlm32::init(tiny_model(true));
    auto batches = make_batches(samples, 4, cfg.seed, 0);

    auto t_live = teacher;
    DistillTrainerT<float> live(Vlm32::init(tiny_model(false)), t_live, std::nullopt, cfg);
    auto r_live = live.micro_step(batches[0]);

    auto t_cache = teacher;
    DistillTrainerT<float> cached(Vlm32::init(tiny_model(false)), t_cache, std::nullopt, cfg);
    cached.build_teacher_cache(samples, "trace_cache");
    cached.load_teacher_cache("trace_cache", samples);
    cached.release_teacher();
    auto r_cache = cached.micro_step(batches[0]);

    CHECK(r_live.l_sup == r_cache.l_sup);
    CHECK(r_live.l_attn_tv == r_cache.l_attn_tv);
    CHECK(r_live.l_v == r_cache.l_v);
    CHECK(r_live.l_rkld == r_cache.l_rkld);
    CHECK(r_live.total == r_cache.total);
    fs::remove_all("trace_cache");
}

TEST_CASE("evaluate: uniform logits, memorization, external recomputation") {
    auto cfg = tiny_model(false);
    auto samples = tiny_dataset(37, 6);

    // zeroed token table gives exactly uniform logits: CE = log(vocab)
    auto uniform = Vlm64::init(cfg);
    for (auto& [name, t] : uniform.frozen_params()) {
        if (name == "frozen.table") {
            for (auto& v : t.data_mut()) v = 0.0;
        }
    }
    auto ur = evaluate(uniform, samples);
    CHECK(ur.cross_entropy == doctest::Approx(std::log(64.0)).epsilon(1e-9));

    // random model: recompute pooled CE from dumped logits
    auto model = Vlm64::init(cfg);
    auto er = evaluate(model, samples);
    double ce_sum = 0;
    std::size_t cnt = 0;
    for (const auto& s : samples) {
        auto tf = teacher_forcing(s.prompt_ids, s.response_ids);
        NoGradGuard ng;
        auto trace = model.run(s.image, tf.text_ids, false);
        const std::size_t V = cfg.vocab_size;
        for (std::size_t t = 0; t < tf.text_ids.size(); ++t) {
            if (!tf.mask[t]) continue;
            const std::size_t row = trace.n_vision + t;
            double mx = trace.logits.at({row, 0});
            for (std::size_t v = 1; v < V; ++v) mx = std::max(mx, trace.logits.at({row, v}));
            double se = 0;
            for (std::size_t v = 0; v < V; ++v) se += std::exp(trace.logits.at({row, v}) - mx);
            ce_sum += -(trace.logits.at({row, static_cast<std::size_t>(tf.targets[t])}) - mx -
                        std::log(se));
            ++cnt;
        }
    }
    CHECK(std::abs(er.cross_entropy - ce_sum / cnt) <= 1e-8);

    // a model trained on one sample reaches exact match 1.0
    std::vector<Sample> one = {samples[0]};
    TrainConfig tcfg = tiny_train(150);
    tcfg.batch_size = 1;
    tcfg.lr_other_max = 3e-3;
    tcfg.lr_projector_max = 3e-3;
    tcfg.losses.enable_rkld = tcfg.losses.enable_attn_tv = false;
    tcfg.losses.enable_v_all = tcfg.losses.enable_v_focus = false;
    DistillTrainerT<double> tr(Vlm64::init(cfg), std::nullopt, std::nullopt, tcfg);
    tr.train(one, "memorize");
    auto mr = evaluate(tr.student(), one);
    CHECK(mr.exact_match == 1.0);
    fs::remove_all("memorize");

    CHECK_THROWS_AS(evaluate(model, std::vector<Sample>{}), EmptyDataset);
}

TEST_CASE("run config parsing") {
    const std::string text = R"(schema=1
# comment line
model.shared.vocab_size=64
model.shared.patch_rows=2
model.shared.patch_cols=2
model.shared.d_patch=16
model.shared.n_vision_tokens=2
model.shared.max_text_tokens=16
model.teacher.d_model=16
model.teacher.n_heads=4
model.teacher.n_layers=3
model.student.d_model=8
model.student.n_heads=2
model.student.n_layers=2
train.steps=7
losses.k=2
losses.attn_block=tv
output.dir=cfg_out
)";
    auto cfg = RunConfig::parse_text(text, false);
    CHECK(cfg.train.steps == 7);
    CHECK(cfg.student.d_model == 8);
    CHECK(cfg.teacher.d_model == 16);
    CHECK(cfg.student.vocab_size == 64);
    CHECK(cfg.out_dir == "cfg_out");

    CHECK_THROWS_AS(RunConfig::parse_text("train.steps=7\n", false), ConfigError);  // no schema
    CHECK_THROWS_AS(RunConfig::parse_text("schema=1\nbogus.key=1\n", false), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse_text(text + "losses.k=3\n", false), ConfigError);  // k > N_v

    // environment override
    setenv("AKD_TRAIN_STEPS", "21", 1);
    auto cfg2 = RunConfig::parse_text(text, true);
    CHECK(cfg2.train.steps == 21);
    unsetenv("AKD_TRAIN_STEPS");
}
