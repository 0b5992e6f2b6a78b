#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "akd/losses.hpp"

using namespace akd;

namespace {

// Random causal post-softmax-like attention: nonnegative rows summing to 1.
Tensor64 random_causal(std::size_t H, std::size_t L, Rng& rng) {
    std::vector<double> data(H * L * L, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
            double sum = 0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double v = rng.uniform() + 1e-3;
                data[(h * L + i) * L + j] = v;
                sum += v;
            }
            for (std::size_t j = 0; j <= i; ++j) data[(h * L + i) * L + j] /= sum;
        }
    }
    return Tensor64::from_data({H, L, L}, std::move(data));
}

HeadProjectorT<double> identity_head_projector(std::size_t h) {
    Rng rng(0);
    auto p = HeadProjectorT<double>::init(h, h, rng);
    auto w = p.weight.data_mut();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < h; ++i) w[i * h + i] = 1.0;
    return p;
}

EmbedProjectorT<double> identity_embed_projector(std::size_t d) {
    Rng rng(0);
    auto p = EmbedProjectorT<double>::init(d, d, rng);
    auto w = p.weight.data_mut();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
    return p;
}

struct TinyPair {
    VlmConfig teacher_cfg, student_cfg;
    Vlm64 teacher, student;
    ToyImage img;
    std::vector<int> text_ids;
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;

    TinyPair() : teacher(make(true)), student(make(false)) {
        Rng rng(77);
        img.rows = 2;
        img.cols = 2;
        img.d_patch = 4;
        img.patch_features.resize(4 * 4);
        for (auto& v : img.patch_features) v = rng.normal();
        text_ids = {3, 5, 7, 9, 11};
        // next-token targets over the text segment; last position unmasked
        targets = {5, 7, 9, 11, 0};
        mask = {1, 1, 1, 1, 0};
        teacher_cfg = teacher.config();
        student_cfg = student.config();
    }

    static Vlm64 make(bool is_teacher) {
        VlmConfig cfg;
        cfg.vocab_size = 16;
        cfg.patch_rows = 2;
        cfg.patch_cols = 2;
        cfg.d_patch = 4;
        cfg.n_vision_tokens = 2;
        cfg.max_text_tokens = 10;
        if (is_teacher) {
            cfg.d_model = 16;
            cfg.n_heads = 4;
            cfg.n_layers = 3;
            cfg.seed = 21;
        } else {
            cfg.d_model = 8;
            cfg.n_heads = 2;
            cfg.n_layers = 2;
            cfg.seed = 22;
        }
        return Vlm64::init(cfg);
    }
};

}  // namespace

TEST_CASE("split_attention shapes and diagonal case") {
    Rng rng(1);
    auto attn = random_causal(1, 5, rng);
    auto split = split_attention(attn, 3);
    CHECK(split.a_vv.shape() == std::vector<std::size_t>{1, 3, 3});
    CHECK(split.a_tv.shape() == std::vector<std::size_t>{1, 2, 3});
    CHECK(split.a_tt.shape() == std::vector<std::size_t>{1, 2, 2});

    // identity-diagonal attention puts nothing in the tv block
    auto eye = Tensor64::zeros({1, 4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye.data_mut()[i * 4 + i] = 1.0;
    auto esplit = split_attention(eye, 2);
    for (double v : esplit.a_tv.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(split_attention(attn, 0), BadPartition);
    CHECK_THROWS_AS(split_attention(attn, 5), BadPartition);
    auto bad = Tensor64::full({1, 3, 3}, 0.1);  // upper triangle nonzero
    CHECK_THROWS_AS(split_attention(bad, 1), NotCausal);
}

TEST_CASE("split then reassemble is the identity on causal matrices") {
    Rng rng(5);
    for (int rep = 0; rep < 25; ++rep) {
        const std::size_t H = 1 + rng.uniform_int(3);
        const std::size_t L = 3 + rng.uniform_int(6);
        const std::size_t nv = 1 + rng.uniform_int(L - 1);
        auto attn = random_causal(H, L, rng);
        auto back = reassemble_attention(split_attention(attn, nv));
        for (std::size_t i = 0; i < attn.numel(); ++i) {
            CHECK(back.data()[i] == attn.data()[i]);
        }
    }
}

TEST_CASE("attn_tv_loss identity and zero cases") {
    Rng rng(9);
    auto a = random_causal(2, 6, rng);
    auto tv = split_attention(a, 3).a_tv;
    auto p = identity_head_projector(2);
    CHECK(attn_tv_loss(tv, tv, p).item() == 0.0);

    auto zt = Tensor64::zeros({2, 3, 3});
    auto zs = Tensor64::zeros({2, 3, 3});
    Rng rz(1);
    auto pz = HeadProjectorT<double>::init(2, 2, rz);
    std::fill(pz.weight.data_mut().begin(), pz.weight.data_mut().end(), 0.0);
    CHECK(attn_tv_loss(zt, zs, pz).item() == 0.0);

    CHECK_THROWS_AS(attn_tv_loss(Tensor64::zeros({2, 3, 4}), Tensor64::zeros({2, 3, 3}), p),
                    ShapeMismatch);
}

TEST_CASE("attn_tv_loss matches scalar-loop oracle") {
    Rng rng(13);
    const std::size_t ht = 3, hs = 2, nt = 4, nv = 5;
    for (int rep = 0; rep < 25; ++rep) {
        auto teacher = Tensor64::randn({ht, nt, nv}, rng, 1.0);
        auto student = Tensor64::randn({hs, nt, nv}, rng, 1.0);
        auto p = HeadProjectorT<double>::init(hs, ht, rng);
        const double got = attn_tv_loss(teacher, student, p).item();

        double acc = 0;
        for (std::size_t h = 0; h < hs; ++h) {
            for (std::size_t t = 0; t < nt; ++t) {
                for (std::size_t v = 0; v < nv; ++v) {
                    double proj = p.bias.data()[h];
                    for (std::size_t q = 0; q < ht; ++q) {
                        proj += p.weight.at({h, q}) * teacher.at({q, t, v});
                    }
                    const double d = proj - student.at({h, t, v});
                    acc += d * d;
                }
            }
        }
        acc /= static_cast<double>(hs * nt * nv);
        CHECK(std::abs(got - acc) <= 1e-10);
    }
}

TEST_CASE("focus_scores column sums") {
    auto a = Tensor64::from_data({1, 2, 3}, {0.2, 0.3, 0.1, 0.1, 0.1, 0.1});
    auto s = focus_scores(a);
    CHECK(s.data()[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(s.data()[1] == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(s.data()[2] == doctest::Approx(0.2).epsilon(1e-12));

    auto z = focus_scores(Tensor64::zeros({2, 3, 4}));
    for (double v : z.data()) CHECK(v == 0.0);

    CHECK_THROWS_AS(focus_scores(Tensor64::from_data({1, 1, 2}, {0.5, -0.1})),
                    NegativeAttention);
}

TEST_CASE("focus_scores matches double-loop oracle for both reductions") {
    Rng rng(17);
    for (int rep = 0; rep < 25; ++rep) {
        auto a = Tensor64::zeros({2, 3, 4});
        for (auto& v : a.data_mut()) v = rng.uniform();
        for (HeadReduce reduce : {HeadReduce::mean, HeadReduce::sum}) {
            auto s = focus_scores(a, reduce);
            for (std::size_t n = 0; n < 4; ++n) {
                double acc = 0;
                for (std::size_t h = 0; h < 2; ++h) {
                    for (std::size_t m = 0; m < 3; ++m) acc += a.at({h, m, n});
                }
                if (reduce == HeadReduce::mean) acc /= 2.0;
                CHECK(std::abs(s.data()[n] - acc) <= 1e-12);
            }
        }
    }
}

TEST_CASE("topk_indices selection and ties") {
    std::vector<double> s1 = {0.3, 0.4, 0.2};
    CHECK(topk_indices(std::span<const double>(s1), 1) == std::vector<std::size_t>{1});

    std::vector<double> equal = {0.5, 0.5, 0.5};
    CHECK(topk_indices(std::span<const double>(equal), 2) == std::vector<std::size_t>{0, 1});

    CHECK(topk_indices(std::span<const double>(s1), 3) == std::vector<std::size_t>{0, 1, 2});

    CHECK_THROWS_AS(topk_indices(std::span<const double>(s1), 0), BadK);
    CHECK_THROWS_AS(topk_indices(std::span<const double>(s1), 4), BadK);
}

TEST_CASE("topk positive-scale invariance and determinism") {
    Rng rng(21);
    for (int rep = 0; rep < 40; ++rep) {
        std::vector<double> scores(8);
        for (auto& v : scores) v = rng.uniform();
        const std::size_t k = 1 + rng.uniform_int(8);
        auto base = topk_indices(std::span<const double>(scores), k);
        for (double c : {0.25, 3.0, 1e6}) {
            std::vector<double> scaled = scores;
            for (auto& v : scaled) v *= c;
            CHECK(topk_indices(std::span<const double>(scaled), k) == base);
        }
        CHECK(topk_indices(std::span<const double>(scores), k) == base);
    }
}

TEST_CASE("vision losses: identity, reduction identity, oracle") {
    Rng rng(25);
    const std::size_t nv = 6, dt = 10, ds = 5;

    // identity projector with equal embeddings gives zero
    auto emb = Tensor64::randn({nv, ds}, rng, 1.0);
    auto pid = identity_embed_projector(ds);
    std::vector<std::size_t> all(nv);
    std::iota(all.begin(), all.end(), 0);
    CHECK(vision_focus_loss(emb, emb, all, pid).item() == 0.0);

    // focused loss over the full index set is bitwise the all-token loss
    auto teacher = Tensor64::randn({nv, dt}, rng, 1.0);
    auto student = Tensor64::randn({nv, ds}, rng, 1.0);
    auto p = EmbedProjectorT<double>::init(ds, dt, rng);
    CHECK(vision_focus_loss(teacher, student, all, p).item() ==
          vision_all_loss(teacher, student, p).item());

    // single-token all-loss equals focus with idx = [0]
    auto t1 = Tensor64::randn({1, dt}, rng, 1.0);
    auto s1 = Tensor64::randn({1, ds}, rng, 1.0);
    CHECK(vision_all_loss(t1, s1, p).item() == vision_focus_loss(t1, s1, {0}, p).item());

    CHECK_THROWS_AS(vision_focus_loss(teacher, student, {nv}, p), IndexOutOfRange);
    CHECK_THROWS_AS(vision_focus_loss(teacher, student, {}, p), IndexOutOfRange);

    // gather + project + MSE scalar oracle
    for (int rep = 0; rep < 25; ++rep) {
        auto tr = Tensor64::randn({nv, dt}, rng, 1.0);
        auto sr = Tensor64::randn({nv, ds}, rng, 1.0);
        std::vector<std::size_t> idx = {1, 3, 4};
        const double got = vision_focus_loss(tr, sr, idx, p).item();
        double acc = 0;
        for (std::size_t i : idx) {
            for (std::size_t j = 0; j < ds; ++j) {
                double proj = p.bias.data()[j];
                for (std::size_t q = 0; q < dt; ++q) proj += p.weight.at({j, q}) * tr.at({i, q});
                const double d = proj - sr.at({i, j});
                acc += d * d;
            }
        }
        acc /= static_cast<double>(idx.size() * ds);
        CHECK(std::abs(got - acc) <= 1e-10);
    }
}

TEST_CASE("vision_loss combination") {
    auto la = Tensor64::scalar(1.0);
    auto lf = Tensor64::scalar(2.0);
    CHECK(vision_loss(la, lf, 0.0).item() == 1.0);
    CHECK(vision_loss(la, lf, 0.1).item() == doctest::Approx(1.2).epsilon(1e-12));
    CHECK_THROWS_AS(vision_loss(la, lf, -0.1), NegativeLambda);

    // full index set: L_V = (1 + lambda) * L_V-all
    Rng rng(29);
    auto t = Tensor64::randn({4, 6}, rng, 1.0);
    auto s = Tensor64::randn({4, 3}, rng, 1.0);
    auto p = EmbedProjectorT<double>::init(3, 6, rng);
    auto all_l = vision_all_loss(t, s, p);
    std::vector<std::size_t> full = {0, 1, 2, 3};
    auto focus_l = vision_focus_loss(t, s, full, p);
    CHECK(vision_loss(all_l, focus_l, 0.1).item() ==
          doctest::Approx(1.1 * all_l.item()).epsilon(1e-12));
}

TEST_CASE("rkld wrapper precision policy") {
    Rng rng(33);
    auto x64 = Tensor64::randn({3, 6}, rng, 2.0);
    CHECK(rkld(x64, x64, {1, 1, 1}).item() == 0.0);  // pure math in 64-bit

    // 32-bit: floor-induced slack stays above -1e-9
    auto x32 = Tensor32::zeros({2, 8});
    {
        Rng r2(34);
        for (auto& v : x32.data_mut()) v = static_cast<float>(r2.normal() * 12.0);
    }
    const float v = rkld(x32, x32, {1, 1}).item();
    CHECK(v >= -1e-9f);
    CHECK(std::abs(v) < 1e-6f);
}

TEST_CASE("total_loss arithmetic and validation") {
    auto t = total_loss(Tensor64::scalar(1.0), Tensor64::scalar(0.5), Tensor64::scalar(0.25),
                        Tensor64::scalar(0.25), 0.0, 0.25, {});
    CHECK(t.report.total == 2.0);
    CHECK(t.total.item() == 2.0);

    auto z = total_loss(Tensor64::scalar(0.0), Tensor64::scalar(0.0), Tensor64::scalar(0.0),
                        Tensor64::scalar(0.0), 0.0, 0.0, {});
    CHECK(z.report.total == 0.0);

    CHECK_THROWS_AS(total_loss(Tensor64::scalar(std::nan("")), Tensor64::scalar(0.0),
                               Tensor64::scalar(0.0), Tensor64::scalar(0.0), 0.0, 0.0, {}),
                    NonFiniteComponent);
    CHECK_THROWS_AS(total_loss(Tensor64::scalar(-1.0), Tensor64::scalar(0.0),
                               Tensor64::scalar(0.0), Tensor64::scalar(0.0), 0.0, 0.0, {}),
                    NonFiniteComponent);
}

TEST_CASE("per-term gradients pass grad_check") {
    Rng rng(37);

    SUBCASE("attn_tv_loss") {
        auto teacher = Tensor64::randn({3, 4, 5}, rng, 1.0);
        auto student = Tensor64::randn({2, 4, 5}, rng, 1.0);
        student.set_requires_grad(true);
        auto p = HeadProjectorT<double>::init(2, 3, rng);
        auto f = [&]() { return attn_tv_loss(teacher, student, p); };
        auto r = grad_check(f, {{"student", student}, {"pw", p.weight}, {"pb", p.bias}}, 1e-6,
                            1e-5);
        CHECK(r.pass);
    }

    SUBCASE("vision losses") {
        auto teacher = Tensor64::randn({5, 8}, rng, 1.0);
        auto student = Tensor64::randn({5, 4}, rng, 1.0);
        student.set_requires_grad(true);
        auto p = EmbedProjectorT<double>::init(4, 8, rng);
        auto f = [&]() {
            auto l_all = vision_all_loss(teacher, student, p);
            auto l_focus = vision_focus_loss(teacher, student, {0, 2}, p);
            return vision_loss(l_all, l_focus, 0.1);
        };
        auto r = grad_check(f, {{"student", student}, {"pw", p.weight}, {"pb", p.bias}}, 1e-6,
                            1e-5);
        CHECK(r.pass);
    }

    SUBCASE("rkld on 4-class distributions") {
        auto s = Tensor64::randn({3, 4}, rng, 1.0);
        auto t = Tensor64::randn({3, 4}, rng, 1.0);
        s.set_requires_grad(true);
        auto f = [&]() { return rkld(s, t, {1, 0, 1}); };
        auto r = grad_check(f, {{"s", s}}, 1e-6, 1e-5);
        CHECK(r.pass);
    }
}

TEST_CASE("build_align_losses: baseline, identities, ablation wiring") {
    TinyPair tp;

    Rng prng(41);
    auto p_attn = HeadProjectorT<double>::init(tp.student_cfg.n_heads, tp.teacher_cfg.n_heads,
                                               prng);
    auto p_v = EmbedProjectorT<double>::init(tp.student_cfg.d_model, tp.teacher_cfg.d_model,
                                             prng);

    LossConfig cfg;
    cfg.k = 2;
    cfg.lambda = 0.1;

    TeacherSignalsT<double> teacher_sig;
    {
        NoGradGuard ng;
        auto ttrace = tp.teacher.run(tp.img, tp.text_ids, true);
        teacher_sig = TeacherSignalsT<double>::from_trace(ttrace);
    }

    SUBCASE("all KD toggles off reduces to supervised loss") {
        LossConfig off;
        off.enable_rkld = off.enable_attn_tv = off.enable_v_all = off.enable_v_focus = false;
        auto strace = tp.student.run(tp.img, tp.text_ids, false);
        auto out = build_align_losses<double>(strace, nullptr, nullptr, nullptr, tp.targets,
                                              tp.mask, off);
        CHECK(out.report.total == out.report.l_sup);
        CHECK(out.report.l_attn_tv == 0.0);
        CHECK(out.report.l_v == 0.0);
        CHECK(out.report.l_rkld == 0.0);
    }

    SUBCASE("self-distillation with identity projectors is exactly null") {
        // teacher and student share config and weights
        auto clone_cfg = tp.student_cfg;
        auto a = Vlm64::init(clone_cfg);
        auto b = Vlm64::init(clone_cfg);  // same seed: identical weights
        TeacherSignalsT<double> sig;
        {
            NoGradGuard ng;
            sig = TeacherSignalsT<double>::from_trace(a.run(tp.img, tp.text_ids, false));
        }
        auto strace = b.run(tp.img, tp.text_ids, false);
        auto ip_attn = identity_head_projector(clone_cfg.n_heads);
        auto ip_v = identity_embed_projector(clone_cfg.d_model);
        auto out = build_align_losses<double>(strace, &sig, &ip_attn, &ip_v, tp.targets,
                                              tp.mask, cfg);
        CHECK(out.report.l_attn_tv == 0.0);
        CHECK(out.report.l_v == 0.0);
        CHECK(out.report.l_rkld == 0.0);
        CHECK(out.report.total == out.report.l_sup);
    }

    SUBCASE("report satisfies the arithmetic identities") {
        auto strace = tp.student.run(tp.img, tp.text_ids, false);
        auto out = build_align_losses<double>(strace, &teacher_sig, &p_attn, &p_v, tp.targets,
                                              tp.mask, cfg);
        const auto& r = out.report;
        CHECK(std::abs(r.total - (r.l_sup + r.l_attn_tv + r.l_v + r.l_rkld)) < 1e-6);
        CHECK(std::abs(r.l_v - (r.l_v_all + cfg.lambda * r.l_v_focus)) < 1e-6);
        CHECK(r.l_sup >= 0.0);
        CHECK(r.l_attn_tv >= 0.0);
        CHECK(r.l_v >= 0.0);
        CHECK(r.l_rkld >= -1e-9);
        CHECK(r.focus_indices.size() == cfg.k);
    }

    SUBCASE("k equal to N_v reproduces the all-token loss in the report") {
        LossConfig full = cfg;
        full.k = tp.student_cfg.n_vision_tokens;
        auto strace = tp.student.run(tp.img, tp.text_ids, false);
        auto out = build_align_losses<double>(strace, &teacher_sig, &p_attn, &p_v, tp.targets,
                                              tp.mask, full);
        CHECK(out.report.l_v_focus == out.report.l_v_all);
    }

    SUBCASE("each toggle routes gradients only through enabled terms") {
        struct Combo {
            bool rkld_on, attn_on, vall_on, vfocus_on;
        };
        const Combo combos[] = {
            {false, false, false, false}, {true, false, false, false},
            {false, true, false, false},  {false, false, true, false},
            {false, false, false, true},  {true, true, true, true},
        };
        for (const auto& combo : combos) {
            LossConfig c = cfg;
            c.enable_rkld = combo.rkld_on;
            c.enable_attn_tv = combo.attn_on;
            c.enable_v_all = combo.vall_on;
            c.enable_v_focus = combo.vfocus_on;
            p_attn.weight.zero_grad();
            p_attn.bias.zero_grad();
            p_v.weight.zero_grad();
            p_v.bias.zero_grad();
            auto strace = tp.student.run(tp.img, tp.text_ids, c.needs_last_attention());
            auto out = build_align_losses<double>(strace, &teacher_sig, &p_attn, &p_v,
                                                  tp.targets, tp.mask, c);
            backward(out.total);
            auto grad_norm = [](const Tensor64& t) {
                double s = 0;
                if (t.has_grad()) {
                    for (double g : t.grad()) s += g * g;
                }
                return s;
            };
            const double attn_g = grad_norm(p_attn.weight) + grad_norm(p_attn.bias);
            const double v_g = grad_norm(p_v.weight) + grad_norm(p_v.bias);
            if (combo.attn_on) {
                CHECK(attn_g > 0.0);
            } else {
                CHECK(attn_g == 0.0);
            }
            if (combo.vall_on || combo.vfocus_on) {
                CHECK(v_g > 0.0);
            } else {
                CHECK(v_g == 0.0);
            }
        }
    }

    SUBCASE("every attention block variant constructs and routes gradients") {
        for (AttnBlock block : {AttnBlock::tv, AttnBlock::vv, AttnBlock::tt, AttnBlock::all,
                                AttnBlock::all_plus_last}) {
            LossConfig c = cfg;
            c.attn_block = block;
            const bool need_last = c.needs_last_attention();
            TeacherSignalsT<double> sig;
            {
                NoGradGuard ng;
                sig = TeacherSignalsT<double>::from_trace(
                    tp.teacher.run(tp.img, tp.text_ids, need_last));
            }
            p_attn.weight.zero_grad();
            p_attn.bias.zero_grad();
            auto strace = tp.student.run(tp.img, tp.text_ids, need_last);
            auto out = build_align_losses<double>(strace, &sig, &p_attn, &p_v, tp.targets,
                                                  tp.mask, c);
            CHECK(std::isfinite(out.report.total));
            backward(out.total);
            double g = 0;
            for (double v : p_attn.weight.grad()) g += v * v;
            CHECK(g > 0.0);
        }
    }
}

TEST_CASE("full composite objective passes grad_check on the tiny pair") {
    TinyPair tp;
    Rng prng(43);
    auto p_attn = HeadProjectorT<double>::init(tp.student_cfg.n_heads, tp.teacher_cfg.n_heads,
                                               prng);
    auto p_v = EmbedProjectorT<double>::init(tp.student_cfg.d_model, tp.teacher_cfg.d_model,
                                             prng);
    LossConfig cfg;
    cfg.k = 2;

    TeacherSignalsT<double> sig;
    {
        NoGradGuard ng;
        sig = TeacherSignalsT<double>::from_trace(tp.teacher.run(tp.img, tp.text_ids, false));
    }

    auto f = [&]() {
        auto strace = tp.student.run(tp.img, tp.text_ids, false);
        return build_align_losses<double>(strace, &sig, &p_attn, &p_v, tp.targets, tp.mask, cfg)
            .total;
    };

    // A subset of student parameters keeps the check fast; the acceptance
    // suite runs the exhaustive version.
    std::vector<GradCheckParam> params;
    for (auto& [name, t] : tp.student.trainable_params()) {
        if (name == "vproj.w" || name == "layer0.attn.wq" || name == "layer1.ffn.w2" ||
            name == "lnf.g") {
            params.push_back({name, t});
        }
    }
    params.push_back({"p_attn.w", p_attn.weight});
    params.push_back({"p_v.w", p_v.weight});
    auto r = grad_check(f, params, 1e-6, 1e-4);
    CHECK(r.pass);
}
