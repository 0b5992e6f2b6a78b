#include "akd/gradcheck_suite.hpp"

#include "akd/data.hpp"
#include "akd/losses.hpp"
#include "akd/vlm.hpp"

namespace akd {

namespace {

VlmConfig suite_config(bool is_teacher) {
    VlmConfig cfg;
    cfg.vocab_size = 64;
    cfg.patch_rows = 2;
    cfg.patch_cols = 2;
    cfg.d_patch = 16;
    cfg.n_vision_tokens = 2;
    cfg.max_text_tokens = 10;
    if (is_teacher) {
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.n_layers = 3;
        cfg.seed = 31;
    } else {
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.n_layers = 2;
        cfg.seed = 32;
    }
    return cfg;
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite(double step, double tolerance) {
    auto teacher = Vlm64::init(suite_config(true));
    auto student = Vlm64::init(suite_config(false));
    const auto& tcfg = teacher.config();
    const auto& scfg = student.config();

    Rng rng(101);
    ToyImage img;
    img.rows = scfg.patch_rows;
    img.cols = scfg.patch_cols;
    img.d_patch = scfg.d_patch;
    img.patch_features.resize(scfg.n_patches() * scfg.d_patch);
    for (auto& v : img.patch_features) v = rng.normal();
    const std::vector<int> prompt = {50, 51, 53};
    const std::vector<int> response = {12, 21, 2};
    auto tf = teacher_forcing(prompt, response);

    TeacherSignalsT<double> sig;
    {
        NoGradGuard ng;
        sig = TeacherSignalsT<double>::from_trace(teacher.run(img, tf.text_ids, false));
    }

    auto run_term = [&](const std::string& name, const std::function<Tensor64()>& f,
                        std::vector<GradCheckParam> params) {
        GradCheckRow row;
        row.term = name;
        auto r = grad_check(f, std::move(params), step, tolerance);
        row.checked = r.checked;
        row.max_rel_err = r.max_rel_err;
        row.pass = r.pass;
        return row;
    };

    std::vector<GradCheckRow> rows;
    Rng prng(103);
    auto p_attn = HeadProjectorT<double>::init(scfg.n_heads, tcfg.n_heads, prng);
    auto p_v = EmbedProjectorT<double>::init(scfg.d_model, tcfg.d_model, prng);

    {
        auto student_tv = Tensor64::randn({scfg.n_heads, 4, 3}, prng, 0.3);
        student_tv.set_requires_grad(true);
        auto teacher_tv = Tensor64::randn({tcfg.n_heads, 4, 3}, prng, 0.3);
        rows.push_back(run_term(
            "attn_tv_loss", [&]() { return attn_tv_loss(teacher_tv, student_tv, p_attn); },
            {{"student_tv", student_tv}, {"p_attn.w", p_attn.weight}, {"p_attn.b", p_attn.bias}}));
    }
    {
        auto t_emb = Tensor64::randn({scfg.n_vision_tokens, tcfg.d_model}, prng, 1.0);
        auto s_emb = Tensor64::randn({scfg.n_vision_tokens, scfg.d_model}, prng, 1.0);
        s_emb.set_requires_grad(true);
        rows.push_back(run_term(
            "vision_focus_loss",
            [&]() { return vision_focus_loss(t_emb, s_emb, {0}, p_v); },
            {{"student_emb", s_emb}, {"p_v.w", p_v.weight}, {"p_v.b", p_v.bias}}));
        rows.push_back(run_term(
            "vision_all_loss", [&]() { return vision_all_loss(t_emb, s_emb, p_v); },
            {{"student_emb", s_emb}, {"p_v.w", p_v.weight}, {"p_v.b", p_v.bias}}));
        rows.push_back(run_term(
            "vision_loss",
            [&]() {
                return vision_loss(vision_all_loss(t_emb, s_emb, p_v),
                                   vision_focus_loss(t_emb, s_emb, {0, 1}, p_v), 0.1);
            },
            {{"student_emb", s_emb}, {"p_v.w", p_v.weight}, {"p_v.b", p_v.bias}}));
    }
    {
        auto s_logits = Tensor64::randn({4, 8}, prng, 1.0);
        auto t_logits = Tensor64::randn({4, 8}, prng, 1.0);
        s_logits.set_requires_grad(true);
        std::vector<std::uint8_t> mask = {1, 0, 1, 1};
        rows.push_back(run_term(
            "rkld", [&]() { return rkld(s_logits, t_logits, mask); },
            {{"student_logits", s_logits}}));
        std::vector<int> targets = {1, 2, 3, 4};
        rows.push_back(run_term(
            "cross_entropy",
            [&]() { return cross_entropy_masked(s_logits, targets, mask); },
            {{"student_logits", s_logits}}));
    }
    {
        LossConfig lcfg;
        lcfg.k = scfg.n_vision_tokens;
        auto f = [&]() {
            auto strace = student.run(img, tf.text_ids, false);
            return build_align_losses<double>(strace, &sig, &p_attn, &p_v, tf.targets, tf.mask,
                                              lcfg)
                .total;
        };
        std::vector<GradCheckParam> params;
        for (auto& [name, t] : student.trainable_params()) params.push_back({name, t});
        params.push_back({"p_attn.w", p_attn.weight});
        params.push_back({"p_attn.b", p_attn.bias});
        params.push_back({"p_v.w", p_v.weight});
        params.push_back({"p_v.b", p_v.bias});
        rows.push_back(run_term("total_objective", f, std::move(params)));
    }
    return rows;
}

}  // namespace akd
