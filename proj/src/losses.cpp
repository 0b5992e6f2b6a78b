#include "akd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "akd/errors.hpp"

namespace akd {

namespace {

template <class T>
constexpr double rkld_floor() {
    return sizeof(T) == 4 ? 1e-8 : 0.0;
}

template <class TScalar>
std::vector<std::size_t> topk_impl(std::span<const TScalar> scores, std::size_t k) {
    const std::size_t n = scores.size();
    if (k == 0 || k > n) {
        throw BadK("k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace

AttnBlock attn_block_from_string(const std::string& s) {
    if (s == "tv") return AttnBlock::tv;
    if (s == "vv") return AttnBlock::vv;
    if (s == "tt") return AttnBlock::tt;
    if (s == "all") return AttnBlock::all;
    if (s == "all_plus_last") return AttnBlock::all_plus_last;
    throw ConfigError("unknown attn_block '" + s + "'");
}

std::string to_string(AttnBlock b) {
    switch (b) {
        case AttnBlock::tv: return "tv";
        case AttnBlock::vv: return "vv";
        case AttnBlock::tt: return "tt";
        case AttnBlock::all: return "all";
        case AttnBlock::all_plus_last: return "all_plus_last";
    }
    return "?";
}

HeadReduce head_reduce_from_string(const std::string& s) {
    if (s == "mean") return HeadReduce::mean;
    if (s == "sum") return HeadReduce::sum;
    throw ConfigError("unknown focus_head_reduce '" + s + "'");
}

std::string to_string(HeadReduce r) { return r == HeadReduce::mean ? "mean" : "sum"; }

template <class T>
HeadProjectorT<T> HeadProjectorT<T>::init(std::size_t h_student, std::size_t h_teacher,
                                          Rng& rng) {
    HeadProjectorT<T> p;
    p.weight = TensorT<T>::randn({h_student, h_teacher}, rng,
                                 1.0 / std::sqrt(static_cast<double>(h_teacher)));
    p.weight.set_requires_grad(true);
    p.bias = TensorT<T>::zeros({h_student});
    p.bias.set_requires_grad(true);
    return p;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> HeadProjectorT<T>::params() {
    return {{"p_attn.w", weight}, {"p_attn.b", bias}};
}

template <class T>
EmbedProjectorT<T> EmbedProjectorT<T>::init(std::size_t d_student, std::size_t d_teacher,
                                            Rng& rng) {
    EmbedProjectorT<T> p;
    p.weight = TensorT<T>::randn({d_student, d_teacher}, rng,
                                 1.0 / std::sqrt(static_cast<double>(d_teacher)));
    p.weight.set_requires_grad(true);
    p.bias = TensorT<T>::zeros({d_student});
    p.bias.set_requires_grad(true);
    return p;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> EmbedProjectorT<T>::params() {
    return {{"p_v.w", weight}, {"p_v.b", bias}};
}

template <class T>
AttentionSplitT<T> split_attention(const TensorT<T>& attn, std::size_t n_vision) {
    const auto& s = attn.shape();
    if (s.size() != 3 || s[1] != s[2]) {
        throw ShapeMismatch("split_attention expects [H, L, L]");
    }
    const std::size_t L = s[1];
    if (n_vision == 0 || n_vision >= L) {
        throw BadPartition("n_vision=" + std::to_string(n_vision) + " outside (0, " +
                           std::to_string(L) + ")");
    }
    const auto data = attn.data();
    for (std::size_t h = 0; h < s[0]; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
            for (std::size_t j = i + 1; j < L; ++j) {
                if (data[(h * L + i) * L + j] != T(0)) {
                    throw NotCausal("nonzero above the diagonal at head " + std::to_string(h) +
                                    " row " + std::to_string(i));
                }
            }
        }
    }
    AttentionSplitT<T> split;
    split.a_vv = block3(attn, 0, n_vision, 0, n_vision);
    split.a_tv = block3(attn, n_vision, L, 0, n_vision);
    split.a_tt = block3(attn, n_vision, L, n_vision, L);
    return split;
}

template <class T>
TensorT<T> reassemble_attention(const AttentionSplitT<T>& split) {
    const std::size_t H = split.a_vv.shape()[0];
    const std::size_t nv = split.a_vv.shape()[1];
    const std::size_t nt = split.a_tt.shape()[1];
    const std::size_t L = nv + nt;
    auto out = TensorT<T>::zeros({H, L, L});
    auto d = out.data_mut();
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < nv; ++i) {
            for (std::size_t j = 0; j < nv; ++j) {
                d[(h * L + i) * L + j] = split.a_vv.at({h, i, j});
            }
        }
        for (std::size_t i = 0; i < nt; ++i) {
            for (std::size_t j = 0; j < nv; ++j) {
                d[(h * L + nv + i) * L + j] = split.a_tv.at({h, i, j});
            }
            for (std::size_t j = 0; j < nt; ++j) {
                d[(h * L + nv + i) * L + nv + j] = split.a_tt.at({h, i, j});
            }
        }
    }
    return out;
}

template <class T>
TensorT<T> attn_tv_loss(const TensorT<T>& teacher_block, const TensorT<T>& student_block,
                        HeadProjectorT<T>& p) {
    const auto& ts = teacher_block.shape();
    const auto& ss = student_block.shape();
    if (ts.size() != 3 || ss.size() != 3) throw ShapeMismatch("attention blocks must be rank 3");
    if (ts[1] != ss[1] || ts[2] != ss[2]) {
        throw ShapeMismatch("attention block grids differ between teacher and student");
    }
    const std::size_t ht = ts[0];
    const std::size_t hs = ss[0];
    if (p.weight.shape() != std::vector<std::size_t>{hs, ht}) {
        throw ShapeMismatch("head projector shape does not match head counts");
    }
    const std::size_t cells = ts[1] * ts[2];
    // out[h_s, t, v] = sum_{h_t} w[h_s, h_t] * teacher[h_t, t, v] + b[h_s]
    auto flat = reshape(teacher_block, {ht, cells});
    auto projected = add(matmul(p.weight, flat), reshape(p.bias, {hs, 1}));
    return mse(reshape(projected, {hs, ts[1], ts[2]}), student_block);
}

template <class T>
TensorT<T> focus_scores(const TensorT<T>& teacher_tv, HeadReduce reduce) {
    const auto& s = teacher_tv.shape();
    if (s.size() != 3) throw ShapeMismatch("focus_scores expects [H, N_t, N_v]");
    const std::size_t H = s[0], nt = s[1], nv = s[2];
    const auto d = teacher_tv.data();
    for (T v : d) {
        if (v < T(0)) throw NegativeAttention("negative attention value in focus_scores");
    }
    std::vector<T> scores(nv, T(0));
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t m = 0; m < nt; ++m) {
            const T* row = d.data() + (h * nt + m) * nv;
            for (std::size_t n = 0; n < nv; ++n) scores[n] += row[n];
        }
    }
    if (reduce == HeadReduce::mean) {
        const T inv = T(1) / static_cast<T>(H);
        for (auto& v : scores) v *= inv;
    }
    return TensorT<T>::from_data({nv}, std::move(scores));
}

std::vector<std::size_t> topk_indices(std::span<const float> scores, std::size_t k) {
    return topk_impl(scores, k);
}
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
    return topk_impl(scores, k);
}

template <class T>
TensorT<T> vision_focus_loss(const TensorT<T>& teacher_emb, const TensorT<T>& student_emb,
                             const std::vector<std::size_t>& idx, EmbedProjectorT<T>& p) {
    const auto& ts = teacher_emb.shape();
    const auto& ss = student_emb.shape();
    if (ts.size() != 2 || ss.size() != 2) throw ShapeMismatch("embeddings must be [N_v, d]");
    if (ts[0] != ss[0]) throw ShapeMismatch("vision token counts differ");
    if (idx.empty()) throw IndexOutOfRange("empty focus index list");
    for (std::size_t i : idx) {
        if (i >= ts[0]) {
            throw IndexOutOfRange("focus index " + std::to_string(i) + " >= " +
                                  std::to_string(ts[0]));
        }
    }
    auto t_sel = gather_rows(teacher_emb, idx);
    auto s_sel = gather_rows(student_emb, idx);
    auto projected = add(matmul(t_sel, permute(p.weight, {1, 0})), p.bias);
    return mse(projected, s_sel);
}

template <class T>
TensorT<T> vision_all_loss(const TensorT<T>& teacher_emb, const TensorT<T>& student_emb,
                           EmbedProjectorT<T>& p) {
    if (teacher_emb.shape().empty()) throw ShapeMismatch("empty teacher embeddings");
    std::vector<std::size_t> all(teacher_emb.shape()[0]);
    std::iota(all.begin(), all.end(), 0);
    // Same evaluation path as the focused loss so the k == N_v reduction
    // identity holds bit-for-bit.
    return vision_focus_loss(teacher_emb, student_emb, all, p);
}

template <class T>
TensorT<T> vision_loss(const TensorT<T>& l_all, const TensorT<T>& l_focus, double lambda) {
    if (lambda < 0.0) throw NegativeLambda("lambda must be >= 0");
    return add(l_all, scale(l_focus, lambda));
}

template <class T>
TensorT<T> rkld(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                const std::vector<std::uint8_t>& mask) {
    return rkld_rows(student_logits, teacher_logits, mask, rkld_floor<T>());
}

template <class T>
TotalLossT<T> total_loss(const TensorT<T>& l_sup, const TensorT<T>& l_attn_tv,
                         const TensorT<T>& l_v, const TensorT<T>& l_rkld,
                         double l_v_focus, double l_v_all,
                         std::vector<std::size_t> focus_indices) {
    auto check = [](const char* name, double v) {
        // Small negative slack tolerated: the rkld probability floor can pull
        // an exact zero a hair below it in 32-bit mode.
        if (!std::isfinite(v) || v < -1e-9) {
            throw NonFiniteComponent(std::string(name) + " = " + std::to_string(v));
        }
    };
    TotalLossT<T> out;
    out.report.l_sup = static_cast<double>(l_sup.item());
    out.report.l_attn_tv = static_cast<double>(l_attn_tv.item());
    out.report.l_v = static_cast<double>(l_v.item());
    out.report.l_rkld = static_cast<double>(l_rkld.item());
    out.report.l_v_focus = l_v_focus;
    out.report.l_v_all = l_v_all;
    check("l_sup", out.report.l_sup);
    check("l_attn_tv", out.report.l_attn_tv);
    check("l_v", out.report.l_v);
    check("l_rkld", out.report.l_rkld);
    out.report.focus_indices = std::move(focus_indices);
    out.total = add(add(add(l_sup, l_attn_tv), l_v), l_rkld);
    out.report.total = static_cast<double>(out.total.item());
    return out;
}

template <class T>
TeacherSignalsT<T> TeacherSignalsT<T>::from_trace(const ForwardTraceT<T>& trace) {
    TeacherSignalsT<T> sig;
    sig.attn_first = trace.attn_first;
    sig.attn_last = trace.attn_last;
    auto split = split_attention(trace.attn_first, trace.n_vision);
    sig.a_tv = split.a_tv;
    sig.vision_emb = slice_rows(trace.hidden[0], 0, trace.n_vision);
    sig.text_logits = slice_rows(trace.logits, trace.n_vision, trace.total_len());
    return sig;
}

template <class T>
TotalLossT<T> build_align_losses(const ForwardTraceT<T>& student_trace,
                                 const TeacherSignalsT<T>* teacher,
                                 HeadProjectorT<T>* p_attn, EmbedProjectorT<T>* p_v,
                                 const std::vector<int>& text_targets,
                                 const std::vector<std::uint8_t>& text_loss_mask,
                                 const LossConfig& cfg) {
    const std::size_t n_vision = student_trace.n_vision;
    const std::size_t L = student_trace.total_len();
    auto student_text_logits = slice_rows(student_trace.logits, n_vision, L);

    auto l_sup = cross_entropy_masked(student_text_logits, text_targets, text_loss_mask);

    auto zero = TensorT<T>::scalar(T(0));
    auto l_attn = zero;
    auto l_rkld_t = zero;
    auto l_v = zero;
    double v_focus_val = 0.0, v_all_val = 0.0;
    std::vector<std::size_t> focus_idx;

    if (cfg.any_kd() && teacher == nullptr) {
        throw ConfigError("KD losses enabled but no teacher signals provided");
    }

    if (cfg.enable_attn_tv) {
        if (!p_attn) throw ConfigError("attention loss enabled without a head projector");
        auto student_split = split_attention(student_trace.attn_first, n_vision);
        switch (cfg.attn_block) {
            case AttnBlock::tv:
                l_attn = attn_tv_loss(teacher->a_tv, student_split.a_tv, *p_attn);
                break;
            case AttnBlock::vv: {
                if (!teacher->attn_first.defined()) {
                    throw ConfigError("attn_block=vv requires live teacher attention");
                }
                auto tsplit = split_attention(teacher->attn_first, n_vision);
                l_attn = attn_tv_loss(tsplit.a_vv, student_split.a_vv, *p_attn);
                break;
            }
            case AttnBlock::tt: {
                if (!teacher->attn_first.defined()) {
                    throw ConfigError("attn_block=tt requires live teacher attention");
                }
                auto tsplit = split_attention(teacher->attn_first, n_vision);
                l_attn = attn_tv_loss(tsplit.a_tt, student_split.a_tt, *p_attn);
                break;
            }
            case AttnBlock::all:
                if (!teacher->attn_first.defined()) {
                    throw ConfigError("attn_block=all requires live teacher attention");
                }
                l_attn = attn_tv_loss(teacher->attn_first, student_trace.attn_first, *p_attn);
                break;
            case AttnBlock::all_plus_last: {
                if (!teacher->attn_last.defined() || !student_trace.attn_last.defined()) {
                    throw ConfigError("attn_block=all_plus_last requires captured last layers");
                }
                auto first = attn_tv_loss(teacher->a_tv, student_split.a_tv, *p_attn);
                auto last =
                    attn_tv_loss(teacher->attn_last, student_trace.attn_last, *p_attn);
                l_attn = add(first, last);
                break;
            }
        }
    }

    if (cfg.enable_v_all || cfg.enable_v_focus) {
        if (!p_v) throw ConfigError("vision loss enabled without an embed projector");
        auto student_vision = slice_rows(student_trace.hidden[0], 0, n_vision);
        TensorT<T> l_all = zero;
        TensorT<T> l_focus = zero;
        if (cfg.enable_v_all) {
            l_all = vision_all_loss(teacher->vision_emb, student_vision, *p_v);
            v_all_val = static_cast<double>(l_all.item());
        }
        if (cfg.enable_v_focus) {
            auto scores = focus_scores(teacher->a_tv, cfg.focus_head_reduce);
            focus_idx = topk_indices(scores.data(), cfg.k);
            l_focus = vision_focus_loss(teacher->vision_emb, student_vision, focus_idx, *p_v);
            v_focus_val = static_cast<double>(l_focus.item());
        }
        l_v = vision_loss(l_all, l_focus, cfg.lambda);
    }

    if (cfg.enable_rkld) {
        l_rkld_t = rkld(student_text_logits, teacher->text_logits, text_loss_mask);
    }

    return total_loss(l_sup, l_attn, l_v, l_rkld_t, v_focus_val, v_all_val,
                      std::move(focus_idx));
}

// ---- explicit instantiations ----------------------------------------------------

#define AKD_INSTANTIATE_LOSSES(T)                                                          \
    template struct HeadProjectorT<T>;                                                     \
    template struct EmbedProjectorT<T>;                                                    \
    template struct TeacherSignalsT<T>;                                                    \
    template AttentionSplitT<T> split_attention(const TensorT<T>&, std::size_t);           \
    template TensorT<T> reassemble_attention(const AttentionSplitT<T>&);                   \
    template TensorT<T> attn_tv_loss(const TensorT<T>&, const TensorT<T>&,                 \
                                     HeadProjectorT<T>&);                                  \
    template TensorT<T> focus_scores(const TensorT<T>&, HeadReduce);                       \
    template TensorT<T> vision_focus_loss(const TensorT<T>&, const TensorT<T>&,            \
                                          const std::vector<std::size_t>&,                 \
                                          EmbedProjectorT<T>&);                            \
    template TensorT<T> vision_all_loss(const TensorT<T>&, const TensorT<T>&,              \
                                        EmbedProjectorT<T>&);                              \
    template TensorT<T> vision_loss(const TensorT<T>&, const TensorT<T>&, double);         \
    template TensorT<T> rkld(const TensorT<T>&, const TensorT<T>&,                         \
                             const std::vector<std::uint8_t>&);                            \
    template TotalLossT<T> total_loss(const TensorT<T>&, const TensorT<T>&,                \
                                      const TensorT<T>&, const TensorT<T>&, double,        \
                                      double, std::vector<std::size_t>);                   \
    template TotalLossT<T> build_align_losses(                                             \
        const ForwardTraceT<T>&, const TeacherSignalsT<T>*, HeadProjectorT<T>*,            \
        EmbedProjectorT<T>*, const std::vector<int>&, const std::vector<std::uint8_t>&,    \
        const LossConfig&)

AKD_INSTANTIATE_LOSSES(float);
AKD_INSTANTIATE_LOSSES(double);

#undef AKD_INSTANTIATE_LOSSES

}  // namespace akd
