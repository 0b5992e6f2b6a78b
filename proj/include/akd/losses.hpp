#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "akd/tensor.hpp"
#include "akd/vlm.hpp"

namespace akd {

// The three lower-triangular-region blocks of a causal attention matrix whose
// sequence layout is [vision tokens ; text tokens].
template <class T>
struct AttentionSplitT {
    TensorT<T> a_vv;  // [H, N_v, N_v]
    TensorT<T> a_tv;  // [H, N_t, N_v]
    TensorT<T> a_tt;  // [H, N_t, N_t]
};

// 1x1 convolution over the head channel: teacher heads -> student heads.
template <class T>
struct HeadProjectorT {
    TensorT<T> weight;  // [H_student, H_teacher]
    TensorT<T> bias;    // [H_student]

    static HeadProjectorT init(std::size_t h_student, std::size_t h_teacher, Rng& rng);
    std::vector<std::pair<std::string, TensorT<T>>> params();
};

// 1x1 convolution over the embedding channel: teacher width -> student width.
template <class T>
struct EmbedProjectorT {
    TensorT<T> weight;  // [d_student, d_teacher]
    TensorT<T> bias;    // [d_student]

    static EmbedProjectorT init(std::size_t d_student, std::size_t d_teacher, Rng& rng);
    std::vector<std::pair<std::string, TensorT<T>>> params();
};

enum class AttnBlock { tv, vv, tt, all, all_plus_last };
enum class HeadReduce { mean, sum };

AttnBlock attn_block_from_string(const std::string& s);
std::string to_string(AttnBlock b);
HeadReduce head_reduce_from_string(const std::string& s);
std::string to_string(HeadReduce r);

struct LossConfig {
    bool enable_rkld = true;
    bool enable_attn_tv = true;
    bool enable_v_all = true;
    bool enable_v_focus = true;
    AttnBlock attn_block = AttnBlock::tv;
    HeadReduce focus_head_reduce = HeadReduce::mean;
    double lambda = 0.1;
    std::size_t k = 16;

    bool any_kd() const { return enable_rkld || enable_attn_tv || enable_v_all || enable_v_focus; }
    bool needs_last_attention() const {
        return enable_attn_tv && attn_block == AttnBlock::all_plus_last;
    }
};

struct LossReport {
    double l_sup = 0.0;
    double l_attn_tv = 0.0;
    double l_v_focus = 0.0;
    double l_v_all = 0.0;
    double l_v = 0.0;
    double l_rkld = 0.0;
    double total = 0.0;
    std::vector<std::size_t> focus_indices;
};

// ---- loss operations ---------------------------------------------------------

// Requires an exactly causal input; returns views of the three blocks.
template <class T>
AttentionSplitT<T> split_attention(const TensorT<T>& attn, std::size_t n_vision);

// Reassemble a split into the full [H, L, L] matrix (test/oracle helper).
template <class T>
TensorT<T> reassemble_attention(const AttentionSplitT<T>& split);

// Head-channel projection of the teacher block followed by element-mean MSE
// against the student block. Works on any [H, R, C] attention block pair.
template <class T>
TensorT<T> attn_tv_loss(const TensorT<T>& teacher_block, const TensorT<T>& student_block,
                        HeadProjectorT<T>& p);

// Per vision token: attention mass received from all text queries, reduced
// over teacher heads.
template <class T>
TensorT<T> focus_scores(const TensorT<T>& teacher_tv, HeadReduce reduce = HeadReduce::mean);

// Indices of the k largest scores; ties break toward the lower index; result
// sorted ascending.
std::vector<std::size_t> topk_indices(std::span<const float> scores, std::size_t k);
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

template <class T>
TensorT<T> vision_focus_loss(const TensorT<T>& teacher_emb, const TensorT<T>& student_emb,
                             const std::vector<std::size_t>& idx, EmbedProjectorT<T>& p);

template <class T>
TensorT<T> vision_all_loss(const TensorT<T>& teacher_emb, const TensorT<T>& student_emb,
                           EmbedProjectorT<T>& p);

template <class T>
TensorT<T> vision_loss(const TensorT<T>& l_all, const TensorT<T>& l_focus, double lambda);

// Reverse KLD over response rows; probability floor applied in 32-bit mode
// only (pure math in 64-bit).
template <class T>
TensorT<T> rkld(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                const std::vector<std::uint8_t>& mask);

template <class T>
struct TotalLossT {
    LossReport report;
    TensorT<T> total;
};

template <class T>
TotalLossT<T> total_loss(const TensorT<T>& l_sup, const TensorT<T>& l_attn_tv,
                         const TensorT<T>& l_v, const TensorT<T>& l_rkld,
                         double l_v_focus, double l_v_all,
                         std::vector<std::size_t> focus_indices);

// ---- distillation orchestration ------------------------------------------------

// Everything the enabled loss terms can consume from a teacher. Live traces
// fill all fields; the on-disk cache carries only a_tv, vision_emb and
// text_logits (sufficient for the default tv configuration).
template <class T>
struct TeacherSignalsT {
    TensorT<T> attn_first;   // [H_T, L, L]
    TensorT<T> attn_last;    // [H_T, L, L], only when captured
    TensorT<T> a_tv;         // [H_T, N_t, N_v]
    TensorT<T> vision_emb;   // [N_v, d_T]
    TensorT<T> text_logits;  // [N_t, V]

    static TeacherSignalsT from_trace(const ForwardTraceT<T>& trace);
};

template <class T>
TotalLossT<T> build_align_losses(const ForwardTraceT<T>& student_trace,
                                 const TeacherSignalsT<T>* teacher,
                                 HeadProjectorT<T>* p_attn, EmbedProjectorT<T>* p_v,
                                 const std::vector<int>& text_targets,
                                 const std::vector<std::uint8_t>& text_loss_mask,
                                 const LossConfig& cfg);

}  // namespace akd
