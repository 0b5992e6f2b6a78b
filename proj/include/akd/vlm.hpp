#pragma once

#include <optional>
#include <string>
#include <vector>

#include "akd/checkpoint.hpp"
#include "akd/tensor.hpp"

namespace akd {

struct VlmConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 4;
    std::size_t vocab_size = 256;
    std::size_t patch_rows = 8;
    std::size_t patch_cols = 8;
    std::size_t d_patch = 16;
    std::size_t n_vision_tokens = 16;
    std::size_t max_text_tokens = 32;
    std::uint64_t seed = 1;

    std::size_t n_patches() const { return patch_rows * patch_cols; }
    std::size_t head_dim() const { return d_model / n_heads; }
    void validate() const;

    std::map<std::string, std::string> to_header() const;
    static VlmConfig from_header(const std::map<std::string, std::string>& header);
};

// Stand-in for a frozen vision encoder's output: one feature vector per patch.
struct ToyImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t d_patch = 0;
    std::vector<double> patch_features;  // [rows*cols, d_patch] row-major
};

template <class T>
struct ForwardTraceT {
    std::vector<TensorT<T>> hidden;  // n_layers + 1 entries
    TensorT<T> attn_first;           // [n_heads, L, L] post-softmax
    TensorT<T> attn_last;            // defined only when captured
    TensorT<T> logits;               // [L, vocab]
    std::size_t n_vision = 0;
    std::size_t n_text = 0;

    std::size_t total_len() const { return n_vision + n_text; }
};

template <class T>
struct AttentionLayerT {
    TensorT<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct LayerParamsT {
    TensorT<T> ln1_g, ln1_b;
    AttentionLayerT<T> attn;
    TensorT<T> ln2_g, ln2_b;
    TensorT<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Decoder-only causal transformer over concatenated [vision, text] tokens.
// The patch embedder and token table are frozen; the vision projector and
// transformer stack train. The output head is tied to the frozen token table.
template <class T>
class VlmT {
public:
    static VlmT init(const VlmConfig& cfg);

    const VlmConfig& config() const { return cfg_; }

    // Frozen linear patch embedding plus fixed positional offsets.
    TensorT<T> embed_image(const ToyImage& img) const;
    // Trainable: average-pool patch groups, then linear map into d_model.
    TensorT<T> project_vision(const TensorT<T>& patches) const;
    // Frozen table lookup plus fixed positional offsets.
    TensorT<T> embed_text(const std::vector<int>& token_ids) const;

    ForwardTraceT<T> forward(const TensorT<T>& vision_tokens, const TensorT<T>& text_emb,
                             bool capture_last = false) const;
    // Convenience: embed + project + forward.
    ForwardTraceT<T> run(const ToyImage& img, const std::vector<int>& token_ids,
                         bool capture_last = false) const;

    std::vector<int> generate_greedy(const ToyImage& img, const std::vector<int>& prompt_ids,
                                     std::size_t max_new, int eos_id) const;

    // Trainable parameters in fixed order; names starting with "vproj." form
    // the projector learning-rate group.
    std::vector<std::pair<std::string, TensorT<T>>> trainable_params();
    std::vector<std::pair<std::string, TensorT<T>>> frozen_params();

    Archive to_archive() const;
    static VlmT from_archive(const Archive& archive);

    // Frozen tables, exposed for tests.
    const TensorT<T>& patch_pos() const { return patch_pos_; }
    const TensorT<T>& token_table() const { return table_; }

private:
    VlmConfig cfg_;
    // frozen
    TensorT<T> patch_w_;    // [d_patch, d_patch]
    TensorT<T> patch_pos_;  // [n_patches, d_patch]
    TensorT<T> table_;      // [vocab, d_model]
    TensorT<T> text_pos_;   // [max_text_tokens, d_model]
    // trainable
    TensorT<T> vproj_w_;  // [d_patch, d_model]
    TensorT<T> vproj_b_;  // [d_model]
    std::vector<LayerParamsT<T>> layers_;
    TensorT<T> lnf_g_, lnf_b_;
};

using Vlm32 = VlmT<float>;
using Vlm64 = VlmT<double>;

// Sinusoidal position table rows [positions, width] with amplitude `amp`;
// row p encodes absolute position first_pos + p.
template <class T>
TensorT<T> sinusoidal_table(std::size_t positions, std::size_t width, std::size_t first_pos,
                            double amp);

}  // namespace akd
