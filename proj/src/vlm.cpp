#include "akd/vlm.hpp"

#include <cmath>

#include "akd/errors.hpp"

namespace akd {

namespace {

// Seeds for pathways shared between teacher and student. Both models draw the
// same streams so token positions correspond one-to-one.
constexpr std::uint64_t kPatchEmbedSeed = 0xF0;
constexpr std::uint64_t kTokenTableSeed = 0xF1;
constexpr double kPosAmplitude = 0.1;
constexpr double kLayerNormEps = 1e-5;

template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta) {
    const double inv_n = 1.0 / static_cast<double>(x.shape().back());
    auto mu = scale(row_sum(x), inv_n);
    auto xc = sub(x, mu);
    auto var = scale(row_sum(mul(xc, xc)), inv_n);
    auto denom = sqrt(add_scalar(var, kLayerNormEps));
    return add(mul(div(xc, denom), gamma), beta);
}

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    auto x3 = mul(mul(x, x), x);
    auto inner = scale(add(x, scale(x3, 0.044715)), 0.7978845608028654);
    return mul(scale(x, 0.5), add_scalar(tanh(inner), 1.0));
}

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    return add(matmul(x, w), b);
}

}  // namespace

void VlmConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw ConfigError("d_model must be a positive multiple of n_heads");
    }
    if (n_layers < 2) throw ConfigError("n_layers must be >= 2");
    if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
    if (patch_rows == 0 || patch_cols == 0 || d_patch == 0) {
        throw ConfigError("patch grid and d_patch must be positive");
    }
    if (n_vision_tokens == 0 || n_patches() % n_vision_tokens != 0) {
        throw ConfigError("n_vision_tokens must divide the patch count");
    }
    if (max_text_tokens == 0) throw ConfigError("max_text_tokens must be positive");
}

std::map<std::string, std::string> VlmConfig::to_header() const {
    return {
        {"d_model", std::to_string(d_model)},
        {"n_heads", std::to_string(n_heads)},
        {"n_layers", std::to_string(n_layers)},
        {"vocab_size", std::to_string(vocab_size)},
        {"patch_rows", std::to_string(patch_rows)},
        {"patch_cols", std::to_string(patch_cols)},
        {"d_patch", std::to_string(d_patch)},
        {"n_vision_tokens", std::to_string(n_vision_tokens)},
        {"max_text_tokens", std::to_string(max_text_tokens)},
        {"seed", std::to_string(seed)},
    };
}

VlmConfig VlmConfig::from_header(const std::map<std::string, std::string>& header) {
    VlmConfig cfg;
    auto get = [&](const char* key) -> std::uint64_t {
        auto it = header.find(key);
        if (it == header.end()) throw ParseError(std::string("missing header field ") + key);
        return std::stoull(it->second);
    };
    cfg.d_model = get("d_model");
    cfg.n_heads = get("n_heads");
    cfg.n_layers = get("n_layers");
    cfg.vocab_size = get("vocab_size");
    cfg.patch_rows = get("patch_rows");
    cfg.patch_cols = get("patch_cols");
    cfg.d_patch = get("d_patch");
    cfg.n_vision_tokens = get("n_vision_tokens");
    cfg.max_text_tokens = get("max_text_tokens");
    cfg.seed = get("seed");
    cfg.validate();
    return cfg;
}

template <class T>
TensorT<T> sinusoidal_table(std::size_t positions, std::size_t width, std::size_t first_pos,
                            double amp) {
    std::vector<T> data(positions * width);
    for (std::size_t p = 0; p < positions; ++p) {
        const double pos = static_cast<double>(first_pos + p);
        for (std::size_t j = 0; j < width; ++j) {
            const double pair = static_cast<double>(j - j % 2);
            const double w = std::pow(10000.0, -pair / static_cast<double>(width));
            const double v = (j % 2 == 0) ? std::sin(pos * w) : std::cos(pos * w);
            data[p * width + j] = static_cast<T>(amp * v);
        }
    }
    return TensorT<T>::from_data({positions, width}, std::move(data));
}

template <class T>
VlmT<T> VlmT<T>::init(const VlmConfig& cfg) {
    cfg.validate();
    VlmT<T> m;
    m.cfg_ = cfg;

    {
        Rng rng(kPatchEmbedSeed);
        m.patch_w_ = TensorT<T>::randn({cfg.d_patch, cfg.d_patch}, rng,
                                       1.0 / std::sqrt(static_cast<double>(cfg.d_patch)));
    }
    m.patch_pos_ = sinusoidal_table<T>(cfg.n_patches(), cfg.d_patch, 0, kPosAmplitude);
    {
        Rng rng(kTokenTableSeed);
        m.table_ = TensorT<T>::randn({cfg.vocab_size, cfg.d_model}, rng,
                                     1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
    }
    m.text_pos_ = sinusoidal_table<T>(cfg.max_text_tokens, cfg.d_model, cfg.n_vision_tokens,
                                      kPosAmplitude);

    Rng rng(cfg.seed);
    auto lin = [&](std::size_t in, std::size_t out) {
        auto t = TensorT<T>::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        t.set_requires_grad(true);
        return t;
    };
    auto zeros = [&](std::size_t n) {
        auto t = TensorT<T>::zeros({n});
        t.set_requires_grad(true);
        return t;
    };
    auto ones = [&](std::size_t n) {
        auto t = TensorT<T>::full({n}, T(1));
        t.set_requires_grad(true);
        return t;
    };

    m.vproj_w_ = lin(cfg.d_patch, cfg.d_model);
    m.vproj_b_ = zeros(cfg.d_model);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerParamsT<T> lp;
        lp.ln1_g = ones(cfg.d_model);
        lp.ln1_b = zeros(cfg.d_model);
        lp.attn.wq = lin(cfg.d_model, cfg.d_model);
        lp.attn.bq = zeros(cfg.d_model);
        lp.attn.wk = lin(cfg.d_model, cfg.d_model);
        lp.attn.bk = zeros(cfg.d_model);
        lp.attn.wv = lin(cfg.d_model, cfg.d_model);
        lp.attn.bv = zeros(cfg.d_model);
        lp.attn.wo = lin(cfg.d_model, cfg.d_model);
        lp.attn.bo = zeros(cfg.d_model);
        lp.ln2_g = ones(cfg.d_model);
        lp.ln2_b = zeros(cfg.d_model);
        lp.ffn_w1 = lin(cfg.d_model, 4 * cfg.d_model);
        lp.ffn_b1 = zeros(4 * cfg.d_model);
        lp.ffn_w2 = lin(4 * cfg.d_model, cfg.d_model);
        lp.ffn_b2 = zeros(cfg.d_model);
        m.layers_.push_back(std::move(lp));
    }
    m.lnf_g_ = ones(cfg.d_model);
    m.lnf_b_ = zeros(cfg.d_model);
    return m;
}

template <class T>
TensorT<T> VlmT<T>::embed_image(const ToyImage& img) const {
    if (img.rows != cfg_.patch_rows || img.cols != cfg_.patch_cols ||
        img.d_patch != cfg_.d_patch) {
        throw ShapeMismatch("image patch grid does not match config");
    }
    if (img.patch_features.size() != cfg_.n_patches() * cfg_.d_patch) {
        throw ShapeMismatch("image feature count does not match patch grid");
    }
    NoGradGuard ng;  // frozen pathway
    std::vector<T> data(img.patch_features.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(img.patch_features[i]);
    auto patches = TensorT<T>::from_data({cfg_.n_patches(), cfg_.d_patch}, std::move(data));
    return add(matmul(patches, patch_w_), patch_pos_);
}

template <class T>
TensorT<T> VlmT<T>::project_vision(const TensorT<T>& patches) const {
    const auto& s = patches.shape();
    if (s.size() != 2 || s[1] != cfg_.d_patch) {
        throw ShapeMismatch("project_vision expects [n_patches, d_patch]");
    }
    if (s[0] % cfg_.n_vision_tokens != 0) {
        throw IndivisibleGrouping("patch count not divisible by n_vision_tokens");
    }
    auto pooled = group_mean_rows(patches, cfg_.n_vision_tokens);
    return linear(pooled, vproj_w_, vproj_b_);
}

template <class T>
TensorT<T> VlmT<T>::embed_text(const std::vector<int>& token_ids) const {
    if (token_ids.empty()) throw EmptySequence("embed_text on empty id list");
    if (token_ids.size() > cfg_.max_text_tokens) {
        throw SequenceTooLong(std::to_string(token_ids.size()) + " tokens exceeds cap " +
                              std::to_string(cfg_.max_text_tokens));
    }
    const std::size_t d = cfg_.d_model;
    std::vector<T> data(token_ids.size() * d);
    const auto table = table_.data();
    const auto pos = text_pos_.data();
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        const int id = token_ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
            throw InvalidTokenId("token id " + std::to_string(id) + " outside vocab");
        }
        for (std::size_t j = 0; j < d; ++j) {
            data[i * d + j] = table[static_cast<std::size_t>(id) * d + j] + pos[i * d + j];
        }
    }
    return TensorT<T>::from_data({token_ids.size(), d}, std::move(data));
}

template <class T>
ForwardTraceT<T> VlmT<T>::forward(const TensorT<T>& vision_tokens, const TensorT<T>& text_emb,
                                  bool capture_last) const {
    const auto& vs = vision_tokens.shape();
    const auto& ts = text_emb.shape();
    if (vs.size() != 2 || ts.size() != 2 || vs[1] != cfg_.d_model || ts[1] != cfg_.d_model) {
        throw ShapeMismatch("forward inputs must be [*, d_model]");
    }
    const std::size_t n_vision = vs[0];
    const std::size_t n_text = ts[0];
    const std::size_t L = n_vision + n_text;
    const std::size_t H = cfg_.n_heads;
    const std::size_t dk = cfg_.head_dim();

    ForwardTraceT<T> trace;
    trace.n_vision = n_vision;
    trace.n_text = n_text;

    const Mask causal = Mask::causal(L);
    auto x = concat_rows(vision_tokens, text_emb);
    trace.hidden.push_back(x);

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        const auto& lp = layers_[l];
        auto a = layer_norm(x, lp.ln1_g, lp.ln1_b);
        auto q = permute(reshape(linear(a, lp.attn.wq, lp.attn.bq), {L, H, dk}), {1, 0, 2});
        auto k = permute(reshape(linear(a, lp.attn.wk, lp.attn.bk), {L, H, dk}), {1, 0, 2});
        auto v = permute(reshape(linear(a, lp.attn.wv, lp.attn.bv), {L, H, dk}), {1, 0, 2});
        auto scores = scale(matmul(q, permute(k, {0, 2, 1})),
                            1.0 / std::sqrt(static_cast<double>(dk)));
        auto attn = softmax_rows(scores, &causal);
        if (l == 0) trace.attn_first = attn;
        if (capture_last && l + 1 == cfg_.n_layers) trace.attn_last = attn;
        auto ctx = reshape(permute(matmul(attn, v), {1, 0, 2}), {L, cfg_.d_model});
        x = add(x, linear(ctx, lp.attn.wo, lp.attn.bo));

        auto b = layer_norm(x, lp.ln2_g, lp.ln2_b);
        auto f = linear(gelu(linear(b, lp.ffn_w1, lp.ffn_b1)), lp.ffn_w2, lp.ffn_b2);
        x = add(x, f);
        trace.hidden.push_back(x);
    }

    auto xf = layer_norm(x, lnf_g_, lnf_b_);
    trace.logits = matmul(xf, permute(table_, {1, 0}));  // tied, frozen head
    return trace;
}

template <class T>
ForwardTraceT<T> VlmT<T>::run(const ToyImage& img, const std::vector<int>& token_ids,
                              bool capture_last) const {
    auto patches = embed_image(img);
    auto vision = project_vision(patches);
    auto text = embed_text(token_ids);
    return forward(vision, text, capture_last);
}

template <class T>
std::vector<int> VlmT<T>::generate_greedy(const ToyImage& img,
                                          const std::vector<int>& prompt_ids,
                                          std::size_t max_new, int eos_id) const {
    if (prompt_ids.empty()) throw EmptySequence("generate_greedy needs a non-empty prompt");
    NoGradGuard ng;
    std::vector<int> ids = prompt_ids;
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
        if (ids.size() >= cfg_.max_text_tokens) break;
        auto trace = run(img, ids, false);
        const std::size_t last = trace.total_len() - 1;
        const auto logits = trace.logits.data();
        const std::size_t V = cfg_.vocab_size;
        std::size_t best = 0;
        for (std::size_t v = 1; v < V; ++v) {
            if (logits[last * V + v] > logits[last * V + best]) best = v;
        }
        const int tok = static_cast<int>(best);
        out.push_back(tok);
        ids.push_back(tok);
        if (tok == eos_id) break;
    }
    return out;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> VlmT<T>::trainable_params() {
    std::vector<std::pair<std::string, TensorT<T>>> out;
    out.emplace_back("vproj.w", vproj_w_);
    out.emplace_back("vproj.b", vproj_b_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        auto& lp = layers_[l];
        out.emplace_back(p + "ln1.g", lp.ln1_g);
        out.emplace_back(p + "ln1.b", lp.ln1_b);
        out.emplace_back(p + "attn.wq", lp.attn.wq);
        out.emplace_back(p + "attn.bq", lp.attn.bq);
        out.emplace_back(p + "attn.wk", lp.attn.wk);
        out.emplace_back(p + "attn.bk", lp.attn.bk);
        out.emplace_back(p + "attn.wv", lp.attn.wv);
        out.emplace_back(p + "attn.bv", lp.attn.bv);
        out.emplace_back(p + "attn.wo", lp.attn.wo);
        out.emplace_back(p + "attn.bo", lp.attn.bo);
        out.emplace_back(p + "ln2.g", lp.ln2_g);
        out.emplace_back(p + "ln2.b", lp.ln2_b);
        out.emplace_back(p + "ffn.w1", lp.ffn_w1);
        out.emplace_back(p + "ffn.b1", lp.ffn_b1);
        out.emplace_back(p + "ffn.w2", lp.ffn_w2);
        out.emplace_back(p + "ffn.b2", lp.ffn_b2);
    }
    out.emplace_back("lnf.g", lnf_g_);
    out.emplace_back("lnf.b", lnf_b_);
    return out;
}

template <class T>
std::vector<std::pair<std::string, TensorT<T>>> VlmT<T>::frozen_params() {
    return {
        {"frozen.patch_w", patch_w_},
        {"frozen.patch_pos", patch_pos_},
        {"frozen.table", table_},
        {"frozen.text_pos", text_pos_},
    };
}

template <class T>
Archive VlmT<T>::to_archive() const {
    Archive a;
    a.header = cfg_.to_header();
    auto* self = const_cast<VlmT<T>*>(this);
    for (auto& [name, t] : self->frozen_params()) a.tensors.emplace_back(name, to_blob(t));
    for (auto& [name, t] : self->trainable_params()) a.tensors.emplace_back(name, to_blob(t));
    return a;
}

template <class T>
VlmT<T> VlmT<T>::from_archive(const Archive& archive) {
    VlmConfig cfg = VlmConfig::from_header(archive.header);
    VlmT<T> m = VlmT<T>::init(cfg);
    auto load_into = [&](const std::string& name, TensorT<T>& t) {
        const TensorBlob* blob = archive.find(name);
        if (!blob) throw ParseError("checkpoint missing tensor '" + name + "'");
        if (blob->shape != t.shape()) {
            throw ShapeMismatch("checkpoint tensor '" + name + "' has wrong shape");
        }
        auto dst = t.data_mut();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(blob->values[i]);
    };
    for (auto& [name, t] : m.frozen_params()) load_into(name, t);
    for (auto& [name, t] : m.trainable_params()) load_into(name, t);
    return m;
}

template class VlmT<float>;
template class VlmT<double>;
template TensorT<float> sinusoidal_table<float>(std::size_t, std::size_t, std::size_t, double);
template TensorT<double> sinusoidal_table<double>(std::size_t, std::size_t, std::size_t, double);

}  // namespace akd
