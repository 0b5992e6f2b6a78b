#include "akd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace akd {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

void check_positive_dims(const std::vector<std::size_t>& shape) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeMismatch("zero-sized dimension in " + shape_str(shape));
    }
}

// Trailing-dimension broadcast of two shapes (size-1 dims stretch).
std::vector<std::size_t> broadcast_shape(const std::vector<std::size_t>& a,
                                         const std::vector<std::size_t>& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    std::vector<std::size_t> out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeMismatch("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[rank - 1 - i] = std::max(da, db);
    }
    return out;
}

bool is_suffix(const std::vector<std::size_t>& big, const std::vector<std::size_t>& small) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    }
    return true;
}

// Index mapping from output element index to the two input element indices.
struct IndexMap {
    enum Mode { Same, BSuffix, ASuffix, General } mode = Same;
    std::size_t an = 0, bn = 0;
    std::vector<std::size_t> out_shape;
    std::vector<std::size_t> out_strides, a_strides, b_strides;

    inline void map(std::size_t i, std::size_t& ia, std::size_t& ib) const {
        switch (mode) {
            case Same:
                ia = i;
                ib = i;
                return;
            case BSuffix:
                ia = i;
                ib = i % bn;
                return;
            case ASuffix:
                ia = i % an;
                ib = i;
                return;
            case General: {
                ia = 0;
                ib = 0;
                for (std::size_t d = 0; d < out_shape.size(); ++d) {
                    const std::size_t idx = (i / out_strides[d]) % out_shape[d];
                    ia += idx * a_strides[d];
                    ib += idx * b_strides[d];
                }
                return;
            }
        }
    }
};

IndexMap make_index_map(const std::vector<std::size_t>& as, const std::vector<std::size_t>& bs) {
    IndexMap m;
    m.an = product(as);
    m.bn = product(bs);
    if (as == bs) {
        m.mode = IndexMap::Same;
        m.out_shape = as;
        return m;
    }
    if (is_suffix(as, bs)) {
        m.mode = IndexMap::BSuffix;
        m.out_shape = as;
        return m;
    }
    if (is_suffix(bs, as)) {
        m.mode = IndexMap::ASuffix;
        m.out_shape = bs;
        return m;
    }
    m.mode = IndexMap::General;
    m.out_shape = broadcast_shape(as, bs);
    const std::size_t rank = m.out_shape.size();
    m.out_strides.assign(rank, 1);
    for (std::size_t d = rank; d-- > 1;) {
        m.out_strides[d - 1] = m.out_strides[d] * m.out_shape[d];
    }
    auto side_strides = [&](const std::vector<std::size_t>& s) {
        std::vector<std::size_t> native(s.size(), 1);
        for (std::size_t d = s.size(); d-- > 1;) native[d - 1] = native[d] * s[d];
        std::vector<std::size_t> st(rank, 0);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::size_t od = rank - s.size() + i;
            st[od] = (s[i] == 1 && m.out_shape[od] != 1) ? 0 : native[i];
        }
        return st;
    };
    m.a_strides = side_strides(as);
    m.b_strides = side_strides(bs);
    return m;
}

template <class T>
std::shared_ptr<NodeT<T>> make_node(std::vector<std::size_t> shape, std::vector<T> data) {
    auto n = std::make_shared<NodeT<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    return n;
}

// Suffix-mask index: mask shape must equal a trailing suffix of x's shape.
std::size_t mask_check(const std::vector<std::size_t>& xshape, const Mask& mask) {
    if (!is_suffix(xshape, mask.shape) || mask.shape.empty() ||
        mask.shape.back() != xshape.back()) {
        throw ShapeMismatch("mask shape " + shape_str(mask.shape) +
                            " does not align with tensor " + shape_str(xshape));
    }
    return mask.numel();
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Mask Mask::full(const std::vector<std::size_t>& shape, bool value) {
    Mask m;
    m.shape = shape;
    m.values.assign(product(shape), value ? 1 : 0);
    return m;
}

Mask Mask::causal(std::size_t n) {
    Mask m;
    m.shape = {n, n};
    m.values.assign(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) m.values[i * n + j] = 1;
    }
    return m;
}

// ---- TensorT basics ---------------------------------------------------------

template <class T>
TensorT<T> TensorT<T>::zeros(const std::vector<std::size_t>& shape) {
    check_positive_dims(shape);
    return TensorT(make_node<T>(shape, std::vector<T>(product(shape), T(0))));
}

template <class T>
TensorT<T> TensorT<T>::full(const std::vector<std::size_t>& shape, T value) {
    check_positive_dims(shape);
    return TensorT(make_node<T>(shape, std::vector<T>(product(shape), value)));
}

template <class T>
TensorT<T> TensorT<T>::from_data(const std::vector<std::size_t>& shape, std::vector<T> data) {
    check_positive_dims(shape);
    if (product(shape) != data.size()) {
        throw ShapeMismatch("data size " + std::to_string(data.size()) +
                            " does not match shape " + shape_str(shape));
    }
    return TensorT(make_node<T>(shape, std::move(data)));
}

template <class T>
TensorT<T> TensorT<T>::scalar(T value) {
    return TensorT(make_node<T>({1}, std::vector<T>{value}));
}

template <class T>
TensorT<T> TensorT<T>::randn(const std::vector<std::size_t>& shape, Rng& rng, double stddev) {
    check_positive_dims(shape);
    std::vector<T> data(product(shape));
    for (auto& v : data) v = static_cast<T>(rng.normal() * stddev);
    return TensorT(make_node<T>(shape, std::move(data)));
}

template <class T>
T TensorT<T>::item() const {
    if (numel() != 1) throw ShapeMismatch("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

template <class T>
T TensorT<T>::at(std::initializer_list<std::size_t> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) throw ShapeMismatch("index rank mismatch");
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
        if (i >= s[d]) throw IndexOutOfRange("index out of range");
        off = off * s[d] + i;
        ++d;
    }
    return node_->data[off];
}

// ---- op plumbing ------------------------------------------------------------

namespace {

template <class T>
TensorT<T> finish_op(std::shared_ptr<NodeT<T>> out,
                     std::vector<std::shared_ptr<NodeT<T>>> tracked_parents,
                     std::function<void()> backward_fn) {
    if (g_grad_enabled && !tracked_parents.empty()) {
        out->requires_grad = true;
        out->parents = std::move(tracked_parents);
        out->backward_fn = std::move(backward_fn);
    }
    return TensorT<T>(out);
}

template <class T>
std::vector<std::shared_ptr<NodeT<T>>> tracked(std::initializer_list<std::shared_ptr<NodeT<T>>> in) {
    std::vector<std::shared_ptr<NodeT<T>>> out;
    if (!g_grad_enabled) return out;
    for (const auto& p : in) {
        if (p && p->requires_grad) out.push_back(p);
    }
    return out;
}

template <class T, class Fwd, class DA, class DB>
TensorT<T> binary_ew(const TensorT<T>& a, const TensorT<T>& b, Fwd fwd, DA da, DB db) {
    const IndexMap m = make_index_map(a.shape(), b.shape());
    const std::size_t n = product(m.out_shape);
    auto an = a.node();
    auto bn = b.node();
    std::vector<T> out(n);
    {
        const T* ad = an->data.data();
        const T* bd = bn->data.data();
        std::size_t ia, ib;
        for (std::size_t i = 0; i < n; ++i) {
            m.map(i, ia, ib);
            out[i] = fwd(ad[ia], bd[ib]);
        }
    }
    auto node = make_node<T>(m.out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(
        node, tracked<T>({an, bn}), [m, an, bn, self, da, db, n]() {
            const bool wa = an->requires_grad;
            const bool wb = bn->requires_grad;
            if (wa) an->ensure_grad();
            if (wb) bn->ensure_grad();
            const T* g = self->grad.data();
            const T* ad = an->data.data();
            const T* bd = bn->data.data();
            std::size_t ia, ib;
            for (std::size_t i = 0; i < n; ++i) {
                m.map(i, ia, ib);
                if (wa) an->grad[ia] += da(ad[ia], bd[ib], g[i]);
                if (wb) bn->grad[ib] += db(ad[ia], bd[ib], g[i]);
            }
        });
}

template <class T, class Fwd, class DX>
TensorT<T> unary_ew(const TensorT<T>& a, Fwd fwd, DX dx) {
    auto an = a.node();
    const std::size_t n = an->numel();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(an->data[i]);
    auto node = make_node<T>(an->shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({an}), [an, self, dx, n]() {
        an->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            an->grad[i] += dx(an->data[i], self->data[i], self->grad[i]);
        }
    });
}

// C[m,n] += A[m,k] * B[k,n]; ascending-k accumulation per output element.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T aip = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
template <class T>
void gemm_abt_acc(const T* dc, const T* b, T* da, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* dcrow = dc + i * n;
        T* darow = da + i * k;
        for (std::size_t j = 0; j < k; ++j) {
            const T* brow = b + j * n;
            T s = 0;
            for (std::size_t t = 0; t < n; ++t) s += dcrow[t] * brow[t];
            darow[j] += s;
        }
    }
}

// dB[k,n] += A[m,k]^T * dC[m,n]; ascending-m accumulation.
template <class T>
void gemm_atb_acc(const T* a, const T* dc, T* db, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < m; ++p) {
        const T* arow = a + p * k;
        const T* dcrow = dc + p * n;
        for (std::size_t i = 0; i < k; ++i) {
            const T aip = arow[i];
            T* dbrow = db + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
        }
    }
}

struct BatchMap {
    std::vector<std::size_t> batch_shape;
    std::vector<std::size_t> a_strides, b_strides, out_strides;
    std::size_t batches = 1;

    void map(std::size_t i, std::size_t& ba, std::size_t& bb) const {
        ba = 0;
        bb = 0;
        for (std::size_t d = 0; d < batch_shape.size(); ++d) {
            const std::size_t idx = (i / out_strides[d]) % batch_shape[d];
            ba += idx * a_strides[d];
            bb += idx * b_strides[d];
        }
    }
};

}  // namespace

// ---- elementwise ops --------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_ew(
        a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return g; });
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_ew(
        a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
        [](T, T, T g) { return -g; });
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_ew(
        a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
        [](T x, T, T g) { return g * x; });
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return binary_ew(
        a, b, [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
        [](T x, T y, T g) { return -g * x / (y * y); });
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, double s) {
    const T sv = static_cast<T>(s);
    return unary_ew(
        a, [sv](T x) { return x * sv; }, [sv](T, T, T g) { return g * sv; });
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, double s) {
    const T sv = static_cast<T>(s);
    return unary_ew(
        a, [sv](T x) { return x + sv; }, [](T, T, T g) { return g; });
}

template <class T>
TensorT<T> exp(const TensorT<T>& a) {
    return unary_ew(
        a, [](T x) { return std::exp(x); }, [](T, T y, T g) { return g * y; });
}

template <class T>
TensorT<T> log(const TensorT<T>& a) {
    for (T v : a.data()) {
        if (!(v > T(0))) throw DomainError("log of non-positive value");
    }
    return unary_ew(
        a, [](T x) { return std::log(x); }, [](T x, T, T g) { return g / x; });
}

template <class T>
TensorT<T> sqrt(const TensorT<T>& a) {
    for (T v : a.data()) {
        if (v < T(0)) throw DomainError("sqrt of negative value");
    }
    return unary_ew(
        a, [](T x) { return std::sqrt(x); },
        [](T, T y, T g) { return g * T(0.5) / y; });
}

template <class T>
TensorT<T> tanh(const TensorT<T>& a) {
    return unary_ew(
        a, [](T x) { return std::tanh(x); },
        [](T, T y, T g) { return g * (T(1) - y * y); });
}

// ---- matmul -----------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2) {
        throw ShapeMismatch("matmul requires rank >= 2, got " + shape_str(as) + " x " +
                            shape_str(bs));
    }
    const std::size_t m = as[as.size() - 2];
    const std::size_t k = as[as.size() - 1];
    const std::size_t k2 = bs[bs.size() - 2];
    const std::size_t n = bs[bs.size() - 1];
    if (k != k2) {
        throw ShapeMismatch("matmul inner dims differ: " + shape_str(as) + " x " + shape_str(bs));
    }
    const std::vector<std::size_t> abatch(as.begin(), as.end() - 2);
    const std::vector<std::size_t> bbatch(bs.begin(), bs.end() - 2);

    BatchMap bm;
    bm.batch_shape = broadcast_shape(abatch, bbatch);
    bm.batches = product(bm.batch_shape);
    {
        const std::size_t rank = bm.batch_shape.size();
        bm.out_strides.assign(rank, 1);
        for (std::size_t d = rank; d-- > 1;) {
            bm.out_strides[d - 1] = bm.out_strides[d] * bm.batch_shape[d];
        }
        auto side = [&](const std::vector<std::size_t>& s, std::size_t mat) {
            std::vector<std::size_t> native(s.size(), mat);
            for (std::size_t d = s.size(); d-- > 1;) native[d - 1] = native[d] * s[d];
            std::vector<std::size_t> st(rank, 0);
            for (std::size_t i = 0; i < s.size(); ++i) {
                const std::size_t od = rank - s.size() + i;
                st[od] = (s[i] == 1 && bm.batch_shape[od] != 1) ? 0 : native[i];
            }
            return st;
        };
        bm.a_strides = side(abatch, m * k);
        bm.b_strides = side(bbatch, k2 * n);
    }

    std::vector<std::size_t> out_shape = bm.batch_shape;
    out_shape.push_back(m);
    out_shape.push_back(n);

    auto an = a.node();
    auto bn = b.node();
    std::vector<T> out(bm.batches * m * n, T(0));
    for (std::size_t i = 0; i < bm.batches; ++i) {
        std::size_t ba, bb;
        bm.map(i, ba, bb);
        gemm_acc(an->data.data() + ba, bn->data.data() + bb, out.data() + i * m * n, m, k, n);
    }
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({an, bn}), [bm, an, bn, self, m, k, n]() {
        const bool wa = an->requires_grad;
        const bool wb = bn->requires_grad;
        if (wa) an->ensure_grad();
        if (wb) bn->ensure_grad();
        for (std::size_t i = 0; i < bm.batches; ++i) {
            std::size_t ba, bb;
            bm.map(i, ba, bb);
            const T* dc = self->grad.data() + i * m * n;
            if (wa) gemm_abt_acc(dc, bn->data.data() + bb, an->grad.data() + ba, m, k, n);
            if (wb) gemm_atb_acc(an->data.data() + ba, dc, bn->grad.data() + bb, m, k, n);
        }
    });
}

// ---- softmax ----------------------------------------------------------------

template <class T>
TensorT<T> softmax_rows(const TensorT<T>& x, const Mask* mask) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeMismatch("softmax_rows on rank-0 tensor");
    const std::size_t n = s.back();
    const std::size_t rows = x.numel() / n;
    std::size_t mask_n = 0;
    // Copied so the backward closure does not depend on the caller's mask.
    std::shared_ptr<std::vector<std::uint8_t>> mcopy;
    const std::uint8_t* mv = nullptr;
    if (mask) {
        mask_n = mask_check(s, *mask);
        mcopy = std::make_shared<std::vector<std::uint8_t>>(mask->values);
        mv = mcopy->data();
    }
    auto xn = x.node();
    std::vector<T> out(x.numel(), T(0));
    const T* xd = xn->data.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * n;
        T mx = -std::numeric_limits<T>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mv && !mv[(base + j) % mask_n]) continue;
            any = true;
            mx = std::max(mx, xd[base + j]);
        }
        if (!any) throw AllMaskedRow("softmax row " + std::to_string(r) + " fully masked");
        T sum = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mv && !mv[(base + j) % mask_n]) continue;
            const T e = std::exp(xd[base + j] - mx);
            out[base + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < n; ++j) out[base + j] *= inv;
    }
    auto node = make_node<T>(s, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, mcopy, mv, mask_n, rows, n]() {
        xn->ensure_grad();
        const T* y = self->data.data();
        const T* g = self->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
            for (std::size_t j = 0; j < n; ++j) {
                if (mv && !mv[(base + j) % mask_n]) continue;
                xn->grad[base + j] += y[base + j] * (g[base + j] - dot);
            }
        }
    });
}

// ---- reductions and losses --------------------------------------------------

template <class T>
TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch("mse shapes differ: " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
    }
    auto an = a.node();
    auto bn = b.node();
    const std::size_t n = a.numel();
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T d = an->data[i] - bn->data[i];
        acc += d * d;
    }
    const T inv = T(1) / static_cast<T>(n);
    auto node = make_node<T>({1}, std::vector<T>{acc * inv});
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({an, bn}), [an, bn, self, n, inv]() {
        const bool wa = an->requires_grad;
        const bool wb = bn->requires_grad;
        if (wa) an->ensure_grad();
        if (wb) bn->ensure_grad();
        const T coef = self->grad[0] * T(2) * inv;
        for (std::size_t i = 0; i < n; ++i) {
            const T d = an->data[i] - bn->data[i];
            if (wa) an->grad[i] += coef * d;
            if (wb) bn->grad[i] -= coef * d;
        }
    });
}

template <class T>
TensorT<T> cross_entropy_masked(const TensorT<T>& logits, const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask) {
    const auto& s = logits.shape();
    if (s.size() != 2) throw ShapeMismatch("cross_entropy_masked expects [T, V] logits");
    const std::size_t rows = s[0];
    const std::size_t vocab = s[1];
    if (targets.size() != rows || mask.size() != rows) {
        throw ShapeMismatch("targets/mask length does not match logit rows");
    }
    std::size_t active = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw InvalidTokenId("target id " + std::to_string(targets[r]) + " out of vocab " +
                                 std::to_string(vocab));
        }
        if (mask[r]) ++active;
    }
    if (active == 0) throw EmptyMask("cross_entropy_masked: no masked-in positions");

    auto xn = logits.node();
    const T* xd = xn->data.data();
    T acc = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        const T* row = xd + r * vocab;
        T mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
        acc += std::log(sum) + mx - row[targets[r]];
    }
    const T inv = T(1) / static_cast<T>(active);
    auto node = make_node<T>({1}, std::vector<T>{acc * inv});
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, targets, mask, rows, vocab, inv]() {
        xn->ensure_grad();
        const T coef = self->grad[0] * inv;
        const T* xd = xn->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
            if (!mask[r]) continue;
            const T* row = xd + r * vocab;
            T* grow = xn->grad.data() + r * vocab;
            T mx = row[0];
            for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            T sum = 0;
            for (std::size_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
            const T isum = T(1) / sum;
            for (std::size_t j = 0; j < vocab; ++j) {
                T p = std::exp(row[j] - mx) * isum;
                if (j == static_cast<std::size_t>(targets[r])) p -= T(1);
                grow[j] += coef * p;
            }
        }
    });
}

template <class T>
TensorT<T> rkld_rows(const TensorT<T>& student_logits, const TensorT<T>& teacher_logits,
                     const std::vector<std::uint8_t>& mask, double floor_eps) {
    const auto& ss = student_logits.shape();
    const auto& ts = teacher_logits.shape();
    if (ss.size() != 2 || ts.size() != 2) throw ShapeMismatch("rkld expects [T, V] logits");
    if (ss[1] != ts[1]) {
        throw VocabMismatch("vocab dims differ: " + std::to_string(ss[1]) + " vs " +
                            std::to_string(ts[1]));
    }
    if (ss[0] != ts[0]) throw ShapeMismatch("rkld row counts differ");
    const std::size_t rows = ss[0];
    const std::size_t vocab = ss[1];
    if (mask.size() != rows) throw ShapeMismatch("rkld mask length mismatch");
    std::size_t active = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (mask[r]) ++active;
    }
    if (active == 0) throw EmptyMask("rkld: no masked-in positions");

    auto sn = student_logits.node();
    auto tn = teacher_logits.node();
    const T eps = static_cast<T>(floor_eps);

    // Per masked row f = sum_v pS*(log pS - log pT); masked-out rows skipped.
    auto softmax_row = [vocab](const T* row, std::vector<T>& p) {
        T mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        T sum = 0;
        for (std::size_t j = 0; j < vocab; ++j) {
            p[j] = std::exp(row[j] - mx);
            sum += p[j];
        }
        const T inv = T(1) / sum;
        for (std::size_t j = 0; j < vocab; ++j) p[j] *= inv;
    };

    std::vector<T> ps(vocab), pt(vocab);
    T acc = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        softmax_row(sn->data.data() + r * vocab, ps);
        softmax_row(tn->data.data() + r * vocab, pt);
        T f = 0;
        for (std::size_t j = 0; j < vocab; ++j) {
            if (ps[j] == T(0)) continue;
            const T lt = std::log(eps > T(0) ? std::max(pt[j], eps) : pt[j]);
            f += ps[j] * (std::log(ps[j]) - lt);
        }
        acc += f;
    }
    const T inv = T(1) / static_cast<T>(active);
    auto node = make_node<T>({1}, std::vector<T>{acc * inv});
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({sn}), [sn, tn, self, mask, rows, vocab, inv, eps,
                                                 softmax_row]() {
        sn->ensure_grad();
        const T coef = self->grad[0] * inv;
        std::vector<T> ps(vocab), pt(vocab);
        for (std::size_t r = 0; r < rows; ++r) {
            if (!mask[r]) continue;
            softmax_row(sn->data.data() + r * vocab, ps);
            softmax_row(tn->data.data() + r * vocab, pt);
            T f = 0;
            for (std::size_t j = 0; j < vocab; ++j) {
                if (ps[j] == T(0)) continue;
                const T lt = std::log(eps > T(0) ? std::max(pt[j], eps) : pt[j]);
                f += ps[j] * (std::log(ps[j]) - lt);
            }
            T* grow = sn->grad.data() + r * vocab;
            for (std::size_t j = 0; j < vocab; ++j) {
                if (ps[j] == T(0)) continue;
                const T lt = std::log(eps > T(0) ? std::max(pt[j], eps) : pt[j]);
                grow[j] += coef * ps[j] * ((std::log(ps[j]) - lt) - f);
            }
        }
    });
}

// ---- shape ops ----------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, const std::vector<std::size_t>& shape) {
    check_positive_dims(shape);
    if (product(shape) != x.numel()) {
        throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    auto xn = x.node();
    auto node = make_node<T>(shape, xn->data);
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self]() {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self->grad.size(); ++i) xn->grad[i] += self->grad[i];
    });
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<std::size_t>& perm) {
    const auto& s = x.shape();
    const std::size_t rank = s.size();
    if (perm.size() != rank) throw ShapeMismatch("permute rank mismatch");
    std::vector<bool> seen(rank, false);
    for (std::size_t p : perm) {
        if (p >= rank || seen[p]) throw ShapeMismatch("invalid permutation");
        seen[p] = true;
    }
    std::vector<std::size_t> out_shape(rank);
    for (std::size_t d = 0; d < rank; ++d) out_shape[d] = s[perm[d]];

    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * s[d];
    std::vector<std::size_t> out_strides(rank, 1);
    for (std::size_t d = rank; d-- > 1;) out_strides[d - 1] = out_strides[d] * out_shape[d];
    // out index -> in index stride table
    std::vector<std::size_t> gather_strides(rank);
    for (std::size_t d = 0; d < rank; ++d) gather_strides[d] = in_strides[perm[d]];

    auto xn = x.node();
    const std::size_t n = x.numel();
    std::vector<T> out(n);
    std::vector<std::size_t> src(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = 0;
        for (std::size_t d = 0; d < rank; ++d) {
            off += ((i / out_strides[d]) % out_shape[d]) * gather_strides[d];
        }
        src[i] = off;
        out[i] = xn->data[off];
    }
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, src = std::move(src)]() {
        xn->ensure_grad();
        for (std::size_t i = 0; i < src.size(); ++i) xn->grad[src[i]] += self->grad[i];
    });
}

template <class T>
TensorT<T> slice_rows(const TensorT<T>& x, std::size_t r0, std::size_t r1) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeMismatch("slice_rows on rank-0 tensor");
    if (r0 >= r1 || r1 > s[0]) throw IndexOutOfRange("slice_rows range invalid");
    const std::size_t width = x.numel() / s[0];
    std::vector<std::size_t> out_shape = s;
    out_shape[0] = r1 - r0;
    auto xn = x.node();
    std::vector<T> out(xn->data.begin() + r0 * width, xn->data.begin() + r1 * width);
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, r0, width]() {
        xn->ensure_grad();
        const std::size_t base = r0 * width;
        for (std::size_t i = 0; i < self->grad.size(); ++i) xn->grad[base + i] += self->grad[i];
    });
}

template <class T>
TensorT<T> block3(const TensorT<T>& x, std::size_t r0, std::size_t r1, std::size_t c0,
                  std::size_t c1) {
    const auto& s = x.shape();
    if (s.size() != 3) throw ShapeMismatch("block3 expects rank-3 tensor");
    if (r0 >= r1 || r1 > s[1] || c0 >= c1 || c1 > s[2]) {
        throw IndexOutOfRange("block3 range invalid");
    }
    const std::size_t H = s[0], R = s[1], C = s[2];
    const std::size_t orows = r1 - r0, ocols = c1 - c0;
    auto xn = x.node();
    std::vector<T> out(H * orows * ocols);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t i = 0; i < orows; ++i) {
            const T* src = xn->data.data() + (h * R + r0 + i) * C + c0;
            T* dst = out.data() + (h * orows + i) * ocols;
            std::copy(src, src + ocols, dst);
        }
    }
    auto node = make_node<T>({H, orows, ocols}, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, H, R, C, r0, c0, orows, ocols]() {
        xn->ensure_grad();
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < orows; ++i) {
                T* dst = xn->grad.data() + (h * R + r0 + i) * C + c0;
                const T* g = self->grad.data() + (h * orows + i) * ocols;
                for (std::size_t j = 0; j < ocols; ++j) dst[j] += g[j];
            }
        }
    });
}

template <class T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<std::size_t>& idx) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeMismatch("gather_rows on rank-0 tensor");
    if (idx.empty()) throw IndexOutOfRange("gather_rows with empty index list");
    for (std::size_t i : idx) {
        if (i >= s[0]) throw IndexOutOfRange("gather index " + std::to_string(i) + " >= " +
                                             std::to_string(s[0]));
    }
    const std::size_t width = x.numel() / s[0];
    std::vector<std::size_t> out_shape = s;
    out_shape[0] = idx.size();
    auto xn = x.node();
    std::vector<T> out(idx.size() * width);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::copy(xn->data.begin() + idx[i] * width, xn->data.begin() + (idx[i] + 1) * width,
                  out.begin() + i * width);
    }
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, idx, width]() {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            T* dst = xn->grad.data() + idx[i] * width;
            const T* g = self->grad.data() + i * width;
            for (std::size_t j = 0; j < width; ++j) dst[j] += g[j];
        }
    });
}

template <class T>
TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != bs.size() || as.empty()) throw ShapeMismatch("concat_rows rank mismatch");
    for (std::size_t d = 1; d < as.size(); ++d) {
        if (as[d] != bs[d]) {
            throw ShapeMismatch("concat_rows trailing dims differ: " + shape_str(as) + " vs " +
                                shape_str(bs));
        }
    }
    std::vector<std::size_t> out_shape = as;
    out_shape[0] = as[0] + bs[0];
    auto an = a.node();
    auto bn = b.node();
    std::vector<T> out;
    out.reserve(a.numel() + b.numel());
    out.insert(out.end(), an->data.begin(), an->data.end());
    out.insert(out.end(), bn->data.begin(), bn->data.end());
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    const std::size_t na = a.numel();
    return finish_op<T>(node, tracked<T>({an, bn}), [an, bn, self, na]() {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < na; ++i) an->grad[i] += self->grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < bn->data.size(); ++i) {
                bn->grad[i] += self->grad[na + i];
            }
        }
    });
}

template <class T>
TensorT<T> group_mean_rows(const TensorT<T>& x, std::size_t groups) {
    const auto& s = x.shape();
    if (s.size() != 2) throw ShapeMismatch("group_mean_rows expects [N, d]");
    if (groups == 0 || s[0] % groups != 0) {
        throw IndivisibleGrouping(std::to_string(s[0]) + " rows not divisible into " +
                                  std::to_string(groups) + " groups");
    }
    const std::size_t gsize = s[0] / groups;
    const std::size_t d = s[1];
    auto xn = x.node();
    std::vector<T> out(groups * d, T(0));
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t r = 0; r < gsize; ++r) {
            const T* src = xn->data.data() + (g * gsize + r) * d;
            T* dst = out.data() + g * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    }
    const T inv = T(1) / static_cast<T>(gsize);
    for (auto& v : out) v *= inv;
    auto node = make_node<T>({groups, d}, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, groups, gsize, d, inv]() {
        xn->ensure_grad();
        for (std::size_t g = 0; g < groups; ++g) {
            const T* grow = self->grad.data() + g * d;
            for (std::size_t r = 0; r < gsize; ++r) {
                T* dst = xn->grad.data() + (g * gsize + r) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += grow[j] * inv;
            }
        }
    });
}

template <class T>
TensorT<T> row_sum(const TensorT<T>& x) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeMismatch("row_sum on rank-0 tensor");
    const std::size_t n = s.back();
    const std::size_t rows = x.numel() / n;
    std::vector<std::size_t> out_shape = s;
    out_shape.back() = 1;
    auto xn = x.node();
    std::vector<T> out(rows, T(0));
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = xn->data.data() + r * n;
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += src[j];
        out[r] = acc;
    }
    auto node = make_node<T>(out_shape, std::move(out));
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self, rows, n]() {
        xn->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T g = self->grad[r];
            T* dst = xn->grad.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) dst[j] += g;
        }
    });
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
    auto xn = x.node();
    T acc = 0;
    for (T v : xn->data) acc += v;
    auto node = make_node<T>({1}, std::vector<T>{acc});
    auto* self = node.get();
    return finish_op<T>(node, tracked<T>({xn}), [xn, self]() {
        xn->ensure_grad();
        const T g = self->grad[0];
        for (auto& gv : xn->grad) gv += g;
    });
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

template <class T>
TensorT<T> detach(const TensorT<T>& x) {
    auto node = make_node<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
    return TensorT<T>(node);
}

// ---- backward -----------------------------------------------------------------

template <class T>
void backward(const TensorT<T>& root) {
    if (root.numel() != 1) {
        throw NonScalarRoot("backward root has shape " + shape_str(root.shape()));
    }
    auto rn = root.node();
    if (!rn->requires_grad) return;

    std::vector<NodeT<T>*> topo;
    std::unordered_set<NodeT<T>*> visited;
    std::vector<std::pair<NodeT<T>*, std::size_t>> stack;
    stack.emplace_back(rn.get(), 0);
    visited.insert(rn.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodeT<T>* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    // Interior gradients are per-sweep scratch; leaf gradients accumulate.
    for (NodeT<T>* node : topo) {
        if (node->backward_fn) {
            node->ensure_grad();
            std::fill(node->grad.begin(), node->grad.end(), T(0));
        }
    }
    rn->ensure_grad();
    rn->grad[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

// ---- grad check -----------------------------------------------------------------

GradCheckResult grad_check(const std::function<TensorT<double>()>& f,
                           std::vector<GradCheckParam> params, double step, double tolerance) {
    double v1, v2;
    {
        NoGradGuard ng;
        v1 = f().item();
        v2 = f().item();
    }
    if (!(v1 == v2)) {
        throw NonDeterministicFunction("two evaluations differ: " + std::to_string(v1) + " vs " +
                                       std::to_string(v2));
    }

    for (auto& p : params) p.tensor.zero_grad();
    TensorT<double> loss = f();
    backward(loss);

    GradCheckResult result;
    result.pass = true;
    for (auto& p : params) {
        auto data = p.tensor.data_mut();
        const auto g = p.tensor.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            double fp, fm;
            {
                NoGradGuard ng;
                data[i] = saved + step;
                fp = f().item();
                data[i] = saved - step;
                fm = f().item();
                data[i] = saved;
            }
            const double numeric = (fp - fm) / (2.0 * step);
            const double analytic = g.empty() ? 0.0 : g[i];
            const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
            const double rel = std::abs(analytic - numeric) / denom;
            ++result.checked;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = p.name;
                result.worst_index = i;
            }
            if (rel > tolerance) result.pass = false;
        }
    }
    return result;
}

// ---- explicit instantiations ----------------------------------------------------

template class TensorT<float>;
template class TensorT<double>;

#define AKD_INSTANTIATE_OPS(T)                                                              \
    template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> scale(const TensorT<T>&, double);                                   \
    template TensorT<T> add_scalar(const TensorT<T>&, double);                              \
    template TensorT<T> exp(const TensorT<T>&);                                             \
    template TensorT<T> log(const TensorT<T>&);                                             \
    template TensorT<T> sqrt(const TensorT<T>&);                                            \
    template TensorT<T> tanh(const TensorT<T>&);                                            \
    template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);                       \
    template TensorT<T> softmax_rows(const TensorT<T>&, const Mask*);                       \
    template TensorT<T> mse(const TensorT<T>&, const TensorT<T>&);                          \
    template TensorT<T> cross_entropy_masked(const TensorT<T>&, const std::vector<int>&,    \
                                             const std::vector<std::uint8_t>&);             \
    template TensorT<T> rkld_rows(const TensorT<T>&, const TensorT<T>&,                     \
                                  const std::vector<std::uint8_t>&, double);                \
    template TensorT<T> reshape(const TensorT<T>&, const std::vector<std::size_t>&);        \
    template TensorT<T> permute(const TensorT<T>&, const std::vector<std::size_t>&);        \
    template TensorT<T> slice_rows(const TensorT<T>&, std::size_t, std::size_t);            \
    template TensorT<T> block3(const TensorT<T>&, std::size_t, std::size_t, std::size_t,    \
                               std::size_t);                                                \
    template TensorT<T> gather_rows(const TensorT<T>&, const std::vector<std::size_t>&);    \
    template TensorT<T> concat_rows(const TensorT<T>&, const TensorT<T>&);                  \
    template TensorT<T> group_mean_rows(const TensorT<T>&, std::size_t);                    \
    template TensorT<T> row_sum(const TensorT<T>&);                                         \
    template TensorT<T> sum_all(const TensorT<T>&);                                         \
    template TensorT<T> mean_all(const TensorT<T>&);                                        \
    template TensorT<T> detach(const TensorT<T>&);                                          \
    template void backward(const TensorT<T>&)

AKD_INSTANTIATE_OPS(float);
AKD_INSTANTIATE_OPS(double);

#undef AKD_INSTANTIATE_OPS

}  // namespace akd
