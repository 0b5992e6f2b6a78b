#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "akd/errors.hpp"
#include "akd/rng.hpp"

namespace akd {

// Thread-local switch: while disabled, no graph edges are recorded and every
// op result is a plain constant. Used for teacher forwards and evaluation.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <class T>
struct NodeT {
    std::vector<std::size_t> shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void()> backward_fn;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Boolean mask over the trailing dimensions of a tensor. mask.numel() must
// divide the target's numel and the shapes must agree on the suffix.
struct Mask {
    std::vector<std::size_t> shape;
    std::vector<std::uint8_t> values;

    std::size_t numel() const { return values.size(); }
    static Mask full(const std::vector<std::size_t>& shape, bool value);
    // Lower-triangular (j <= i) true entries for an [n, n] matrix.
    static Mask causal(std::size_t n);
};

// Dense row-major tensor handle with reverse-mode autodiff. Copying a Tensor
// copies the handle; the storage and graph node are shared.
template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

    static TensorT zeros(const std::vector<std::size_t>& shape);
    static TensorT full(const std::vector<std::size_t>& shape, T value);
    static TensorT from_data(const std::vector<std::size_t>& shape, std::vector<T> data);
    static TensorT scalar(T value);
    // Gaussian init, used for parameters and frozen tables.
    static TensorT randn(const std::vector<std::size_t>& shape, Rng& rng, double stddev);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> data_mut() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const;
    T at(std::initializer_list<std::size_t> idx) const;

    std::shared_ptr<NodeT<T>> node() const { return node_; }

private:
    std::shared_ptr<NodeT<T>> node_;
};

using Tensor32 = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---- elementwise and arithmetic -------------------------------------------

template <class T> TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <class T> TensorT<T> scale(const TensorT<T>& a, double s);
template <class T> TensorT<T> add_scalar(const TensorT<T>& a, double s);
template <class T> TensorT<T> exp(const TensorT<T>& a);
template <class T> TensorT<T> log(const TensorT<T>& a);
template <class T> TensorT<T> sqrt(const TensorT<T>& a);
template <class T> TensorT<T> tanh(const TensorT<T>& a);

// Batched matrix product over the last two dimensions; leading dimensions
// broadcast. Gradients are dA = dC * B^T and dB = A^T * dC per batch.
template <class T> TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);

// Row softmax over the last dimension with max-subtraction. Masked-out
// entries are exactly zero in the output.
template <class T> TensorT<T> softmax_rows(const TensorT<T>& x, const Mask* mask = nullptr);

// Mean over all elements of (a - b)^2.
template <class T> TensorT<T> mse(const TensorT<T>& a, const TensorT<T>& b);

// Mean over masked-in rows of -log softmax(logits)[target].
template <class T>
TensorT<T> cross_entropy_masked(const TensorT<T>& logits,
                                const std::vector<int>& targets,
                                const std::vector<std::uint8_t>& mask);

// Mean over masked-in rows of sum_v p_S * log(p_S / p_T), with p_S = softmax
// of the student row and p_T = softmax of the teacher row. The teacher side
// is treated as constant. `floor_eps` is applied inside log on p_T.
template <class T>
TensorT<T> rkld_rows(const TensorT<T>& student_logits,
                     const TensorT<T>& teacher_logits,
                     const std::vector<std::uint8_t>& mask,
                     double floor_eps);

// ---- shape and indexing ops ------------------------------------------------

template <class T> TensorT<T> reshape(const TensorT<T>& x, const std::vector<std::size_t>& shape);
template <class T> TensorT<T> permute(const TensorT<T>& x, const std::vector<std::size_t>& perm);
// Rows [r0, r1) along dimension 0.
template <class T> TensorT<T> slice_rows(const TensorT<T>& x, std::size_t r0, std::size_t r1);
// Block [r0,r1) x [c0,c1) of dimensions 1 and 2 of a rank-3 tensor.
template <class T>
TensorT<T> block3(const TensorT<T>& x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
template <class T> TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<std::size_t>& idx);
template <class T> TensorT<T> concat_rows(const TensorT<T>& a, const TensorT<T>& b);
// Mean over `groups` contiguous equal row groups: [N, d] -> [groups, d].
template <class T> TensorT<T> group_mean_rows(const TensorT<T>& x, std::size_t groups);
// Sum over the last dimension, kept as size 1.
template <class T> TensorT<T> row_sum(const TensorT<T>& x);
template <class T> TensorT<T> sum_all(const TensorT<T>& x);
template <class T> TensorT<T> mean_all(const TensorT<T>& x);
// Constant copy cut off from the graph.
template <class T> TensorT<T> detach(const TensorT<T>& x);

// ---- backward ---------------------------------------------------------------

// Reverse-mode sweep from a scalar root. Gradients of requires_grad leaves
// accumulate (+=) across calls; use zero_grad between steps.
template <class T> void backward(const TensorT<T>& root);

// ---- gradient checking -------------------------------------------------------

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckResult {
    bool pass = false;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

struct GradCheckParam {
    std::string name;
    TensorT<double> tensor;
};

// Central finite differences on every element of every parameter, compared
// against reverse-mode gradients. Relative error per element is
// |analytic - numeric| / max(1, |analytic|, |numeric|). 64-bit only.
GradCheckResult grad_check(const std::function<TensorT<double>()>& f,
                           std::vector<GradCheckParam> params,
                           double step, double tolerance);

}  // namespace akd
