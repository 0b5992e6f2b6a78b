#include "akd/optim.hpp"

#include <cmath>

#include "akd/errors.hpp"

namespace akd {

double cosine_lr(std::size_t step, double max_lr, std::size_t total_steps, std::size_t warmup) {
    if (warmup >= total_steps) {
        throw BadSchedule("warmup " + std::to_string(warmup) + " >= total " +
                          std::to_string(total_steps));
    }
    if (step > total_steps) throw BadSchedule("step beyond total_steps");
    if (step < warmup) {
        return max_lr * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - warmup);
    return max_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <class T>
AdamWT<T>::AdamWT(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

template <class T>
void AdamWT<T>::add(const std::string& name, TensorT<T> tensor, ParamGroup group) {
    Entry e;
    e.name = name;
    e.tensor = std::move(tensor);
    e.group = group;
    e.m.assign(e.tensor.numel(), T(0));
    e.v.assign(e.tensor.numel(), T(0));
    entries_.push_back(std::move(e));
}

template <class T>
void AdamWT<T>::step(double lr_projector, double lr_other) {
    ++step_count_;
    last_lr_projector_ = lr_projector;
    last_lr_other_ = lr_other;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
    for (auto& e : entries_) {
        const double lr = e.group == ParamGroup::projector ? lr_projector : lr_other;
        auto data = e.tensor.data_mut();
        const auto grad = e.tensor.grad();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]);
            const double m = beta1_ * static_cast<double>(e.m[i]) + (1.0 - beta1_) * g;
            const double v = beta2_ * static_cast<double>(e.v[i]) + (1.0 - beta2_) * g * g;
            e.m[i] = static_cast<T>(m);
            e.v[i] = static_cast<T>(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            double x = static_cast<double>(data[i]);
            if (weight_decay_ > 0.0 && e.group == ParamGroup::other) {
                x -= lr * weight_decay_ * x;
            }
            x -= lr * mhat / (std::sqrt(vhat) + eps_);
            data[i] = static_cast<T>(x);
        }
    }
}

template <class T>
void AdamWT<T>::zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
}

template <class T>
void AdamWT<T>::append_state(Archive& archive) const {
    archive.header["adam_step"] = std::to_string(step_count_);
    for (const auto& e : entries_) {
        TensorBlob mb, vb;
        mb.shape = e.tensor.shape();
        vb.shape = e.tensor.shape();
        for (T x : e.m) mb.values.push_back(static_cast<float>(x));
        for (T x : e.v) vb.values.push_back(static_cast<float>(x));
        archive.tensors.emplace_back("adam.m." + e.name, std::move(mb));
        archive.tensors.emplace_back("adam.v." + e.name, std::move(vb));
    }
}

template <class T>
void AdamWT<T>::load_state(const Archive& archive) {
    auto it = archive.header.find("adam_step");
    if (it == archive.header.end()) throw ParseError("checkpoint missing adam_step");
    step_count_ = std::stoull(it->second);
    for (auto& e : entries_) {
        const TensorBlob* mb = archive.find("adam.m." + e.name);
        const TensorBlob* vb = archive.find("adam.v." + e.name);
        if (!mb || !vb) throw ParseError("checkpoint missing optimizer state for " + e.name);
        if (mb->values.size() != e.m.size() || vb->values.size() != e.v.size()) {
            throw ShapeMismatch("optimizer state size mismatch for " + e.name);
        }
        for (std::size_t i = 0; i < e.m.size(); ++i) {
            e.m[i] = static_cast<T>(mb->values[i]);
            e.v[i] = static_cast<T>(vb->values[i]);
        }
    }
}

template class AdamWT<float>;
template class AdamWT<double>;

}  // namespace akd
