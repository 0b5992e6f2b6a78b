#pragma once

#include <string>
#include <vector>

#include "akd/checkpoint.hpp"
#include "akd/tensor.hpp"

namespace akd {

// Linear warmup to max_lr over `warmup` steps, then cosine decay to zero at
// total_steps.
double cosine_lr(std::size_t step, double max_lr, std::size_t total_steps, std::size_t warmup);

enum class ParamGroup { projector, other };

// Adam with decoupled weight decay. Weight decay applies to the `other`
// group only; projectors are exempt.
template <class T>
class AdamWT {
public:
    AdamWT(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
           double weight_decay = 0.0);

    void add(const std::string& name, TensorT<T> tensor, ParamGroup group);

    // Applies one update using accumulated gradients, then advances the step
    // counter. Gradients are not cleared here.
    void step(double lr_projector, double lr_other);
    void zero_grad();

    std::size_t step_count() const { return step_count_; }
    double last_lr(ParamGroup g) const {
        return g == ParamGroup::projector ? last_lr_projector_ : last_lr_other_;
    }

    void append_state(Archive& archive) const;
    void load_state(const Archive& archive);

private:
    struct Entry {
        std::string name;
        TensorT<T> tensor;
        ParamGroup group;
        std::vector<T> m, v;
    };
    std::vector<Entry> entries_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t step_count_ = 0;
    double last_lr_projector_ = 0.0;
    double last_lr_other_ = 0.0;
};

}  // namespace akd
