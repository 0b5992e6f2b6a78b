#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "akd/data.hpp"
#include "akd/losses.hpp"
#include "akd/optim.hpp"
#include "akd/vlm.hpp"

namespace akd {

enum class Precision { f32, f64 };
enum class Stage { pretrain, finetune };

Precision precision_from_string(const std::string& s);
Stage stage_from_string(const std::string& s);

struct TrainConfig {
    std::size_t steps = 200;
    std::size_t batch_size = 4;
    std::size_t accumulation_steps = 1;
    double lr_projector_max = 1e-3;
    double lr_other_max = 2e-5;
    double lr_finetune_max = 4e-5;
    double warmup_frac = 0.03;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
    Precision precision = Precision::f32;
    Stage stage = Stage::pretrain;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
    LossConfig losses;

    double lr_backbone_max() const {
        return stage == Stage::pretrain ? lr_other_max : lr_finetune_max;
    }
    std::size_t warmup_steps() const {
        return static_cast<std::size_t>(warmup_frac * static_cast<double>(steps));
    }
    void validate() const;
};

struct EvalResult {
    double cross_entropy = 0.0;
    double exact_match = 0.0;
};

// Distillation session: owns the student, the projectors and the optimizer;
// the teacher stays frozen and may be replaced by a trace cache.
template <class T>
class DistillTrainerT {
public:
    DistillTrainerT(VlmT<T> student, std::optional<VlmT<T>> teacher,
                    std::optional<VlmConfig> teacher_cfg, const TrainConfig& cfg);

    // One micro-batch: teacher forward (no grad), student forward, enabled
    // loss terms, gradient accumulation; the optimizer runs once every
    // accumulation_steps micro-steps.
    LossReport micro_step(const DistillBatch& batch);

    // Full stage: iterates the shuffled dataset, logs one metrics row per
    // optimizer step, writes periodic and final checkpoints under out_dir.
    void train(const std::vector<Sample>& samples, const std::string& out_dir);

    // Precomputes per-sample teacher signals keyed by sample hash.
    void build_teacher_cache(const std::vector<Sample>& samples, const std::string& dir);
    // Loads cached signals; training then runs without a resident teacher.
    void load_teacher_cache(const std::string& dir, const std::vector<Sample>& samples);
    void release_teacher() { teacher_.reset(); }

    Archive checkpoint() const;
    void restore(const Archive& archive);

    VlmT<T>& student() { return student_; }
    const std::optional<VlmT<T>>& teacher() const { return teacher_; }
    HeadProjectorT<T>* p_attn() { return p_attn_ ? &*p_attn_ : nullptr; }
    EmbedProjectorT<T>* p_v() { return p_v_ ? &*p_v_ : nullptr; }
    AdamWT<T>& optimizer() { return opt_; }
    std::size_t completed_steps() const { return opt_.step_count(); }

private:
    TeacherSignalsT<T> teacher_signals(const Sample& sample, const std::vector<int>& text_ids);

    TrainConfig cfg_;
    VlmT<T> student_;
    std::optional<VlmT<T>> teacher_;
    std::optional<VlmConfig> teacher_cfg_;
    std::optional<HeadProjectorT<T>> p_attn_;
    std::optional<EmbedProjectorT<T>> p_v_;
    AdamWT<T> opt_;
    std::size_t micro_count_ = 0;
    std::unordered_map<std::uint64_t, TeacherSignalsT<T>> cache_;
    bool use_cache_ = false;
};

using DistillTrainer32 = DistillTrainerT<float>;
using DistillTrainer64 = DistillTrainerT<double>;

// Pooled masked cross-entropy over responses plus greedy exact-match rate.
template <class T>
EvalResult evaluate(const VlmT<T>& model, const std::vector<Sample>& samples);

// Checkpoint container for a full training session (student + projectors +
// optimizer state + step count).
template <class T>
Archive session_checkpoint(const VlmT<T>& student, const HeadProjectorT<T>* p_attn,
                           const EmbedProjectorT<T>* p_v, const AdamWT<T>& opt,
                           std::size_t step);

// Atomic-ish write: temp file then rename; removes the temp file on failure.
void write_checkpoint_file(const std::string& path, const Archive& archive);

}  // namespace akd
