#pragma once

#include <string>

#include "akd/synth.hpp"
#include "akd/trainer.hpp"
#include "akd/vlm.hpp"

namespace akd {

// Flat key=value run configuration. Unknown keys are rejected; every key can
// be overridden by an AKD_-prefixed environment variable (dots become
// underscores, upper-cased: train.steps -> AKD_TRAIN_STEPS).
struct RunConfig {
    VlmConfig teacher;
    VlmConfig student;
    TrainConfig train;
    SynthSpec synth;
    std::string train_path;
    std::string eval_path;
    std::string pretrain_path;   // optional stage-specific override
    std::string finetune_path;   // optional stage-specific override
    std::size_t probe_max_samples = 64;
    std::string out_dir = "out";

    // Dataset path for the configured stage, falling back to train_path.
    std::string stage_train_path() const;

    void validate() const;

    static RunConfig defaults();
    static RunConfig parse_text(const std::string& text, bool apply_env = true);
    static RunConfig parse_file(const std::string& path, bool apply_env = true);
};

}  // namespace akd
