#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "akd/vlm.hpp"

namespace akd {

// Fixed token ids for the synthetic colored-shapes task.
namespace tokens {
constexpr int kPad = 0;
constexpr int kEos = 2;
constexpr int kColorBase = 10;  // 8 colors
constexpr int kShapeBase = 20;  // 8 shapes
constexpr int kRowBase = 30;    // grid rows
constexpr int kColBase = 40;    // grid cols
constexpr int kWhat = 50;
constexpr int kColorWord = 51;
constexpr int kIs = 53;
constexpr int kThe = 54;
constexpr int kAt = 55;
constexpr int kDescribe = 56;
constexpr int kMinVocab = 64;
}  // namespace tokens

struct Sample {
    ToyImage image;
    std::vector<int> prompt_ids;
    std::vector<int> response_ids;
};

struct SynthSpec {
    std::size_t n_samples = 256;
    std::uint64_t seed = 7;
    std::size_t max_prompt_tokens = 8;  // overlong prompts are dropped, not truncated
    double w_caption = 1.0;
    double w_attribute = 1.0;
    double w_position = 1.0;
};

// Procedurally generated scenes of colored shapes on the patch grid, paired
// with templated questions and ground-truth answers. Deterministic in the
// seed; samples whose prompt exceeds the cap are dropped.
std::vector<Sample> synth_generate(const SynthSpec& spec, std::size_t patch_rows,
                                   std::size_t patch_cols, std::size_t d_patch);

// Re-derives the answer from the rendered image and the prompt; true iff it
// matches the labeled response.
bool synth_self_check(const Sample& sample);

}  // namespace akd
