#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "akd/synth.hpp"

namespace akd {

// One training batch. Token arrays keep their true lengths; loss_mask is
// padded to the longest prompt+response in the batch and is true exactly on
// response positions (pad positions stay false and enter no loss).
struct DistillBatch {
    std::vector<ToyImage> images;
    std::vector<std::vector<int>> prompt_ids;
    std::vector<std::vector<int>> response_ids;
    std::vector<std::vector<std::uint8_t>> loss_mask;

    std::size_t size() const { return images.size(); }
    std::size_t padded_len() const { return loss_mask.empty() ? 0 : loss_mask[0].size(); }
};

// Next-token supervision over one sample's text sequence: position t predicts
// text_ids[t+1]; masked in exactly where that next token is a response token.
struct TeacherForcing {
    std::vector<int> text_ids;  // prompt ++ response
    std::vector<int> targets;
    std::vector<std::uint8_t> mask;
};

TeacherForcing teacher_forcing(const std::vector<int>& prompt_ids,
                               const std::vector<int>& response_ids);

// Line-delimited JSON with a schema header line.
void save_dataset(const std::string& path, const std::vector<Sample>& samples,
                  std::uint64_t seed);
std::vector<Sample> load_samples(const std::string& path, std::size_t vocab_size,
                                 std::size_t max_text_tokens);

// Deterministic shuffled batch sequence for one epoch.
std::vector<DistillBatch> make_batches(const std::vector<Sample>& samples,
                                       std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch);

// FNV-1a over image bytes and token ids; keys the teacher-trace cache.
std::uint64_t sample_hash(const Sample& sample);

}  // namespace akd
