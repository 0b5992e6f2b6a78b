#pragma once

#include <string>
#include <vector>

#include "akd/vlm.hpp"

namespace akd {

struct ProbeReport {
    std::vector<double> adjacent_cos;  // one per layer transition
    std::vector<double> segment_cos;   // one per recorded hidden state
    std::vector<double> segment_dist;  // normalized euclidean, same length
    std::size_t sample_count = 0;
};

struct ProbeSample {
    ToyImage image;
    std::vector<int> text_ids;
};

// Cosine similarity of flattened consecutive hidden states.
template <class T>
std::vector<double> adjacent_layer_cosine(const ForwardTraceT<T>& trace);

// Cosine similarity between the mean-pooled vision-segment and text-segment
// vectors of each recorded hidden state.
template <class T>
std::vector<double> segment_cosine_per_layer(const ForwardTraceT<T>& trace);

// Euclidean distance between the pooled segment vectors, divided by
// sqrt(d_model) so the metric is comparable across widths.
template <class T>
std::vector<double> segment_distance_per_layer(const ForwardTraceT<T>& trace);

template <class T>
ProbeReport probe_aggregate(const VlmT<T>& model, const std::vector<ProbeSample>& dataset,
                            std::size_t max_samples);

// CSV: one row per layer index plus a '#'-prefixed metadata line.
void write_probe_csv(const std::string& path, const ProbeReport& report,
                     std::uint64_t model_checksum, std::uint64_t model_seed);

}  // namespace akd
