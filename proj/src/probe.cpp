#include "akd/probe.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "akd/errors.hpp"

namespace akd {

namespace {

template <class T>
double cosine(std::span<const T> a, std::span<const T> b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
        na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
        nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
    }
    if (na == 0.0 || nb == 0.0) throw ZeroVector("cosine of zero-norm vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <class T>
std::pair<std::vector<double>, std::vector<double>> pooled_segments(const TensorT<T>& hidden,
                                                                    std::size_t n_vision,
                                                                    std::size_t n_text) {
    const std::size_t d = hidden.shape()[1];
    std::vector<double> vis(d, 0.0), txt(d, 0.0);
    const auto data = hidden.data();
    for (std::size_t r = 0; r < n_vision; ++r) {
        for (std::size_t j = 0; j < d; ++j) vis[j] += static_cast<double>(data[r * d + j]);
    }
    for (std::size_t r = 0; r < n_text; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            txt[j] += static_cast<double>(data[(n_vision + r) * d + j]);
        }
    }
    for (auto& v : vis) v /= static_cast<double>(n_vision);
    for (auto& v : txt) v /= static_cast<double>(n_text);
    return {std::move(vis), std::move(txt)};
}

}  // namespace

template <class T>
std::vector<double> adjacent_layer_cosine(const ForwardTraceT<T>& trace) {
    if (trace.hidden.size() < 2) throw ShapeMismatch("trace records fewer than two states");
    std::vector<double> out;
    for (std::size_t i = 0; i + 1 < trace.hidden.size(); ++i) {
        out.push_back(cosine(trace.hidden[i].data(), trace.hidden[i + 1].data()));
    }
    return out;
}

template <class T>
std::vector<double> segment_cosine_per_layer(const ForwardTraceT<T>& trace) {
    if (trace.n_vision == 0 || trace.n_text == 0) {
        throw ShapeMismatch("segment metrics need both vision and text tokens");
    }
    std::vector<double> out;
    for (const auto& h : trace.hidden) {
        auto [vis, txt] = pooled_segments(h, trace.n_vision, trace.n_text);
        out.push_back(cosine(std::span<const double>(vis), std::span<const double>(txt)));
    }
    return out;
}

template <class T>
std::vector<double> segment_distance_per_layer(const ForwardTraceT<T>& trace) {
    if (trace.n_vision == 0 || trace.n_text == 0) {
        throw ShapeMismatch("segment metrics need both vision and text tokens");
    }
    std::vector<double> out;
    for (const auto& h : trace.hidden) {
        auto [vis, txt] = pooled_segments(h, trace.n_vision, trace.n_text);
        double acc = 0;
        for (std::size_t j = 0; j < vis.size(); ++j) {
            const double dlt = vis[j] - txt[j];
            acc += dlt * dlt;
        }
        out.push_back(std::sqrt(acc) / std::sqrt(static_cast<double>(vis.size())));
    }
    return out;
}

template <class T>
ProbeReport probe_aggregate(const VlmT<T>& model, const std::vector<ProbeSample>& dataset,
                            std::size_t max_samples) {
    if (dataset.empty()) throw EmptyDataset("probe_aggregate on empty dataset");
    const std::size_t n = std::min(max_samples, dataset.size());
    if (n == 0) throw EmptyDataset("probe_aggregate with max_samples = 0");

    ProbeReport report;
    report.sample_count = n;
    NoGradGuard ng;
    for (std::size_t i = 0; i < n; ++i) {
        auto trace = model.run(dataset[i].image, dataset[i].text_ids, false);
        auto adj = adjacent_layer_cosine(trace);
        auto cos = segment_cosine_per_layer(trace);
        auto dist = segment_distance_per_layer(trace);
        if (i == 0) {
            report.adjacent_cos.assign(adj.size(), 0.0);
            report.segment_cos.assign(cos.size(), 0.0);
            report.segment_dist.assign(dist.size(), 0.0);
        }
        for (std::size_t j = 0; j < adj.size(); ++j) report.adjacent_cos[j] += adj[j];
        for (std::size_t j = 0; j < cos.size(); ++j) report.segment_cos[j] += cos[j];
        for (std::size_t j = 0; j < dist.size(); ++j) report.segment_dist[j] += dist[j];
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (auto& v : report.adjacent_cos) v *= inv;
    for (auto& v : report.segment_cos) v *= inv;
    for (auto& v : report.segment_dist) v *= inv;
    return report;
}

void write_probe_csv(const std::string& path, const ProbeReport& report,
                     std::uint64_t model_checksum, std::uint64_t model_seed) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(model_checksum));
    f << "# sample_count=" << report.sample_count << " model_checksum=" << buf
      << " seed=" << model_seed << "\n";
    f << "layer_index,adjacent_cos,segment_cos,segment_dist\n";
    auto num = [](double v) {
        char out[40];
        std::snprintf(out, sizeof(out), "%.17g", v);
        return std::string(out);
    };
    for (std::size_t i = 0; i < report.segment_cos.size(); ++i) {
        f << i << ",";
        if (i < report.adjacent_cos.size()) f << num(report.adjacent_cos[i]);
        f << "," << num(report.segment_cos[i]) << "," << num(report.segment_dist[i]) << "\n";
    }
    if (!f) throw IoError("write failed for '" + path + "'");
}

#define AKD_INSTANTIATE_PROBE(T)                                                   \
    template std::vector<double> adjacent_layer_cosine(const ForwardTraceT<T>&);   \
    template std::vector<double> segment_cosine_per_layer(const ForwardTraceT<T>&); \
    template std::vector<double> segment_distance_per_layer(const ForwardTraceT<T>&); \
    template ProbeReport probe_aggregate(const VlmT<T>&, const std::vector<ProbeSample>&, \
                                         std::size_t)

AKD_INSTANTIATE_PROBE(float);
AKD_INSTANTIATE_PROBE(double);

#undef AKD_INSTANTIATE_PROBE

}  // namespace akd
