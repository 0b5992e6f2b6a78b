#include "akd/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "akd/errors.hpp"
#include "akd/rng.hpp"

namespace akd {

using nlohmann::json;

TeacherForcing teacher_forcing(const std::vector<int>& prompt_ids,
                               const std::vector<int>& response_ids) {
    if (prompt_ids.empty()) throw EmptySequence("teacher forcing needs a non-empty prompt");
    if (response_ids.empty()) throw EmptySequence("teacher forcing needs a non-empty response");
    TeacherForcing tf;
    tf.text_ids = prompt_ids;
    tf.text_ids.insert(tf.text_ids.end(), response_ids.begin(), response_ids.end());
    const std::size_t n = tf.text_ids.size();
    const std::size_t p = prompt_ids.size();
    tf.targets.assign(n, tokens::kPad);
    tf.mask.assign(n, 0);
    for (std::size_t t = 0; t + 1 < n; ++t) {
        tf.targets[t] = tf.text_ids[t + 1];
        tf.mask[t] = (t + 1 >= p) ? 1 : 0;
    }
    return tf;
}

void save_dataset(const std::string& path, const std::vector<Sample>& samples,
                  std::uint64_t seed) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    json header = {{"schema", 1},
                   {"kind", "akd-dataset"},
                   {"n", samples.size()},
                   {"seed", seed}};
    f << header.dump() << "\n";
    for (const auto& s : samples) {
        json rec;
        auto& patches = rec["image_patches"];
        patches = json::array();
        for (std::size_t r = 0; r < s.image.rows * s.image.cols; ++r) {
            json row = json::array();
            for (std::size_t j = 0; j < s.image.d_patch; ++j) {
                row.push_back(s.image.patch_features[r * s.image.d_patch + j]);
            }
            patches.push_back(std::move(row));
        }
        rec["grid"] = {s.image.rows, s.image.cols};
        rec["prompt_ids"] = s.prompt_ids;
        rec["response_ids"] = s.response_ids;
        f << rec.dump() << "\n";
    }
    if (!f) throw IoError("write failed for '" + path + "'");
}

std::vector<Sample> load_samples(const std::string& path, std::size_t vocab_size,
                                 std::size_t max_text_tokens) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for reading");
    std::string line;
    std::size_t line_no = 0;
    std::vector<Sample> out;

    auto fail = [&](const std::string& msg) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": " + msg);
    };

    if (!std::getline(f, line)) throw EmptyDataset("'" + path + "' is empty");
    line_no = 1;
    json header = json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.contains("schema")) fail("missing schema header");
    if (header["schema"].get<int>() != 1) fail("unsupported schema version");

    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec = json::parse(line, nullptr, false);
        if (rec.is_discarded()) fail("malformed JSON record");
        if (!rec.contains("image_patches") || !rec.contains("prompt_ids") ||
            !rec.contains("response_ids") || !rec.contains("grid")) {
            fail("record missing required fields");
        }
        Sample s;
        s.image.rows = rec["grid"][0].get<std::size_t>();
        s.image.cols = rec["grid"][1].get<std::size_t>();
        const auto& patches = rec["image_patches"];
        if (patches.empty() || patches.size() != s.image.rows * s.image.cols) {
            fail("patch count does not match grid");
        }
        s.image.d_patch = patches[0].size();
        s.image.patch_features.reserve(patches.size() * s.image.d_patch);
        for (const auto& row : patches) {
            if (row.size() != s.image.d_patch) fail("ragged patch rows");
            for (const auto& v : row) s.image.patch_features.push_back(v.get<double>());
        }
        auto read_ids = [&](const char* key, std::vector<int>& ids) {
            for (const auto& v : rec[key]) {
                const int id = v.get<int>();
                if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) {
                    throw InvalidTokenId(path + ":" + std::to_string(line_no) + ": token " +
                                         std::to_string(id) + " outside vocab");
                }
                ids.push_back(id);
            }
        };
        read_ids("prompt_ids", s.prompt_ids);
        read_ids("response_ids", s.response_ids);
        if (s.prompt_ids.empty() || s.response_ids.empty()) fail("empty prompt or response");
        if (s.prompt_ids.size() + s.response_ids.size() > max_text_tokens) {
            fail("sample exceeds max_text_tokens");
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) throw EmptyDataset("'" + path + "' holds no samples");
    return out;
}

std::vector<DistillBatch> make_batches(const std::vector<Sample>& samples,
                                       std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch) {
    if (samples.empty()) throw EmptyDataset("make_batches on empty dataset");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");

    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
    for (std::size_t i = order.size(); i-- > 1;) {
        const std::size_t j = rng.uniform_int(i + 1);
        std::swap(order[i], order[j]);
    }

    std::vector<DistillBatch> batches;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(start + batch_size, order.size());
        DistillBatch b;
        std::size_t max_len = 0;
        for (std::size_t i = start; i < end; ++i) {
            const Sample& s = samples[order[i]];
            max_len = std::max(max_len, s.prompt_ids.size() + s.response_ids.size());
        }
        for (std::size_t i = start; i < end; ++i) {
            const Sample& s = samples[order[i]];
            b.images.push_back(s.image);
            b.prompt_ids.push_back(s.prompt_ids);
            b.response_ids.push_back(s.response_ids);
            std::vector<std::uint8_t> mask(max_len, 0);
            for (std::size_t t = s.prompt_ids.size();
                 t < s.prompt_ids.size() + s.response_ids.size(); ++t) {
                mask[t] = 1;
            }
            b.loss_mask.push_back(std::move(mask));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

std::uint64_t sample_hash(const Sample& sample) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix_bytes = [&](const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ull;
        }
    };
    mix_bytes(sample.image.patch_features.data(),
              sample.image.patch_features.size() * sizeof(double));
    mix_bytes(sample.prompt_ids.data(), sample.prompt_ids.size() * sizeof(int));
    mix_bytes(sample.response_ids.data(), sample.response_ids.size() * sizeof(int));
    return h;
}

}  // namespace akd
