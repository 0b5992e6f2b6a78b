#include "akd/synth.hpp"

#include <algorithm>

#include "akd/errors.hpp"
#include "akd/rng.hpp"

namespace akd {

namespace {

constexpr std::size_t kColors = 8;
constexpr std::size_t kShapes = 8;
constexpr double kFeatureNoise = 0.02;

struct SceneObject {
    std::size_t row, col, color, shape;
};

std::vector<int> caption_response(const std::vector<SceneObject>& scene) {
    // objects listed in row-major cell order
    std::vector<SceneObject> sorted = scene;
    std::sort(sorted.begin(), sorted.end(), [](const SceneObject& a, const SceneObject& b) {
        return a.row != b.row ? a.row < b.row : a.col < b.col;
    });
    std::vector<int> out;
    for (const auto& o : sorted) {
        out.push_back(tokens::kColorBase + static_cast<int>(o.color));
        out.push_back(tokens::kShapeBase + static_cast<int>(o.shape));
        out.push_back(tokens::kAt);
        out.push_back(tokens::kRowBase + static_cast<int>(o.row));
        out.push_back(tokens::kColBase + static_cast<int>(o.col));
    }
    out.push_back(tokens::kEos);
    return out;
}

}  // namespace

std::vector<Sample> synth_generate(const SynthSpec& spec, std::size_t patch_rows,
                                   std::size_t patch_cols, std::size_t d_patch) {
    if (spec.n_samples == 0) throw ConfigError("synth n_samples must be >= 1");
    if (d_patch < kColors + kShapes) {
        throw ConfigError("d_patch must be >= 16 for the color/shape encoding");
    }
    if (patch_rows > kColors || patch_cols > kShapes) {
        throw ConfigError("patch grid larger than the position token range");
    }
    const double wsum = spec.w_caption + spec.w_attribute + spec.w_position;
    if (spec.w_caption < 0 || spec.w_attribute < 0 || spec.w_position < 0 || wsum <= 0) {
        throw ConfigError("task mix weights must be nonnegative with positive sum");
    }

    Rng rng(spec.seed);
    std::vector<Sample> out;
    for (std::size_t s = 0; s < spec.n_samples; ++s) {
        // scene: 1-2 objects on distinct cells with distinct colors and shapes
        const std::size_t n_obj = 1 + rng.uniform_int(2);
        std::vector<SceneObject> scene;
        while (scene.size() < n_obj) {
            SceneObject o;
            o.row = rng.uniform_int(patch_rows);
            o.col = rng.uniform_int(patch_cols);
            o.color = rng.uniform_int(kColors);
            o.shape = rng.uniform_int(kShapes);
            bool clash = false;
            for (const auto& p : scene) {
                clash = clash || (p.row == o.row && p.col == o.col) || p.color == o.color ||
                        p.shape == o.shape;
            }
            if (!clash) scene.push_back(o);
        }

        Sample sample;
        sample.image.rows = patch_rows;
        sample.image.cols = patch_cols;
        sample.image.d_patch = d_patch;
        sample.image.patch_features.resize(patch_rows * patch_cols * d_patch);
        for (auto& v : sample.image.patch_features) v = rng.normal() * kFeatureNoise;
        for (const auto& o : scene) {
            double* cell =
                sample.image.patch_features.data() + (o.row * patch_cols + o.col) * d_patch;
            cell[o.color] += 1.0;
            cell[kColors + o.shape] += 1.0;
        }

        const double pick = rng.uniform() * wsum;
        const SceneObject& q = scene[rng.uniform_int(scene.size())];
        if (pick < spec.w_caption) {
            sample.prompt_ids = {tokens::kDescribe};
            sample.response_ids = caption_response(scene);
        } else if (pick < spec.w_caption + spec.w_attribute) {
            sample.prompt_ids = {tokens::kWhat, tokens::kColorWord, tokens::kIs, tokens::kThe,
                                 tokens::kShapeBase + static_cast<int>(q.shape)};
            sample.response_ids = {tokens::kColorBase + static_cast<int>(q.color), tokens::kEos};
        } else {
            sample.prompt_ids = {tokens::kWhat, tokens::kIs, tokens::kAt,
                                 tokens::kRowBase + static_cast<int>(q.row),
                                 tokens::kColBase + static_cast<int>(q.col)};
            sample.response_ids = {tokens::kColorBase + static_cast<int>(q.color),
                                   tokens::kShapeBase + static_cast<int>(q.shape), tokens::kEos};
        }

        if (sample.prompt_ids.size() > spec.max_prompt_tokens) continue;  // drop, not truncate
        out.push_back(std::move(sample));
    }
    return out;
}

bool synth_self_check(const Sample& sample) {
    const std::size_t d = sample.image.d_patch;
    // decode the scene back from patch features
    std::vector<SceneObject> scene;
    for (std::size_t r = 0; r < sample.image.rows; ++r) {
        for (std::size_t c = 0; c < sample.image.cols; ++c) {
            const double* cell =
                sample.image.patch_features.data() + (r * sample.image.cols + c) * d;
            std::size_t color = 0, shape = 0;
            for (std::size_t j = 1; j < kColors; ++j) {
                if (cell[j] > cell[color]) color = j;
            }
            for (std::size_t j = 1; j < kShapes; ++j) {
                if (cell[kColors + j] > cell[kColors + shape]) shape = j;
            }
            if (cell[color] > 0.5 && cell[kColors + shape] > 0.5) {
                scene.push_back({r, c, color, shape});
            }
        }
    }
    if (scene.empty()) return false;

    std::vector<int> expected;
    const auto& p = sample.prompt_ids;
    if (p.size() == 1 && p[0] == tokens::kDescribe) {
        expected = caption_response(scene);
    } else if (p.size() == 5 && p[0] == tokens::kWhat && p[1] == tokens::kColorWord) {
        const int shape_tok = p[4];
        for (const auto& o : scene) {
            if (tokens::kShapeBase + static_cast<int>(o.shape) == shape_tok) {
                expected = {tokens::kColorBase + static_cast<int>(o.color), tokens::kEos};
            }
        }
    } else if (p.size() == 5 && p[0] == tokens::kWhat && p[1] == tokens::kIs &&
               p[2] == tokens::kAt) {
        for (const auto& o : scene) {
            if (tokens::kRowBase + static_cast<int>(o.row) == p[3] &&
                tokens::kColBase + static_cast<int>(o.col) == p[4]) {
                expected = {tokens::kColorBase + static_cast<int>(o.color),
                            tokens::kShapeBase + static_cast<int>(o.shape), tokens::kEos};
            }
        }
    }
    return !expected.empty() && expected == sample.response_ids;
}

}  // namespace akd
