// Shared helpers for the test binaries: random fixtures, a central-difference
// gradient checker and tiny model builders.

#pragma once

#include "eegtext/autograd.hpp"
#include "eegtext/corpus.hpp"
#include "eegtext/mdlm.hpp"
#include "eegtext/random.hpp"
#include "eegtext/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace testing_support {

using namespace eegtext;

inline Matrix<double> random_matrix(int r, int c, Rng& rng, double sd = 1.0) {
    Matrix<double> m(r, c);
    for (auto& v : m.data) v = sd * standard_normal(rng);
    return m;
}

struct GradReport {
    double worst_rel = 0;   // over entries whose magnitude exceeds the floor
    double worst_abs = 0;   // over entries below the floor
    size_t checked = 0;
    std::string worst_where;
};

/// Central differences on every entry of every parameter. `loss` must
/// evaluate the objective from the current parameter values; `analytic` must
/// leave d(loss)/d(param) in each param's grad.
inline GradReport check_gradients(const std::vector<Parameter<double>*>& params, const std::function<double()>& loss,
                                  const std::function<void()>& analytic, double step = 1e-5, double floor = 1e-7) {
    for (auto* p : params) p->zero_grad();
    analytic();
    GradReport rep;
    for (auto* p : params) {
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double keep = p->value.data[i];
            p->value.data[i] = keep + step;
            const double up = loss();
            p->value.data[i] = keep - step;
            const double down = loss();
            p->value.data[i] = keep;
            const double numeric = (up - down) / (2 * step);
            const double a = p->grad.data[i];
            const double scale = std::max(std::abs(a), std::abs(numeric));
            ++rep.checked;
            if (scale > floor) {
                const double rel = std::abs(a - numeric) / scale;
                if (rel > rep.worst_rel) {
                    rep.worst_rel = rel;
                    rep.worst_where = p->name + "[" + std::to_string(i) + "] analytic " + std::to_string(a) +
                                      " numeric " + std::to_string(numeric);
                }
            } else {
                rep.worst_abs = std::max(rep.worst_abs, std::abs(a - numeric));
            }
        }
    }
    return rep;
}

inline mdlm::Vocabulary tiny_vocab(int words = 6, std::vector<int> sizes = {4, 3}) {
    mdlm::Vocabulary v;
    for (int i = 0; i < words; ++i) v.words.push_back("w" + std::to_string(i));
    v.codebook_sizes = std::move(sizes);
    return v;
}

inline mdlm::ModelConfig tiny_config(mdlm::ModelKind kind = mdlm::ModelKind::diffusion) {
    mdlm::ModelConfig c;
    c.layers = 2;
    c.width = 8;
    c.heads = 2;
    c.context = 16;
    c.mlp_ratio = 2;
    c.kind = kind;
    return c;
}

/// Gives every parameter non-trivial values so gradient checks exercise all
/// paths (gates, biases and LayerNorm gains start at 0 or 1 otherwise).
inline void perturb_parameters(std::vector<Parameter<double>*> params, Rng& rng, double sd = 0.3) {
    for (auto* p : params)
        for (auto& v : p->value.data) v += sd * standard_normal(rng);
}

inline rvq::EEGTokenSequence random_tokens(int length, const std::vector<int>& sizes, Rng& rng) {
    rvq::EEGTokenSequence s;
    s.length = length;
    s.stages = static_cast<int>(sizes.size());
    s.codebook_sizes = sizes;
    for (int t = 0; t < length; ++t)
        for (int m = 0; m < s.stages; ++m) s.indices.push_back(static_cast<int>(uniform_index(rng, sizes[m])));
    return s;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("eegtext_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

inline corpus::SynthesisConfig small_corpus_config(int sentences = 40, uint64_t seed = 3) {
    corpus::SynthesisConfig c;
    c.vocab_size = 12;
    c.sentence_count = sentences;
    c.min_length = 3;
    c.max_length = 5;
    c.channels = 4;
    c.bands = 2;
    c.embed_dim = 4;
    c.seed = seed;
    return c;
}

}  // namespace testing_support
