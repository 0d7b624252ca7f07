// Reverse-process sampling for the masked diffusion model and greedy decoding
// for the autoregressive baseline. Both are written against small interfaces
// so scripted denoisers can stand in for a trained network.

#pragma once

#include "eegtext/matrix.hpp"
#include "eegtext/random.hpp"
#include "eegtext/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext::mdlm {

/// Anything that predicts response logits given a partially masked response.
template <typename M>
concept Denoiser = requires(M& m, const rvq::EEGTokenSequence& p, const std::vector<int>& r, double t) {
    { m.mask_id() } -> std::convertible_to<int>;
    { m.denoise_logits(p, r, t).rows } -> std::convertible_to<int>;
};

/// Anything that predicts the next token given a prompt and a prefix.
template <typename M>
concept NextTokenModel = requires(M& m, const rvq::EEGTokenSequence& p, const std::vector<int>& prefix) {
    { m.eos_id() } -> std::convertible_to<int>;
    { m.next_logits(p, prefix).cols } -> std::convertible_to<int>;
};

enum class Remask {
    low_confidence,  // global ranking; committed tokens may be re-masked
    random,          // random subset of the masked positions is committed
};

inline std::string to_string(Remask r) { return r == Remask::random ? "random" : "low_confidence"; }
inline Remask parse_remask(const std::string& s) {
    if (s == "low_confidence") return Remask::low_confidence;
    if (s == "random") return Remask::random;
    throw std::invalid_argument("unknown remasking strategy '" + s + "'");
}

struct GenerationConfig {
    int steps = 8;
    int length = 12;
    Remask remask = Remask::low_confidence;
    uint64_t seed = 0;
    bool keep_states = false;
};

struct GenerationResult {
    std::vector<int> tokens;
    std::vector<int> masked_after_step;       // one entry per step
    std::vector<std::vector<int>> states;     // response after each step, if requested
    rvq::EEGTokenSequence prompt;             // prompt as seen after the last step
};

/// Number of positions still masked after step s (counting down from S to 1).
inline int masked_target(int length, int step, int steps) {
    const long q = static_cast<long>(length) * (step - 1);
    return static_cast<int>((2 * q + steps) / (2L * steps));
}

/// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
int argmax_row(const Matrix<T>& m, int r) {
    int best = 0;
    for (int c = 1; c < m.cols; ++c)
        if (m(r, c) > m(r, best)) best = c;
    return best;
}

/// Softmax probability of column `c` in row `r`.
template <typename T>
double row_probability(const Matrix<T>& m, int r, int c) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m.cols; ++j) mx = std::max(mx, static_cast<double>(m(r, j)));
    double z = 0;
    for (int j = 0; j < m.cols; ++j) z += std::exp(static_cast<double>(m(r, j)) - mx);
    return std::exp(static_cast<double>(m(r, c)) - mx) / z;
}

/// Starts from an all-MASK response and, for s = S..1, predicts every
/// masked position then re-masks down to round(L*(s-1)/S) positions.
template <Denoiser M>
GenerationResult generate(M& model, const rvq::EEGTokenSequence& prompt, const GenerationConfig& cfg) {
    if (cfg.steps < 1) throw std::invalid_argument("generate: steps must be >= 1");
    if (cfg.length < 1) throw std::invalid_argument("generate: length must be >= 1");
    const int L = cfg.length, S = cfg.steps, mask = model.mask_id();
    Rng rng = make_rng(cfg.seed, "generate");
    GenerationResult out;
    out.prompt = prompt;
    std::vector<int> resp(L, mask);
    std::vector<double> conf(L, -std::numeric_limits<double>::infinity());
    std::vector<char> masked(L, 1);

    for (int s = S; s >= 1; --s) {
        const double t = static_cast<double>(s) / S;
        const auto logits = model.denoise_logits(out.prompt, resp, t);
        if (logits.rows != L) throw std::logic_error("generate: denoiser returned wrong number of rows");
        std::vector<int> proposal = resp;
        std::vector<double> score = conf;
        for (int i = 0; i < L; ++i) {
            if (!masked[i]) continue;
            proposal[i] = argmax_row(logits, i);
            score[i] = cfg.remask == Remask::random ? uniform01(rng) : row_probability(logits, i, proposal[i]);
        }
        const int keep_masked = masked_target(L, s, S);
        std::vector<int> order;
        if (cfg.remask == Remask::low_confidence) {
            order.resize(L);
            std::iota(order.begin(), order.end(), 0);
        } else {
            for (int i = 0; i < L; ++i)
                if (masked[i]) order.push_back(i);
        }
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] > score[b]; });
        const int committed_before = L - static_cast<int>(std::count(masked.begin(), masked.end(), 1));
        const int commit = cfg.remask == Remask::low_confidence ? L - keep_masked : L - keep_masked - committed_before;
        std::vector<char> next_masked(L, cfg.remask == Remask::low_confidence ? 1 : 0);
        if (cfg.remask == Remask::random)
            for (int i = 0; i < L; ++i) next_masked[i] = masked[i];
        for (int k = 0; k < commit && k < static_cast<int>(order.size()); ++k) next_masked[order[k]] = 0;
        for (int i = 0; i < L; ++i) {
            if (next_masked[i]) {
                resp[i] = mask;
                conf[i] = -std::numeric_limits<double>::infinity();
            } else {
                resp[i] = proposal[i];
                conf[i] = score[i];
            }
        }
        masked = std::move(next_masked);
        out.masked_after_step.push_back(static_cast<int>(std::count(masked.begin(), masked.end(), 1)));
        if (cfg.keep_states) out.states.push_back(resp);
    }
    out.tokens = std::move(resp);
    return out;
}

/// Greedy decoding until EOS (excluded from the output) or `max_len` tokens.
template <NextTokenModel M>
std::vector<int> ar_generate(M& model, const rvq::EEGTokenSequence& prompt, int max_len) {
    if (max_len < 1) throw std::invalid_argument("ar_generate: max_len must be >= 1");
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_len) {
        const auto logits = model.next_logits(prompt, out);
        const int next = argmax_row(logits, logits.rows - 1);
        if (next == model.eos_id()) break;
        out.push_back(next);
    }
    return out;
}

}  // namespace eegtext::mdlm
