// Masked diffusion language model conditioned on RVQ token prompts, and a
// matched autoregressive baseline sharing the same transformer.
//
// Layout of one sequence fed to the trunk:
//   [ prompt rows (T')              | response rows (L)          ]
//     sum_m code_embed[m][q_tm]       word_embed[token]
//     + pos[t] + segment[0]           + pos[i] + segment[1]
//   plus, for the diffusion model, a projected sinusoidal embedding of t on
//   every row. Prompt and response positions are both counted from 0 so that
//   word i of the response and latent i of the prompt share a position vector.
//
// Pre-training on EEG tokens alone flattens the (T' x M) codes into T'*M rows,
// row (t, m) embedding code_embed[m][q_tm] + pos[t] + segment[0], and swaps the
// text output head for one over all sum_m K_m code classes.

#pragma once

#include "eegtext/autograd.hpp"
#include "eegtext/io.hpp"
#include "eegtext/optim.hpp"
#include "eegtext/random.hpp"
#include "eegtext/rvq.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext::mdlm {

using rvq::EEGTokenSequence;
using rvq::NumericError;

class ContextOverflow : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

/// Word tokens 0..V-1, then EOS, MASK, PAD. EEG codes live in separate
/// per-stage embedding tables and are never produced by the text head.
struct Vocabulary {
    std::vector<std::string> words;
    std::vector<int> codebook_sizes;

    int word_count() const { return static_cast<int>(words.size()); }
    int eos() const { return word_count(); }
    int mask() const { return word_count() + 1; }
    int pad() const { return word_count() + 2; }
    int input_size() const { return word_count() + 3; }
    /// Text head classes: words and EOS.
    int output_size() const { return word_count() + 1; }
    int stages() const { return static_cast<int>(codebook_sizes.size()); }
    int code_offset(int stage) const {
        return std::accumulate(codebook_sizes.begin(), codebook_sizes.begin() + stage, 0);
    }
    /// EEG head classes: every code of every stage.
    int eeg_output_size() const { return std::accumulate(codebook_sizes.begin(), codebook_sizes.end(), 0); }
    /// MASK in the flattened code id space; embeds through the word MASK row.
    int code_mask() const { return eeg_output_size(); }

    /// Word ids up to (not including) the first EOS; MASK/PAD are skipped.
    std::vector<int> strip(const std::vector<int>& ids) const {
        std::vector<int> out;
        for (int id : ids) {
            if (id == eos()) break;
            if (id >= 0 && id < word_count()) out.push_back(id);
        }
        return out;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string s;
        for (int id : strip(ids)) {
            if (!s.empty()) s += ' ';
            s += words[id];
        }
        return s;
    }

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;
};

enum class Phase { pretrain, sft, ar };

inline std::string to_string(Phase p) {
    switch (p) {
        case Phase::pretrain: return "pretrain";
        case Phase::sft: return "sft";
        default: return "ar";
    }
}
inline Phase parse_phase(const std::string& s) {
    if (s == "pretrain") return Phase::pretrain;
    if (s == "sft") return Phase::sft;
    if (s == "ar") return Phase::ar;
    throw std::invalid_argument("unknown phase '" + s + "'");
}

enum class ModelKind { diffusion, autoregressive };

struct ModelConfig {
    int layers = 4;
    int width = 128;
    int heads = 4;
    int context = 128;
    int mlp_ratio = 4;
    ModelKind kind = ModelKind::diffusion;

    void validate() const {
        if (layers < 1 || width < 2 || heads < 1 || context < 2 || mlp_ratio < 1)
            throw std::invalid_argument("ModelConfig: layers, width, heads, context and mlp_ratio must be positive");
        if (width % heads != 0) throw std::invalid_argument("ModelConfig: width must be divisible by heads");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct MaskedSequence {
    std::vector<int> tokens;
    std::vector<char> mask_flags;
    double t = 1.0;

    int masked_count() const { return static_cast<int>(std::count(mask_flags.begin(), mask_flags.end(), 1)); }
};

/// Replaces each position by `mask_id` independently with probability t.
inline MaskedSequence forward_mask(const std::vector<int>& x0, double t, int mask_id, Rng& rng) {
    if (!(t > 0.0 && t <= 1.0)) throw std::invalid_argument("forward_mask: t must lie in (0, 1]");
    MaskedSequence s;
    s.t = t;
    s.tokens = x0;
    s.mask_flags.assign(x0.size(), 0);
    for (size_t i = 0; i < x0.size(); ++i) {
        if (x0[i] == mask_id) throw std::invalid_argument("forward_mask: input already contains MASK");
        if (uniform01(rng) < t) {
            s.tokens[i] = mask_id;
            s.mask_flags[i] = 1;
        }
    }
    return s;
}

/// t ~ Uniform(0, 1].
inline double sample_timestep(Rng& rng) { return 1.0 - uniform01(rng); }

/// Masks x0 at a freshly sampled t, resampling t until at least one position
/// is masked.
inline MaskedSequence sample_corruption(const std::vector<int>& x0, int mask_id, Rng& rng) {
    if (x0.empty()) throw std::invalid_argument("sample_corruption: empty sequence");
    for (;;) {
        auto s = forward_mask(x0, sample_timestep(rng), mask_id, rng);
        if (s.masked_count() > 0) return s;
    }
}

/// (1/t) * (1/L) * sum over the masked rows of CE(logits_row, target), where L
/// is the corrupted sequence length. Equal to (1/t) times the mean over masked
/// rows when every row is masked. Since E[#masked / (L t)] = 1, a uniform
/// predictor over V classes scores ln V in expectation.
template <typename T>
Var masked_diffusion_loss(Tape<T>& tape, Var logits, const std::vector<int>& targets,
                          const std::vector<char>& mask_flags, double t) {
    const int n = static_cast<int>(std::count(mask_flags.begin(), mask_flags.end(), 1));
    if (n == 0) throw std::invalid_argument("masked_diffusion_loss: no masked positions");
    std::vector<T> w(targets.size(), T(0));
    for (size_t i = 0; i < targets.size(); ++i)
        if (mask_flags[i]) w[i] = static_cast<T>(1.0 / (t * static_cast<double>(targets.size())));
    return tape.cross_entropy(logits, targets, std::move(w));
}

/// Response targets: the sentence followed by EOS up to `length`.
inline std::vector<int> response_targets(const std::vector<int>& words, int length, const Vocabulary& vocab) {
    if (static_cast<int>(words.size()) > length)
        throw ContextOverflow("sentence of " + std::to_string(words.size()) + " words exceeds response length " +
                              std::to_string(length));
    std::vector<int> x0 = words;
    x0.resize(length, vocab.eos());
    return x0;
}

/// Flattened pre-training ids: stage-major, entry (t, m) at m*T' + t with id
/// code_offset(m) + q_tm.
inline std::vector<int> flatten_codes(const EEGTokenSequence& e, const Vocabulary& vocab) {
    std::vector<int> ids(static_cast<size_t>(e.length) * e.stages);
    for (int m = 0; m < e.stages; ++m)
        for (int t = 0; t < e.length; ++t) ids[static_cast<size_t>(m) * e.length + t] = vocab.code_offset(m) + e.at(t, m);
    return ids;
}

inline std::vector<double> timestep_features(double t, int width) {
    std::vector<double> f(width);
    for (int i = 0; i < width / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / width);
        f[2 * i] = std::sin(1000.0 * t * freq);
        f[2 * i + 1] = std::cos(1000.0 * t * freq);
    }
    return f;
}

template <typename T>
struct Block {
    Parameter<T> ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <typename T>
class Transformer {
  public:
    ModelConfig config;
    Vocabulary vocab;
    Phase phase = Phase::sft;
    uint64_t seed = 0;

    Parameter<T> word_embed, pos_embed, seg_embed;
    std::vector<Parameter<T>> code_embed;
    Parameter<T> time_w, time_b, time_gate;  // diffusion only
    std::vector<Block<T>> blocks;
    Parameter<T> lnf_g, lnf_b;
    Parameter<T> text_head_w, text_head_b;
    Parameter<T> eeg_head_w, eeg_head_b;  // diffusion only

    Transformer() = default;

    Transformer(const ModelConfig& cfg, Vocabulary v, uint64_t seed_) : config(cfg), vocab(std::move(v)), seed(seed_) {
        cfg.validate();
        if (vocab.word_count() < 1) throw std::invalid_argument("Transformer: empty word vocabulary");
        if (vocab.codebook_sizes.empty()) throw std::invalid_argument("Transformer: no EEG codebooks");
        phase = cfg.kind == ModelKind::diffusion ? Phase::pretrain : Phase::ar;
        Rng rng = make_rng(seed_, "transformer-init");
        const int d = cfg.width;
        const double out_sd = 0.02 / std::sqrt(2.0 * cfg.layers);
        word_embed = make("word_embed", vocab.input_size(), d, 0.02, rng);
        pos_embed = make("pos_embed", cfg.context, d, 0.02, rng);
        seg_embed = make("seg_embed", 2, d, 0.02, rng);
        for (int m = 0; m < vocab.stages(); ++m)
            code_embed.push_back(make("code_embed." + std::to_string(m), vocab.codebook_sizes[m], d, 0.02, rng));
        if (is_diffusion()) {
            time_w = make("time_w", d, d, 0.02, rng);
            time_b = zeros("time_b", 1, d);
            time_gate = zeros("time_gate", 1, 1);
        }
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = "blocks." + std::to_string(l) + ".";
            Block<T> b;
            b.ln1_g = ones(p + "ln1_g", d);
            b.ln1_b = zeros(p + "ln1_b", 1, d);
            b.wqkv = make(p + "wqkv", d, 3 * d, 0.02, rng);
            b.bqkv = zeros(p + "bqkv", 1, 3 * d);
            b.wo = make(p + "wo", d, d, out_sd, rng);
            b.bo = zeros(p + "bo", 1, d);
            b.ln2_g = ones(p + "ln2_g", d);
            b.ln2_b = zeros(p + "ln2_b", 1, d);
            b.w1 = make(p + "w1", d, cfg.mlp_ratio * d, 0.02, rng);
            b.b1 = zeros(p + "b1", 1, cfg.mlp_ratio * d);
            b.w2 = make(p + "w2", cfg.mlp_ratio * d, d, out_sd, rng);
            b.b2 = zeros(p + "b2", 1, d);
            blocks.push_back(std::move(b));
        }
        lnf_g = ones("lnf_g", d);
        lnf_b = zeros("lnf_b", 1, d);
        text_head_w = make("text_head_w", d, vocab.output_size(), 0.02, rng);
        text_head_b = zeros("text_head_b", 1, vocab.output_size());
        if (is_diffusion()) {
            eeg_head_w = make("eeg_head_w", d, vocab.eeg_output_size(), 0.02, rng);
            eeg_head_b = zeros("eeg_head_b", 1, vocab.eeg_output_size());
        }
    }

    bool is_diffusion() const { return config.kind == ModelKind::diffusion; }

    /// Every parameter of the model.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> ps = trunk_parameters();
        ps.push_back(&word_embed);
        for (auto& c : code_embed) ps.push_back(&c);
        ps.push_back(&text_head_w);
        ps.push_back(&text_head_b);
        if (is_diffusion()) {
            ps.push_back(&time_w);
            ps.push_back(&time_b);
            ps.push_back(&time_gate);
            ps.push_back(&eeg_head_w);
            ps.push_back(&eeg_head_b);
        }
        return ps;
    }

    /// Parameters read by one training phase. The word table is included in
    /// pre-training because masked EEG rows embed through its MASK entry.
    std::vector<Parameter<T>*> parameters(Phase p) {
        std::vector<Parameter<T>*> ps = trunk_parameters();
        ps.push_back(&word_embed);
        for (auto& c : code_embed) ps.push_back(&c);
        if (is_diffusion()) {
            ps.push_back(&time_w);
            ps.push_back(&time_b);
            ps.push_back(&time_gate);
        }
        if (p == Phase::pretrain) {
            if (!is_diffusion()) throw std::invalid_argument("parameters: the AR baseline has no pre-training head");
            ps.push_back(&eeg_head_w);
            ps.push_back(&eeg_head_b);
        } else {
            ps.push_back(&text_head_w);
            ps.push_back(&text_head_b);
        }
        return ps;
    }

    size_t parameter_count(Phase p) {
        size_t n = 0;
        for (auto* q : parameters(p)) n += q->value.size();
        return n;
    }

    size_t parameter_count() {
        size_t n = 0;
        for (auto* q : parameters()) n += q->value.size();
        return n;
    }

    // ---- graph construction ----------------------------------------------

    /// Prompt rows: sum of per-stage code embeddings + position + segment 0.
    Var embed_prompt(Tape<T>& tape, const EEGTokenSequence& prompt) {
        if (prompt.stages != vocab.stages()) throw std::invalid_argument("embed_prompt: stage count mismatch");
        Var sum;
        for (int m = 0; m < prompt.stages; ++m) {
            std::vector<int> ids(prompt.length);
            for (int t = 0; t < prompt.length; ++t) ids[t] = prompt.at(t, m);
            Var e = tape.gather_rows(tape.param(code_embed[m]), std::move(ids));
            sum = sum.valid() ? tape.add(sum, e) : e;
        }
        return tape.add(sum, positional(tape, prompt.length, 0, 0));
    }

    /// Response rows: word embedding + position + segment 1.
    Var embed_response(Tape<T>& tape, const std::vector<int>& ids) {
        Var e = tape.gather_rows(tape.param(word_embed), ids);
        return tape.add(e, positional(tape, static_cast<int>(ids.size()), 0, 1));
    }

    /// Flattened EEG rows for pre-training; entries equal to
    /// vocab.code_mask() embed through the MASK word vector.
    Var embed_flat_codes(Tape<T>& tape, const std::vector<int>& flat_ids, int length) {
        std::vector<Var> tables;
        for (auto& c : code_embed) tables.push_back(tape.param(c));
        tables.push_back(tape.slice_rows(tape.param(word_embed), vocab.mask(), vocab.mask() + 1));
        Var table = tape.concat_rows(tables);
        Var e = tape.gather_rows(table, flat_ids);
        const int stages = vocab.stages();
        std::vector<int> pos(flat_ids.size());
        for (int m = 0; m < stages; ++m)
            for (int t = 0; t < length; ++t) pos[static_cast<size_t>(m) * length + t] = t;
        Var p = tape.gather_rows(tape.param(pos_embed), std::move(pos));
        Var s = tape.gather_rows(tape.param(seg_embed), std::vector<int>(flat_ids.size(), 0));
        return tape.add(e, tape.add(p, s));
    }

    /// Runs the blocks and the final norm. prefix_len > 0 with an AR model
    /// gives prefix-LM attention (prompt rows bidirectional, later rows causal).
    Var trunk(Tape<T>& tape, Var x, double t, int prefix_len) {
        const int n = tape.value(x).rows;
        if (n > config.context)
            throw ContextOverflow("sequence of " + std::to_string(n) + " rows exceeds context " +
                                  std::to_string(config.context));
        if (is_diffusion()) {
            const auto f = timestep_features(t, config.width);
            Matrix<T> fm(1, config.width);
            for (int i = 0; i < config.width; ++i) fm.data[i] = static_cast<T>(f[i]);
            Var te = tape.add(tape.matmul(tape.constant(std::move(fm)), tape.param(time_w)), tape.param(time_b));
            te = tape.matmul(tape.param(time_gate), te);
            x = tape.add_row(x, te);
        }
        std::vector<char> allowed;
        const std::vector<char>* mask = nullptr;
        if (!is_diffusion()) {
            allowed.assign(static_cast<size_t>(n) * n, 0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j) allowed[static_cast<size_t>(i) * n + j] = (j < prefix_len || j <= i);
            mask = &allowed;
        }
        const int d = config.width, H = config.heads, dh = d / H;
        const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (auto& b : blocks) {
            Var h = tape.layer_norm(x, tape.param(b.ln1_g), tape.param(b.ln1_b));
            Var qkv = tape.add_row(tape.matmul(h, tape.param(b.wqkv)), tape.param(b.bqkv));
            std::vector<Var> heads;
            for (int k = 0; k < H; ++k) {
                Var q = tape.slice_cols(qkv, k * dh, (k + 1) * dh);
                Var kk = tape.slice_cols(qkv, d + k * dh, d + (k + 1) * dh);
                Var v = tape.slice_cols(qkv, 2 * d + k * dh, 2 * d + (k + 1) * dh);
                Var att = tape.softmax_rows(tape.scale(tape.matmul_nt(q, kk), inv_sqrt), mask);
                heads.push_back(tape.matmul(att, v));
            }
            Var o = H == 1 ? heads[0] : tape.concat_cols(heads);
            x = tape.add(x, tape.add_row(tape.matmul(o, tape.param(b.wo)), tape.param(b.bo)));
            Var h2 = tape.layer_norm(x, tape.param(b.ln2_g), tape.param(b.ln2_b));
            Var m = tape.gelu(tape.add_row(tape.matmul(h2, tape.param(b.w1)), tape.param(b.b1)));
            x = tape.add(x, tape.add_row(tape.matmul(m, tape.param(b.w2)), tape.param(b.b2)));
        }
        return tape.layer_norm(x, tape.param(lnf_g), tape.param(lnf_b));
    }

    Var text_logits(Tape<T>& tape, Var hidden) {
        return tape.add_row(tape.matmul(hidden, tape.param(text_head_w)), tape.param(text_head_b));
    }

    Var eeg_logits(Tape<T>& tape, Var hidden) {
        return tape.add_row(tape.matmul(hidden, tape.param(eeg_head_w)), tape.param(eeg_head_b));
    }

    /// Diffusion forward over [prompt | response]; returns (L x output_size)
    /// logits for the response rows.
    Var response_logits(Tape<T>& tape, const EEGTokenSequence& prompt, const std::vector<int>& response, double t) {
        check_context(prompt.length + static_cast<int>(response.size()));
        Var x = tape.concat_rows({embed_prompt(tape, prompt), embed_response(tape, response)});
        Var h = trunk(tape, x, t, prompt.length);
        return text_logits(tape, tape.slice_rows(h, prompt.length, prompt.length + static_cast<int>(response.size())));
    }

    /// Pre-training forward over flattened codes; (T'*M x eeg_output_size).
    Var flat_code_logits(Tape<T>& tape, const std::vector<int>& flat_ids, int length, double t) {
        check_context(static_cast<int>(flat_ids.size()));
        return eeg_logits(tape, trunk(tape, embed_flat_codes(tape, flat_ids, length), t, 0));
    }

    // ---- inference interfaces ------------------------------------------------

    int mask_id() const { return vocab.mask(); }
    int eos_id() const { return vocab.eos(); }

    Matrix<T> denoise_logits(const EEGTokenSequence& prompt, const std::vector<int>& response, double t) {
        Tape<T> tape;
        return tape.value(response_logits(tape, prompt, response, t));
    }

    /// AR: logits for the token following `prefix` (which excludes the start
    /// token).
    Matrix<T> next_logits(const EEGTokenSequence& prompt, const std::vector<int>& prefix) {
        Tape<T> tape;
        std::vector<int> input{vocab.eos()};
        input.insert(input.end(), prefix.begin(), prefix.end());
        check_context(prompt.length + static_cast<int>(input.size()));
        Var x = tape.concat_rows({embed_prompt(tape, prompt), embed_response(tape, input)});
        Var h = trunk(tape, x, 1.0, prompt.length);
        const int last = tape.value(h).rows - 1;
        return tape.value(text_logits(tape, tape.slice_rows(h, last, last + 1)));
    }

    void check_context(int rows) const {
        if (rows > config.context)
            throw ContextOverflow("sequence of " + std::to_string(rows) + " rows exceeds context " +
                                  std::to_string(config.context));
    }

  private:
    std::vector<Parameter<T>*> trunk_parameters() {
        std::vector<Parameter<T>*> ps{&pos_embed, &seg_embed};
        for (auto& b : blocks)
            for (auto* p : {&b.ln1_g, &b.ln1_b, &b.wqkv, &b.bqkv, &b.wo, &b.bo, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2,
                            &b.b2})
                ps.push_back(p);
        ps.push_back(&lnf_g);
        ps.push_back(&lnf_b);
        return ps;
    }

    Var positional(Tape<T>& tape, int n, int start, int segment) {
        std::vector<int> pos(n);
        std::iota(pos.begin(), pos.end(), start);
        Var p = tape.gather_rows(tape.param(pos_embed), std::move(pos));
        Var s = tape.gather_rows(tape.param(seg_embed), std::vector<int>(n, segment));
        return tape.add(p, s);
    }

    static Parameter<T> make(const std::string& name, int r, int c, double sd, Rng& rng) {
        Matrix<T> m(r, c);
        for (auto& v : m.data) v = static_cast<T>(sd * standard_normal(rng));
        return Parameter<T>(name, std::move(m));
    }
    static Parameter<T> zeros(const std::string& name, int r, int c) { return Parameter<T>(name, Matrix<T>(r, c)); }
    static Parameter<T> ones(const std::string& name, int c) { return Parameter<T>(name, Matrix<T>(1, c, T(1))); }
};

// ---- losses -------------------------------------------------------------------

/// Pre-training loss at a fixed corruption of the flattened codes.
template <typename T>
Var pretrain_loss(Tape<T>& tape, Transformer<T>& model, const EEGTokenSequence& e0, const MaskedSequence& corrupted) {
    const auto x0 = flatten_codes(e0, model.vocab);
    if (corrupted.tokens.size() != x0.size()) throw std::invalid_argument("pretrain_loss: corruption length mismatch");
    Var logits = model.flat_code_logits(tape, corrupted.tokens, e0.length, corrupted.t);
    return masked_diffusion_loss(tape, logits, x0, corrupted.mask_flags, corrupted.t);
}

/// Pre-training loss with t ~ U(0,1] and random masking drawn from rng.
template <typename T>
Var pretrain_loss(Tape<T>& tape, Transformer<T>& model, const EEGTokenSequence& e0, Rng& rng) {
    if (e0.length == 0 || e0.stages == 0) throw std::invalid_argument("pretrain_loss: empty sequence");
    return pretrain_loss(tape, model, e0, sample_corruption(flatten_codes(e0, model.vocab), model.vocab.code_mask(), rng));
}

/// SFT loss at a fixed corruption of the response; only response rows are
/// ever masked or scored.
template <typename T>
Var sft_loss(Tape<T>& tape, Transformer<T>& model, const EEGTokenSequence& prompt, const std::vector<int>& x0,
             const MaskedSequence& corrupted) {
    if (corrupted.tokens.size() != x0.size()) throw std::invalid_argument("sft_loss: corruption length mismatch");
    Var logits = model.response_logits(tape, prompt, corrupted.tokens, corrupted.t);
    return masked_diffusion_loss(tape, logits, x0, corrupted.mask_flags, corrupted.t);
}

template <typename T>
Var sft_loss(Tape<T>& tape, Transformer<T>& model, const EEGTokenSequence& prompt, const std::vector<int>& x0,
             Rng& rng) {
    model.check_context(prompt.length + static_cast<int>(x0.size()));
    return sft_loss(tape, model, prompt, x0, sample_corruption(x0, model.vocab.mask(), rng));
}

/// Next-token cross entropy, mean over the sentence and its closing EOS.
/// Input rows are [prompt | EOS w1 .. wn], targets [w1 .. wn EOS].
template <typename T>
Var ar_loss(Tape<T>& tape, Transformer<T>& model, const EEGTokenSequence& prompt, const std::vector<int>& words) {
    if (words.empty()) throw std::invalid_argument("ar_loss: empty sentence");
    std::vector<int> input{model.vocab.eos()};
    input.insert(input.end(), words.begin(), words.end());
    std::vector<int> targets = words;
    targets.push_back(model.vocab.eos());
    model.check_context(prompt.length + static_cast<int>(input.size()));
    Var x = tape.concat_rows({model.embed_prompt(tape, prompt), model.embed_response(tape, input)});
    Var h = model.trunk(tape, x, 1.0, prompt.length);
    Var logits = model.text_logits(tape, tape.slice_rows(h, prompt.length, prompt.length + static_cast<int>(input.size())));
    const T w = static_cast<T>(1.0 / static_cast<double>(targets.size()));
    return tape.cross_entropy(logits, std::move(targets), std::vector<T>(input.size(), w));
}

// ---- training -------------------------------------------------------------------

struct TrainHyper {
    double lr = 3e-4;
    int epochs = 40;
    int batch = 16;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int patience = 6;  // 0 disables early stopping
    int response_length = 12;
    int val_draws = 4;  // corruption draws averaged per validation example
    uint64_t seed = 11;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0;
    double val_loss = std::numeric_limits<double>::quiet_NaN();
    bool improved = false;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    int best_epoch = 0;
    double best_val = std::numeric_limits<double>::quiet_NaN();
    bool stopped_early = false;
};

/// Loss of one example for a phase, on a fresh tape.
template <typename T>
Var example_loss(Tape<T>& tape, Transformer<T>& model, const rvq::TokenPair& ex, Phase phase, int response_length,
                 Rng& rng) {
    switch (phase) {
        case Phase::pretrain: return pretrain_loss(tape, model, ex.tokens, rng);
        case Phase::sft:
            return sft_loss(tape, model, ex.tokens, response_targets(ex.text.words, response_length, model.vocab), rng);
        default: return ar_loss(tape, model, ex.tokens, ex.text.words);
    }
}

/// Mean loss over a dataset with a fixed random stream, so successive
/// evaluations of the same parameters agree exactly.
template <typename T>
double dataset_loss(Transformer<T>& model, const rvq::TokenDataset& ds, Phase phase, int response_length,
                    uint64_t seed, int draws = 1) {
    if (ds.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (draws < 1) throw std::invalid_argument("dataset_loss: draws must be >= 1");
    // The AR loss has no corruption to resample.
    if (phase == Phase::ar) draws = 1;
    double acc = 0;
    for (size_t i = 0; i < ds.size(); ++i) {
        Rng rng = make_rng(seed, "eval-loss", i);
        for (int d = 0; d < draws; ++d) {
            Tape<T> tape;
            acc += tape.scalar(example_loss(tape, model, ds.pairs[i], phase, response_length, rng));
        }
    }
    return acc / (static_cast<double>(ds.size()) * draws);
}

template <typename T>
TrainLog train(Transformer<T>& model, const rvq::TokenDataset& train, const rvq::TokenDataset& val, Phase phase,
               const TrainHyper& h, const std::function<void(const EpochStats&)>& on_epoch = {}) {
    if (train.empty()) throw std::invalid_argument("train: empty training corpus");
    if (h.batch < 1 || h.epochs < 0) throw std::invalid_argument("train: invalid batch/epochs");
    if (phase == Phase::ar && model.is_diffusion()) throw std::invalid_argument("train: AR phase needs an AR model");
    if (phase != Phase::ar && !model.is_diffusion())
        throw std::invalid_argument("train: diffusion phases need a diffusion model");
    model.phase = phase;
    AdamWConfig oc;
    oc.lr = h.lr;
    oc.weight_decay = h.weight_decay;
    oc.clip_norm = h.clip_norm;
    auto params = model.parameters(phase);
    AdamW<T> opt(params, oc);

    TrainLog log;
    std::vector<Matrix<T>> best;
    const uint64_t phase_seed = derive_seed(h.seed, to_string(phase));
    int since_best = 0;
    for (int epoch = 1; epoch <= h.epochs; ++epoch) {
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        Rng order_rng = make_rng(phase_seed, "order", static_cast<uint64_t>(epoch));
        shuffle(order.begin(), order.end(), order_rng);
        EpochStats st;
        st.epoch = epoch;
        for (size_t start = 0; start < order.size(); start += h.batch) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(h.batch));
            opt.zero_grad();
            for (size_t i = start; i < end; ++i) {
                Rng rng = make_rng(phase_seed, "example", static_cast<uint64_t>(epoch) * 1000003ULL + i);
                Tape<T> tape;
                Var loss = example_loss(tape, model, train.pairs[order[i]], phase, h.response_length, rng);
                const double v = tape.scalar(loss);
                if (!std::isfinite(v))
                    throw NumericError("train(" + to_string(phase) + "): non-finite loss at epoch " +
                                       std::to_string(epoch) + ", sentence " +
                                       std::to_string(train.pairs[order[i]].text.sentence_id));
                tape.backward(loss);
                st.train_loss += v;
            }
            opt.scale_grads(static_cast<T>(1.0 / static_cast<double>(end - start)));
            opt.step();
        }
        st.train_loss /= static_cast<double>(train.size());
        if (!val.empty()) {
            st.val_loss =
                dataset_loss(model, val, phase, h.response_length, derive_seed(phase_seed, "val"), h.val_draws);
            if (!std::isfinite(st.val_loss))
                throw NumericError("train(" + to_string(phase) + "): non-finite validation loss at epoch " +
                                   std::to_string(epoch));
            if (log.best_epoch == 0 || st.val_loss < log.best_val) {
                st.improved = true;
                log.best_val = st.val_loss;
                log.best_epoch = epoch;
                since_best = 0;
                best.clear();
                for (auto* p : params) best.push_back(p->value);
            } else {
                ++since_best;
            }
        }
        log.epochs.push_back(st);
        if (on_epoch) on_epoch(st);
        if (h.patience > 0 && since_best >= h.patience) {
            log.stopped_early = true;
            break;
        }
    }
    if (!best.empty())
        for (size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    return log;
}

// ---- checkpoint ---------------------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"layers", c.layers},
            {"width", c.width},
            {"heads", c.heads},
            {"context", c.context},
            {"mlp_ratio", c.mlp_ratio},
            {"kind", c.kind == ModelKind::diffusion ? "diffusion" : "autoregressive"}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.width = j.at("width").get<int>();
    c.heads = j.at("heads").get<int>();
    c.context = j.at("context").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "diffusion")
        c.kind = ModelKind::diffusion;
    else if (kind == "autoregressive")
        c.kind = ModelKind::autoregressive;
    else
        throw std::invalid_argument("unknown model kind '" + kind + "'");
    c.validate();
    return c;
}

template <typename T>
void save_model(Transformer<T>& model, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
    Container c;
    c.header = {{"kind", "model"},
                {"config", to_json(model.config)},
                {"vocabulary", model.vocab.words},
                {"codebook_sizes", model.vocab.codebook_sizes},
                {"phase", to_string(model.phase)},
                {"seed", model.seed},
                {"meta", meta}};
    for (auto* p : model.parameters()) c.put(p->name, p->value);
    save_container(path, c);
}

template <typename T>
Transformer<T> load_model(const std::string& path, nlohmann::json* meta = nullptr) {
    const auto c = load_container(path);
    if (c.header.value("kind", "") != "model")
        throw FormatError(FormatErrorKind::malformed, path + ": not a model checkpoint");
    try {
        Vocabulary v;
        v.words = c.header.at("vocabulary").get<std::vector<std::string>>();
        v.codebook_sizes = c.header.at("codebook_sizes").get<std::vector<int>>();
        Transformer<T> m(model_config_from_json(c.header.at("config")), v, c.header.at("seed").get<uint64_t>());
        m.phase = parse_phase(c.header.at("phase").get<std::string>());
        for (auto* p : m.parameters()) {
            auto a = c.take<T>(p->name);
            if (!a.same_shape(p->value)) throw FormatError(FormatErrorKind::malformed, path + ": shape of " + p->name);
            p->value = std::move(a);
        }
        if (meta) *meta = c.header.value("meta", nlohmann::json::object());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::malformed, path + ": " + e.what());
    }
}

}  // namespace eegtext::mdlm
