// Residual vector quantization tokenizer.
//
// A 1-D convolutional encoder maps a (words x channels*bands) recording to a
// (T' x D) latent sequence. Each latent is quantized greedily over M codebooks,
// every stage coding the residual left by the previous ones; the quantized
// latent is the plain sum of the chosen code vectors. A transposed-convolution
// decoder mirrors the encoder. Training follows the VQ-VAE objective with a
// straight-through estimator across the quantizer.

#pragma once

#include "eegtext/autograd.hpp"
#include "eegtext/corpus.hpp"
#include "eegtext/io.hpp"
#include "eegtext/optim.hpp"
#include "eegtext/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext::rvq {

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct ConvSpec {
    int kernel = 3;
    int stride = 1;
    int channels = 64;

    friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

struct EncoderConfig {
    int input_width = 128;  // channels * bands
    std::vector<ConvSpec> layers = {{1, 1, 64}};
    int latent_dim = 8;

    int downsample() const {
        int d = 1;
        for (const auto& l : layers) d *= l.stride;
        return d;
    }

    void validate() const {
        if (input_width < 1) throw std::invalid_argument("EncoderConfig: input_width must be >= 1");
        if (latent_dim < 2) throw std::invalid_argument("EncoderConfig: latent_dim must be >= 2");
        for (const auto& l : layers)
            if (l.kernel < 1 || l.stride < 1 || l.channels < 1)
                throw std::invalid_argument("EncoderConfig: conv kernel, stride and channels must be >= 1");
    }

    friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

/// Sequence length entering each encoder layer plus the final latent length:
/// lengths[0] = W, lengths[i+1] = ceil(lengths[i] / stride_i).
inline std::vector<int> layer_lengths(const EncoderConfig& cfg, int words) {
    std::vector<int> out{words};
    for (const auto& l : cfg.layers) out.push_back(ceil_div(out.back(), l.stride));
    return out;
}

inline int latent_length(const EncoderConfig& cfg, int words) { return layer_lengths(cfg, words).back(); }

/// Left padding that makes a (kernel, stride) window cover in_len positions
/// with out_len outputs; shared by a convolution and its transposed mirror.
inline int same_pad_left(int in_len, int out_len, int kernel, int stride) {
    const int total = std::max((out_len - 1) * stride + kernel - in_len, 0);
    return total / 2;
}

/// Token indices, row-major (T' x M).
struct EEGTokenSequence {
    int length = 0;
    int stages = 0;
    std::vector<int> indices;
    std::vector<int> codebook_sizes;

    int at(int t, int m) const { return indices[static_cast<size_t>(t) * stages + m]; }
    int& at(int t, int m) { return indices[static_cast<size_t>(t) * stages + m]; }

    bool in_range() const {
        for (int t = 0; t < length; ++t)
            for (int m = 0; m < stages; ++m)
                if (at(t, m) < 0 || at(t, m) >= codebook_sizes[m]) return false;
        return true;
    }

    friend bool operator==(const EEGTokenSequence&, const EEGTokenSequence&) = default;
};

template <typename T>
struct Codebook {
    Parameter<T> vectors;  // K x D
    std::vector<long> usage_counts;

    int size() const { return vectors.value.rows; }
    int dim() const { return vectors.value.cols; }
};

template <typename T>
struct RVQStack {
    std::vector<Codebook<T>> codebooks;
    double beta = 0.25;

    int stages() const { return static_cast<int>(codebooks.size()); }
    int dim() const { return codebooks.empty() ? 0 : codebooks[0].dim(); }
    std::vector<int> sizes() const {
        std::vector<int> s;
        for (const auto& c : codebooks) s.push_back(c.size());
        return s;
    }

    void validate() const {
        if (codebooks.empty()) throw std::invalid_argument("RVQStack: needs at least one codebook");
        if (!(beta > 0)) throw std::invalid_argument("RVQStack: beta must be > 0");
        for (const auto& c : codebooks) {
            if (c.size() < 2) throw std::invalid_argument("RVQStack: codebooks need K >= 2");
            if (c.dim() != dim()) throw std::invalid_argument("RVQStack: codebooks must share D");
        }
    }
};

/// Builds a stack from explicit code vectors (one K x D matrix per stage).
template <typename T>
RVQStack<T> make_stack(const std::vector<Matrix<T>>& books, double beta = 0.25) {
    RVQStack<T> s;
    s.beta = beta;
    for (size_t m = 0; m < books.size(); ++m) {
        Codebook<T> c;
        c.vectors = Parameter<T>("codebook." + std::to_string(m), books[m]);
        c.usage_counts.assign(books[m].rows, 0);
        s.codebooks.push_back(std::move(c));
    }
    s.validate();
    return s;
}

template <typename T>
struct Quantized {
    Matrix<T> z_q;
    EEGTokenSequence tokens;
};

/// Greedy residual quantization. Ties go to the lowest code index.
template <typename T>
Quantized<T> quantize(const Matrix<T>& z_e, const RVQStack<T>& stack) {
    const int M = stack.stages();
    const int D = stack.dim();
    if (z_e.cols != D)
        throw std::invalid_argument("quantize: latent width " + std::to_string(z_e.cols) + " != codebook dim " +
                                    std::to_string(D));
    Quantized<T> out;
    out.z_q = Matrix<T>(z_e.rows, D);
    out.tokens.length = z_e.rows;
    out.tokens.stages = M;
    out.tokens.indices.assign(static_cast<size_t>(z_e.rows) * M, 0);
    out.tokens.codebook_sizes = stack.sizes();
    std::vector<T> residual(D);
    for (int t = 0; t < z_e.rows; ++t) {
        std::copy_n(z_e.row(t).begin(), D, residual.begin());
        auto zq = out.z_q.row(t);
        for (int m = 0; m < M; ++m) {
            const auto& book = stack.codebooks[m].vectors.value;
            int best = 0;
            T best_d = std::numeric_limits<T>::infinity();
            for (int k = 0; k < book.rows; ++k) {
                auto c = book.row(k);
                T d = 0;
                for (int j = 0; j < D; ++j) d += (residual[j] - c[j]) * (residual[j] - c[j]);
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            out.tokens.at(t, m) = best;
            auto c = book.row(best);
            for (int j = 0; j < D; ++j) {
                residual[j] -= c[j];
                zq[j] += c[j];
            }
        }
    }
    return out;
}

/// Sum of the selected code vectors per position, accumulated in stage order
/// exactly as quantize() does.
template <typename T>
Matrix<T> dequantize(const EEGTokenSequence& tokens, const RVQStack<T>& stack) {
    if (tokens.stages != stack.stages()) throw std::invalid_argument("dequantize: stage count mismatch");
    const int D = stack.dim();
    Matrix<T> z(tokens.length, D);
    for (int t = 0; t < tokens.length; ++t) {
        auto row = z.row(t);
        for (int m = 0; m < tokens.stages; ++m) {
            const auto& book = stack.codebooks[m].vectors.value;
            const int k = tokens.at(t, m);
            if (k < 0 || k >= book.rows)
                throw std::out_of_range("dequantize: index " + std::to_string(k) + " out of range for stage " +
                                        std::to_string(m));
            auto c = book.row(k);
            for (int j = 0; j < D; ++j) row[j] += c[j];
        }
    }
    return z;
}

// ---- convolutional encoder / decoder --------------------------------------

template <typename T>
struct ConvLayer {
    ConvSpec spec;
    bool transposed = false;
    Parameter<T> weight;  // conv: (kernel*in) x out; transposed: in x (kernel*out)
    Parameter<T> bias;    // 1 x out
};

template <typename T>
Var conv_forward(Tape<T>& tape, Var x, ConvLayer<T>& layer, int out_len) {
    const int in_len = tape.value(x).rows;
    const int k = layer.spec.kernel, s = layer.spec.stride;
    Var w = tape.param(layer.weight);
    Var b = tape.param(layer.bias);
    if (!layer.transposed) {
        const int pl = same_pad_left(in_len, out_len, k, s);
        Var cols = tape.im2col(x, k, s, pl, out_len);
        return tape.add_row(tape.matmul(cols, w), b);
    }
    const int pl = same_pad_left(out_len, in_len, k, s);
    Var cols = tape.matmul(x, w);
    return tape.add_row(tape.col2im(cols, k, s, pl, out_len), b);
}

template <typename T>
class Tokenizer {
  public:
    EncoderConfig config;
    std::vector<ConvLayer<T>> encoder;
    std::vector<ConvLayer<T>> decoder;
    RVQStack<T> stack;
    uint64_t seed = 0;

    Tokenizer() = default;

    /// Random network weights; codebooks are zero until initialized from data.
    Tokenizer(const EncoderConfig& cfg, int stages, int codebook_size, double beta, uint64_t seed_)
        : config(cfg), seed(seed_) {
        cfg.validate();
        if (stages < 1) throw std::invalid_argument("Tokenizer: need at least one RVQ stage");
        if (codebook_size < 2) throw std::invalid_argument("Tokenizer: codebook size must be >= 2");
        Rng rng = make_rng(seed_, "tokenizer-init");
        int in = cfg.input_width;
        for (size_t i = 0; i < cfg.layers.size(); ++i) {
            encoder.push_back(make_layer("enc." + std::to_string(i), cfg.layers[i], false, in, rng, 2.0));
            in = cfg.layers[i].channels;
        }
        encoder.push_back(make_layer("enc.proj", {1, 1, cfg.latent_dim}, false, in, rng, 1.0));

        const int top = cfg.layers.empty() ? cfg.input_width : cfg.layers.back().channels;
        if (!cfg.layers.empty()) decoder.push_back(make_layer("dec.proj", {1, 1, top}, false, cfg.latent_dim, rng, 2.0));
        for (int i = static_cast<int>(cfg.layers.size()) - 1; i >= 0; --i) {
            const int out = i == 0 ? cfg.input_width : cfg.layers[i - 1].channels;
            ConvSpec spec{cfg.layers[i].kernel, cfg.layers[i].stride, out};
            decoder.push_back(make_layer("dec." + std::to_string(i), spec, true, cfg.layers[i].channels, rng,
                                         i == 0 ? 1.0 : 2.0));
        }
        if (cfg.layers.empty())
            decoder.push_back(make_layer("dec.proj", {1, 1, cfg.input_width}, false, cfg.latent_dim, rng, 1.0));

        stack.beta = beta;
        for (int m = 0; m < stages; ++m) {
            Codebook<T> c;
            c.vectors = Parameter<T>("codebook." + std::to_string(m), Matrix<T>(codebook_size, cfg.latent_dim));
            c.usage_counts.assign(codebook_size, 0);
            stack.codebooks.push_back(std::move(c));
        }
    }

    /// Encoder and decoder weights.
    std::vector<Parameter<T>*> network_parameters() {
        std::vector<Parameter<T>*> ps;
        for (auto* layers : {&encoder, &decoder})
            for (auto& l : *layers) {
                ps.push_back(&l.weight);
                ps.push_back(&l.bias);
            }
        return ps;
    }

    std::vector<Parameter<T>*> parameters() {
        auto ps = network_parameters();
        for (auto& c : stack.codebooks) ps.push_back(&c.vectors);
        return ps;
    }

    size_t parameter_count() {
        size_t n = 0;
        for (auto* p : parameters()) n += p->value.size();
        return n;
    }

    /// Encoder on a tape; x is (W x input_width).
    Var encode(Tape<T>& tape, Var x) {
        const int W = tape.value(x).rows;
        check_length(W);
        const auto lengths = layer_lengths(config, W);
        Var h = x;
        for (size_t i = 0; i < config.layers.size(); ++i) h = tape.relu(conv_forward(tape, h, encoder[i], lengths[i + 1]));
        return conv_forward(tape, h, encoder.back(), lengths.back());
    }

    /// Decoder on a tape; reconstructs W words from a (T' x D) latent.
    Var decode(Tape<T>& tape, Var z, int words) {
        const auto lengths = layer_lengths(config, words);
        if (tape.value(z).rows != lengths.back())
            throw std::invalid_argument("decode: latent length " + std::to_string(tape.value(z).rows) +
                                        " inconsistent with target width " + std::to_string(words));
        if (tape.value(z).cols != config.latent_dim) throw std::invalid_argument("decode: latent dim mismatch");
        if (config.layers.empty()) return conv_forward(tape, z, decoder[0], lengths.back());
        Var h = tape.relu(conv_forward(tape, z, decoder[0], lengths.back()));
        const int n = static_cast<int>(config.layers.size());
        for (int i = n - 1, d = 1; i >= 0; --i, ++d) {
            h = conv_forward(tape, h, decoder[d], lengths[i]);
            if (i > 0) h = tape.relu(h);
        }
        return h;
    }

    Matrix<T> encode(const Matrix<T>& x) {
        Tape<T> tape;
        return tape.value(encode(tape, tape.constant(x)));
    }

    Matrix<T> encode(const corpus::EEGRecording& rec) {
        if (rec.width() != config.input_width)
            throw std::invalid_argument("encode: recording width " + std::to_string(rec.width()) +
                                        " != encoder input width " + std::to_string(config.input_width));
        return encode(rec.as_matrix<T>());
    }

    Matrix<T> decode(const Matrix<T>& z_q, int words) {
        Tape<T> tape;
        return tape.value(decode(tape, tape.constant(z_q), words));
    }

    EEGTokenSequence tokenize(const corpus::EEGRecording& rec) { return quantize(encode(rec), stack).tokens; }

    /// encode -> quantize -> decode.
    Matrix<T> reconstruct(const corpus::EEGRecording& rec) {
        return decode(quantize(encode(rec), stack).z_q, rec.words);
    }

    void check_length(int words) const {
        if (words < config.downsample())
            throw std::invalid_argument("encode: " + std::to_string(words) +
                                        " positions is shorter than the downsample factor " +
                                        std::to_string(config.downsample()));
    }

  private:
    static ConvLayer<T> make_layer(const std::string& name, ConvSpec spec, bool transposed, int in_channels, Rng& rng,
                                   double gain) {
        ConvLayer<T> l;
        l.spec = spec;
        l.transposed = transposed;
        const int fan_in = transposed ? in_channels : spec.kernel * in_channels;
        Matrix<T> w = transposed ? Matrix<T>(in_channels, spec.kernel * spec.channels)
                                 : Matrix<T>(spec.kernel * in_channels, spec.channels);
        const double sd = std::sqrt(gain / fan_in);
        for (auto& v : w.data) v = static_cast<T>(sd * standard_normal(rng));
        l.weight = Parameter<T>(name + ".weight", std::move(w));
        l.bias = Parameter<T>(name + ".bias", Matrix<T>(1, spec.channels));
        return l;
    }
};

// ---- loss -------------------------------------------------------------------

struct VQLoss {
    double total = 0;
    double recon = 0;
    double codebook = 0;
    double commit = 0;  // already multiplied by beta
};

/// MSE(x, x_hat) + MSE(sg(z_e), z_q) + beta * MSE(z_e, sg(z_q)); the
/// returned commit component includes beta.
template <typename T>
VQLoss vqvae_loss(const Matrix<T>& x, const Matrix<T>& x_hat, const Matrix<T>& z_e, const Matrix<T>& z_q,
                  double beta) {
    require_same_shape(x, x_hat, "vqvae_loss(x, x_hat)");
    require_same_shape(z_e, z_q, "vqvae_loss(z_e, z_q)");
    auto mse = [](const Matrix<T>& a, const Matrix<T>& b) {
        double acc = 0;
        for (size_t i = 0; i < a.size(); ++i) {
            const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
            acc += d * d;
        }
        return a.size() ? acc / static_cast<double>(a.size()) : 0.0;
    };
    VQLoss l;
    l.recon = mse(x, x_hat);
    l.codebook = mse(z_e, z_q);
    l.commit = beta * mse(z_e, z_q);
    l.total = l.recon + l.codebook + l.commit;
    return l;
}

/// Graph nodes of one VQ-VAE evaluation.
struct VQGraph {
    Var z_e, z_q, x_hat, recon, codebook, commit, total;
    EEGTokenSequence tokens;
};

/// Builds the full VQ-VAE objective for one recording on a tape. Codebook
/// assignments come from the current codebooks; the decoder sees z_q through a
/// straight-through node, the codebook term gathers the selected vectors from
/// the codebook parameters against a detached z_e, and the commitment term
/// pulls z_e towards a constant z_q.
template <typename T>
VQGraph vqvae_graph(Tape<T>& tape, Tokenizer<T>& tok, const Matrix<T>& x) {
    VQGraph g;
    Var xv = tape.constant(x);
    g.z_e = tok.encode(tape, xv);
    const auto q = quantize(tape.value(g.z_e), tok.stack);
    g.tokens = q.tokens;
    Var st = tape.straight_through(g.z_e, q.z_q);
    g.x_hat = tok.decode(tape, st, x.rows);
    g.recon = tape.mse(xv, g.x_hat);

    Var sum;
    for (int m = 0; m < tok.stack.stages(); ++m) {
        std::vector<int> ids(q.tokens.length);
        for (int t = 0; t < q.tokens.length; ++t) ids[t] = q.tokens.at(t, m);
        Var picked = tape.gather_rows(tape.param(tok.stack.codebooks[m].vectors), std::move(ids));
        sum = sum.valid() ? tape.add(sum, picked) : picked;
    }
    g.z_q = sum;
    g.codebook = tape.mse(tape.detach(g.z_e), g.z_q);
    g.commit = tape.mse(g.z_e, tape.constant(q.z_q));
    g.total = tape.weighted_sum({g.recon, g.codebook, g.commit}, {T(1), T(1), static_cast<T>(tok.stack.beta)});
    return g;
}

// ---- training -----------------------------------------------------------------

struct TokenizerHyper {
    double lr = 3e-3;
    int epochs = 100;
    int batch = 16;
    double beta = 0.25;
    int stages = 2;
    int codebook_size = 64;
    uint64_t seed = 7;
    bool dead_code_reset = true;
    double clip_norm = 1.0;
};

struct TokenizerEpoch {
    int epoch = 0;
    double train_loss = 0;
    double train_recon = 0;
    double val_mse = std::numeric_limits<double>::quiet_NaN();
    int codes_reset = 0;
};

struct TokenizerLog {
    std::vector<TokenizerEpoch> epochs;
};

template <typename T>
Tokenizer<T> make_tokenizer(const EncoderConfig& cfg, const TokenizerHyper& h) {
    return Tokenizer<T>(cfg, h.stages, h.codebook_size, h.beta, h.seed);
}

/// Mean reconstruction MSE through the quantizer.
template <typename T>
double reconstruction_mse(Tokenizer<T>& tok, const corpus::PairedDataset& ds) {
    if (ds.empty()) return std::numeric_limits<double>::quiet_NaN();
    double acc = 0;
    for (const auto& p : ds.pairs) {
        const auto x = p.recording.as_matrix<T>();
        const auto xh = tok.reconstruct(p.recording);
        double s = 0;
        for (size_t i = 0; i < x.size(); ++i) s += (static_cast<double>(x.data[i]) - xh.data[i]) * (x.data[i] - xh.data[i]);
        acc += s / static_cast<double>(x.size());
    }
    return acc / static_cast<double>(ds.size());
}

namespace detail {

template <typename T>
std::vector<std::vector<T>> residuals_at_stage(Tokenizer<T>& tok, const Matrix<T>& z_e, int stage) {
    std::vector<std::vector<T>> out;
    const int D = z_e.cols;
    for (int t = 0; t < z_e.rows; ++t) {
        std::vector<T> r(z_e.row(t).begin(), z_e.row(t).end());
        for (int m = 0; m < stage; ++m) {
            const auto& book = tok.stack.codebooks[m].vectors.value;
            int best = 0;
            T best_d = std::numeric_limits<T>::infinity();
            for (int k = 0; k < book.rows; ++k) {
                T d = 0;
                for (int j = 0; j < D; ++j) d += (r[j] - book(k, j)) * (r[j] - book(k, j));
                if (d < best_d) best_d = d, best = k;
            }
            for (int j = 0; j < D; ++j) r[j] -= book(best, j);
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace detail

/// Seeds every codebook with encoder outputs (stage 1) or residuals (later
/// stages) from the first training batch, extending to further samples when
/// the batch holds fewer than K latents.
template <typename T>
void initialize_codebooks(Tokenizer<T>& tok, const corpus::PairedDataset& train, const TokenizerHyper& h) {
    if (train.empty()) throw std::invalid_argument("initialize_codebooks: empty training split");
    Rng rng = make_rng(h.seed, "codebook-init");
    std::vector<size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle(order.begin(), order.end(), rng);

    std::vector<Matrix<T>> latents;
    size_t positions = 0;
    const int K = tok.stack.codebooks[0].size();
    for (size_t i = 0; i < order.size(); ++i) {
        if (i >= static_cast<size_t>(h.batch) && positions >= static_cast<size_t>(K)) break;
        latents.push_back(tok.encode(train.pairs[order[i]].recording));
        positions += latents.back().rows;
    }
    for (int m = 0; m < tok.stack.stages(); ++m) {
        std::vector<std::vector<T>> pool;
        for (const auto& z : latents)
            for (auto& r : detail::residuals_at_stage(tok, z, m)) pool.push_back(std::move(r));
        auto& book = tok.stack.codebooks[m];
        shuffle(pool.begin(), pool.end(), rng);
        double spread = 0;
        for (const auto& r : pool)
            for (T v : r) spread += static_cast<double>(v) * v;
        spread = std::sqrt(spread / std::max<size_t>(1, pool.size() * tok.config.latent_dim));
        for (int k = 0; k < book.size(); ++k) {
            const auto& src = pool[static_cast<size_t>(k) % pool.size()];
            const bool repeat = static_cast<size_t>(k) >= pool.size();
            for (int j = 0; j < book.dim(); ++j)
                book.vectors.value(k, j) =
                    src[j] + (repeat ? static_cast<T>(1e-2 * spread * standard_normal(rng)) : T(0));
        }
        std::fill(book.usage_counts.begin(), book.usage_counts.end(), 0);
    }
}

/// Gradient training of an initialized tokenizer; returns per-epoch stats.
template <typename T>
TokenizerLog fit_tokenizer(Tokenizer<T>& tok, const corpus::PairedDataset& train, const corpus::PairedDataset& val,
                           const TokenizerHyper& h, const std::function<void(const TokenizerEpoch&)>& on_epoch = {}) {
    if (train.empty()) throw std::invalid_argument("train_tokenizer: empty training split");
    if (h.batch < 1 || h.epochs < 0) throw std::invalid_argument("train_tokenizer: invalid batch/epochs");
    AdamWConfig oc;
    oc.lr = h.lr;
    oc.clip_norm = h.clip_norm;
    AdamW<T> opt(tok.parameters(), oc);
    TokenizerLog log;

    for (int epoch = 1; epoch <= h.epochs; ++epoch) {
        Rng rng = make_rng(h.seed, "tokenizer-epoch", static_cast<uint64_t>(epoch));
        std::vector<size_t> order(train.size());
        std::iota(order.begin(), order.end(), 0);
        shuffle(order.begin(), order.end(), rng);
        for (auto& c : tok.stack.codebooks) std::fill(c.usage_counts.begin(), c.usage_counts.end(), 0);

        TokenizerEpoch stats;
        stats.epoch = epoch;
        for (size_t start = 0; start < order.size(); start += h.batch) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(h.batch));
            opt.zero_grad();
            for (size_t i = start; i < end; ++i) {
                const auto& rec = train.pairs[order[i]].recording;
                Tape<T> tape;
                const auto g = vqvae_graph(tape, tok, rec.as_matrix<T>());
                const double loss = tape.scalar(g.total);
                if (!std::isfinite(loss))
                    throw NumericError("train_tokenizer: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", sentence " + std::to_string(rec.sentence_id));
                tape.backward(g.total);
                stats.train_loss += loss;
                stats.train_recon += tape.scalar(g.recon);
                for (int t = 0; t < g.tokens.length; ++t)
                    for (int m = 0; m < g.tokens.stages; ++m) ++tok.stack.codebooks[m].usage_counts[g.tokens.at(t, m)];
            }
            opt.scale_grads(static_cast<T>(1.0 / static_cast<double>(end - start)));
            opt.step();
        }
        stats.train_loss /= static_cast<double>(train.size());
        stats.train_recon /= static_cast<double>(train.size());

        if (h.dead_code_reset) {
            for (int m = 0; m < tok.stack.stages(); ++m) {
                auto& book = tok.stack.codebooks[m];
                for (int k = 0; k < book.size(); ++k) {
                    if (book.usage_counts[k] > 0) continue;
                    const auto& rec = train.pairs[uniform_index(rng, train.size())].recording;
                    const auto res = detail::residuals_at_stage(tok, tok.encode(rec), m);
                    const auto& r = res[uniform_index(rng, res.size())];
                    for (int j = 0; j < book.dim(); ++j) book.vectors.value(k, j) = r[j];
                    ++stats.codes_reset;
                }
            }
        }
        if (!val.empty()) stats.val_mse = reconstruction_mse(tok, val);
        log.epochs.push_back(stats);
        if (on_epoch) on_epoch(stats);
    }
    return log;
}

template <typename T>
Tokenizer<T> train_tokenizer(const corpus::PairedDataset& train, const corpus::PairedDataset& val,
                             const EncoderConfig& cfg, const TokenizerHyper& h, TokenizerLog* log = nullptr,
                             const std::function<void(const TokenizerEpoch&)>& on_epoch = {}) {
    auto tok = make_tokenizer<T>(cfg, h);
    initialize_codebooks(tok, train, h);
    auto l = fit_tokenizer(tok, train, val, h, on_epoch);
    if (log) *log = std::move(l);
    return tok;
}

// ---- tokenized corpora ----------------------------------------------------------

struct TokenPair {
    EEGTokenSequence tokens;
    corpus::TextSample text;
    int subject_id = 0;

    friend bool operator==(const TokenPair&, const TokenPair&) = default;
};

struct TokenDataset {
    std::vector<TokenPair> pairs;
    corpus::Split split = corpus::Split::unsplit;
    corpus::FeatureMode mode = corpus::FeatureMode::word_level;
    std::vector<std::string> vocabulary;
    std::vector<int> codebook_sizes;
    nlohmann::json meta = nlohmann::json::object();

    size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }

    friend bool operator==(const TokenDataset&, const TokenDataset&) = default;
};

template <typename T>
TokenDataset tokenize_dataset(const corpus::PairedDataset& ds, Tokenizer<T>& tok) {
    TokenDataset out;
    out.split = ds.split;
    out.vocabulary = ds.vocabulary;
    out.codebook_sizes = tok.stack.sizes();
    out.meta = ds.meta;
    if (!ds.empty()) out.mode = ds.pairs.front().recording.mode;
    for (const auto& p : ds.pairs) out.pairs.push_back({tok.tokenize(p.recording), p.text, p.recording.subject_id});
    return out;
}

struct Utilization {
    std::vector<double> fraction;           // per stage
    std::vector<std::vector<long>> histogram;  // per stage, per code
};

inline Utilization utilization(const TokenDataset& tokens) {
    Utilization u;
    const auto& sizes = tokens.codebook_sizes;
    for (int k : sizes) u.histogram.emplace_back(k, 0);
    for (const auto& p : tokens.pairs)
        for (int t = 0; t < p.tokens.length; ++t)
            for (int m = 0; m < p.tokens.stages; ++m) ++u.histogram.at(m).at(p.tokens.at(t, m));
    for (const auto& h : u.histogram) {
        const auto used = std::count_if(h.begin(), h.end(), [](long c) { return c > 0; });
        u.fraction.push_back(h.empty() ? 0.0 : static_cast<double>(used) / static_cast<double>(h.size()));
    }
    return u;
}

template <typename T>
Utilization utilization(Tokenizer<T>& tok, const corpus::PairedDataset& ds) {
    return utilization(tokenize_dataset(ds, tok));
}

inline void save_tokens(const TokenDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    nlohmann::json header = {{"type", "header"},
                             {"format", "eegtext-tokens"},
                             {"format_version", 1},
                             {"split", corpus::to_string(ds.split)},
                             {"mode", corpus::to_string(ds.mode)},
                             {"vocabulary", ds.vocabulary},
                             {"codebook_sizes", ds.codebook_sizes},
                             {"count", ds.pairs.size()},
                             {"meta", ds.meta}};
    out << header.dump() << '\n';
    for (const auto& p : ds.pairs) {
        nlohmann::json j = {{"sentence_id", p.text.sentence_id},
                            {"raw_text", p.text.raw_text},
                            {"words", p.text.words},
                            {"subject_id", p.subject_id},
                            {"length", p.tokens.length},
                            {"stages", p.tokens.stages},
                            {"indices", p.tokens.indices}};
        out << j.dump() << '\n';
    }
}

inline TokenDataset load_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError(FormatErrorKind::missing, "cannot open token file " + path);
    std::string line;
    TokenDataset ds;
    size_t expected = 0;
    try {
        if (!std::getline(in, line)) throw FormatError(FormatErrorKind::malformed, path + ": empty token file");
        const auto h = nlohmann::json::parse(line);
        if (h.value("format", "") != "eegtext-tokens")
            throw FormatError(FormatErrorKind::malformed, path + ": not a eegtext token file");
        if (h.value("format_version", -1) != 1)
            throw FormatError(FormatErrorKind::version_mismatch, path + ": unsupported token file version");
        ds.split = corpus::parse_split(h.at("split").get<std::string>());
        ds.mode = corpus::parse_mode(h.at("mode").get<std::string>());
        ds.vocabulary = h.at("vocabulary").get<std::vector<std::string>>();
        ds.codebook_sizes = h.at("codebook_sizes").get<std::vector<int>>();
        ds.meta = h.value("meta", nlohmann::json::object());
        expected = h.at("count").get<size_t>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto j = nlohmann::json::parse(line);
            TokenPair p;
            p.text.sentence_id = j.at("sentence_id").get<int>();
            p.text.raw_text = j.at("raw_text").get<std::string>();
            p.text.words = j.at("words").get<std::vector<int>>();
            p.subject_id = j.at("subject_id").get<int>();
            p.tokens.length = j.at("length").get<int>();
            p.tokens.stages = j.at("stages").get<int>();
            p.tokens.indices = j.at("indices").get<std::vector<int>>();
            p.tokens.codebook_sizes = ds.codebook_sizes;
            if (p.tokens.indices.size() != static_cast<size_t>(p.tokens.length) * p.tokens.stages ||
                !p.tokens.in_range())
                throw FormatError(FormatErrorKind::malformed, path + ": bad token record");
            ds.pairs.push_back(std::move(p));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::malformed, path + ": " + e.what());
    }
    if (ds.pairs.size() != expected) throw FormatError(FormatErrorKind::integrity, path + ": token file truncated");
    return ds;
}

// ---- checkpoint ---------------------------------------------------------------

inline nlohmann::json to_json(const EncoderConfig& c) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : c.layers) layers.push_back({{"kernel", l.kernel}, {"stride", l.stride}, {"channels", l.channels}});
    return {{"input_width", c.input_width}, {"layers", layers}, {"latent_dim", c.latent_dim}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.input_width = j.at("input_width").get<int>();
    c.latent_dim = j.at("latent_dim").get<int>();
    c.layers.clear();
    for (const auto& l : j.at("layers"))
        c.layers.push_back({l.at("kernel").get<int>(), l.at("stride").get<int>(), l.at("channels").get<int>()});
    c.validate();
    return c;
}

template <typename T>
void save_tokenizer(Tokenizer<T>& tok, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
    Container c;
    c.header = {{"kind", "tokenizer"},
                {"encoder", to_json(tok.config)},
                {"stages", tok.stack.stages()},
                {"codebook_size", tok.stack.codebooks.at(0).size()},
                {"beta", tok.stack.beta},
                {"seed", tok.seed},
                {"meta", meta}};
    for (auto* p : tok.parameters()) c.put(p->name, p->value);
    save_container(path, c);
}

template <typename T>
Tokenizer<T> load_tokenizer(const std::string& path, nlohmann::json* meta = nullptr) {
    const auto c = load_container(path);
    if (c.header.value("kind", "") != "tokenizer")
        throw FormatError(FormatErrorKind::malformed, path + ": not a tokenizer checkpoint");
    try {
        Tokenizer<T> tok(encoder_config_from_json(c.header.at("encoder")), c.header.at("stages").get<int>(),
                         c.header.at("codebook_size").get<int>(), c.header.at("beta").get<double>(),
                         c.header.at("seed").get<uint64_t>());
        for (auto* p : tok.parameters()) {
            auto m = c.take<T>(p->name);
            if (!m.same_shape(p->value)) throw FormatError(FormatErrorKind::malformed, path + ": shape of " + p->name);
            p->value = std::move(m);
        }
        if (meta) *meta = c.header.value("meta", nlohmann::json::object());
        return tok;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatErrorKind::malformed, path + ": " + e.what());
    }
}

}  // namespace eegtext::rvq
