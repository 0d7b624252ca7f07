// Paired (signal, text) corpora: synthesis, cleaning, splitting, sentence-level
// aggregation and persistence.
//
// The synthetic generator stands in for word-aligned EEG reading data. Every
// vocabulary word owns a frozen latent vector; a subject observes it through
// its own random full-rank linear mixing, a bias, optional Gaussian noise and a
// sigmoid, giving (channels x bands) features in [0, 1] per word.

#pragma once

#include "eegtext/io.hpp"
#include "eegtext/matrix.hpp"
#include "eegtext/random.hpp"

#include <Eigen/QR>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace eegtext::corpus {

enum class FeatureMode { word_level, sentence_level };
enum class Split { train, val, test, unsplit };

inline std::string to_string(FeatureMode m) { return m == FeatureMode::word_level ? "word" : "sentence"; }
inline std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        default: return "unsplit";
    }
}
inline FeatureMode parse_mode(const std::string& s) {
    if (s == "word") return FeatureMode::word_level;
    if (s == "sentence") return FeatureMode::sentence_level;
    throw std::invalid_argument("unknown feature mode '" + s + "' (expected word|sentence)");
}
inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    if (s == "unsplit") return Split::unsplit;
    throw std::invalid_argument("unknown split '" + s + "'");
}

struct TextSample {
    int sentence_id = 0;
    std::vector<int> words;
    std::string raw_text;

    friend bool operator==(const TextSample&, const TextSample&) = default;
};

/// Word-aligned features, row-major (words, channels, bands).
struct EEGRecording {
    int sentence_id = 0;
    int subject_id = 0;
    int words = 0;
    int channels = 0;
    int bands = 0;
    FeatureMode mode = FeatureMode::word_level;
    std::vector<float> features;

    int width() const { return channels * bands; }
    float at(int w, int c, int b) const {
        return features[(static_cast<size_t>(w) * channels + c) * bands + b];
    }
    /// (words x channels*bands) view used by the tokenizer.
    template <typename T>
    Matrix<T> as_matrix() const {
        Matrix<T> m(words, width());
        for (size_t i = 0; i < features.size(); ++i) m.data[i] = static_cast<T>(features[i]);
        return m;
    }

    friend bool operator==(const EEGRecording& a, const EEGRecording& b) {
        if (a.sentence_id != b.sentence_id || a.subject_id != b.subject_id || a.words != b.words ||
            a.channels != b.channels || a.bands != b.bands || a.mode != b.mode ||
            a.features.size() != b.features.size())
            return false;
        // bitwise, so NaN payloads compare equal to themselves
        return std::memcmp(a.features.data(), b.features.data(), a.features.size() * sizeof(float)) == 0;
    }
};

struct SubjectProfile {
    int subject_id = 0;
    Matrix<double> mixing;  // (channels*bands) x embed_dim
    std::vector<double> bias;
};

struct PairedExample {
    EEGRecording recording;
    TextSample text;

    friend bool operator==(const PairedExample&, const PairedExample&) = default;
};

struct PairedDataset {
    std::vector<PairedExample> pairs;
    Split split = Split::unsplit;
    uint64_t synthesis_seed = 0;
    std::vector<std::string> vocabulary;
    nlohmann::json meta = nlohmann::json::object();

    size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }

    friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

struct SynthesisConfig {
    int vocab_size = 40;
    int sentence_count = 200;
    int min_length = 4;
    int max_length = 8;
    int subject_count = 2;
    double noise_sigma = 0.0;
    int channels = 16;
    int bands = 8;
    int embed_dim = 12;
    double mixing_gain = 2.0;
    /// Probability that the next word follows the previous word's preferred
    /// successors rather than being drawn uniformly.
    double successor_prob = 0.6;
    int successors_per_word = 3;
    uint64_t seed = 1234;
};

// ---- vocabulary and latent embeddings --------------------------------------

/// Deterministic pronounceable word for id (two or more syllables).
inline std::string synthetic_word(int id) {
    static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"};
    static const char* vowels[] = {"a", "e", "i", "o", "u"};
    constexpr int n_on = 14, n_vow = 5, n_syl = n_on * n_vow;
    std::string w;
    int x = id;
    for (int k = 0; k < 2 || x > 0; ++k) {
        const int s = x % n_syl;
        x /= n_syl;
        w += onsets[s % n_on];
        w += vowels[s / n_on];
    }
    return w;
}

inline std::vector<std::string> synthetic_vocabulary(int size) {
    std::vector<std::string> v;
    v.reserve(size);
    for (int i = 0; i < size; ++i) v.push_back(synthetic_word(i));
    return v;
}

/// Frozen unit-Gaussian latent per word id, a pure function of (id, seed).
class WordEmbedder {
  public:
    WordEmbedder(uint64_t corpus_seed, int dim) : seed_(corpus_seed), dim_(dim) {
        if (dim < 1) throw std::invalid_argument("WordEmbedder: dim must be >= 1");
    }
    std::vector<double> operator()(int word_id) const {
        Rng rng = make_rng(seed_, "word-embedding", static_cast<uint64_t>(word_id));
        std::vector<double> e(dim_);
        for (auto& v : e) v = standard_normal(rng);
        return e;
    }
    int dim() const { return dim_; }

  private:
    uint64_t seed_;
    int dim_;
};

inline SubjectProfile make_subject(int subject_id, int channels, int bands, int embed_dim, double gain,
                                   uint64_t seed) {
    const int rows = channels * bands;
    if (rows < embed_dim)
        throw std::invalid_argument("make_subject: channels*bands must be >= embed_dim for a full-rank mixing");
    for (uint64_t attempt = 0;; ++attempt) {
        Rng rng = make_rng(seed, "subject", static_cast<uint64_t>(subject_id) * 1000003ULL + attempt);
        SubjectProfile s;
        s.subject_id = subject_id;
        s.mixing = Matrix<double>(rows, embed_dim);
        const double scale = gain / std::sqrt(static_cast<double>(embed_dim));
        for (auto& v : s.mixing.data) v = scale * standard_normal(rng);
        s.bias.resize(rows);
        for (auto& b : s.bias) b = 0.5 * standard_normal(rng);
        Eigen::ColPivHouseholderQR<EigenRowMajor<double>> qr(as_eigen(s.mixing));
        if (qr.rank() == embed_dim) return s;
        if (attempt > 16) throw std::runtime_error("make_subject: could not draw a full-rank mixing");
    }
}

// ---- synthesis ----------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline EEGRecording synth_pair(const TextSample& text, const SubjectProfile& subject, const WordEmbedder& embed,
                               int channels, int bands, double noise_sigma, Rng& rng) {
    if (text.words.empty()) throw std::invalid_argument("synth_pair: empty word list");
    if (noise_sigma < 0) throw std::invalid_argument("synth_pair: noise_sigma must be >= 0");
    const int width = channels * bands;
    if (subject.mixing.rows != width || subject.mixing.cols != embed.dim())
        throw std::invalid_argument("synth_pair: subject mixing does not match (channels*bands, embed_dim)");
    EEGRecording rec;
    rec.sentence_id = text.sentence_id;
    rec.subject_id = subject.subject_id;
    rec.words = static_cast<int>(text.words.size());
    rec.channels = channels;
    rec.bands = bands;
    rec.mode = FeatureMode::word_level;
    rec.features.resize(static_cast<size_t>(rec.words) * width);
    for (int w = 0; w < rec.words; ++w) {
        const auto e = embed(text.words[w]);
        for (int r = 0; r < width; ++r) {
            double a = subject.bias[r];
            for (int k = 0; k < embed.dim(); ++k) a += subject.mixing(r, k) * e[k];
            if (noise_sigma > 0) a += noise_sigma * standard_normal(rng);
            const float v = static_cast<float>(sigmoid(a));
            rec.features[static_cast<size_t>(w) * width + r] = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return rec;
}

inline std::string join_words(const std::vector<int>& ids, const std::vector<std::string>& vocab) {
    std::string s;
    for (size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ' ';
        s += vocab.at(ids[i]);
    }
    return s;
}

/// build_corpus without the minimum-size preconditions; used where a tiny
/// corpus is wanted on purpose.
inline PairedDataset build_corpus_unchecked(const SynthesisConfig& cfg) {
    if (cfg.min_length < 1 || cfg.max_length < cfg.min_length)
        throw std::invalid_argument("build_corpus: invalid sentence length range");
    if (cfg.subject_count < 1) throw std::invalid_argument("build_corpus: subject_count must be >= 1");

    PairedDataset ds;
    ds.synthesis_seed = cfg.seed;
    ds.vocabulary = synthetic_vocabulary(cfg.vocab_size);

    const WordEmbedder embed(cfg.seed, cfg.embed_dim);
    std::vector<SubjectProfile> subjects;
    for (int s = 0; s < cfg.subject_count; ++s)
        subjects.push_back(make_subject(s, cfg.channels, cfg.bands, cfg.embed_dim, cfg.mixing_gain, cfg.seed));

    Rng grammar_rng = make_rng(cfg.seed, "successors");
    std::vector<std::vector<int>> successors(cfg.vocab_size);
    for (auto& succ : successors)
        for (int k = 0; k < cfg.successors_per_word; ++k)
            succ.push_back(static_cast<int>(uniform_index(grammar_rng, cfg.vocab_size)));

    Rng text_rng = make_rng(cfg.seed, "sentences");
    std::set<std::vector<int>> seen;
    const long budget = 50L * cfg.sentence_count + 1000;
    long attempts = 0;
    while (static_cast<int>(ds.pairs.size()) < cfg.sentence_count) {
        if (++attempts > budget)
            throw std::runtime_error("build_corpus: could not sample " + std::to_string(cfg.sentence_count) +
                                     " unique sentences within " + std::to_string(budget) + " attempts (found " +
                                     std::to_string(ds.pairs.size()) + ")");
        const int len = cfg.min_length +
                        static_cast<int>(uniform_index(text_rng, static_cast<uint64_t>(cfg.max_length - cfg.min_length + 1)));
        std::vector<int> words;
        words.push_back(static_cast<int>(uniform_index(text_rng, cfg.vocab_size)));
        while (static_cast<int>(words.size()) < len) {
            const auto& succ = successors[words.back()];
            if (!succ.empty() && uniform01(text_rng) < cfg.successor_prob)
                words.push_back(succ[uniform_index(text_rng, succ.size())]);
            else
                words.push_back(static_cast<int>(uniform_index(text_rng, cfg.vocab_size)));
        }
        if (!seen.insert(words).second) continue;

        const int id = static_cast<int>(ds.pairs.size());
        PairedExample ex;
        ex.text.sentence_id = id;
        ex.text.words = std::move(words);
        ex.text.raw_text = join_words(ex.text.words, ds.vocabulary);
        const auto& subject = subjects[uniform_index(text_rng, subjects.size())];
        Rng noise_rng = make_rng(cfg.seed, "signal-noise", static_cast<uint64_t>(id));
        ex.recording = synth_pair(ex.text, subject, embed, cfg.channels, cfg.bands, cfg.noise_sigma, noise_rng);
        ds.pairs.push_back(std::move(ex));
    }
    return ds;
}

inline PairedDataset build_corpus(const SynthesisConfig& cfg) {
    if (cfg.vocab_size < 10) throw std::invalid_argument("build_corpus: vocab_size must be >= 10");
    if (cfg.sentence_count < 10) throw std::invalid_argument("build_corpus: sentence_count must be >= 10");
    return build_corpus_unchecked(cfg);
}

// ---- cleaning, splitting, aggregation -------------------------------------

struct CleanReport {
    size_t kept = 0;
    size_t dropped = 0;
    bool empty_result = false;
};

inline bool recording_is_clean(const EEGRecording& rec, double tolerance = 1e-9) {
    for (float v : rec.features) {
        if (!std::isfinite(v)) return false;
        if (v < -tolerance || v > 1.0 + tolerance) return false;
    }
    return true;
}

inline PairedDataset clean(const PairedDataset& ds, CleanReport* report = nullptr) {
    PairedDataset out = ds;
    out.pairs.clear();
    for (const auto& p : ds.pairs)
        if (recording_is_clean(p.recording)) out.pairs.push_back(p);
    if (report) {
        report->kept = out.pairs.size();
        report->dropped = ds.pairs.size() - out.pairs.size();
        report->empty_result = out.pairs.empty();
    }
    return out;
}

struct SplitRatios {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct SplitSizes {
    size_t train = 0, val = 0, test = 0;
};

/// Train takes floor(train_ratio * n); the rest is divided between val and test
/// in proportion, val rounded down.
inline SplitSizes split_sizes(size_t n, const SplitRatios& r) {
    SplitSizes s;
    s.train = static_cast<size_t>(std::floor(r.train * static_cast<double>(n) + 1e-9));
    const size_t rest = n - s.train;
    const double val_share = (r.val + r.test) > 0 ? r.val / (r.val + r.test) : 0.0;
    s.val = static_cast<size_t>(std::floor(val_share * static_cast<double>(rest) + 1e-9));
    s.test = rest - s.val;
    return s;
}

struct SplitResult {
    PairedDataset train, val, test;
};

/// Shuffles unique sentence texts with `seed` and assigns each text (with all
/// pairs sharing it) to exactly one split.
inline SplitResult split_unique(const PairedDataset& ds, uint64_t seed, const SplitRatios& ratios = {}) {
    if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
        throw std::invalid_argument("split_unique: ratios must sum to 1");
    if (ratios.train < 0 || ratios.val < 0 || ratios.test < 0)
        throw std::invalid_argument("split_unique: ratios must be non-negative");
    if (ds.pairs.size() < 3) throw std::invalid_argument("split_unique: need at least 3 pairs");

    std::vector<std::string> texts;
    std::map<std::string, std::vector<size_t>> groups;
    for (size_t i = 0; i < ds.pairs.size(); ++i) {
        auto [it, inserted] = groups.try_emplace(ds.pairs[i].text.raw_text);
        if (inserted) texts.push_back(it->first);
        it->second.push_back(i);
    }
    Rng rng = make_rng(seed, "split");
    shuffle(texts.begin(), texts.end(), rng);
    const SplitSizes sizes = split_sizes(texts.size(), ratios);

    SplitResult out;
    for (auto* part : {&out.train, &out.val, &out.test}) {
        part->synthesis_seed = ds.synthesis_seed;
        part->vocabulary = ds.vocabulary;
        part->meta = ds.meta;
    }
    out.train.split = Split::train;
    out.val.split = Split::val;
    out.test.split = Split::test;
    for (size_t k = 0; k < texts.size(); ++k) {
        PairedDataset& dst = k < sizes.train ? out.train : (k < sizes.train + sizes.val ? out.val : out.test);
        for (size_t idx : groups[texts[k]]) dst.pairs.push_back(ds.pairs[idx]);
    }
    return out;
}

/// Mean over words per (channel, band). Each entry is summed in sorted order,
/// so the result is exactly invariant to word permutations.
inline EEGRecording aggregate_sentence_level(const EEGRecording& rec) {
    if (rec.mode != FeatureMode::word_level)
        throw std::invalid_argument("aggregate_sentence_level: input is already sentence-level");
    if (rec.words < 1) throw std::invalid_argument("aggregate_sentence_level: recording has no words");
    EEGRecording out = rec;
    out.mode = FeatureMode::sentence_level;
    out.words = 1;
    const int width = rec.width();
    out.features.assign(width, 0.0f);
    std::vector<float> column(rec.words);
    for (int r = 0; r < width; ++r) {
        for (int w = 0; w < rec.words; ++w) column[w] = rec.features[static_cast<size_t>(w) * width + r];
        std::sort(column.begin(), column.end());
        double acc = 0;
        for (float v : column) acc += v;
        out.features[r] = static_cast<float>(acc / rec.words);
    }
    return out;
}

inline PairedDataset to_sentence_level(const PairedDataset& ds) {
    PairedDataset out = ds;
    for (auto& p : out.pairs)
        if (p.recording.mode == FeatureMode::word_level) p.recording = aggregate_sentence_level(p.recording);
    return out;
}

// ---- persistence ----------------------------------------------------------
//
// <stem>.jsonl  header line, then one record per pair
// <stem>.bin    u8 format version, then per pair: float32 LE (W,C,B) row-major
//               features followed by u32 CRC32 of those feature bytes

inline constexpr uint8_t kDatasetVersion = 1;

inline std::string manifest_path(const std::string& stem) { return stem + ".jsonl"; }
inline std::string blob_path(const std::string& stem) { return stem + ".bin"; }

inline void save_dataset(const PairedDataset& ds, const std::string& stem) {
    ByteWriter blob;
    blob.put<uint8_t>(kDatasetVersion);
    std::ostringstream manifest;
    nlohmann::json header = {
        {"type", "header"},
        {"format", "eegtext-dataset"},
        {"format_version", kDatasetVersion},
        {"split", to_string(ds.split)},
        {"synthesis_seed", ds.synthesis_seed},
        {"count", ds.pairs.size()},
        {"blob", std::filesystem::path(blob_path(stem)).filename().string()},
        {"vocabulary", ds.vocabulary},
        {"meta", ds.meta},
    };
    manifest << header.dump() << '\n';
    for (const auto& p : ds.pairs) {
        const auto& r = p.recording;
        const size_t offset = blob.size();
        const size_t length = r.features.size() * sizeof(float);
        blob.put_bytes(r.features.data(), length);
        blob.put<uint32_t>(crc32_of(r.features.data(), length));
        nlohmann::json rec = {
            {"sentence_id", p.text.sentence_id},
            {"raw_text", p.text.raw_text},
            {"words", p.text.words},
            {"subject_id", r.subject_id},
            {"mode", to_string(r.mode)},
            {"shape", {r.words, r.channels, r.bands}},
            {"offset", offset},
            {"length", length},
        };
        manifest << rec.dump() << '\n';
    }
    write_file_bytes(blob_path(stem), blob.bytes());
    std::ofstream out(manifest_path(stem), std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + manifest_path(stem));
    out << manifest.str();
}

inline PairedDataset load_dataset(const std::string& stem) {
    const std::string mpath = manifest_path(stem);
    std::ifstream in(mpath);
    if (!in) throw FormatError(FormatErrorKind::missing, "cannot open dataset manifest " + mpath);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(FormatErrorKind::malformed, mpath + ": empty manifest");

    auto parse = [&](const std::string& l) {
        try {
            return nlohmann::json::parse(l);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(FormatErrorKind::malformed, mpath + ": " + e.what());
        }
    };
    const auto header = parse(line);
    if (header.value("format", "") != "eegtext-dataset")
        throw FormatError(FormatErrorKind::malformed, mpath + ": not a eegtext dataset manifest");
    if (header.value("format_version", -1) != kDatasetVersion)
        throw FormatError(FormatErrorKind::version_mismatch,
                          mpath + ": dataset format version " + header.value("format_version", nlohmann::json()).dump() +
                              ", expected " + std::to_string(kDatasetVersion));

    const auto bytes = read_file_bytes(blob_path(stem));
    if (bytes.empty()) throw FormatError(FormatErrorKind::integrity, blob_path(stem) + ": empty blob");
    if (bytes[0] != kDatasetVersion)
        throw FormatError(FormatErrorKind::version_mismatch, blob_path(stem) + ": blob format version " +
                                                                 std::to_string(bytes[0]) + ", expected " +
                                                                 std::to_string(kDatasetVersion));

    PairedDataset ds;
    try {
        ds.split = parse_split(header.at("split").get<std::string>());
        ds.synthesis_seed = header.at("synthesis_seed").get<uint64_t>();
        ds.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
        ds.meta = header.value("meta", nlohmann::json::object());
    } catch (const std::exception& e) {
        throw FormatError(FormatErrorKind::malformed, mpath + ": bad header: " + e.what());
    }

    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = parse(line);
        PairedExample ex;
        size_t offset = 0, length = 0;
        try {
            ex.text.sentence_id = j.at("sentence_id").get<int>();
            ex.text.raw_text = j.at("raw_text").get<std::string>();
            ex.text.words = j.at("words").get<std::vector<int>>();
            auto& r = ex.recording;
            r.sentence_id = ex.text.sentence_id;
            r.subject_id = j.at("subject_id").get<int>();
            r.mode = parse_mode(j.at("mode").get<std::string>());
            const auto shape = j.at("shape").get<std::vector<int>>();
            if (shape.size() != 3) throw std::invalid_argument("shape must have 3 entries");
            r.words = shape[0];
            r.channels = shape[1];
            r.bands = shape[2];
            offset = j.at("offset").get<size_t>();
            length = j.at("length").get<size_t>();
        } catch (const FormatError&) {
            throw;
        } catch (const std::exception& e) {
            throw FormatError(FormatErrorKind::malformed, mpath + ": bad record: " + e.what());
        }
        auto& r = ex.recording;
        if (length != static_cast<size_t>(r.words) * r.channels * r.bands * sizeof(float))
            throw FormatError(FormatErrorKind::malformed, mpath + ": record length disagrees with shape");
        if (offset + length + 4 > bytes.size())
            throw FormatError(FormatErrorKind::integrity,
                              blob_path(stem) + ": checksum failure, blob truncated at record " +
                                  std::to_string(ex.text.sentence_id));
        uint32_t stored;
        std::memcpy(&stored, bytes.data() + offset + length, 4);
        if (crc32_of(bytes.data() + offset, length) != stored)
            throw FormatError(FormatErrorKind::integrity, blob_path(stem) + ": checksum failure at record " +
                                                              std::to_string(ex.text.sentence_id));
        r.features.resize(length / sizeof(float));
        std::memcpy(r.features.data(), bytes.data() + offset, length);
        ds.pairs.push_back(std::move(ex));
    }
    if (ds.pairs.size() != header.value("count", size_t{0}))
        throw FormatError(FormatErrorKind::integrity, mpath + ": manifest truncated (expected " +
                                                          header.value("count", nlohmann::json()).dump() +
                                                          " records, found " + std::to_string(ds.pairs.size()) + ")");
    return ds;
}

}  // namespace eegtext::corpus
