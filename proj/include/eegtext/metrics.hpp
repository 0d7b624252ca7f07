// Corpus-level BLEU-N (per order), ROUGE-1 and WER.
//
// BLEU-N here is the clipped n-gram precision of order N alone, pooled over the
// corpus and multiplied by the corpus brevity penalty, with no smoothing.
// ROUGE-1 precision and recall are averaged over sentence pairs and F is their
// harmonic mean; WER pools edit distance over the corpus. All scores are percentages.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace eegtext::metrics {

using Tokens = std::vector<std::string>;

/// Lowercases, splits on whitespace, and emits every punctuation character as
/// its own token.
inline Tokens tokenize(const std::string& text) {
    Tokens out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur += static_cast<char>(std::tolower(c));
        }
    }
    flush();
    return out;
}

template <typename Tok>
std::map<std::vector<Tok>, long> ngram_counts(const std::vector<Tok>& s, int n) {
    std::map<std::vector<Tok>, long> counts;
    for (size_t i = 0; i + n <= s.size(); ++i) ++counts[std::vector<Tok>(s.begin() + i, s.begin() + i + n)];
    return counts;
}

struct BleuStats {
    long matched = 0;
    long total = 0;  // hypothesis n-grams
    long ref_len = 0;
    long hyp_len = 0;
};

template <typename Tok>
BleuStats bleu_stats(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps, int n) {
    if (refs.size() != hyps.size()) throw std::invalid_argument("bleu: reference/hypothesis count mismatch");
    if (refs.empty()) throw std::invalid_argument("bleu: empty corpus");
    if (n < 1 || n > 4) throw std::invalid_argument("bleu: n must be in 1..4");
    BleuStats s;
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto rc = ngram_counts(refs[i], n);
        for (const auto& [g, c] : ngram_counts(hyps[i], n)) {
            auto it = rc.find(g);
            if (it != rc.end()) s.matched += std::min(c, it->second);
            s.total += c;
        }
        s.ref_len += static_cast<long>(refs[i].size());
        s.hyp_len += static_cast<long>(hyps[i].size());
    }
    return s;
}

inline double brevity_penalty(long ref_len, long hyp_len) {
    if (hyp_len == 0) return 0.0;
    return std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len)));
}

template <typename Tok>
double bleu_n(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps, int n) {
    const auto s = bleu_stats(refs, hyps, n);
    if (s.total == 0 || s.matched == 0) return 0.0;
    const double p = static_cast<double>(s.matched) / static_cast<double>(s.total);
    return 100.0 * p * brevity_penalty(s.ref_len, s.hyp_len);
}

struct Rouge {
    double precision = 0;
    double recall = 0;
    double f = 0;
};

inline double harmonic_mean(double p, double r) { return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0; }

template <typename Tok>
Rouge rouge1(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
    const auto rc = ngram_counts(ref, 1);
    long overlap = 0;
    for (const auto& [g, c] : ngram_counts(hyp, 1)) {
        auto it = rc.find(g);
        if (it != rc.end()) overlap += std::min(c, it->second);
    }
    Rouge r;
    r.precision = hyp.empty() ? 0.0 : 100.0 * overlap / static_cast<double>(hyp.size());
    r.recall = ref.empty() ? 0.0 : 100.0 * overlap / static_cast<double>(ref.size());
    r.f = harmonic_mean(r.precision, r.recall);
    return r;
}

/// Unit-cost Levenshtein distance over tokens.
template <typename Tok>
long edit_distance(const std::vector<Tok>& a, const std::vector<Tok>& b) {
    std::vector<long> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<long>(j);
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = static_cast<long>(i);
        for (size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

template <typename Tok>
double wer(const std::vector<Tok>& ref, const std::vector<Tok>& hyp) {
    if (ref.empty()) throw std::invalid_argument("wer: empty reference");
    return 100.0 * static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

template <typename Tok>
double corpus_wer(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps) {
    if (refs.size() != hyps.size()) throw std::invalid_argument("wer: reference/hypothesis count mismatch");
    long dist = 0, len = 0;
    for (size_t i = 0; i < refs.size(); ++i) {
        if (refs[i].empty()) throw std::invalid_argument("wer: empty reference at pair " + std::to_string(i));
        dist += edit_distance(refs[i], hyps[i]);
        len += static_cast<long>(refs[i].size());
    }
    if (len == 0) throw std::invalid_argument("wer: empty corpus");
    return 100.0 * static_cast<double>(dist) / static_cast<double>(len);
}

template <typename Tok>
Rouge corpus_rouge1(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps) {
    if (refs.size() != hyps.size()) throw std::invalid_argument("rouge1: reference/hypothesis count mismatch");
    if (refs.empty()) throw std::invalid_argument("rouge1: empty corpus");
    Rouge acc;
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto r = rouge1(refs[i], hyps[i]);
        acc.precision += r.precision;
        acc.recall += r.recall;
    }
    const double n = static_cast<double>(refs.size());
    acc.precision /= n;
    acc.recall /= n;
    acc.f = harmonic_mean(acc.precision, acc.recall);
    return acc;
}

/// Fraction of reference positions whose hypothesis token at the same index
/// matches, pooled over the corpus, in percent.
template <typename Tok>
double token_accuracy(const std::vector<std::vector<Tok>>& refs, const std::vector<std::vector<Tok>>& hyps) {
    if (refs.size() != hyps.size()) throw std::invalid_argument("token_accuracy: reference/hypothesis count mismatch");
    long hit = 0, len = 0;
    for (size_t i = 0; i < refs.size(); ++i) {
        for (size_t k = 0; k < refs[i].size(); ++k) hit += k < hyps[i].size() && hyps[i][k] == refs[i][k];
        len += static_cast<long>(refs[i].size());
    }
    if (len == 0) throw std::invalid_argument("token_accuracy: empty corpus");
    return 100.0 * static_cast<double>(hit) / static_cast<double>(len);
}

// ---- report -------------------------------------------------------------------

struct EvalReport {
    std::array<double, 4> bleu{};  // orders 1..4
    Rouge rouge;
    double wer = 0;
    double token_accuracy = 0;
    size_t sample_count = 0;
    std::vector<std::pair<std::string, std::string>> transcripts;  // (reference, hypothesis)
};

inline EvalReport evaluate(const std::vector<std::pair<std::string, std::string>>& pairs,
                           bool keep_transcripts = false) {
    if (pairs.empty()) throw std::invalid_argument("evaluate: no pairs");
    std::vector<Tokens> refs, hyps;
    for (const auto& [r, h] : pairs) {
        refs.push_back(tokenize(r));
        hyps.push_back(tokenize(h));
    }
    EvalReport rep;
    for (int n = 1; n <= 4; ++n) rep.bleu[n - 1] = bleu_n(refs, hyps, n);
    rep.rouge = corpus_rouge1(refs, hyps);
    rep.wer = corpus_wer(refs, hyps);
    rep.token_accuracy = token_accuracy(refs, hyps);
    rep.sample_count = pairs.size();
    if (keep_transcripts) rep.transcripts = pairs;
    return rep;
}

/// Fixed-precision rounding so emitted reports are stable byte-for-byte.
inline double round_to(double v, int digits) {
    const double s = std::pow(10.0, digits);
    return std::round(v * s) / s;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["bleu"] = {{"1", round_to(r.bleu[0], 6)},
                 {"2", round_to(r.bleu[1], 6)},
                 {"3", round_to(r.bleu[2], 6)},
                 {"4", round_to(r.bleu[3], 6)}};
    j["rouge1"] = {{"P", round_to(r.rouge.precision, 6)},
                   {"R", round_to(r.rouge.recall, 6)},
                   {"F", round_to(r.rouge.f, 6)}};
    j["wer"] = round_to(r.wer, 6);
    j["token_accuracy"] = round_to(r.token_accuracy, 6);
    j["sample_count"] = r.sample_count;
    if (!r.transcripts.empty()) {
        auto& t = j["transcripts"] = nlohmann::json::array();
        for (const auto& [ref, hyp] : r.transcripts) t.push_back({{"reference", ref}, {"hypothesis", hyp}});
    }
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    for (int n = 1; n <= 4; ++n) r.bleu[n - 1] = j.at("bleu").at(std::to_string(n)).get<double>();
    r.rouge.precision = j.at("rouge1").at("P").get<double>();
    r.rouge.recall = j.at("rouge1").at("R").get<double>();
    r.rouge.f = j.at("rouge1").at("F").get<double>();
    r.wer = j.at("wer").get<double>();
    r.token_accuracy = j.value("token_accuracy", 0.0);
    r.sample_count = j.at("sample_count").get<size_t>();
    if (j.contains("transcripts"))
        for (const auto& t : j["transcripts"])
            r.transcripts.emplace_back(t.at("reference").get<std::string>(), t.at("hypothesis").get<std::string>());
    return r;
}

struct TableRow {
    std::string source;
    std::string method;
    EvalReport report;
};

/// Aligned text table: Source | Method | BLEU-1..4 | ROUGE-1 P R F | WER.
inline std::string render_table(const std::vector<TableRow>& rows) {
    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-16s %-12s %7s %7s %7s %7s %7s %7s %7s %8s\n", "Source", "Method", "BLEU-1",
                  "BLEU-2", "BLEU-3", "BLEU-4", "R1-P", "R1-R", "R1-F", "WER");
    out += buf;
    out += std::string(std::string(buf).size() - 1, '-') + "\n";
    for (const auto& r : rows) {
        const auto& e = r.report;
        std::snprintf(buf, sizeof buf, "%-16s %-12s %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f %7.2f %8.2f\n",
                      r.source.c_str(), r.method.c_str(), e.bleu[0], e.bleu[1], e.bleu[2], e.bleu[3],
                      e.rouge.precision, e.rouge.recall, e.rouge.f, e.wer);
        out += buf;
    }
    return out;
}

}  // namespace eegtext::metrics
