// Stage orchestration behind the `eegtext` command-line tool.
//
// Artifact layout under the run directory:
//   corpus/corpus.{jsonl,bin}            synth
//   splits/{train,val,test}.{jsonl,bin}  clean-split (word-level features)
//   splits/clean_report.json
//   <mode>/tokenizer.ckpt, tokenizer_log.json           train-rvq
//   <mode>/tokens/{train,val,test}.jsonl, utilization.json  tokenize
//   <mode>/pretrain.ckpt, sft.ckpt, ar.ckpt + *_log.json    pretrain, sft, train-ar
//   <mode>/generations_<decoder>.jsonl   generate
//   <mode>/eval_<decoder>.json           evaluate
//   report.json, report.txt              report
//
// Every artifact records the config hash, the global seed and its format
// version. Nothing time-dependent is written, so identical inputs give
// byte-identical outputs.

#pragma once

#include "eegtext/corpus.hpp"
#include "eegtext/generate.hpp"
#include "eegtext/mdlm.hpp"
#include "eegtext/metrics.hpp"
#include "eegtext/rvq.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace eegtext::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum ExitCode { exit_ok = 0, exit_failure = 1, exit_config = 2, exit_missing = 3, exit_numeric = 4 };

inline constexpr int kReportVersion = 1;

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class MissingArtifact : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

inline json default_config() {
    return json::parse(R"({
  "seed": 1234,
  "out": "runs/default",
  "mode": "word",
  "corpus": {
    "vocab_size": 40, "sentence_count": 200, "min_length": 4, "max_length": 8,
    "subject_count": 2, "noise_sigma": 0.0, "channels": 16, "bands": 8,
    "embed_dim": 12, "mixing_gain": 2.0, "successor_prob": 0.6, "successors_per_word": 3,
    "split": {"train": 0.8, "val": 0.1, "test": 0.1}
  },
  "rvq": {
    "layers": [{"kernel": 1, "stride": 1, "channels": 64}],
    "latent_dim": 8, "stages": 2, "codebook_size": 64, "beta": 0.25,
    "lr": 0.003, "epochs": 100, "batch": 16, "dead_code_reset": true, "clip_norm": 1.0
  },
  "mdlm": {
    "layers": 4, "width": 128, "heads": 4, "context": 128, "mlp_ratio": 4,
    "response_length": 12, "val_draws": 4,
    "pretrain": {"lr": 0.0003, "epochs": 20, "batch": 16, "weight_decay": 0.01, "clip_norm": 1.0, "patience": 5},
    "sft": {"lr": 0.0003, "epochs": 80, "batch": 16, "weight_decay": 0.01, "clip_norm": 1.0, "patience": 15},
    "generation": {"steps": 12, "remask": "low_confidence"}
  },
  "baseline": {
    "lr": 0.0003, "epochs": 80, "batch": 16, "weight_decay": 0.01, "clip_norm": 1.0, "patience": 15,
    "max_len": 12
  },
  "eval": {
    "split": "test", "decoders": ["diffusion", "ar"], "transcripts": true,
    "references": "", "hypotheses": ""
  }
})");
}

namespace detail {

inline const char* type_name(const json& j) {
    if (j.is_boolean()) return "boolean";
    if (j.is_number()) return "number";
    if (j.is_string()) return "string";
    if (j.is_array()) return "array";
    if (j.is_object()) return "object";
    return "null";
}

inline bool same_kind(const json& a, const json& b) {
    if (a.is_number() && b.is_number()) return true;
    return std::string(type_name(a)) == type_name(b);
}

/// Recursively checks `user` against the schema implied by `defaults`.
inline void check_schema(const json& user, const json& defaults, const std::string& path) {
    if (!same_kind(user, defaults))
        throw ConfigError("config key '" + path + "' must be " + type_name(defaults) + ", got " + type_name(user));
    if (!defaults.is_object()) return;
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = path.empty() ? it.key() : path + "." + it.key();
        if (!defaults.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
        check_schema(it.value(), defaults.at(it.key()), key);
    }
}

inline void merge_into(json& base, const json& patch) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
            merge_into(base[it.key()], it.value());
        else
            base[it.key()] = it.value();
    }
}

}  // namespace detail

/// Applies `key.path=value`; the value is parsed as JSON when possible and
/// taken as a plain string otherwise.
inline void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    const json defaults = default_config();
    json patch = value;
    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string part; std::getline(ss, part, '.');) parts.push_back(part);
    const json* schema = &defaults;
    std::string walked;
    for (const auto& p : parts) {
        walked += (walked.empty() ? "" : ".") + p;
        if (!schema->is_object() || !schema->contains(p)) throw ConfigError("unknown config key '" + walked + "'");
        schema = &schema->at(p);
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    detail::check_schema(patch, defaults, "");
    detail::merge_into(cfg, patch);
}

/// Defaults, then the config file, then overrides, then validation.
inline json load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json cfg = default_config();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file " + path);
        json user;
        try {
            user = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError(path + ": " + e.what());
        }
        detail::check_schema(user, cfg, "");
        detail::merge_into(cfg, user);
    }
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

/// Hash of the effective config, excluding where it runs and which feature
/// mode is active (both modes of one run share it).
inline std::string config_hash(const json& cfg) {
    json c = cfg;
    c.erase("out");
    c.erase("mode");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(c.dump())));
    return buf;
}

class Run {
  public:
    explicit Run(json cfg) : cfg_(std::move(cfg)) {
        try {
            mode_ = corpus::parse_mode(cfg_.at("mode").get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("mode: ") + e.what());
        }
        seed_ = cfg_.at("seed").get<uint64_t>();
        out_ = cfg_.at("out").get<std::string>();
        hash_ = config_hash(cfg_);
    }

    const json& config() const { return cfg_; }
    corpus::FeatureMode mode() const { return mode_; }
    std::string mode_name() const { return corpus::to_string(mode_); }
    fs::path out() const { return out_; }
    fs::path mode_dir() const { return out_ / mode_name(); }
    std::string hash() const { return hash_; }
    uint64_t seed() const { return seed_; }
    uint64_t stage_seed(const std::string& stage) const { return derive_seed(seed_, stage); }

    json provenance(const std::string& stage) const {
        return {{"stage", stage}, {"config_hash", hash_}, {"seed", seed_}, {"mode", mode_name()}};
    }

    // ---- stages -------------------------------------------------------------

    void synth() {
        const auto& c = cfg_.at("corpus");
        corpus::SynthesisConfig sc;
        sc.vocab_size = c.at("vocab_size");
        sc.sentence_count = c.at("sentence_count");
        sc.min_length = c.at("min_length");
        sc.max_length = c.at("max_length");
        sc.subject_count = c.at("subject_count");
        sc.noise_sigma = c.at("noise_sigma");
        sc.channels = c.at("channels");
        sc.bands = c.at("bands");
        sc.embed_dim = c.at("embed_dim");
        sc.mixing_gain = c.at("mixing_gain");
        sc.successor_prob = c.at("successor_prob");
        sc.successors_per_word = c.at("successors_per_word");
        sc.seed = stage_seed("corpus");
        corpus::PairedDataset ds;
        try {
            ds = corpus::build_corpus(sc);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("corpus: ") + e.what());
        }
        ds.meta = provenance("synth");
        fs::create_directories(out_ / "corpus");
        corpus::save_dataset(ds, (out_ / "corpus" / "corpus").string());
        note("synth: " + std::to_string(ds.size()) + " pairs -> " + (out_ / "corpus").string());
    }

    void clean_split() {
        auto ds = load_dataset_artifact(out_ / "corpus" / "corpus", "synth");
        corpus::CleanReport rep;
        auto cleaned = corpus::clean(ds, &rep);
        const auto& r = cfg_.at("corpus").at("split");
        corpus::SplitRatios ratios{r.at("train"), r.at("val"), r.at("test")};
        corpus::SplitResult parts;
        try {
            parts = corpus::split_unique(cleaned, stage_seed("split"), ratios);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("split: ") + e.what());
        }
        fs::create_directories(out_ / "splits");
        for (auto* p : {&parts.train, &parts.val, &parts.test}) {
            p->meta = provenance("clean-split");
            corpus::save_dataset(*p, (out_ / "splits" / corpus::to_string(p->split)).string());
        }
        json report = provenance("clean-split");
        report["format_version"] = kReportVersion;
        report["kept"] = rep.kept;
        report["dropped"] = rep.dropped;
        report["empty_result"] = rep.empty_result;
        report["sizes"] = {{"train", parts.train.size()}, {"val", parts.val.size()}, {"test", parts.test.size()}};
        write_json(out_ / "splits" / "clean_report.json", report);
        note("clean-split: dropped " + std::to_string(rep.dropped) + ", split " + std::to_string(parts.train.size()) +
             "/" + std::to_string(parts.val.size()) + "/" + std::to_string(parts.test.size()));
    }

    void train_rvq() {
        auto train = split_features(corpus::Split::train);
        auto val = split_features(corpus::Split::val);
        const auto& c = cfg_.at("rvq");
        rvq::EncoderConfig ec;
        ec.input_width = cfg_.at("corpus").at("channels").get<int>() * cfg_.at("corpus").at("bands").get<int>();
        ec.latent_dim = c.at("latent_dim");
        ec.layers.clear();
        for (const auto& l : c.at("layers")) {
            if (!l.is_object() || !l.contains("kernel") || !l.contains("stride") || !l.contains("channels"))
                throw ConfigError("rvq.layers entries need kernel, stride and channels");
            ec.layers.push_back({l.at("kernel"), l.at("stride"), l.at("channels")});
        }
        rvq::TokenizerHyper h;
        h.lr = c.at("lr");
        h.epochs = c.at("epochs");
        h.batch = c.at("batch");
        h.beta = c.at("beta");
        h.stages = c.at("stages");
        h.codebook_size = c.at("codebook_size");
        h.dead_code_reset = c.at("dead_code_reset");
        h.clip_norm = c.at("clip_norm");
        h.seed = stage_seed("rvq");
        rvq::TokenizerLog log;
        rvq::Tokenizer<float> tok;
        try {
            tok = rvq::train_tokenizer<float>(train, val, ec, h, &log, [&](const rvq::TokenizerEpoch& e) {
                note("train-rvq epoch " + std::to_string(e.epoch) + " loss " + fmt(e.train_loss) + " val_mse " +
                     fmt(e.val_mse));
            });
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("rvq: ") + e.what());
        }
        fs::create_directories(mode_dir());
        rvq::save_tokenizer(tok, (mode_dir() / "tokenizer.ckpt").string(), provenance("train-rvq"));
        json j = provenance("train-rvq");
        j["format_version"] = kReportVersion;
        j["epochs"] = json::array();
        for (const auto& e : log.epochs)
            j["epochs"].push_back({{"epoch", e.epoch},
                                   {"train_loss", metrics::round_to(e.train_loss, 9)},
                                   {"train_recon", metrics::round_to(e.train_recon, 9)},
                                   {"val_mse", metrics::round_to(e.val_mse, 9)},
                                   {"codes_reset", e.codes_reset}});
        write_json(mode_dir() / "tokenizer_log.json", j);
    }

    void tokenize() {
        auto tok = load_checkpoint([&] { return rvq::load_tokenizer<float>((mode_dir() / "tokenizer.ckpt").string()); },
                                   "tokenizer.ckpt", "train-rvq");
        fs::create_directories(mode_dir() / "tokens");
        json util = provenance("tokenize");
        util["format_version"] = kReportVersion;
        for (auto split : {corpus::Split::train, corpus::Split::val, corpus::Split::test}) {
            auto td = rvq::tokenize_dataset(split_features(split), tok);
            td.meta = provenance("tokenize");
            rvq::save_tokens(td, tokens_path(split).string());
            const auto u = rvq::utilization(td);
            util[corpus::to_string(split)] = u.fraction;
        }
        write_json(mode_dir() / "utilization.json", util);
        note("tokenize: train utilization " + util["train"].dump());
    }

    void pretrain() {
        auto train = load_tokens_artifact(corpus::Split::train);
        auto val = load_tokens_artifact(corpus::Split::val);
        mdlm::Transformer<float> model(model_config(mdlm::ModelKind::diffusion), vocabulary(train),
                                       stage_seed("mdlm-init"));
        fit(model, train, val, mdlm::Phase::pretrain, hyper(cfg_.at("mdlm").at("pretrain"), "pretrain"), "pretrain");
    }

    void sft() {
        auto train = load_tokens_artifact(corpus::Split::train);
        auto val = load_tokens_artifact(corpus::Split::val);
        auto model = load_model_artifact("pretrain.ckpt", "pretrain");
        fit(model, train, val, mdlm::Phase::sft, hyper(cfg_.at("mdlm").at("sft"), "sft"), "sft");
    }

    void train_ar() {
        auto train = load_tokens_artifact(corpus::Split::train);
        auto val = load_tokens_artifact(corpus::Split::val);
        mdlm::Transformer<float> model(model_config(mdlm::ModelKind::autoregressive), vocabulary(train),
                                       stage_seed("ar-init"));
        fit(model, train, val, mdlm::Phase::ar, hyper(cfg_.at("baseline"), "ar"), "ar");
    }

    void generate() {
        const auto split = eval_split();
        auto ds = load_tokens_artifact(split);
        for (const auto& decoder : decoders()) {
            std::vector<std::pair<std::string, std::string>> rows;
            auto model = load_model_artifact(decoder == "diffusion" ? "sft.ckpt" : "ar.ckpt",
                                             decoder == "diffusion" ? "sft" : "train-ar");
            const auto& g = cfg_.at("mdlm").at("generation");
            std::ofstream out(mode_dir() / ("generations_" + decoder + ".jsonl"), std::ios::trunc);
            json header = provenance("generate");
            header["type"] = "header";
            header["format_version"] = kReportVersion;
            header["decoder"] = decoder;
            header["split"] = corpus::to_string(split);
            header["count"] = ds.size();
            out << header.dump() << '\n';
            for (size_t i = 0; i < ds.size(); ++i) {
                const auto& p = ds.pairs[i];
                std::vector<int> ids;
                if (decoder == "diffusion") {
                    mdlm::GenerationConfig gc;
                    gc.steps = g.at("steps");
                    gc.length = cfg_.at("mdlm").at("response_length");
                    gc.remask = parse_remask_checked(g.at("remask"));
                    gc.seed = derive_seed(stage_seed("generate"), "pair", i);
                    ids = mdlm::generate(model, p.tokens, gc).tokens;
                } else {
                    ids = mdlm::ar_generate(model, p.tokens, cfg_.at("baseline").at("max_len").get<int>());
                }
                const auto hyp = model.vocab.detokenize(ids);
                out << json{{"sentence_id", p.text.sentence_id}, {"reference", p.text.raw_text}, {"hypothesis", hyp}}
                           .dump()
                    << '\n';
            }
            if (!out) throw std::runtime_error("short write to generations file");
            note("generate(" + decoder + "): " + std::to_string(ds.size()) + " sentences");
        }
    }

    /// Scores generations; with eval.references and eval.hypotheses set,
    /// scores those two plain-text files (one sentence per line) instead.
    void evaluate() {
        const auto& e = cfg_.at("eval");
        const std::string refs = e.at("references"), hyps = e.at("hypotheses");
        if (!refs.empty() || !hyps.empty()) {
            if (refs.empty() || hyps.empty())
                throw ConfigError("eval.references and eval.hypotheses must be given together");
            const auto r = read_lines(refs), h = read_lines(hyps);
            if (r.size() != h.size())
                throw ConfigError("reference and hypothesis files differ in line count (" + std::to_string(r.size()) +
                                  " vs " + std::to_string(h.size()) + ")");
            std::vector<std::pair<std::string, std::string>> pairs;
            for (size_t i = 0; i < r.size(); ++i) pairs.emplace_back(r[i], h[i]);
            write_eval(out_ / "eval_files.json", pairs, "files");
            return;
        }
        for (const auto& decoder : decoders()) {
            const auto path = mode_dir() / ("generations_" + decoder + ".jsonl");
            std::ifstream in(path);
            if (!in) throw MissingArtifact(missing_message(path, "generate"));
            std::string line;
            std::getline(in, line);
            std::vector<std::pair<std::string, std::string>> pairs;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto j = json::parse(line);
                pairs.emplace_back(j.at("reference").get<std::string>(), j.at("hypothesis").get<std::string>());
            }
            write_eval(mode_dir() / ("eval_" + decoder + ".json"), pairs, decoder);
        }
    }

    /// Collects eval reports from both feature modes into one table.
    void report() {
        std::vector<metrics::TableRow> rows;
        json j;
        j["format_version"] = kReportVersion;
        j["config_hash"] = hash_;
        j["seed"] = seed_;
        j["rows"] = json::array();
        for (const std::string mode : {"word", "sentence"}) {
            for (const std::string decoder : {"diffusion", "ar"}) {
                const auto path = out_ / mode / ("eval_" + decoder + ".json");
                if (!fs::exists(path)) continue;
                const auto e = read_json(path);
                if (e.value("format_version", -1) != kReportVersion)
                    throw ConfigError(path.string() + ": report format version " + e.value("format_version", json()).dump() +
                                      ", expected " + std::to_string(kReportVersion) + "; re-run evaluate");
                if (e.value("config_hash", "") != hash_)
                    note("warning: " + path.string() + " was produced under config " + e.value("config_hash", "") +
                         ", current is " + hash_);
                auto rep = metrics::report_from_json(e.at("metrics"));
                rep.transcripts.clear();
                const std::string source = mode == "word" ? "word-level" : "sentence-level";
                const std::string method = decoder == "diffusion" ? "diffusion" : "autoregress";
                rows.push_back({source, method, rep});
                json row = metrics::to_json(rep);
                row["source"] = mode;
                row["decoder"] = decoder;
                row["config_hash"] = e.value("config_hash", "");
                j["rows"].push_back(row);
            }
        }
        if (rows.empty()) throw MissingArtifact("no eval_*.json under " + out_.string() + "; run `eegtext evaluate` first");
        write_json(out_ / "report.json", j);
        std::ofstream txt(out_ / "report.txt", std::ios::trunc);
        txt << metrics::render_table(rows);
        if (!quiet) std::fputs(metrics::render_table(rows).c_str(), stdout);
    }

    /// Runs a named stage.
    void dispatch(const std::string& stage) {
        if (stage == "synth") return synth();
        if (stage == "clean-split") return clean_split();
        if (stage == "train-rvq") return train_rvq();
        if (stage == "tokenize") return tokenize();
        if (stage == "pretrain") return pretrain();
        if (stage == "sft") return sft();
        if (stage == "train-ar") return train_ar();
        if (stage == "generate") return generate();
        if (stage == "evaluate") return evaluate();
        if (stage == "report") return report();
        throw ConfigError("unknown subcommand '" + stage + "'");
    }

    static const std::vector<std::string>& stages() {
        static const std::vector<std::string> s{"synth",    "clean-split", "train-rvq", "tokenize", "pretrain",
                                                "sft",      "train-ar",    "generate",  "evaluate", "report"};
        return s;
    }

    bool quiet = false;

  private:
    json cfg_;
    corpus::FeatureMode mode_;
    uint64_t seed_ = 0;
    fs::path out_;
    std::string hash_;

    void note(const std::string& s) const {
        if (!quiet) std::fprintf(stderr, "%s\n", s.c_str());
    }

    static std::string fmt(double v) {
        char b[32];
        std::snprintf(b, sizeof b, "%.6f", v);
        return b;
    }

    static std::string missing_message(const fs::path& p, const std::string& producer) {
        return "missing artifact " + p.string() + "; run `eegtext " + producer + "` first";
    }

    template <typename F>
    std::invoke_result_t<F> load_checkpoint(F&& f, const std::string& what, const std::string& producer) {
        try {
            return f();
        } catch (const FormatError& e) {
            if (e.kind() == FormatErrorKind::missing) throw MissingArtifact(missing_message(mode_dir() / what, producer));
            throw;
        }
    }

    corpus::PairedDataset load_dataset_artifact(const fs::path& stem, const std::string& producer) {
        if (!fs::exists(corpus::manifest_path(stem.string())))
            throw MissingArtifact(missing_message(corpus::manifest_path(stem.string()), producer));
        return corpus::load_dataset(stem.string());
    }

    corpus::PairedDataset split_features(corpus::Split split) {
        auto ds = load_dataset_artifact(out_ / "splits" / corpus::to_string(split), "clean-split");
        return mode_ == corpus::FeatureMode::sentence_level ? corpus::to_sentence_level(ds) : ds;
    }

    fs::path tokens_path(corpus::Split split) const {
        return mode_dir() / "tokens" / (corpus::to_string(split) + ".jsonl");
    }

    rvq::TokenDataset load_tokens_artifact(corpus::Split split) {
        const auto p = tokens_path(split);
        if (!fs::exists(p)) throw MissingArtifact(missing_message(p, "tokenize --mode " + mode_name()));
        return rvq::load_tokens(p.string());
    }

    mdlm::Transformer<float> load_model_artifact(const std::string& name, const std::string& producer) {
        const auto p = mode_dir() / name;
        if (!fs::exists(p)) throw MissingArtifact(missing_message(p, producer + " --mode " + mode_name()));
        return mdlm::load_model<float>(p.string());
    }

    static mdlm::Vocabulary vocabulary(const rvq::TokenDataset& ds) { return {ds.vocabulary, ds.codebook_sizes}; }

    mdlm::ModelConfig model_config(mdlm::ModelKind kind) const {
        const auto& m = cfg_.at("mdlm");
        mdlm::ModelConfig c;
        c.layers = m.at("layers");
        c.width = m.at("width");
        c.heads = m.at("heads");
        c.context = m.at("context");
        c.mlp_ratio = m.at("mlp_ratio");
        c.kind = kind;
        try {
            c.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("mdlm: ") + e.what());
        }
        return c;
    }

    mdlm::TrainHyper hyper(const json& j, const std::string& phase) const {
        mdlm::TrainHyper h;
        h.lr = j.at("lr");
        h.epochs = j.at("epochs");
        h.batch = j.at("batch");
        h.weight_decay = j.at("weight_decay");
        h.clip_norm = j.at("clip_norm");
        h.patience = j.at("patience");
        h.response_length = cfg_.at("mdlm").at("response_length");
        h.val_draws = cfg_.at("mdlm").at("val_draws");
        if (h.val_draws < 1) throw ConfigError("mdlm.val_draws must be >= 1");
        h.seed = stage_seed(phase);
        return h;
    }

    void fit(mdlm::Transformer<float>& model, const rvq::TokenDataset& train, const rvq::TokenDataset& val,
             mdlm::Phase phase, const mdlm::TrainHyper& h, const std::string& name) {
        mdlm::TrainLog log;
        try {
            log = mdlm::train(model, train, val, phase, h, [&](const mdlm::EpochStats& e) {
                note(name + " epoch " + std::to_string(e.epoch) + " train " + fmt(e.train_loss) + " val " +
                     fmt(e.val_loss) + (e.improved ? " *" : ""));
            });
        } catch (const mdlm::ContextOverflow& e) {
            throw ConfigError(std::string(name) + ": " + e.what());
        }
        fs::create_directories(mode_dir());
        const std::string stage = phase == mdlm::Phase::ar ? "train-ar" : name;
        mdlm::save_model(model, (mode_dir() / (name + ".ckpt")).string(), provenance(stage));
        json j = provenance(stage);
        j["format_version"] = kReportVersion;
        j["parameters"] = model.parameter_count(phase);
        j["best_epoch"] = log.best_epoch;
        j["stopped_early"] = log.stopped_early;
        j["epochs"] = json::array();
        for (const auto& e : log.epochs)
            j["epochs"].push_back({{"epoch", e.epoch},
                                   {"train_loss", metrics::round_to(e.train_loss, 9)},
                                   {"val_loss", metrics::round_to(e.val_loss, 9)}});
        write_json(mode_dir() / (name + "_log.json"), j);
    }

    corpus::Split eval_split() const {
        try {
            return corpus::parse_split(cfg_.at("eval").at("split").get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("eval.split: ") + e.what());
        }
    }

    std::vector<std::string> decoders() const {
        std::vector<std::string> d;
        for (const auto& x : cfg_.at("eval").at("decoders")) {
            if (!x.is_string() || (x != "diffusion" && x != "ar"))
                throw ConfigError("eval.decoders entries must be \"diffusion\" or \"ar\"");
            d.push_back(x.get<std::string>());
        }
        if (d.empty()) throw ConfigError("eval.decoders is empty");
        return d;
    }

    static mdlm::Remask parse_remask_checked(const std::string& s) {
        try {
            return mdlm::parse_remask(s);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("mdlm.generation.remask: ") + e.what());
        }
    }

    void write_eval(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& pairs,
                    const std::string& decoder) {
        if (pairs.empty()) throw ConfigError("nothing to evaluate for " + decoder);
        const auto rep = metrics::evaluate(pairs, cfg_.at("eval").at("transcripts").get<bool>());
        json j = provenance("evaluate");
        j["format_version"] = kReportVersion;
        j["decoder"] = decoder;
        j["metrics"] = metrics::to_json(rep);
        fs::create_directories(path.parent_path());
        write_json(path, j);
        char b[160];
        std::snprintf(b, sizeof b, "evaluate(%s): BLEU-1 %.2f ROUGE-1 F %.2f WER %.2f token acc %.2f",
                      decoder.c_str(), rep.bleu[0], rep.rouge.f, rep.wer, rep.token_accuracy);
        if (!quiet) std::printf("%s\n", b);
    }

    static std::vector<std::string> read_lines(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw MissingArtifact("cannot open " + path);
        std::vector<std::string> lines;
        for (std::string l; std::getline(in, l);) lines.push_back(l);
        return lines;
    }

    static json read_json(const fs::path& p) {
        std::ifstream in(p);
        if (!in) throw MissingArtifact("cannot open " + p.string());
        try {
            return json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(FormatErrorKind::malformed, p.string() + ": " + e.what());
        }
    }

    static void write_json(const fs::path& p, const json& j) {
        std::ofstream out(p, std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + p.string());
        out << j.dump(2) << '\n';
    }
};

}  // namespace eegtext::pipeline
