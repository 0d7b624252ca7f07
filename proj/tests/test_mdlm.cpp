#include "support.hpp"

#include "eegtext/generate.hpp"

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

using namespace eegtext;
using namespace eegtext::mdlm;
using namespace testing_support;

namespace {

constexpr double kRelTol = 1e-3;
constexpr double kAbsTol = 1e-8;
constexpr int kGradInstances = 10;

Transformer<double> tiny_model(ModelKind kind, uint64_t seed, Rng& rng) {
    Transformer<double> m(tiny_config(kind), tiny_vocab(), seed);
    perturb_parameters(m.parameters(), rng, 0.3);
    return m;
}

std::vector<int> random_words(int n, int vocab, Rng& rng) {
    std::vector<int> w(n);
    for (auto& x : w) x = static_cast<int>(uniform_index(rng, vocab));
    return w;
}

// Natural-log cross entropy of one logit row against a target.
double ce(const std::vector<double>& row, int target) {
    double z = 0;
    for (double v : row) z += std::exp(v);
    return std::log(z) - row[target];
}

Matrix<double> oracle_logits(const std::vector<int>& targets, int classes, double magnitude) {
    Matrix<double> m(static_cast<int>(targets.size()), classes);
    for (size_t i = 0; i < targets.size(); ++i) m(static_cast<int>(i), targets[i]) = magnitude;
    return m;
}

double loss_value(const Matrix<double>& logits, const std::vector<int>& targets, const std::vector<char>& flags,
                  double t) {
    Tape<double> tape;
    return tape.scalar(masked_diffusion_loss(tape, tape.constant(logits), targets, flags, t));
}

rvq::TokenDataset toy_tokens(int sentences, int words, const std::vector<int>& sizes, uint64_t seed) {
    // Each sentence's codes are a deterministic function of its words, so the
    // prompt carries the answer.
    Rng rng(seed);
    rvq::TokenDataset ds;
    ds.codebook_sizes = sizes;
    for (int i = 0; i < sentences; ++i) {
        rvq::TokenPair p;
        const int len = 2 + static_cast<int>(uniform_index(rng, 3));
        p.text.sentence_id = i;
        p.text.words = random_words(len, words, rng);
        p.tokens.length = len;
        p.tokens.stages = static_cast<int>(sizes.size());
        p.tokens.codebook_sizes = sizes;
        for (int t = 0; t < len; ++t)
            for (size_t m = 0; m < sizes.size(); ++m) p.tokens.indices.push_back((p.text.words[t] * (int(m) + 1)) % sizes[m]);
        ds.pairs.push_back(p);
    }
    return ds;
}

}  // namespace

// ---- vocabulary and layout ---------------------------------------------------

TEST(Vocabulary, SpecialIdsAndCodeOffsets) {
    const auto v = tiny_vocab(6, {4, 3});
    EXPECT_EQ(v.eos(), 6);
    EXPECT_EQ(v.mask(), 7);
    EXPECT_EQ(v.pad(), 8);
    EXPECT_EQ(v.output_size(), 7);
    EXPECT_EQ(v.code_offset(1), 4);
    EXPECT_EQ(v.eeg_output_size(), 7);
    EXPECT_EQ(v.code_mask(), 7);
    EXPECT_EQ(v.strip({1, 7, 2, 6, 3}), (std::vector<int>{1, 2}));
    EXPECT_EQ(v.detokenize({0, 5, 6, 1}), "w0 w5");
}

TEST(Vocabulary, FlattenIsStageMajor) {
    const auto v = tiny_vocab(6, {4, 3});
    rvq::EEGTokenSequence e;
    e.length = 2;
    e.stages = 2;
    e.codebook_sizes = {4, 3};
    e.indices = {3, 1, 0, 2};  // (t0: 3,1) (t1: 0,2)
    EXPECT_EQ(flatten_codes(e, v), (std::vector<int>{3, 0, 5, 6}));
}

TEST(Vocabulary, ResponseTargetsPadWithEos) {
    const auto v = tiny_vocab();
    EXPECT_EQ(response_targets({1, 2}, 4, v), (std::vector<int>{1, 2, 6, 6}));
    EXPECT_THROW(response_targets({1, 2, 3}, 2, v), ContextOverflow);
}

// ---- forward process ------------------------------------------------------------

TEST(ForwardMask, VanishingTimestepMasksNothing) {
    Rng rng(1);
    const auto x0 = random_words(5000, 6, rng);
    const auto s = forward_mask(x0, 1e-12, 7, rng);
    EXPECT_EQ(s.masked_count(), 0);
    EXPECT_EQ(s.tokens, x0);
}

TEST(ForwardMask, UnitTimestepMasksEverything) {
    Rng rng(2);
    const auto x0 = random_words(300, 6, rng);
    const auto s = forward_mask(x0, 1.0, 7, rng);
    EXPECT_EQ(s.masked_count(), 300);
    for (int id : s.tokens) EXPECT_EQ(id, 7);
}

TEST(ForwardMask, MaskedFractionConcentrates) {
    Rng rng(3);
    const auto x0 = random_words(10000, 6, rng);
    for (double t : {0.1, 0.5, 0.9}) {
        const auto s = forward_mask(x0, t, 7, rng);
        EXPECT_NEAR(s.masked_count() / 10000.0, t, 0.03);
        for (size_t i = 0; i < x0.size(); ++i) {
            ASSERT_EQ(s.mask_flags[i] != 0, s.tokens[i] == 7);
            if (!s.mask_flags[i]) ASSERT_EQ(s.tokens[i], x0[i]);
        }
    }
}

TEST(ForwardMask, MaskedCountIsBinomial) {
    constexpr int L = 20, draws = 1000;
    constexpr double t = 0.3;
    Rng rng(4);
    const auto x0 = random_words(L, 6, rng);
    std::vector<int> counts(L + 1);
    for (int i = 0; i < draws; ++i) ++counts[forward_mask(x0, t, 7, rng).masked_count()];

    // Pool adjacent bins until each expects at least 5 draws.
    boost::math::binomial_distribution<double> bin(L, t);
    double stat = 0, exp_acc = 0, obs_acc = 0;
    int bins = 0;
    for (int k = 0; k <= L; ++k) {
        exp_acc += draws * boost::math::pdf(bin, k);
        obs_acc += counts[k];
        if (exp_acc >= 5 && (k == L || draws * boost::math::cdf(boost::math::complement(bin, k)) >= 5)) {
            stat += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc;
            exp_acc = obs_acc = 0;
            ++bins;
        }
    }
    if (exp_acc > 0) stat += (obs_acc - exp_acc) * (obs_acc - exp_acc) / exp_acc, ++bins;
    const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(bins - 1), stat));
    EXPECT_GT(p, 0.01) << "chi2 " << stat << " over " << bins << " bins";
}

TEST(ForwardMask, RejectsBadArguments) {
    Rng rng(5);
    for (double t : {0.0, -0.2, 1.0000001, std::nan("")}) EXPECT_THROW(forward_mask({1, 2}, t, 7, rng), std::invalid_argument);
    EXPECT_THROW(forward_mask({1, 7}, 0.5, 7, rng), std::invalid_argument);
}

TEST(ForwardMask, CorruptionSamplerAlwaysMasksSomething) {
    Rng rng(6);
    for (int i = 0; i < 2000; ++i) {
        const auto s = sample_corruption({1, 2, 3}, 7, rng);
        ASSERT_GT(s.masked_count(), 0);
        ASSERT_GT(s.t, 0.0);
        ASSERT_LE(s.t, 1.0);
    }
    EXPECT_THROW(sample_corruption({}, 7, rng), std::invalid_argument);
}

// ---- losses ----------------------------------------------------------------------

TEST(DiffusionLoss, OracleLogitsGiveVanishingLoss) {
    const std::vector<int> targets = {2, 0, 4, 1, 3};
    const auto logits = oracle_logits(targets, 7, 30.0);
    for (double t : {0.2, 0.5, 1.0})
        EXPECT_LT(loss_value(logits, targets, {1, 0, 1, 1, 0}, t), 1e-9);
    EXPECT_LT(loss_value(logits, targets, {1, 1, 1, 1, 1}, 1.0), 1e-9);
}

TEST(DiffusionLoss, UniformLogitsScoreLogVWhenFullyMasked) {
    const std::vector<int> targets = {2, 0, 4, 1};
    EXPECT_NEAR(loss_value(Matrix<double>(4, 9, 0.7), targets, {1, 1, 1, 1}, 1.0), std::log(9.0), 1e-12);
}

TEST(DiffusionLoss, UniformLogitsScoreLogVInExpectationOverMasks) {
    constexpr int L = 12, V = 7, draws = 20000;
    const Matrix<double> logits(L, V, 0.0);
    std::vector<int> targets(L, 3);
    for (double t : {0.25, 0.5, 0.9}) {
        Rng rng(static_cast<uint64_t>(t * 100));
        double acc = 0;
        for (int i = 0; i < draws; ++i) {
            const auto s = forward_mask(targets, t, V, rng);
            if (s.masked_count() > 0) acc += loss_value(logits, targets, s.mask_flags, t);
        }
        EXPECT_NEAR(acc / draws / std::log(double(V)), 1.0, 0.01) << "t=" << t;
    }
}

TEST(DiffusionLoss, HandBuiltTwoPositionThreeClass) {
    const Matrix<double> logits = [] {
        Matrix<double> m(2, 3);
        m.data = {1.0, 2.0, 0.5, -0.3, 0.0, 0.8};
        return m;
    }();
    const std::vector<int> targets = {0, 2};
    // Both masked: (1/t) * mean CE.
    const double both = (1 / 0.5) * 0.5 * (ce({1.0, 2.0, 0.5}, 0) + ce({-0.3, 0.0, 0.8}, 2));
    EXPECT_NEAR(loss_value(logits, targets, {1, 1}, 0.5), both, 1e-9);
    // One of two masked: (1/t) * (1/L) * CE of the masked row.
    EXPECT_NEAR(loss_value(logits, targets, {0, 1}, 0.5), (1 / 0.5) * 0.5 * ce({-0.3, 0.0, 0.8}, 2), 1e-9);
    EXPECT_THROW(loss_value(logits, targets, {0, 0}, 0.5), std::invalid_argument);
}

TEST(PretrainLoss, MatchesHandAssemblyOnModelLogits) {
    Rng rng(7);
    auto model = tiny_model(ModelKind::diffusion, 3, rng);
    const auto e0 = random_tokens(3, {4, 3}, rng);
    const auto x0 = flatten_codes(e0, model.vocab);
    auto corrupted = forward_mask(x0, 0.6, model.vocab.code_mask(), rng);
    corrupted.mask_flags[0] = 1;
    corrupted.tokens[0] = model.vocab.code_mask();
    Tape<double> tape;
    const double loss = tape.scalar(pretrain_loss(tape, model, e0, corrupted));
    Tape<double> t2;
    const auto logits = t2.value(model.flat_code_logits(t2, corrupted.tokens, e0.length, 0.6));
    ASSERT_EQ(logits.cols, 7);
    double expect = 0;
    for (int r = 0; r < logits.rows; ++r)
        if (corrupted.mask_flags[r]) expect += ce({logits.row(r).begin(), logits.row(r).end()}, x0[r]);
    EXPECT_NEAR(loss, expect / (0.6 * x0.size()), 1e-9);
    EXPECT_GE(loss, 0.0);
}

TEST(SftLoss, TinyInstanceMatchesHandComputedCrossEntropy) {
    // 1 prompt position, 2 text positions, 3 output classes (2 words + EOS).
    Rng rng(8);
    Transformer<double> model(tiny_config(), tiny_vocab(2, {4, 3}), 5);
    perturb_parameters(model.parameters(), rng);
    const auto prompt = random_tokens(1, {4, 3}, rng);
    const std::vector<int> x0 = {1, 2};
    MaskedSequence c;
    c.t = 0.4;
    c.tokens = {model.vocab.mask(), 2};
    c.mask_flags = {1, 0};
    Tape<double> tape;
    const double loss = tape.scalar(sft_loss(tape, model, prompt, x0, c));
    const auto logits = model.denoise_logits(prompt, c.tokens, 0.4);
    ASSERT_EQ(logits.cols, 3);
    EXPECT_NEAR(loss, ce({logits.row(0).begin(), logits.row(0).end()}, 1) / (0.4 * 2), 1e-9);
}

TEST(SftLoss, OracleAndDeterminism) {
    const std::vector<int> x0 = {4, 1, 6, 6};
    EXPECT_LT(loss_value(oracle_logits(x0, 7, 30.0), x0, {1, 1, 0, 1}, 0.75), 1e-9);

    Rng rng(9);
    auto model = tiny_model(ModelKind::diffusion, 4, rng);
    const auto prompt = random_tokens(3, {4, 3}, rng);
    auto value = [&] {
        Rng r(42);
        Tape<double> tape;
        return tape.scalar(sft_loss(tape, model, prompt, x0, r));
    };
    EXPECT_EQ(value(), value());
}

TEST(SftLoss, OnlyResponseRowsAreCorruptedOrScored) {
    Rng rng(10);
    auto model = tiny_model(ModelKind::diffusion, 4, rng);
    const auto prompt = random_tokens(3, {4, 3}, rng);
    const std::vector<int> x0 = {4, 1, 6};
    Rng r(3);
    const auto s = sample_corruption(x0, model.vocab.mask(), r);
    EXPECT_EQ(s.tokens.size(), x0.size());
    // Changing the prompt changes the logits but never the set of scored rows.
    auto other = prompt;
    other.indices[0] = (other.indices[0] + 1) % 4;
    Tape<double> a, b;
    const double la = a.scalar(sft_loss(a, model, prompt, x0, s));
    const double lb = b.scalar(sft_loss(b, model, other, x0, s));
    EXPECT_NE(la, lb);
    EXPECT_GT(la, 0.0);
}

TEST(SftLoss, ContextOverflowIsRejected) {
    Rng rng(11);
    auto model = tiny_model(ModelKind::diffusion, 4, rng);
    const auto prompt = random_tokens(10, {4, 3}, rng);
    Rng r(1);
    Tape<double> tape;
    EXPECT_THROW(sft_loss(tape, model, prompt, std::vector<int>(7, 1), r), ContextOverflow);
    Tape<double> t2;
    EXPECT_THROW(ar_loss(t2, model, prompt, std::vector<int>(6, 1)), ContextOverflow);
}

TEST(ArLoss, MatchesHandAssembly) {
    Rng rng(12);
    auto model = tiny_model(ModelKind::autoregressive, 6, rng);
    const auto prompt = random_tokens(2, {4, 3}, rng);
    const std::vector<int> words = {3, 0, 5};
    Tape<double> tape;
    const double loss = tape.scalar(ar_loss(tape, model, prompt, words));
    double expect = 0;
    std::vector<int> prefix;
    for (int target : {3, 0, 5, 6}) {
        const auto l = model.next_logits(prompt, prefix);
        expect += ce({l.row(0).begin(), l.row(0).end()}, target);
        prefix.push_back(target);
    }
    EXPECT_NEAR(loss, expect / 4, 1e-9);
}

// ---- gradients ---------------------------------------------------------------------

TEST(Gradients, PretrainLossMatchesFiniteDifferences) {
    Rng rng(100);
    for (int i = 0; i < kGradInstances; ++i) {
        auto model = tiny_model(ModelKind::diffusion, 200 + i, rng);
        const auto e0 = random_tokens(2 + i % 3, {4, 3}, rng);
        Rng mr(i);
        const auto c = sample_corruption(flatten_codes(e0, model.vocab), model.vocab.code_mask(), mr);
        const auto params = model.parameters(Phase::pretrain);
        ASSERT_LE(model.parameter_count(), 5000u);
        auto loss = [&] {
            Tape<double> t;
            return t.scalar(pretrain_loss(t, model, e0, c));
        };
        auto analytic = [&] {
            Tape<double> t;
            t.backward(pretrain_loss(t, model, e0, c));
        };
        const auto rep = check_gradients(params, loss, analytic);
        EXPECT_LT(rep.worst_rel, kRelTol) << rep.worst_where;
        EXPECT_LT(rep.worst_abs, kAbsTol);
    }
}

TEST(Gradients, SftLossMatchesFiniteDifferences) {
    Rng rng(101);
    for (int i = 0; i < kGradInstances; ++i) {
        auto model = tiny_model(ModelKind::diffusion, 300 + i, rng);
        const auto prompt = random_tokens(1 + i % 4, {4, 3}, rng);
        const auto x0 = response_targets(random_words(2 + i % 3, 6, rng), 5, model.vocab);
        Rng mr(i);
        const auto c = sample_corruption(x0, model.vocab.mask(), mr);
        auto loss = [&] {
            Tape<double> t;
            return t.scalar(sft_loss(t, model, prompt, x0, c));
        };
        auto analytic = [&] {
            Tape<double> t;
            t.backward(sft_loss(t, model, prompt, x0, c));
        };
        const auto rep = check_gradients(model.parameters(Phase::sft), loss, analytic);
        EXPECT_LT(rep.worst_rel, kRelTol) << rep.worst_where;
        EXPECT_LT(rep.worst_abs, kAbsTol);
    }
}

TEST(Gradients, ArLossMatchesFiniteDifferences) {
    Rng rng(102);
    for (int i = 0; i < kGradInstances; ++i) {
        auto model = tiny_model(ModelKind::autoregressive, 400 + i, rng);
        const auto prompt = random_tokens(1 + i % 4, {4, 3}, rng);
        const auto words = random_words(1 + i % 4, 6, rng);
        auto loss = [&] {
            Tape<double> t;
            return t.scalar(ar_loss(t, model, prompt, words));
        };
        auto analytic = [&] {
            Tape<double> t;
            t.backward(ar_loss(t, model, prompt, words));
        };
        const auto rep = check_gradients(model.parameters(Phase::ar), loss, analytic);
        EXPECT_LT(rep.worst_rel, kRelTol) << rep.worst_where;
        EXPECT_LT(rep.worst_abs, kAbsTol);
    }
}

// ---- model structure ------------------------------------------------------------

TEST(Model, DiffusionAttentionIsBidirectional) {
    Rng rng(13);
    auto model = tiny_model(ModelKind::diffusion, 7, rng);
    const auto prompt = random_tokens(2, {4, 3}, rng);
    const auto a = model.denoise_logits(prompt, {1, 7, 2}, 0.5);
    const auto b = model.denoise_logits(prompt, {1, 7, 3}, 0.5);
    // Changing the last token moves the first row's prediction.
    EXPECT_NE(a(0, 0), b(0, 0));
}

TEST(Model, ArAttentionIsCausalOverTheResponse) {
    Rng rng(14);
    auto model = tiny_model(ModelKind::autoregressive, 8, rng);
    const auto prompt = random_tokens(2, {4, 3}, rng);
    Tape<double> t1, t2;
    auto rows_for = [&](Tape<double>& t, std::vector<int> resp) {
        Var x = t.concat_rows({model.embed_prompt(t, prompt), model.embed_response(t, resp)});
        return t.value(model.text_logits(t, model.trunk(t, x, 1.0, prompt.length)));
    };
    const auto a = rows_for(t1, {6, 1, 2});
    const auto b = rows_for(t2, {6, 1, 4});
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < a.cols; ++c) ASSERT_EQ(a(r, c), b(r, c)) << r;
    EXPECT_NE(a(4, 0), b(4, 0));
}

TEST(Model, TextHeadNeverEmitsMask) {
    Transformer<double> m(tiny_config(), tiny_vocab(), 1);
    EXPECT_EQ(m.text_head_w.value.cols, m.vocab.output_size());
    EXPECT_LT(m.vocab.mask(), m.vocab.input_size());
    EXPECT_GE(m.vocab.mask(), m.vocab.output_size());
}

TEST(Model, MatchedBaselineParameterCount) {
    ModelConfig cfg;
    mdlm::Vocabulary v;
    v.words = corpus::synthetic_vocabulary(40);
    v.codebook_sizes = {64, 64};
    Transformer<float> diff(cfg, v, 1);
    cfg.kind = ModelKind::autoregressive;
    Transformer<float> ar(cfg, v, 1);
    const double ratio = static_cast<double>(ar.parameter_count(Phase::ar)) / diff.parameter_count(Phase::sft);
    EXPECT_GE(ratio, 0.9);
    EXPECT_LE(ratio, 1.1);
}

TEST(Model, CheckpointRoundTrip) {
    Rng rng(15);
    auto model = tiny_model(ModelKind::diffusion, 9, rng);
    model.phase = Phase::sft;
    const auto path = (scratch_dir("model_ckpt") / "m.ckpt").string();
    save_model(model, path, {{"config_hash", "h"}});
    nlohmann::json meta;
    auto back = load_model<double>(path, &meta);
    EXPECT_EQ(back.config, model.config);
    EXPECT_EQ(back.vocab, model.vocab);
    EXPECT_EQ(back.phase, Phase::sft);
    EXPECT_EQ(back.seed, 9u);
    EXPECT_EQ(meta.at("config_hash"), "h");
    const auto ps = model.parameters(), qs = back.parameters();
    ASSERT_EQ(ps.size(), qs.size());
    for (size_t i = 0; i < ps.size(); ++i) EXPECT_EQ(ps[i]->value, qs[i]->value) << ps[i]->name;
    const auto prompt = random_tokens(2, {4, 3}, rng);
    EXPECT_EQ(model.denoise_logits(prompt, {7, 7}, 1.0), back.denoise_logits(prompt, {7, 7}, 1.0));
    EXPECT_THROW(rvq::load_tokenizer<double>(path), FormatError);
}

// ---- training ------------------------------------------------------------------------

TEST(Training, ZeroLearningRateLeavesParametersUnchanged) {
    const auto ds = toy_tokens(6, 6, {4, 3}, 1);
    for (auto [kind, phase] : {std::pair{ModelKind::diffusion, Phase::pretrain}, std::pair{ModelKind::diffusion, Phase::sft},
                               std::pair{ModelKind::autoregressive, Phase::ar}}) {
        Transformer<double> model(tiny_config(kind), tiny_vocab(), 2);
        std::vector<Matrix<double>> before;
        for (auto* p : model.parameters()) before.push_back(p->value);
        TrainHyper h;
        h.lr = 0;
        h.epochs = 1;
        h.response_length = 5;
        train(model, ds, ds, phase, h);
        const auto after = model.parameters();
        for (size_t i = 0; i < after.size(); ++i) EXPECT_EQ(after[i]->value, before[i]) << after[i]->name;
    }
}

TEST(Training, PhaseMismatchIsRejected) {
    const auto ds = toy_tokens(4, 6, {4, 3}, 1);
    Transformer<double> ar(tiny_config(ModelKind::autoregressive), tiny_vocab(), 2);
    Transformer<double> diff(tiny_config(), tiny_vocab(), 2);
    EXPECT_THROW(train(ar, ds, ds, Phase::sft, {}), std::invalid_argument);
    EXPECT_THROW(train(diff, ds, ds, Phase::ar, {}), std::invalid_argument);
    EXPECT_THROW(train(diff, rvq::TokenDataset{}, ds, Phase::sft, {}), std::invalid_argument);
}

TEST(Training, DeterministicGivenSeed) {
    const auto ds = toy_tokens(8, 6, {4, 3}, 2);
    auto run = [&] {
        Transformer<double> model(tiny_config(), tiny_vocab(), 3);
        TrainHyper h;
        h.epochs = 2;
        h.batch = 3;
        h.response_length = 5;
        h.lr = 1e-2;
        train(model, ds, ds, Phase::sft, h);
        return model.text_head_w.value;
    };
    EXPECT_EQ(run(), run());
}

TEST(Training, NonFiniteLossAborts) {
    const auto ds = toy_tokens(4, 6, {4, 3}, 3);
    Transformer<double> model(tiny_config(), tiny_vocab(), 3);
    model.text_head_b.value(0, 0) = std::numeric_limits<double>::infinity();
    TrainHyper h;
    h.epochs = 1;
    h.response_length = 5;
    EXPECT_THROW(train(model, ds, ds, Phase::sft, h), NumericError);
}

TEST(Training, PretrainingLowersValidationLoss) {
    std::vector<double> before, after;
    for (uint64_t seed : {1, 2, 3}) {
        const auto tr = toy_tokens(40, 6, {4, 3}, 10 + seed);
        const auto va = toy_tokens(10, 6, {4, 3}, 20 + seed);
        auto cfg = tiny_config();
        cfg.width = 16;
        Transformer<double> model(cfg, tiny_vocab(), seed);
        TrainHyper h;
        h.epochs = 6;
        h.batch = 8;
        h.lr = 3e-3;
        h.patience = 0;
        h.seed = seed;
        const uint64_t val_seed = derive_seed(derive_seed(h.seed, "pretrain"), "val");
        before.push_back(dataset_loss(model, va, Phase::pretrain, h.response_length, val_seed, h.val_draws));
        const auto log = train(model, tr, va, Phase::pretrain, h);
        after.push_back(dataset_loss(model, va, Phase::pretrain, h.response_length, val_seed, h.val_draws));
        EXPECT_EQ(after.back(), log.best_val);
    }
    std::sort(before.begin(), before.end());
    std::sort(after.begin(), after.end());
    EXPECT_LT(after[1], before[1]);
}

TEST(Training, EarlyStoppingRestoresBestEpoch) {
    const auto tr = toy_tokens(8, 6, {4, 3}, 4);
    const auto va = toy_tokens(4, 6, {4, 3}, 5);
    Transformer<double> model(tiny_config(), tiny_vocab(), 3);
    TrainHyper h;
    h.epochs = 30;
    h.lr = 0.05;  // large enough to overshoot
    h.patience = 2;
    h.response_length = 5;
    const auto log = train(model, tr, va, Phase::sft, h);
    ASSERT_FALSE(log.epochs.empty());
    double best = log.epochs.front().val_loss;
    for (const auto& e : log.epochs) best = std::min(best, e.val_loss);
    EXPECT_EQ(log.best_val, best);
    EXPECT_EQ(dataset_loss(model, va, Phase::sft, 5, derive_seed(derive_seed(h.seed, "sft"), "val"), h.val_draws), best);
    if (log.stopped_early) EXPECT_EQ(static_cast<int>(log.epochs.size()), log.best_epoch + h.patience);
}

// ---- error accumulation probe -----------------------------------------------------

TEST(ErrorAccumulation, ArConditionalShiftsWithForcedWrongToken) {
    const auto tr = toy_tokens(30, 6, {4, 3}, 6);
    Transformer<double> ar(tiny_config(ModelKind::autoregressive), tiny_vocab(), 4);
    TrainHyper h;
    h.epochs = 5;
    h.lr = 3e-3;
    h.patience = 0;
    train(ar, tr, rvq::TokenDataset{}, Phase::ar, h);
    const auto& ex = tr.pairs[0];
    auto dist = [&](std::vector<int> prefix) {
        const auto l = ar.next_logits(ex.tokens, prefix);
        std::vector<double> p(l.cols);
        for (int c = 0; c < l.cols; ++c) p[c] = row_probability(l, 0, c);
        return p;
    };
    const int right = ex.text.words[0], wrong = (right + 1) % 6;
    const auto p = dist({right}), q = dist({wrong});
    double kl = 0;
    for (size_t c = 0; c < p.size(); ++c) kl += p[c] * std::log(p[c] / q[c]);
    EXPECT_GT(kl, 0.0);
}

TEST(ErrorAccumulation, DiffusionPredictionsComeFromOneParallelCall) {
    // Within one step every masked position is predicted from the same input
    // state, so what gets committed at position 0 in that step cannot affect
    // the prediction at position 1.
    Rng rng(16);
    auto model = tiny_model(ModelKind::diffusion, 10, rng);
    const auto prompt = random_tokens(3, {4, 3}, rng);
    GenerationConfig cfg;
    cfg.length = 4;
    cfg.steps = 4;
    cfg.keep_states = true;
    const auto out = generate(model, prompt, cfg);
    std::vector<int> state(4, model.mask_id());
    for (int s = cfg.steps, k = 0; s >= 1; --s, ++k) {
        const auto logits = model.denoise_logits(prompt, state, static_cast<double>(s) / cfg.steps);
        for (int i = 0; i < 4; ++i)
            if (state[i] == model.mask_id() && out.states[k][i] != model.mask_id())
                EXPECT_EQ(out.states[k][i], argmax_row(logits, i)) << "step " << s << " position " << i;
        auto forced = state;
        forced[0] = (argmax_row(logits, 0) + 1) % model.vocab.output_size();
        if (state[0] == model.mask_id() && state[1] == model.mask_id()) {
            // The same call's row 1 is what position 1 commits from; a value
            // forced at position 0 only matters to later calls.
            const auto later = model.denoise_logits(prompt, forced, static_cast<double>(s) / cfg.steps);
            EXPECT_NE(later(1, 0), logits(1, 0));
        }
        state = out.states[k];
    }
}
