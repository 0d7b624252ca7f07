// eegtext: synthetic EEG-to-text pipeline driver.
//
//   eegtext <subcommand> [--config cfg.json] [--seed N] [--out DIR]
//                      [--mode word|sentence] [--set key=value ...]
//
// Exit codes: 0 success, 2 config error, 3 missing or unusable artifact,
// 4 numeric failure, 1 anything else.

#include "eegtext/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <string>
#include <vector>

using namespace eegtext;

int main(int argc, char** argv) {
    CLI::App app{"Synthetic EEG-to-text pipeline: RVQ tokenizer, masked diffusion LM, AR baseline, metrics"};
    app.require_subcommand(1, 1);

    std::string config_path, out, mode;
    long long seed = -1;
    std::vector<std::string> overrides;
    bool quiet = false, print_config = false;

    for (const auto& stage : pipeline::Run::stages()) {
        auto* sub = app.add_subcommand(stage, "run the " + stage + " stage");
        sub->add_option("--config", config_path, "JSON config file (defaults are used for missing keys)");
        sub->add_option("--seed", seed, "global seed")->check(CLI::NonNegativeNumber);
        sub->add_option("--out", out, "artifact directory");
        sub->add_option("--mode", mode, "feature mode")->check(CLI::IsMember({"word", "sentence"}));
        sub->add_option("--set", overrides, "override a config key, e.g. --set mdlm.sft.epochs=10")
            ->type_name("KEY=VALUE");
        sub->add_flag("--quiet", quiet, "suppress progress and summary output");
        sub->add_flag("--print-config", print_config, "print the effective config and exit");
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : pipeline::exit_config;
    }
    const std::string stage = app.get_subcommands().front()->get_name();

    try {
        if (seed >= 0) overrides.push_back("seed=" + std::to_string(seed));
        if (!out.empty()) overrides.push_back("out=\"" + out + "\"");
        if (!mode.empty()) overrides.push_back("mode=\"" + mode + "\"");
        auto cfg = pipeline::load_config(config_path, overrides);
        if (print_config) {
            std::printf("%s\n", cfg.dump(2).c_str());
            return pipeline::exit_ok;
        }
        pipeline::Run run(std::move(cfg));
        run.quiet = quiet;
        run.dispatch(stage);
        return pipeline::exit_ok;
    } catch (const pipeline::ConfigError& e) {
        std::fprintf(stderr, "eegtext %s: config error: %s\n", stage.c_str(), e.what());
        return pipeline::exit_config;
    } catch (const pipeline::MissingArtifact& e) {
        std::fprintf(stderr, "eegtext %s: %s\n", stage.c_str(), e.what());
        return pipeline::exit_missing;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "eegtext %s: unusable artifact: %s (re-run the stage that produced it)\n", stage.c_str(),
                     e.what());
        return pipeline::exit_missing;
    } catch (const rvq::NumericError& e) {
        std::fprintf(stderr, "eegtext %s: numeric failure: %s (try a lower learning rate)\n", stage.c_str(), e.what());
        return pipeline::exit_numeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "eegtext %s: error: %s\n", stage.c_str(), e.what());
        return pipeline::exit_failure;
    }
}
