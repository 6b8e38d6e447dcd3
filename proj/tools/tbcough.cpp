// Command-line front end: synth, extract, augment, train, cv, infer.

#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "tbcough/pipeline.hpp"

namespace {

std::string flag_names(const std::string& key) {
    std::string dashed = key;
    for (char& ch : dashed)
        if (ch == '_') ch = '-';
    return dashed == key ? "--" + key : "--" + dashed + ",--" + key;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cough-audio TB triage pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    app.add_option("-c,--config", config_path, "flat key = value config file");
    std::map<std::string, std::string> overrides;
    for (const auto& key : tbcough::config_keys()) {
        std::string help = key.help;
        if (*key.default_value) help += std::string(" [") + key.default_value + "]";
        app.add_option(flag_names(key.name), overrides[key.name], help);
    }

    using Command = int (*)(const tbcough::Config&, std::ostream&, tbcough::Log&);
    const std::vector<std::tuple<const char*, const char*, Command>> verbs = {
        {"synth", "generate a synthetic corpus", tbcough::cmd_synth},
        {"extract", "compute and cache features for every gated clip", tbcough::cmd_extract},
        {"augment", "plan and cache augmented copies of the training split", tbcough::cmd_augment},
        {"train", "fit a model on the training split and score the holdout", tbcough::cmd_train},
        {"cv", "grouped stratified k-fold cross-validation", tbcough::cmd_cv},
        {"infer", "score one WAV file with a saved model", tbcough::cmd_infer},
    };
    std::map<CLI::App*, Command> handlers;
    for (const auto& [name, help, fn] : verbs) handlers[app.add_subcommand(name, help)] = fn;

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    tbcough::Log log(std::cerr);
    try {
        tbcough::Config cfg = config_path.empty() ? tbcough::Config() : tbcough::Config::from_file(config_path);
        for (const auto& key : tbcough::config_keys())
            if (app.count(flag_names(key.name).substr(0, flag_names(key.name).find(','))) > 0)
                cfg.set(key.name, overrides[key.name]);
        // Every verb takes an explicit seed, even those that draw nothing, so
        // a config file always records how its artifacts were produced.
        cfg.seed();
        for (auto* sub : app.get_subcommands())
            if (auto it = handlers.find(sub); it != handlers.end()) return it->second(cfg, std::cout, log);
        return 2;
    } catch (const tbcough::UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const tbcough::Error& e) {
        std::cerr << "error (" << tbcough::to_string(e.code()) << "): " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
