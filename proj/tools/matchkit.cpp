// matchkit command line tool.

#include "matchkit/pipeline.hpp"
#include "matchkit/synthetic.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace matchkit;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format = "text";
};

void add_common(CLI::App* app, Common& c, bool config_required) {
    auto* opt = app->add_option("--config", c.config, "Configuration file (JSON)");
    if (config_required) opt->required();
    app->add_option("--seed", c.seed, "Random seed (overrides the config)");
    app->add_option("--out", c.out, "Output directory (overrides the config)");
    app->add_option("--format", c.format, "Format of tabular output on stdout")->check(CLI::IsMember({"json", "text"}));
}

void print_section(const PipelineRun& run, const std::string& format, const std::vector<std::string>& keys,
                   const std::vector<std::string>& prefixes) {
    if (format == "json") {
        nlohmann::ordered_json j;
        for (const auto& k : keys)
            if (run.report.contains(k)) j[k] = run.report.at(k);
        std::cout << j.dump(2) << '\n';
        return;
    }
    for (const auto& [path, text] : run.tables)
        for (const auto& p : prefixes)
            if (path.rfind(p, 0) == 0) {
                std::cout << "== " << path << '\n' << text << '\n';
                break;
            }
}

int run_stage(const Common& c, Stage last, const std::vector<std::string>& keys,
              const std::vector<std::string>& prefixes) {
    StudyConfig config = StudyConfig::load(c.config);
    if (c.seed) config.seed = *c.seed;
    if (!c.out.empty()) config.output_dir = c.out;
    const PipelineRun run = run_pipeline(config, last);
    if (run.exit_code != 0) {
        std::cerr << "matchkit: stage '" << run.failed_stage << "' failed: " << run.error << '\n'
                  << "matchkit: partial artifacts in " << run.output_dir.string() << '\n';
        return run.exit_code;
    }
    print_section(run, c.format, keys, prefixes);
    return 0;
}

int synth(const Common& c, const std::string& preset) {
    nlohmann::json j = nlohmann::json::object();
    if (!c.config.empty()) {
        std::ifstream in(c.config);
        if (!in) throw ConfigError("cannot open synthetic spec: " + c.config);
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("synthetic spec " + c.config + ": " + e.what());
        }
    }
    if (!preset.empty()) j["preset"] = preset;
    const SyntheticSpec spec = synthetic_spec_from_json(j);
    const std::uint64_t seed = c.seed.value_or(j.value("seed", std::uint64_t{1}));
    const std::filesystem::path dir = c.out.empty() ? std::filesystem::path("synthetic") : std::filesystem::path(c.out);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string());

    std::ofstream csv(dir / "cohort.csv", std::ios::binary);
    if (!csv) throw IoError("cannot write " + (dir / "cohort.csv").string());
    generate_synthetic(spec, seed, csv);
    std::ofstream schema(dir / "schema.json", std::ios::binary);
    schema << spec.schema().to_json().dump(2) << '\n';

    auto study = config_template();
    study["input"]["cohort"] = "cohort.csv";
    study["input"]["schema"] = "schema.json";
    auto secondary = nlohmann::ordered_json::array();
    for (const auto& s : study["secondary"]) {
        const bool present = std::any_of(spec.outcomes.begin(), spec.outcomes.end(), [&](const SyntheticOutcome& o) {
            return o.tag == s["tag"].get<std::string>() && o.wave == s["wave"].get<std::string>();
        });
        if (present) secondary.push_back(s);
    }
    study["secondary"] = secondary;
    study["seed"] = seed;
    study["output_dir"] = "run";
    std::ofstream cfg(dir / "study.json", std::ios::binary);
    cfg << study.dump(2) << '\n';
    if (!csv || !schema || !cfg) throw IoError("write failed in " + dir.string());
    std::cout << "wrote " << (dir / "cohort.csv").string() << ", schema.json and study.json\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Matched observational study analysis"};
    app.require_subcommand(0, 1);
    bool print_template = false;
    app.add_flag("--print-config-template", print_template, "Print a study configuration template and exit");

    Common run_c, match_c, balance_c, test_c, sens_c, synth_c;
    std::string preset;
    auto* run = app.add_subcommand("run", "Run the complete analysis");
    add_common(run, run_c, true);
    auto* match = app.add_subcommand("match", "Eligibility, attrition and Matches 1-4");
    add_common(match, match_c, true);
    auto* balance = app.add_subcommand("balance", "Matching plus balance tables and Love plots");
    add_common(balance, balance_c, true);
    auto* test = app.add_subcommand("test", "Matching plus primary, secondary and dose tests");
    add_common(test, test_c, true);
    auto* sens = app.add_subcommand("sensitivity", "Tests plus sensitivity analysis");
    add_common(sens, sens_c, true);
    auto* syn = app.add_subcommand("synth", "Generate a synthetic cohort");
    add_common(syn, synth_c, false);
    syn->add_option("--preset", preset, "Synthetic preset")->check(CLI::IsMember({"default", "wls_shape"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (print_template) {
            std::cout << config_template().dump(2) << '\n';
            return 0;
        }
        if (*run)
            return run_stage(run_c, Stage::sensitivity, {"primary", "secondary", "dose", "sensitivity"},
                             {"tables/results.txt", "tables/sensitivity.tsv"});
        if (*match)
            return run_stage(match_c, Stage::matching, {"eligibility", "attrition", "matches"},
                             {"tables/eligibility.txt", "tables/composition_"});
        if (*balance) return run_stage(balance_c, Stage::balance, {"balance"}, {"tables/balance_"});
        if (*test)
            return run_stage(test_c, Stage::dose, {"primary", "secondary", "dose"}, {"tables/results.txt"});
        if (*sens) return run_stage(sens_c, Stage::sensitivity, {"sensitivity"}, {"tables/sensitivity.tsv"});
        if (*syn) return synth(synth_c, preset);
        std::cout << app.help();
        return 0;
    } catch (const Error& e) {
        std::cerr << "matchkit: " << e.what() << '\n';
        return e.exit_code();
    }
}
