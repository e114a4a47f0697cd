#pragma once

// End-to-end analysis: load, eligibility, attrition, Matches 1-4, balance,
// primary ordered tests, secondary tests, dose analysis and sensitivity.
// Every artifact lands in one output directory together with a manifest of
// SHA-256 hashes. A failing stage leaves the artifacts written so far and a
// manifest marking the run incomplete.

#include "matchkit/balance.hpp"
#include "matchkit/cohort.hpp"
#include "matchkit/distance.hpp"
#include "matchkit/error.hpp"
#include "matchkit/fullmatch.hpp"
#include "matchkit/inference.hpp"
#include "matchkit/multiplicity.hpp"
#include "matchkit/sensitivity.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace matchkit {

inline constexpr const char* kVersion = "1.0.0";

struct SecondaryOutcomeSpec {
    std::string tag;
    std::string wave;
    bool binary = false;
    Direction direction = Direction::greater;
};

struct StudyConfig {
    std::string cohort_path;
    std::optional<std::string> schema_path;
    std::optional<CohortSchema> schema;  // inline schema, takes precedence
    char delimiter = ',';
    std::string wave = "2004";
    std::array<MatchConstraints, 4> matches{MatchConstraints{6, 1, false}, MatchConstraints{6, 3, false},
                                            MatchConstraints{6, 3, false}, MatchConstraints{6, 6, false}};
    CaliperSpec caliper;
    double alpha_primary = 0.05;
    double primary_ci_level = 0.975;
    double secondary_q = 0.05;
    double secondary_ci_level = 0.95;
    double attrition_flag_level = 0.05;
    std::optional<double> equivalence_margin;  // unset: smaller stage-2 estimate magnitude
    GammaSpec gamma;
    double sensitivity_level = 0.025;
    Direction cognitive_direction = Direction::less;
    Direction depression_direction = Direction::greater;
    std::vector<SecondaryOutcomeSpec> secondary;
    bool dose_analysis = true;
    std::uint64_t seed = 20240601;
    std::string output_dir = "matchkit-out";

    void validate() const {
        const auto unit = [](double v, const char* what) {
            if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(what) + " must lie in (0, 1)");
        };
        unit(alpha_primary, "alpha.primary_family");
        unit(primary_ci_level, "alpha.primary_ci_level");
        unit(secondary_q, "alpha.secondary_q");
        unit(secondary_ci_level, "alpha.secondary_ci_level");
        unit(attrition_flag_level, "alpha.attrition_flag_level");
        unit(sensitivity_level, "sensitivity.level");
        if (cohort_path.empty()) throw ConfigError("input.cohort is required");
        if (!schema && !schema_path) throw ConfigError("input.schema is required");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        for (const auto& m : matches) m.validate();
        caliper.validate();
        gamma.validate();
        if (equivalence_margin && !(*equivalence_margin > 0.0))
            throw ConfigError("equivalence_margin must be positive or \"auto\"");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        nlohmann::ordered_json input;
        input["cohort"] = cohort_path;
        if (schema) input["schema"] = schema->to_json();
        else input["schema"] = *schema_path;
        input["delimiter"] = std::string(1, delimiter);
        j["input"] = input;
        j["wave"] = wave;
        auto ms = nlohmann::ordered_json::array();
        for (const auto& m : matches)
            ms.push_back({{"max_controls_per_treated", m.max_controls_per_treated},
                          {"max_treated_per_control", m.max_treated_per_control},
                          {"trim", m.trim}});
        j["matches"] = ms;
        j["caliper"] = {{"width_in_sd", caliper.width_in_sd},
                        {"penalty_multiplier", caliper.penalty_multiplier},
                        {"penalty_per_sd", caliper.penalty_per_sd ? nlohmann::ordered_json(*caliper.penalty_per_sd)
                                                                  : nlohmann::ordered_json(nullptr)}};
        j["alpha"] = {{"primary_family", alpha_primary},
                      {"primary_ci_level", primary_ci_level},
                      {"secondary_q", secondary_q},
                      {"secondary_ci_level", secondary_ci_level},
                      {"attrition_flag_level", attrition_flag_level}};
        j["equivalence_margin"] = equivalence_margin ? nlohmann::ordered_json(*equivalence_margin)
                                                     : nlohmann::ordered_json("auto");
        j["sensitivity"] = {{"grid", gamma.grid},
                            {"level", sensitivity_level},
                            {"directions",
                             {{"cognitive", to_string(cognitive_direction)},
                              {"depression", to_string(depression_direction)}}}};
        auto sec = nlohmann::ordered_json::array();
        for (const auto& s : secondary)
            sec.push_back({{"tag", s.tag},
                           {"wave", s.wave},
                           {"type", s.binary ? "binary" : "continuous"},
                           {"direction", to_string(s.direction)}});
        j["secondary"] = sec;
        j["dose_analysis"] = dose_analysis;
        j["seed"] = seed;
        j["output_dir"] = output_dir;
        return j;
    }

    // Relative paths resolve against `base_dir`.
    static StudyConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
        StudyConfig c;
        const auto resolve = [&](const std::string& p) {
            const std::filesystem::path path(p);
            return (path.is_absolute() || base_dir.empty() ? path : base_dir / path).lexically_normal().string();
        };
        try {
            const auto& input = j.at("input");
            c.cohort_path = resolve(input.at("cohort").get<std::string>());
            const auto& sch = input.at("schema");
            if (sch.is_string()) c.schema_path = resolve(sch.get<std::string>());
            else c.schema = CohortSchema::from_json(sch);
            const std::string delim = input.value("delimiter", std::string(","));
            if (delim.size() != 1) throw ConfigError("input.delimiter must be a single character");
            c.delimiter = delim[0];
            c.wave = j.value("wave", c.wave);
            if (j.contains("matches")) {
                const auto& ms = j.at("matches");
                if (!ms.is_array() || ms.size() != 4) throw ConfigError("matches must list exactly four constraint sets");
                for (std::size_t k = 0; k < 4; ++k) {
                    c.matches[k].max_controls_per_treated =
                        ms[k].value("max_controls_per_treated", c.matches[k].max_controls_per_treated);
                    c.matches[k].max_treated_per_control =
                        ms[k].value("max_treated_per_control", c.matches[k].max_treated_per_control);
                    c.matches[k].trim = ms[k].value("trim", false);
                }
            }
            if (j.contains("caliper")) {
                const auto& cal = j.at("caliper");
                c.caliper.width_in_sd = cal.value("width_in_sd", c.caliper.width_in_sd);
                c.caliper.penalty_multiplier = cal.value("penalty_multiplier", c.caliper.penalty_multiplier);
                if (cal.contains("penalty_per_sd") && !cal.at("penalty_per_sd").is_null())
                    c.caliper.penalty_per_sd = cal.at("penalty_per_sd").get<double>();
            }
            if (j.contains("alpha")) {
                const auto& a = j.at("alpha");
                c.alpha_primary = a.value("primary_family", c.alpha_primary);
                c.primary_ci_level = a.value("primary_ci_level", c.primary_ci_level);
                c.secondary_q = a.value("secondary_q", c.secondary_q);
                c.secondary_ci_level = a.value("secondary_ci_level", c.secondary_ci_level);
                c.attrition_flag_level = a.value("attrition_flag_level", c.attrition_flag_level);
            }
            if (j.contains("equivalence_margin")) {
                const auto& m = j.at("equivalence_margin");
                if (m.is_number()) c.equivalence_margin = m.get<double>();
                else if (!(m.is_string() && m.get<std::string>() == "auto"))
                    throw ConfigError("equivalence_margin must be a number or \"auto\"");
            }
            if (j.contains("sensitivity")) {
                const auto& s = j.at("sensitivity");
                if (s.contains("grid")) c.gamma.grid = s.at("grid").get<std::vector<double>>();
                c.sensitivity_level = s.value("level", c.sensitivity_level);
                if (s.contains("directions")) {
                    const auto& d = s.at("directions");
                    if (d.contains("cognitive")) c.cognitive_direction = parse_direction(d.at("cognitive").get<std::string>());
                    if (d.contains("depression"))
                        c.depression_direction = parse_direction(d.at("depression").get<std::string>());
                }
            }
            if (j.contains("secondary"))
                for (const auto& s : j.at("secondary")) {
                    SecondaryOutcomeSpec so;
                    so.tag = s.at("tag").get<std::string>();
                    so.wave = s.at("wave").get<std::string>();
                    const std::string type = s.value("type", std::string("continuous"));
                    if (type != "continuous" && type != "binary")
                        throw ConfigError("secondary outcome type must be continuous or binary: " + type);
                    so.binary = type == "binary";
                    so.direction = parse_direction(s.value("direction", std::string("greater")));
                    c.secondary.push_back(so);
                }
            c.dose_analysis = j.value("dose_analysis", c.dose_analysis);
            c.seed = j.value("seed", c.seed);
            c.output_dir = j.contains("output_dir") ? resolve(j.at("output_dir").get<std::string>()) : c.output_dir;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
        c.validate();
        return c;
    }

    static StudyConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config " + path + ": " + e.what());
        }
        return from_json(j, std::filesystem::path(path).parent_path());
    }

    CohortSchema resolved_schema() const { return schema ? *schema : CohortSchema::load(*schema_path); }
};

inline nlohmann::ordered_json config_template() {
    StudyConfig c;
    c.cohort_path = "cohort.csv";
    c.schema_path = "schema.json";
    c.secondary = {{"HOST", "2004", false, Direction::greater}, {"ANX", "2004", false, Direction::greater},
                   {"ANGER", "2004", false, Direction::greater}, {"SEI", "2004", false, Direction::less},
                   {"MILITARY", "1975", true, Direction::greater}, {"POSTSEC", "1975", true, Direction::less}};
    return c.to_json();
}

enum class Stage { load, eligibility, attrition, matching, balance, primary, secondary, dose, sensitivity };

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::load: return "load";
    case Stage::eligibility: return "eligibility";
    case Stage::attrition: return "attrition";
    case Stage::matching: return "matching";
    case Stage::balance: return "balance";
    case Stage::primary: return "primary";
    case Stage::secondary: return "secondary";
    case Stage::dose: return "dose";
    case Stage::sensitivity: return "sensitivity";
    }
    return "unknown";
}

inline std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

// Writes files below one root and remembers their hashes.
class ArtifactWriter {
public:
    explicit ArtifactWriter(std::filesystem::path root) : root_(std::move(root)) {
        std::error_code ec;
        std::filesystem::create_directories(root_, ec);
        if (ec) throw IoError("cannot create output directory " + root_.string() + ": " + ec.message());
    }

    void write(const std::string& relative, const std::string& content) {
        const auto path = root_ / relative;
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << content;
        if (!out) throw IoError("write failed: " + path.string());
        files_[relative] = {sha256_hex(content), content.size()};
    }

    void write_json(const std::string& relative, const nlohmann::ordered_json& j) { write(relative, j.dump(2) + "\n"); }

    nlohmann::ordered_json manifest(bool complete, const std::string& failed_stage, const std::string& error) const {
        nlohmann::ordered_json j;
        j["tool"] = "matchkit";
        j["version"] = kVersion;
        j["complete"] = complete;
        j["failed_stage"] = failed_stage.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(failed_stage);
        j["error"] = error.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(error);
        auto files = nlohmann::ordered_json::array();
        for (const auto& [name, info] : files_) files.push_back({{"path", name}, {"sha256", info.first}, {"bytes", info.second}});
        j["files"] = files;
        return j;
    }

    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
    std::map<std::string, std::pair<std::string, std::size_t>> files_;
};

struct PipelineRun {
    int exit_code = 0;
    bool complete = false;
    std::string failed_stage;
    std::string error;
    std::filesystem::path output_dir;
    nlohmann::ordered_json report;
    // Text renderings of the main tables, keyed by artifact path.
    std::map<std::string, std::string> tables;
};

namespace detail {

inline const std::array<ArmContrast, 4>& match_contrasts() {
    static const std::array<ArmContrast, 4> c{
        ArmContrast{"match1", {Arm::football}, {Arm::nonsport, Arm::othersport}},
        ArmContrast{"match2", {Arm::football}, {Arm::nonsport}},
        ArmContrast{"match3", {Arm::football}, {Arm::othersport}},
        ArmContrast{"match4", {Arm::nonsport}, {Arm::othersport}}};
    return c;
}

inline nlohmann::ordered_json arms_json(const std::vector<Arm>& arms) {
    auto a = nlohmann::ordered_json::array();
    for (Arm x : arms) a.push_back(to_string(x));
    return a;
}

// Matched sets restricted to members with a value; sets losing a side drop.
inline std::vector<Matching> restrict_to(const std::vector<Matching>& all,
                                         const std::function<bool(const std::string&)>& has_value) {
    std::vector<Matching> out;
    for (const auto& m : all) {
        Matching r;
        r.pattern = m.pattern;
        for (const auto& s : m.sets) {
            MatchedSet k;
            for (const auto& id : s.treated_ids)
                if (has_value(id)) k.treated_ids.push_back(id);
            for (const auto& id : s.control_ids)
                if (has_value(id)) k.control_ids.push_back(id);
            if (!k.treated_ids.empty() && !k.control_ids.empty()) r.sets.push_back(std::move(k));
        }
        if (!r.sets.empty()) out.push_back(std::move(r));
    }
    return out;
}

inline nlohmann::ordered_json attrition_json(const AttritionResult& a) {
    return {{"component", a.component},
            {"n", a.n},
            {"n_available", a.n_available},
            {"football_coefficient", a.football_coefficient},
            {"football_std_error", a.football_std_error},
            {"football_p_value", a.football_p_value},
            {"flagged", a.flagged},
            {"warnings", a.warnings}};
}

inline nlohmann::ordered_json balance_json(const std::vector<BalanceRow>& rows) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : rows)
        arr.push_back({{"covariate", r.name},
                       {"std_diff_before", r.before},
                       {"std_diff_after", r.after ? nlohmann::ordered_json(*r.after) : nlohmann::ordered_json(nullptr)},
                       {"degenerate", r.degenerate}});
    return arr;
}

inline std::string render_attrition_table(const std::vector<AttritionResult>& rows) {
    std::ostringstream os;
    os << "component\tn\tn_available\tfootball_coef\tstd_error\tp_value\tflag\n";
    for (const auto& a : rows)
        os << a.component << '\t' << a.n << '\t' << a.n_available << '\t' << format_fixed(a.football_coefficient, 4)
           << '\t' << format_fixed(a.football_std_error, 4) << '\t' << format_fixed(a.football_p_value, 4) << '\t'
           << (a.flagged ? "flagged" : "") << '\n';
    return os.str();
}

inline std::string render_strata_table(const std::vector<SubjectRecord>& eligible, const std::string& wave) {
    std::map<std::uint8_t, std::array<std::size_t, 3>> counts;
    for (const auto& r : eligible) counts[availability_of(r, wave).mask][static_cast<std::size_t>(arm_of(r))] += 1;
    std::ostringstream os;
    os << "pattern\tfootball\tnonsport\tothersport\n";
    for (const auto& p : kPatternOrder) {
        const auto it = counts.find(p.mask);
        const auto c = it == counts.end() ? std::array<std::size_t, 3>{} : it->second;
        os << p.label() << '\t' << c[0] << '\t' << c[1] << '\t' << c[2] << '\n';
    }
    return os.str();
}

} // namespace detail

struct PrimaryFits {
    std::array<std::vector<Matching>, 4> matchings;  // restricted to strata carrying the outcome
    std::array<TestResult, 4> fits;
};

struct PrimaryFamily {
    std::array<PrimaryFits, 2> outcomes;  // cognitive, depression
    std::array<double, 2> levels{};
    std::vector<OrderedTestReport> reports;
};

// Both primary outcomes: matched adjusted tests on all four matches, Holm
// levels from the two stage-1 p-values, then the ordered procedure per
// outcome. Without a margin, the equivalence margin is the smaller stage-2
// effect in absolute value.
inline PrimaryFamily primary_family(const PrimaryOutcomes& primary, const std::array<StratifiedMatch, 4>& matches,
                                    const CovariateMatrix& cov, double alpha, double ci_level,
                                    const std::optional<double>& equivalence_margin) {
    static const std::array<const char*, 4> comparison{"football vs all controls", "football vs non-sport",
                                                       "football vs other-sport", "non-sport vs other-sport"};
    const std::array<const CompositeOutcome*, 2> outcomes{&primary.cognitive, &primary.depression};
    PrimaryFamily fam;
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t k = 0; k < 4; ++k) {
            auto& pf = fam.outcomes[o];
            pf.matchings[k] = matchings_for(matches[k].matchings, *outcomes[o]);
            pf.fits[k] = matched_adjusted_test(*outcomes[o], pf.matchings[k], cov, ci_level,
                                               outcomes[o]->label + ": " + comparison[k]);
        }
    const auto levels = holm_levels({fam.outcomes[0].fits[0].p_value, fam.outcomes[1].fits[0].p_value}, alpha);
    for (std::size_t o = 0; o < 2; ++o) {
        fam.levels[o] = levels[o];
        const auto& f = fam.outcomes[o].fits;
        const double margin =
            equivalence_margin ? *equivalence_margin : std::min(std::fabs(f[1].estimate), std::fabs(f[2].estimate));
        TestResult s3;
        if (margin > 0.0) {
            s3 = equivalence_test(f[3], margin);
        } else {
            s3 = f[3];
            s3.method = "two one-sided tests (equivalence within +/-margin)";
            s3.p_value = 1.0;
            s3.warnings.push_back("equivalence margin is zero; equivalence cannot be concluded");
        }
        auto rep = ordered_procedure(outcomes[o]->label, f[0], f[1], f[2], s3, levels[o]);
        rep.equivalence_margin = margin;
        fam.reports.push_back(std::move(rep));
    }
    return fam;
}

// Runs the stages up to and including `last`. Stage failures are reported
// through the returned exit code, never thrown; only an unusable output
// directory throws.
inline PipelineRun run_pipeline(const StudyConfig& config, Stage last = Stage::sensitivity) {
    PipelineRun run;
    run.output_dir = config.output_dir;
    ArtifactWriter out(config.output_dir);
    nlohmann::ordered_json& report = run.report;
    report["tool"] = "matchkit";
    report["version"] = kVersion;
    report["config"] = config.to_json();
    report["metadata"] = {
        {"balance_weighting", kBalanceWeighting},
        {"propensity_population", "one logistic model per match over its treated and control arms, "
                                  "subjects in the \"None\" availability stratum excluded"},
        {"caliper", {{"width_in_sd", config.caliper.width_in_sd}, {"enforcement", "soft penalty on logit distance"}}},
        {"outcome_scale", "z-scores over eligible subjects with a value; cognitive = mean of available LF and DWR"},
        {"cesd_direction", "higher values mean more depressive symptoms; no sign flip"},
        {"dose_reading", "years of football enter as a regressor in place of the treatment indicator"},
        {"equivalence_level", "stage-3 equivalence is tested at the outcome's Holm-assigned level"},
        {"mh_exposure_rows", "exposed = treated side of each matched set"}};
    auto warnings = nlohmann::ordered_json::array();

    Stage current = Stage::load;
    const auto reached = [&](Stage s) {
        current = s;
        return static_cast<int>(s) <= static_cast<int>(last);
    };
    const auto finish = [&](bool complete) {
        run.complete = complete;
        report["warnings"] = warnings;
        report["complete"] = complete;
        if (!complete) {
            report["failed_stage"] = run.failed_stage;
            report["error"] = run.error;
        }
        out.write_json("report.json", report);
        out.write_json("manifest.json", out.manifest(complete, run.failed_stage, run.error));
    };

    try {
        // Load.
        current = Stage::load;
        config.validate();
        const CohortSchema schema = config.resolved_schema();
        for (const auto& tag : {kLF, kDWR, kCESD}) {
            const bool found = std::any_of(schema.outcomes.begin(), schema.outcomes.end(),
                                           [&](const OutcomeColumn& o) { return o.tag == tag && o.wave == config.wave; });
            if (!found) throw ConfigError("schema has no column for outcome " + tag + " at wave " + config.wave);
        }
        for (const auto& s : config.secondary) {
            const bool found = std::any_of(schema.outcomes.begin(), schema.outcomes.end(),
                                           [&](const OutcomeColumn& o) { return o.tag == s.tag && o.wave == s.wave; });
            if (!found) throw ConfigError("schema has no column for secondary outcome " + s.tag + " at wave " + s.wave);
        }
        const auto records = load_cohort(config.cohort_path, schema, config.delimiter);

        // Eligibility.
        if (!reached(Stage::eligibility)) {
            finish(true);
            return run;
        }
        auto [eligible, elig] = filter_eligibility(records);
        report["eligibility"] = {{"total", elig.total},
                                 {"dropped_missing_yearbook", elig.dropped_missing_yearbook},
                                 {"dropped_complex_school", elig.dropped_complex_school},
                                 {"dropped_female", elig.dropped_female},
                                 {"males_remaining", elig.males_remaining},
                                 {"dropped_risky_sport", elig.dropped_risky_sport},
                                 {"eligible", elig.eligible},
                                 {"n_football", elig.n_football},
                                 {"n_nonsport", elig.n_nonsport},
                                 {"n_othersport", elig.n_othersport}};
        run.tables["tables/eligibility.txt"] = render_eligibility_text(elig);
        out.write("tables/eligibility.txt", run.tables["tables/eligibility.txt"]);
        if (eligible.empty()) throw DataError("no eligible subjects");
        out.write("tables/strata.tsv", detail::render_strata_table(eligible, config.wave));
        const CovariateMatrix cov = prepare_covariates(eligible, schema.covariates);

        // Attrition, one model per component; failures are recorded.
        if (!reached(Stage::attrition)) {
            finish(true);
            return run;
        }
        {
            std::vector<AttritionResult> rows;
            auto arr = nlohmann::ordered_json::array();
            for (const auto& tag : {kLF, kDWR, kCESD}) {
                try {
                    rows.push_back(attrition_component(eligible, cov, config.wave, tag, config.attrition_flag_level));
                    arr.push_back(detail::attrition_json(rows.back()));
                } catch (const Error& e) {
                    arr.push_back({{"component", tag}, {"error", e.what()}});
                    warnings.push_back("attrition model for " + tag + " failed: " + e.what());
                }
            }
            report["attrition"] = arr;
            run.tables["tables/attrition.tsv"] = detail::render_attrition_table(rows);
            out.write("tables/attrition.tsv", run.tables["tables/attrition.tsv"]);
        }

        // Matches 1-4.
        if (!reached(Stage::matching)) {
            finish(true);
            return run;
        }
        std::array<StratifiedMatch, 4> matches;
        {
            auto arr = nlohmann::ordered_json::array();
            for (std::size_t k = 0; k < 4; ++k) {
                const auto& contrast = detail::match_contrasts()[k];
                matches[k] = stratified_full_match(eligible, cov, config.wave, contrast, config.matches[k], config.caliper);
                const auto& m = matches[k];
                double total = 0.0;
                std::size_t unmatched = 0;
                auto mj = nlohmann::ordered_json::array();
                for (const auto& s : m.matchings) {
                    total += s.total_distance;
                    unmatched += s.unmatched.size();
                    mj.push_back(to_json(s));
                }
                auto skipped = nlohmann::ordered_json::array();
                for (const auto& s : m.skipped)
                    skipped.push_back({{"pattern", s.pattern.label()},
                                       {"n_treated", s.n_treated},
                                       {"n_control", s.n_control},
                                       {"reason", s.reason}});
                const std::string file = "matchings/" + contrast.name + ".json";
                out.write_json(file, {{"match", contrast.name},
                                      {"treated_arms", detail::arms_json(contrast.treated)},
                                      {"control_arms", detail::arms_json(contrast.control)},
                                      {"strata", mj}});
                const auto comp = composition_table(m.matchings);
                const std::string comp_file = "tables/composition_" + contrast.name + ".tsv";
                run.tables[comp_file] = comp.render('\t');
                out.write(comp_file, run.tables[comp_file]);
                arr.push_back({{"name", contrast.name},
                               {"treated_arms", detail::arms_json(contrast.treated)},
                               {"control_arms", detail::arms_json(contrast.control)},
                               {"max_controls_per_treated", m.constraints.max_controls_per_treated},
                               {"max_treated_per_control", m.constraints.max_treated_per_control},
                               {"trim", m.constraints.trim},
                               {"n_sets", m.n_sets()},
                               {"n_unmatched", unmatched},
                               {"total_distance", total},
                               {"propensity_logit_sd", m.propensity.logit_sd},
                               {"skipped_strata", skipped},
                               {"file", file}});
            }
            report["matches"] = arr;
        }

        // Balance and Love plots.
        if (!reached(Stage::balance)) {
            finish(true);
            return run;
        }
        {
            nlohmann::ordered_json bal;
            for (std::size_t k = 0; k < 4; ++k) {
                const auto& name = detail::match_contrasts()[k].name;
                const auto rows = standardized_differences(cov, matches[k]);
                bal[name] = detail::balance_json(rows);
                const std::string file = "tables/balance_" + name + ".tsv";
                run.tables[file] = render_balance_table(rows);
                out.write(file, run.tables[file]);
                out.write("plots/love_" + name + ".svg", render_love_plot(rows, "Covariate balance, " + name));
            }
            report["balance"] = bal;
        }

        // Primary ordered tests.
        if (!reached(Stage::primary)) {
            finish(true);
            return run;
        }
        const PrimaryOutcomes primary = build_primary_outcomes(eligible, config.wave);
        const std::array<const CompositeOutcome*, 2> outcomes{&primary.cognitive, &primary.depression};
        const std::array<Direction, 2> directions{config.cognitive_direction, config.depression_direction};
        PrimaryFamily family = primary_family(primary, matches, cov, config.alpha_primary, config.primary_ci_level,
                                              config.equivalence_margin);
        const auto& fits = family.outcomes;
        const auto& levels = family.levels;
        const auto& reports = family.reports;
        {
            auto arr = nlohmann::ordered_json::array();
            for (const auto& rep : reports) arr.push_back(to_json(rep));
            report["primary"] = {{"family_alpha", config.alpha_primary},
                                 {"holm_levels", {{"cognitive", levels[0]}, {"depression", levels[1]}}},
                                 {"reports", arr}};
            run.tables["tables/primary_results.txt"] = render_results_table(reports);
            out.write("tables/primary_results.txt", run.tables["tables/primary_results.txt"]);
        }

        // Secondary outcomes on Match 1, Benjamini-Hochberg across them.
        if (!reached(Stage::secondary)) {
            finish(true);
            return run;
        }
        std::vector<SecondaryResult> secondary;
        struct SecondaryData {
            SecondaryOutcomeSpec spec;
            std::vector<Matching> matchings;
            CompositeOutcome continuous;
            std::unordered_map<std::string, bool> binary;
        };
        std::vector<SecondaryData> secondary_data;
        {
            auto failed = nlohmann::ordered_json::array();
            for (const auto& s : config.secondary) {
                const std::string label = s.tag + "_" + s.wave;
                try {
                    SecondaryData sd;
                    sd.spec = s;
                    TestResult res;
                    if (s.binary) {
                        for (const auto& r : eligible)
                            if (auto v = r.outcome(s.tag, s.wave)) {
                                if (*v != 0.0 && *v != 1.0)
                                    throw DataError("binary outcome " + label + " has non 0/1 value for " + r.id);
                                sd.binary.emplace(r.id, *v == 1.0);
                            }
                        sd.matchings = detail::restrict_to(matches[0].matchings,
                                                           [&](const std::string& id) { return sd.binary.count(id) > 0; });
                        res = mantel_haenszel_test(tables_from_matching(sd.matchings, sd.binary),
                                                   config.secondary_ci_level, label);
                    } else {
                        sd.continuous.label = label;
                        sd.continuous.components = {s.tag};
                        sd.continuous.values = z_scores(eligible, s.tag, s.wave);
                        sd.matchings = detail::restrict_to(
                            matches[0].matchings, [&](const std::string& id) { return sd.continuous.values.count(id) > 0; });
                        res = matched_adjusted_test(sd.continuous, sd.matchings, cov, config.secondary_ci_level, label);
                    }
                    secondary.push_back({res, false});
                    secondary_data.push_back(std::move(sd));
                } catch (const Error& e) {
                    failed.push_back({{"outcome", label}, {"error", e.what()}});
                    warnings.push_back("secondary outcome " + label + " failed: " + e.what());
                }
            }
            if (!secondary.empty()) apply_benjamini_hochberg(secondary, config.secondary_q);
            auto arr = nlohmann::ordered_json::array();
            for (const auto& s : secondary) {
                auto j = to_json(s.result);
                j["bh_reject"] = s.bh_reject;
                arr.push_back(j);
            }
            report["secondary"] = {{"q", config.secondary_q}, {"results", arr}, {"failed", failed}};
            run.tables["tables/results.txt"] = render_results_table(reports, secondary);
            out.write("tables/results.txt", run.tables["tables/results.txt"]);
        }

        // Dose analysis on Match 1.
        if (!reached(Stage::dose)) {
            finish(true);
            return run;
        }
        if (config.dose_analysis) {
            std::unordered_map<std::string, int> dose;
            for (const auto& r : eligible) dose.emplace(r.id, r.football_years);
            auto arr = nlohmann::ordered_json::array();
            for (std::size_t o = 0; o < 2; ++o)
                arr.push_back(to_json(dose_scaled_test(*outcomes[o], fits[o].matchings[0], cov, dose,
                                                       config.primary_ci_level,
                                                       outcomes[o]->label + ": years of football")));
            report["dose"] = arr;
        }

        // Sensitivity for every result significant at twice the one-sided level.
        if (!reached(Stage::sensitivity)) {
            finish(true);
            return run;
        }
        {
            const double marginal = 2.0 * config.sensitivity_level;
            std::vector<SensitivityResult> results;
            for (std::size_t o = 0; o < 2; ++o)
                for (std::size_t k = 0; k < 3; ++k) {
                    if (fits[o].fits[k].p_value > marginal) continue;
                    const auto sets = covariance_adjust(*outcomes[o], fits[o].matchings[k], cov);
                    results.push_back(m_test_sensitivity(sets, config.gamma, directions[o], config.sensitivity_level,
                                                         fits[o].fits[k].label));
                }
            for (std::size_t i = 0; i < secondary.size(); ++i) {
                if (secondary[i].result.p_value > marginal) continue;
                const auto& sd = secondary_data[i];
                if (sd.spec.binary)
                    results.push_back(mh_sensitivity(tables_from_matching(sd.matchings, sd.binary), config.gamma,
                                                     sd.spec.direction, config.sensitivity_level,
                                                     secondary[i].result.label));
                else
                    results.push_back(m_test_sensitivity(covariance_adjust(sd.continuous, sd.matchings, cov),
                                                         config.gamma, sd.spec.direction, config.sensitivity_level,
                                                         secondary[i].result.label));
            }
            auto arr = nlohmann::ordered_json::array();
            for (const auto& r : results) arr.push_back(to_json(r));
            report["sensitivity"] = {{"marginal_threshold", marginal}, {"results", arr}};
            run.tables["tables/sensitivity.tsv"] = render_sensitivity_table(results);
            out.write("tables/sensitivity.tsv", run.tables["tables/sensitivity.tsv"]);
        }
        finish(true);
    } catch (const Error& e) {
        run.exit_code = e.exit_code();
        run.failed_stage = to_string(current);
        run.error = e.what();
        finish(false);
    } catch (const std::exception& e) {
        run.exit_code = 1;
        run.failed_stage = to_string(current);
        run.error = e.what();
        finish(false);
    }
    return run;
}

} // namespace matchkit
