#pragma once

// Synthetic cohorts for validation. Covariates are standard normal latents
// with a per-arm mean shift (binary covariates threshold the latent), which
// is a logistic-type assignment model in disguise: the log odds of arm
// membership is linear in the latents. An optional binary unmeasured
// confounder has prevalence 1/2 among controls and gamma0 / (1 + gamma0)
// among football players, so within strata of the measured covariates the
// odds of football differ by gamma0 between u = 1 and u = 0.

#include "matchkit/cohort.hpp"
#include "matchkit/error.hpp"
#include "matchkit/glm.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace matchkit {

struct SyntheticCovariate {
    std::string name;
    bool binary = false;
    double threshold = 0.0;               // binary: value is 1 when latent > threshold
    std::array<double, 3> shift{};        // latent mean per arm (football, nonsport, othersport)
    double missing_rate = 0.0;
    double outcome_weight = 0.0;          // contribution to every outcome
};

struct SyntheticOutcome {
    std::string tag;
    std::string wave;
    bool binary = false;
    double intercept = 0.0;               // binary outcomes: baseline log odds
    double effect = 0.0;                  // per football player, or per year with dose effects
    double othersport_offset = 0.0;       // other-sport controls relative to non-sport
    bool secondary = false;               // available whenever any primary component is
};

struct SyntheticSpec {
    std::size_t n_football = 300;
    std::size_t n_nonsport = 400;
    std::size_t n_othersport = 200;
    // Subjects removed by the eligibility cascade.
    std::size_t n_missing_yearbook = 0;
    std::size_t n_complex_school = 0;
    std::size_t n_female = 0;
    std::size_t n_hockey = 0;
    std::size_t n_wrestling = 0;

    std::vector<SyntheticCovariate> covariates;
    double factor_loading = 0.3;          // shared latent factor, induces correlation
    std::vector<SyntheticOutcome> outcomes;
    double noise_sd = 1.0;
    bool dose_effect = false;             // effects scale with years played
    int max_years = 4;
    double gamma0 = 1.0;
    double u_loading = 0.0;

    // Probability of each availability pattern, in reporting order
    // (all, LF+DWR, LF+CESD, DWR+CESD, LF, DWR, CESD, none).
    std::array<double, 8> pattern_probs{1, 0, 0, 0, 0, 0, 0, 0};
    // Exact pattern counts per arm; overrides the probabilities when set.
    std::optional<std::array<std::array<std::size_t, 8>, 3>> pattern_counts;

    void validate() const {
        if (gamma0 < 1.0) throw ConfigError("synthetic spec: gamma0 must be at least 1");
        if (noise_sd < 0.0) throw ConfigError("synthetic spec: noise_sd must be nonnegative");
        if (max_years < 1 || max_years > 4) throw ConfigError("synthetic spec: max_years must lie in 1-4");
        double total = 0.0;
        for (double p : pattern_probs) {
            if (p < 0.0 || p > 1.0) throw ConfigError("synthetic spec: pattern probabilities must lie in [0, 1]");
            total += p;
        }
        if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("synthetic spec: pattern probabilities must sum to 1");
        for (const auto& c : covariates)
            if (c.missing_rate < 0.0 || c.missing_rate > 1.0)
                throw ConfigError("synthetic spec: missing rate of " + c.name + " must lie in [0, 1]");
        if (pattern_counts) {
            const std::array<std::size_t, 3> n{n_football, n_nonsport, n_othersport};
            for (std::size_t a = 0; a < 3; ++a) {
                std::size_t s = 0;
                for (auto c : (*pattern_counts)[a]) s += c;
                if (s != n[a]) throw ConfigError("synthetic spec: pattern counts do not match arm size");
            }
        }
    }

    CohortSchema schema() const {
        CohortSchema s;
        for (const auto& c : covariates) s.covariates.push_back(c.name);
        for (const auto& o : outcomes) s.outcomes.push_back({o.tag, o.wave, o.tag + "_" + o.wave});
        return s;
    }
};

// Baseline covariates of the study (school, family, ability and aspiration
// measures from 1957). Shifts are latent means for football players
// relative to controls, scaled so the largest magnitude is `max_shift`.
inline std::vector<SyntheticCovariate> study_covariates(double max_shift = 0.3) {
    struct Row {
        const char* name;
        bool binary;
        double shift;
        double weight;
    };
    // Football players come from smaller schools and are more often in
    // student government.
    static const Row rows[] = {
        {"tchncntq", false, 0.15, 0.05}, {"parcntq", false, 0.10, 0.05},  {"tcheneq", false, 0.20, 0.05},
        {"parencq", false, 0.10, 0.05},  {"sposcasp3", false, 0.05, 0.0}, {"sesp57", false, 0.05, 0.10},
        {"hssize", false, -1.00, 0.0},   {"tchevl", false, 0.10, 0.05},   {"parsup", false, 0.05, 0.0},
        {"bmpin1", false, 0.00, 0.10},   {"musperf", true, -0.20, 0.0},   {"spchperf", true, -0.10, 0.0},
        {"schgovt", true, 0.80, 0.0},    {"schpubs", true, -0.15, 0.0},   {"rlur57", true, 0.25, 0.0},
        {"plns58q", false, 0.10, 0.05},  {"hsmd57", false, 0.00, 0.10},   {"gwiiq_bm", false, -0.05, 0.30},
        {"bmfaedu", false, 0.00, 0.05},  {"bmmaedu", false, 0.05, 0.05},  {"bklvpr", false, 0.10, 0.0},
        {"wrmo57", false, 0.00, 0.0},    {"zpedyr", false, 0.05, 0.05},   {"zfrplc", true, 0.10, 0.0}};
    std::vector<SyntheticCovariate> out;
    for (const auto& r : rows) {
        SyntheticCovariate c;
        c.name = r.name;
        c.binary = r.binary;
        c.shift = {r.shift * max_shift, 0.0, 0.0};
        c.outcome_weight = r.weight;
        out.push_back(c);
    }
    return out;
}

inline std::vector<SyntheticOutcome> primary_outcomes(const std::string& wave, double cognitive_effect = 0.0,
                                                      double depression_effect = 0.0) {
    return {{kLF, wave, false, 0.0, cognitive_effect, 0.0, false},
            {kDWR, wave, false, 0.0, cognitive_effect, 0.0, false},
            {kCESD, wave, false, 0.0, depression_effect, 0.0, false}};
}

// Counts shaped like the study cohort: the eligibility cascade and the
// availability of the primary outcome components at the 2004 wave.
inline SyntheticSpec wls_shape_spec() {
    SyntheticSpec s;
    s.n_football = 1153;
    s.n_nonsport = 1951;
    s.n_othersport = 800;
    s.n_missing_yearbook = 1205;
    s.n_complex_school = 843;
    s.n_female = 4296;
    s.n_hockey = 6;
    s.n_wrestling = 63;
    s.covariates = study_covariates(0.3);
    for (auto& c : s.covariates)
        if (c.name == "bmfaedu" || c.name == "bmmaedu" || c.name == "bklvpr") c.missing_rate = 0.03;
    s.outcomes = primary_outcomes("2004");
    for (const char* tag : {"HOST", "ANX", "ANGER", "SEI"}) s.outcomes.push_back({tag, "2004", false, 0.0, 0.0, 0.0, true});
    s.outcomes.push_back({"MILITARY", "1975", true, -0.5, 0.0, 0.0, true});
    s.outcomes.push_back({"POSTSEC", "1975", true, 0.0, 0.0, 0.0, true});
    // The football column of the published availability table sums to
    // 1,155; the CES-D-only count is lowered by two to match 1,153.
    s.pattern_counts = std::array<std::array<std::size_t, 8>, 3>{{{467, 58, 24, 55, 9, 13, 208, 319},
                                                                  {682, 118, 37, 92, 17, 14, 332, 659},
                                                                  {301, 40, 19, 33, 4, 10, 159, 234}}};
    return s;
}

inline SyntheticSpec default_synthetic_spec() {
    SyntheticSpec s;
    s.covariates = study_covariates(0.3);
    s.outcomes = primary_outcomes("2004");
    s.pattern_probs = {0.7, 0.05, 0.05, 0.05, 0.02, 0.02, 0.06, 0.05};
    return s;
}

// Reads a spec on top of a named preset ("default" or "wls_shape").
inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    const std::string preset = j.value("preset", std::string("default"));
    SyntheticSpec s;
    if (preset == "default") s = default_synthetic_spec();
    else if (preset == "wls_shape") s = wls_shape_spec();
    else throw ConfigError("unknown synthetic preset: " + preset);
    try {
        s.n_football = j.value("n_football", s.n_football);
        s.n_nonsport = j.value("n_nonsport", s.n_nonsport);
        s.n_othersport = j.value("n_othersport", s.n_othersport);
        s.n_missing_yearbook = j.value("n_missing_yearbook", s.n_missing_yearbook);
        s.n_complex_school = j.value("n_complex_school", s.n_complex_school);
        s.n_female = j.value("n_female", s.n_female);
        s.n_hockey = j.value("n_hockey", s.n_hockey);
        s.n_wrestling = j.value("n_wrestling", s.n_wrestling);
        s.factor_loading = j.value("factor_loading", s.factor_loading);
        s.noise_sd = j.value("noise_sd", s.noise_sd);
        s.dose_effect = j.value("dose_effect", s.dose_effect);
        s.max_years = j.value("max_years", s.max_years);
        s.gamma0 = j.value("gamma0", s.gamma0);
        s.u_loading = j.value("u_loading", s.u_loading);
        if (j.contains("max_shift")) s.covariates = study_covariates(j.at("max_shift").get<double>());
        if (j.contains("effects")) {
            const auto& e = j.at("effects");
            for (auto& o : s.outcomes)
                if (e.contains(o.tag)) o.effect = e.at(o.tag).get<double>();
        }
        if (j.contains("othersport_offsets")) {
            const auto& e = j.at("othersport_offsets");
            for (auto& o : s.outcomes)
                if (e.contains(o.tag)) o.othersport_offset = e.at(o.tag).get<double>();
        }
        if (j.contains("pattern_probs")) {
            const auto v = j.at("pattern_probs").get<std::vector<double>>();
            if (v.size() != 8) throw ConfigError("synthetic spec: pattern_probs needs 8 entries");
            std::copy(v.begin(), v.end(), s.pattern_probs.begin());
            s.pattern_counts.reset();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("synthetic spec: ") + e.what());
    }
    if (s.pattern_counts) {
        std::size_t f = 0, n = 0, o = 0;
        for (std::size_t k = 0; k < 8; ++k) {
            f += (*s.pattern_counts)[0][k];
            n += (*s.pattern_counts)[1][k];
            o += (*s.pattern_counts)[2][k];
        }
        if (f != s.n_football || n != s.n_nonsport || o != s.n_othersport) {
            // Arm sizes were overridden: fall back to the preset's proportions.
            for (std::size_t k = 0; k < 8; ++k)
                s.pattern_probs[k] = static_cast<double>((*s.pattern_counts)[0][k] + (*s.pattern_counts)[1][k] +
                                                         (*s.pattern_counts)[2][k]) /
                                     static_cast<double>(f + n + o);
            s.pattern_counts.reset();
        }
    }
    s.validate();
    return s;
}

namespace detail {

inline std::string fmt_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

} // namespace detail

// Writes the cohort table (with header) to `out`; deterministic given seed.
inline void generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, std::ostream& out) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::uniform_int_distribution<int> years(1, spec.max_years);

    enum class Kind { football, nonsport, othersport, no_yearbook, complex, female, hockey, wrestling };
    struct Row {
        Kind kind;
        AvailabilityPattern pattern;
    };
    std::vector<Row> rows;
    const std::array<std::size_t, 3> arm_n{spec.n_football, spec.n_nonsport, spec.n_othersport};
    const std::array<Kind, 3> arm_kind{Kind::football, Kind::nonsport, Kind::othersport};
    const auto draw_pattern = [&] {
        double r = unif(rng), acc = 0.0;
        for (std::size_t k = 0; k < 8; ++k) {
            acc += spec.pattern_probs[k];
            if (r < acc) return kPatternOrder[k];
        }
        return kPatternOrder[7];
    };
    for (std::size_t a = 0; a < 3; ++a) {
        std::vector<AvailabilityPattern> pats;
        if (spec.pattern_counts) {
            for (std::size_t k = 0; k < 8; ++k) pats.insert(pats.end(), (*spec.pattern_counts)[a][k], kPatternOrder[k]);
        } else {
            for (std::size_t i = 0; i < arm_n[a]; ++i) pats.push_back(draw_pattern());
        }
        for (const auto& p : pats) rows.push_back({arm_kind[a], p});
    }
    const auto add_excluded = [&](std::size_t n, Kind k) {
        for (std::size_t i = 0; i < n; ++i) rows.push_back({k, draw_pattern()});
    };
    add_excluded(spec.n_missing_yearbook, Kind::no_yearbook);
    add_excluded(spec.n_complex_school, Kind::complex);
    add_excluded(spec.n_female, Kind::female);
    add_excluded(spec.n_hockey, Kind::hockey);
    add_excluded(spec.n_wrestling, Kind::wrestling);
    std::shuffle(rows.begin(), rows.end(), rng);

    const CohortSchema schema = spec.schema();
    out << "id,sex,yearbook_available,complex_school,sports,football_years";
    for (const auto& c : spec.covariates) out << ',' << c.name;
    for (const auto& o : schema.outcomes) out << ',' << o.column;
    out << '\n';

    const double gamma_p = spec.gamma0 / (1.0 + spec.gamma0);
    const std::size_t width = std::to_string(rows.size()).size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const Row& row = rows[i];
        const std::size_t arm = row.kind == Kind::football ? 0 : row.kind == Kind::othersport ? 2 : 1;
        std::string id = std::to_string(i + 1);
        id = "S" + std::string(width - id.size(), '0') + id;

        std::string sports;
        switch (row.kind) {
        case Kind::football: sports = unif(rng) < 0.2 ? "football;other" : "football"; break;
        case Kind::othersport: sports = "other"; break;
        case Kind::hockey: sports = "hockey"; break;
        case Kind::wrestling: sports = "wrestling"; break;
        default: break;
        }
        const int dose = row.kind == Kind::football ? years(rng) : 0;
        const double exposure = row.kind == Kind::football ? (spec.dose_effect ? dose : 1.0) : 0.0;
        const double u = unif(rng) < (row.kind == Kind::football ? gamma_p : 0.5) ? 1.0 : 0.0;

        out << id << ',' << (row.kind == Kind::female ? "female" : "male") << ','
            << (row.kind == Kind::no_yearbook ? 0 : 1) << ',' << (row.kind == Kind::complex ? 1 : 0) << ',' << sports
            << ',' << dose;
        const double factor = normal(rng);
        double signal = 0.0;
        for (const auto& c : spec.covariates) {
            const double latent = spec.factor_loading * factor +
                                  std::sqrt(1.0 - spec.factor_loading * spec.factor_loading) * normal(rng) + c.shift[arm];
            const double value = c.binary ? (latent > c.threshold ? 1.0 : 0.0) : latent;
            signal += c.outcome_weight * value;
            if (c.missing_rate > 0.0 && unif(rng) < c.missing_rate) out << ",NA";
            else out << ',' << (c.binary ? (value > 0.5 ? "1" : "0") : detail::fmt_number(value));
        }
        for (const auto& o : spec.outcomes) {
            bool present;
            if (o.secondary) present = !row.pattern.empty();
            else if (o.tag == kLF) present = row.pattern.has(AvailabilityPattern::lf);
            else if (o.tag == kDWR) present = row.pattern.has(AvailabilityPattern::dwr);
            else if (o.tag == kCESD) present = row.pattern.has(AvailabilityPattern::cesd);
            else present = true;
            const double shift = o.effect * exposure + (arm == 2 ? o.othersport_offset : 0.0) + spec.u_loading * u;
            const double noise = normal(rng);
            const double draw = unif(rng);
            if (!present) {
                out << ",NA";
                continue;
            }
            if (o.binary) out << ',' << (draw < detail::logistic(o.intercept + signal + shift) ? 1 : 0);
            else out << ',' << detail::fmt_number(signal + shift + spec.noise_sd * noise);
        }
        out << '\n';
    }
}

} // namespace matchkit
