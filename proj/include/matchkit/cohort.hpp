#pragma once

// Subject records, delimited-file ingestion, the eligibility cascade, arm
// assignment and stratification by availability of the primary outcome
// components.

#include "matchkit/error.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <compare>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace matchkit {

enum class Sex { male, female };

enum class Sport { football, hockey, wrestling, soccer, lacrosse, other_noncontact };

enum class Arm { football, nonsport, othersport };

inline constexpr std::array<Arm, 3> kAllArms{Arm::football, Arm::nonsport, Arm::othersport};

inline std::string to_string(Arm arm) {
    switch (arm) {
    case Arm::football: return "football";
    case Arm::nonsport: return "nonsport";
    case Arm::othersport: return "othersport";
    }
    return "unknown";
}

inline std::string to_string(Sport s) {
    switch (s) {
    case Sport::football: return "football";
    case Sport::hockey: return "hockey";
    case Sport::wrestling: return "wrestling";
    case Sport::soccer: return "soccer";
    case Sport::lacrosse: return "lacrosse";
    case Sport::other_noncontact: return "other";
    }
    return "unknown";
}

inline bool is_risky(Sport s) {
    return s == Sport::hockey || s == Sport::wrestling || s == Sport::soccer || s == Sport::lacrosse;
}

// Primary outcome component tags.
inline const std::string kLF = "LF";
inline const std::string kDWR = "DWR";
inline const std::string kCESD = "CESD";

struct OutcomeKey {
    std::string tag;
    std::string wave;
    auto operator<=>(const OutcomeKey&) const = default;
};

struct SubjectRecord {
    std::string id;
    Sex sex = Sex::male;
    bool yearbook_available = true;
    bool complex_school = false;
    std::set<Sport> sports;
    int football_years = 0;
    std::vector<std::optional<double>> covariates;
    std::map<OutcomeKey, std::optional<double>> outcomes;

    bool plays(Sport s) const { return sports.count(s) > 0; }

    std::optional<double> outcome(const std::string& tag, const std::string& wave) const {
        const auto it = outcomes.find(OutcomeKey{tag, wave});
        if (it == outcomes.end()) return std::nullopt;
        return it->second;
    }
};

// Arm of an eligible subject. Risky-sport non-football subjects have no arm
// and must have been filtered out already.
inline Arm arm_of(const SubjectRecord& r) {
    if (r.plays(Sport::football)) return Arm::football;
    if (r.sports.empty()) return Arm::nonsport;
    for (Sport s : r.sports)
        if (is_risky(s)) throw DataError("subject " + r.id + " played a risky sport and has no study arm");
    return Arm::othersport;
}

struct OutcomeColumn {
    std::string tag;
    std::string wave;
    std::string column;
};

// Binds column names of the input table onto roles.
struct CohortSchema {
    std::string id_column = "id";
    std::string sex_column = "sex";
    std::string yearbook_column = "yearbook_available";
    std::string complex_school_column = "complex_school";
    std::string sports_column = "sports";
    std::string dose_column = "football_years";
    char sport_separator = ';';
    std::vector<std::string> covariates;
    std::vector<OutcomeColumn> outcomes;

    static CohortSchema from_json(const nlohmann::json& j) {
        CohortSchema s;
        try {
            s.id_column = j.value("id_column", s.id_column);
            s.sex_column = j.value("sex_column", s.sex_column);
            s.yearbook_column = j.value("yearbook_column", s.yearbook_column);
            s.complex_school_column = j.value("complex_school_column", s.complex_school_column);
            s.sports_column = j.value("sports_column", s.sports_column);
            s.dose_column = j.value("dose_column", s.dose_column);
            const std::string sep = j.value("sport_separator", std::string(";"));
            if (sep.size() != 1) throw ConfigError("schema: sport_separator must be a single character");
            s.sport_separator = sep[0];
            s.covariates = j.at("covariates").get<std::vector<std::string>>();
            for (const auto& o : j.at("outcomes"))
                s.outcomes.push_back({o.at("tag").get<std::string>(), o.at("wave").get<std::string>(),
                                      o.at("column").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("schema: ") + e.what());
        }
        return s;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["id_column"] = id_column;
        j["sex_column"] = sex_column;
        j["yearbook_column"] = yearbook_column;
        j["complex_school_column"] = complex_school_column;
        j["sports_column"] = sports_column;
        j["dose_column"] = dose_column;
        j["sport_separator"] = std::string(1, sport_separator);
        j["covariates"] = covariates;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& o : outcomes) arr.push_back({{"tag", o.tag}, {"wave", o.wave}, {"column", o.column}});
        j["outcomes"] = arr;
        return j;
    }

    static CohortSchema load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open schema file: " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("schema " + path + ": " + e.what());
        }
        return from_json(j);
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// Splits one line; double quotes protect delimiters, "" is an escaped quote.
inline std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == delim) {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline bool is_missing(const std::string& field) {
    const std::string t = trim(field);
    return t.empty() || t == "NA";
}

inline std::optional<double> parse_number(const std::string& field) {
    const std::string t = trim(field);
    double v = 0.0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size()) return std::nullopt;
    return v;
}

inline std::optional<bool> parse_bool(const std::string& field) {
    const std::string t = lower(trim(field));
    if (t == "1" || t == "true" || t == "yes" || t == "y") return true;
    if (t == "0" || t == "false" || t == "no" || t == "n") return false;
    return std::nullopt;
}

inline std::optional<Sex> parse_sex(const std::string& field) {
    const std::string t = lower(trim(field));
    if (t == "male" || t == "m") return Sex::male;
    if (t == "female" || t == "f") return Sex::female;
    return std::nullopt;
}

inline std::optional<Sport> parse_sport(const std::string& tag) {
    const std::string t = lower(trim(tag));
    if (t == "football") return Sport::football;
    if (t == "hockey") return Sport::hockey;
    if (t == "wrestling") return Sport::wrestling;
    if (t == "soccer") return Sport::soccer;
    if (t == "lacrosse") return Sport::lacrosse;
    if (t == "other" || t == "other-noncontact" || t == "other_noncontact") return Sport::other_noncontact;
    return std::nullopt;
}

} // namespace detail

// Parses a delimited table with a header row. Missing values are empty
// fields or the literal NA.
inline std::vector<SubjectRecord> parse_cohort(std::istream& in, const CohortSchema& schema, char delim = ',') {
    std::string line;
    if (!std::getline(in, line)) return {};
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3); // BOM

    const auto header = detail::split_line(line, delim);
    std::unordered_map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        const std::string name = detail::trim(header[i]);
        if (!col.emplace(name, i).second) throw DataError("duplicate column in header: " + name);
    }

    std::unordered_set<std::string> known{schema.id_column,      schema.sex_column,    schema.yearbook_column,
                                          schema.complex_school_column, schema.sports_column, schema.dose_column};
    for (const auto& c : schema.covariates) known.insert(c);
    for (const auto& o : schema.outcomes) known.insert(o.column);
    for (const auto& [name, idx] : col)
        if (!known.count(name)) throw DataError("unknown column in input: " + name);

    const auto require = [&](const std::string& name) {
        const auto it = col.find(name);
        if (it == col.end()) throw DataError("input is missing column: " + name);
        return it->second;
    };
    const std::size_t c_id = require(schema.id_column);
    const std::size_t c_sex = require(schema.sex_column);
    const std::size_t c_yb = require(schema.yearbook_column);
    const std::size_t c_cx = require(schema.complex_school_column);
    const std::size_t c_sp = require(schema.sports_column);
    const std::size_t c_dose = require(schema.dose_column);
    std::vector<std::size_t> c_cov;
    for (const auto& c : schema.covariates) c_cov.push_back(require(c));
    std::vector<std::size_t> c_out;
    for (const auto& o : schema.outcomes) c_out.push_back(require(o.column));

    std::vector<SubjectRecord> records;
    std::unordered_set<std::string> seen;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (detail::trim(line).empty()) continue;
        const auto f = detail::split_line(line, delim);
        if (f.size() != header.size())
            throw DataError("row " + std::to_string(row) + ": expected " + std::to_string(header.size()) +
                            " fields, found " + std::to_string(f.size()));
        const auto where = [&](std::size_t c) { return "row " + std::to_string(row) + ", column " + header[c]; };

        SubjectRecord r;
        r.id = detail::trim(f[c_id]);
        if (r.id.empty()) throw DataError(where(c_id) + ": empty id");
        if (!seen.insert(r.id).second) throw DataError("duplicate id: " + r.id);

        const auto sex = detail::parse_sex(f[c_sex]);
        if (!sex) throw DataError(where(c_sex) + ": cannot parse sex '" + f[c_sex] + "'");
        r.sex = *sex;
        const auto yb = detail::parse_bool(f[c_yb]);
        if (!yb) throw DataError(where(c_yb) + ": cannot parse boolean '" + f[c_yb] + "'");
        r.yearbook_available = *yb;
        const auto cx = detail::parse_bool(f[c_cx]);
        if (!cx) throw DataError(where(c_cx) + ": cannot parse boolean '" + f[c_cx] + "'");
        r.complex_school = *cx;

        if (!detail::is_missing(f[c_sp])) {
            for (const auto& tag : detail::split_line(f[c_sp], schema.sport_separator)) {
                if (detail::trim(tag).empty()) continue;
                const auto s = detail::parse_sport(tag);
                if (!s) throw DataError(where(c_sp) + ": unknown sport tag '" + tag + "'");
                r.sports.insert(*s);
            }
        }
        if (detail::is_missing(f[c_dose])) {
            r.football_years = 0;
        } else {
            const auto d = detail::parse_number(f[c_dose]);
            if (!d || *d != static_cast<int>(*d) || *d < 0 || *d > 4)
                throw DataError(where(c_dose) + ": dose must be an integer 0-4");
            r.football_years = static_cast<int>(*d);
        }
        if ((r.football_years >= 1) != r.plays(Sport::football))
            throw DataError(where(c_dose) + ": football years must be positive exactly for football players (id " +
                            r.id + ")");

        r.covariates.reserve(c_cov.size());
        for (std::size_t c : c_cov) {
            if (detail::is_missing(f[c])) {
                r.covariates.emplace_back(std::nullopt);
            } else {
                const auto v = detail::parse_number(f[c]);
                if (!v) throw DataError(where(c) + ": unparseable number '" + f[c] + "'");
                r.covariates.emplace_back(*v);
            }
        }
        for (std::size_t k = 0; k < c_out.size(); ++k) {
            const std::size_t c = c_out[k];
            std::optional<double> v;
            if (!detail::is_missing(f[c])) {
                v = detail::parse_number(f[c]);
                if (!v) throw DataError(where(c) + ": unparseable number '" + f[c] + "'");
            }
            r.outcomes[OutcomeKey{schema.outcomes[k].tag, schema.outcomes[k].wave}] = v;
        }
        records.push_back(std::move(r));
    }
    return records;
}

inline std::vector<SubjectRecord> load_cohort(const std::string& path, const CohortSchema& schema, char delim = ',') {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open cohort file: " + path);
    return parse_cohort(in, schema, delim);
}

struct EligibilityReport {
    std::size_t total = 0;
    std::size_t dropped_missing_yearbook = 0;
    std::size_t dropped_complex_school = 0;
    std::size_t dropped_female = 0;
    std::size_t males_remaining = 0;
    std::size_t dropped_risky_sport = 0;
    std::size_t eligible = 0;
    std::size_t n_football = 0;
    std::size_t n_nonsport = 0;
    std::size_t n_othersport = 0;

    bool reconciles() const {
        return total == eligible + dropped_missing_yearbook + dropped_complex_school + dropped_female +
                            dropped_risky_sport &&
               eligible == n_football + n_nonsport + n_othersport &&
               males_remaining == eligible + dropped_risky_sport;
    }
};

// Cascade: missing yearbook, complex school, non-male, risky sport without
// football. A subject is counted at the first stage that drops it.
inline std::pair<std::vector<SubjectRecord>, EligibilityReport>
filter_eligibility(const std::vector<SubjectRecord>& records) {
    EligibilityReport rep;
    rep.total = records.size();
    std::vector<SubjectRecord> eligible;
    for (const auto& r : records) {
        if (!r.yearbook_available) {
            ++rep.dropped_missing_yearbook;
            continue;
        }
        if (r.complex_school) {
            ++rep.dropped_complex_school;
            continue;
        }
        if (r.sex != Sex::male) {
            ++rep.dropped_female;
            continue;
        }
        ++rep.males_remaining;
        if (!r.plays(Sport::football) &&
            std::any_of(r.sports.begin(), r.sports.end(), [](Sport s) { return is_risky(s); })) {
            ++rep.dropped_risky_sport;
            continue;
        }
        switch (arm_of(r)) {
        case Arm::football: ++rep.n_football; break;
        case Arm::nonsport: ++rep.n_nonsport; break;
        case Arm::othersport: ++rep.n_othersport; break;
        }
        eligible.push_back(r);
    }
    rep.eligible = eligible.size();
    return {std::move(eligible), rep};
}

inline std::string render_eligibility_text(const EligibilityReport& r) {
    std::ostringstream os;
    os << "Subjects in input                      " << r.total << "\n"
       << "Dropped: missing yearbook              " << r.dropped_missing_yearbook << "\n"
       << "Dropped: complex school                " << r.dropped_complex_school << "\n"
       << "Dropped: female                        " << r.dropped_female << "\n"
       << "Males remaining                        " << r.males_remaining << "\n"
       << "Dropped: risky sport without football  " << r.dropped_risky_sport << "\n"
       << "Eligible                               " << r.eligible << "\n"
       << "  Football                             " << r.n_football << "\n"
       << "  Non-sport controls                   " << r.n_nonsport << "\n"
       << "  Other-sport controls                 " << r.n_othersport << "\n";
    return os.str();
}

// Presence pattern of the primary outcome components.
struct AvailabilityPattern {
    std::uint8_t mask = 0;
    static constexpr std::uint8_t lf = 1, dwr = 2, cesd = 4;

    bool has(std::uint8_t bit) const { return (mask & bit) != 0; }
    bool empty() const { return mask == 0; }

    std::string label() const {
        if (mask == 0) return "None";
        std::string s;
        const auto add = [&](const char* part) {
            if (!s.empty()) s += "+";
            s += part;
        };
        if (has(lf)) add("LF");
        if (has(dwr)) add("DWR");
        if (has(cesd)) add("CESD");
        return s;
    }

    auto operator<=>(const AvailabilityPattern&) const = default;
};

// Reporting order of the availability patterns (the "None" pattern last).
inline const std::array<AvailabilityPattern, 8> kPatternOrder{
    AvailabilityPattern{7}, AvailabilityPattern{3}, AvailabilityPattern{5}, AvailabilityPattern{6},
    AvailabilityPattern{1}, AvailabilityPattern{2}, AvailabilityPattern{4}, AvailabilityPattern{0}};

inline AvailabilityPattern availability_of(const SubjectRecord& r, const std::string& wave) {
    AvailabilityPattern p;
    if (r.outcome(kLF, wave)) p.mask |= AvailabilityPattern::lf;
    if (r.outcome(kDWR, wave)) p.mask |= AvailabilityPattern::dwr;
    if (r.outcome(kCESD, wave)) p.mask |= AvailabilityPattern::cesd;
    return p;
}

struct AvailabilityStratum {
    AvailabilityPattern pattern;
    std::vector<std::string> members;
};

// Partition into the nonempty availability strata, in reporting order.
inline std::vector<AvailabilityStratum> stratify_by_availability(const std::vector<SubjectRecord>& eligible,
                                                                 const std::string& wave) {
    std::map<std::uint8_t, std::vector<std::string>> by_mask;
    for (const auto& r : eligible) by_mask[availability_of(r, wave).mask].push_back(r.id);
    std::vector<AvailabilityStratum> out;
    for (const auto& p : kPatternOrder) {
        auto it = by_mask.find(p.mask);
        if (it != by_mask.end()) out.push_back({p, std::move(it->second)});
    }
    return out;
}

// Covariates with missing values imputed by the mean over all supplied
// subjects, plus a 0/1 missingness indicator for every covariate that had
// any missing value. Row order follows the input records.
struct CovariateMatrix {
    Eigen::MatrixXd values;
    std::vector<std::string> names;
    std::vector<std::string> ids;
    std::unordered_map<std::string, Eigen::Index> row_of;

    Eigen::Index row(const std::string& id) const {
        const auto it = row_of.find(id);
        if (it == row_of.end()) throw DataError("no covariates for subject " + id);
        return it->second;
    }

    Eigen::MatrixXd rows(const std::vector<std::string>& subset) const {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(subset.size()), values.cols());
        for (std::size_t i = 0; i < subset.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = values.row(row(subset[i]));
        return out;
    }
};

inline CovariateMatrix prepare_covariates(const std::vector<SubjectRecord>& records,
                                          const std::vector<std::string>& covariate_names) {
    const std::size_t p = covariate_names.size();
    const auto n = static_cast<Eigen::Index>(records.size());
    std::vector<double> sum(p, 0.0);
    std::vector<std::size_t> present(p, 0);
    for (const auto& r : records) {
        if (r.covariates.size() != p) throw DataError("subject " + r.id + " has wrong covariate count");
        for (std::size_t k = 0; k < p; ++k)
            if (r.covariates[k]) {
                sum[k] += *r.covariates[k];
                ++present[k];
            }
    }
    std::vector<std::size_t> indicator_cols;
    for (std::size_t k = 0; k < p; ++k)
        if (present[k] < records.size()) indicator_cols.push_back(k);

    CovariateMatrix cm;
    cm.values.resize(n, static_cast<Eigen::Index>(p + indicator_cols.size()));
    cm.names = covariate_names;
    for (std::size_t k : indicator_cols) cm.names.push_back(covariate_names[k] + "_missing");
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        for (std::size_t k = 0; k < p; ++k) {
            const double fill = present[k] > 0 ? sum[k] / static_cast<double>(present[k]) : 0.0;
            cm.values(i, static_cast<Eigen::Index>(k)) = r.covariates[k] ? *r.covariates[k] : fill;
        }
        for (std::size_t j = 0; j < indicator_cols.size(); ++j)
            cm.values(i, static_cast<Eigen::Index>(p + j)) = r.covariates[indicator_cols[j]] ? 0.0 : 1.0;
        cm.ids.push_back(r.id);
        cm.row_of.emplace(r.id, i);
    }
    return cm;
}

} // namespace matchkit
