#include "matchkit/cohort.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <sstream>

using namespace matchkit;

namespace {

CohortSchema small_schema() {
    CohortSchema s;
    s.covariates = {"x1", "x2"};
    s.outcomes = {{"LF", "2004", "LF_2004"}, {"DWR", "2004", "DWR_2004"}, {"CESD", "2004", "CESD_2004"}};
    return s;
}

const char* kHeader = "id,sex,yearbook_available,complex_school,sports,football_years,x1,x2,LF_2004,DWR_2004,CESD_2004\n";

std::vector<SubjectRecord> parse(const std::string& body) {
    std::istringstream in(std::string(kHeader) + body);
    return parse_cohort(in, small_schema());
}

} // namespace

TEST(ParseCohort, ReadsFieldsAndMissingValues) {
    const auto r = parse("a,male,1,0,football;other,3,1.5,NA,0.1,,2\n"
                         "b,F,yes,no,,0,2,3,NA,NA,NA\n");
    ASSERT_EQ(r.size(), 2u);
    EXPECT_TRUE(r[0].plays(Sport::football));
    EXPECT_TRUE(r[0].plays(Sport::other_noncontact));
    EXPECT_EQ(r[0].football_years, 3);
    EXPECT_FALSE(r[0].covariates[1].has_value());
    EXPECT_FALSE(r[0].outcome("DWR", "2004").has_value());
    EXPECT_DOUBLE_EQ(*r[0].outcome("CESD", "2004"), 2.0);
    EXPECT_EQ(r[1].sex, Sex::female);
    EXPECT_TRUE(r[1].sports.empty());
}

TEST(ParseCohort, HeaderOnlyGivesNoRecords) { EXPECT_TRUE(parse("").empty()); }

TEST(ParseCohort, RejectsMalformedInput) {
    EXPECT_THROW(parse("a,male,1,0,,0,1,2,NA,NA\n"), DataError);                 // short row
    EXPECT_THROW(parse("a,male,1,0,curling,0,1,2,NA,NA,NA\n"), DataError);       // unknown sport
    EXPECT_THROW(parse("a,male,1,0,football,0,1,2,NA,NA,NA\n"), DataError);      // football without years
    EXPECT_THROW(parse("a,male,1,0,,0,1,2,NA,NA,NA\na,male,1,0,,0,1,2,NA,NA,NA\n"), DataError);  // duplicate id
    EXPECT_THROW(parse("a,male,1,0,,0,1,abc,NA,NA,NA\n"), DataError);            // bad number
    std::istringstream missing_col("id,sex\n");
    EXPECT_THROW(parse_cohort(missing_col, small_schema()), DataError);
}

TEST(ParseCohort, MissingFileNamesThePath) {
    try {
        load_cohort("/nonexistent/cohort.csv", small_schema());
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/cohort.csv"), std::string::npos);
    }
}

TEST(Eligibility, CascadeCountsFirstDroppingStage) {
    const auto r = parse("a,male,0,1,,0,1,1,NA,NA,NA\n"         // no yearbook (also complex)
                         "b,male,1,1,,0,1,1,NA,NA,NA\n"         // complex school
                         "c,female,1,0,,0,1,1,NA,NA,NA\n"       // female
                         "d,male,1,0,wrestling,0,1,1,NA,NA,NA\n"  // risky sport
                         "e,male,1,0,football;hockey,2,1,1,NA,NA,NA\n"  // football keeps him
                         "f,male,1,0,,0,1,1,NA,NA,NA\n"
                         "g,male,1,0,other,0,1,1,NA,NA,NA\n");
    const auto [eligible, rep] = filter_eligibility(r);
    EXPECT_EQ(rep.total, 7u);
    EXPECT_EQ(rep.dropped_missing_yearbook, 1u);
    EXPECT_EQ(rep.dropped_complex_school, 1u);
    EXPECT_EQ(rep.dropped_female, 1u);
    EXPECT_EQ(rep.males_remaining, 4u);
    EXPECT_EQ(rep.dropped_risky_sport, 1u);
    EXPECT_EQ(rep.n_football, 1u);
    EXPECT_EQ(rep.n_nonsport, 1u);
    EXPECT_EQ(rep.n_othersport, 1u);
    EXPECT_TRUE(rep.reconciles());
    EXPECT_EQ(eligible.size(), 3u);
}

TEST(Eligibility, ShapeFixtureReproducesCascade) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto schema = CohortSchema::load(MATCHKIT_TEST_DATA "/wls_shape.schema.json");
    const auto records = load_cohort(MATCHKIT_TEST_DATA "/wls_shape.csv", schema);
    const auto [eligible, rep] = filter_eligibility(records);
    EXPECT_EQ(rep.total, 10317u);
    EXPECT_EQ(rep.dropped_missing_yearbook, 1205u);
    EXPECT_EQ(rep.dropped_complex_school, 843u);
    EXPECT_EQ(rep.males_remaining, 3973u);
    EXPECT_EQ(rep.dropped_risky_sport, 69u);
    EXPECT_EQ(rep.eligible, 3904u);
    EXPECT_EQ(rep.n_football, 1153u);
    EXPECT_EQ(rep.n_nonsport, 1951u);
    EXPECT_EQ(rep.n_othersport, 800u);
    EXPECT_TRUE(rep.reconciles());

    const auto strata = stratify_by_availability(eligible, "2004");
    ASSERT_EQ(strata.size(), 8u);
    const auto count = [&](const AvailabilityStratum& s, bool football) {
        std::size_t n = 0;
        for (const auto& id : s.members)
            for (const auto& r : eligible)
                if (r.id == id) n += (arm_of(r) == Arm::football) == football;
        return n;
    };
    EXPECT_EQ(strata.front().pattern.label(), "LF+DWR+CESD");
    EXPECT_EQ(count(strata.front(), true), 467u);
    EXPECT_EQ(count(strata.front(), false), 983u);
    EXPECT_EQ(strata.back().pattern.label(), "None");
    EXPECT_EQ(count(strata.back(), true), 319u);
    EXPECT_EQ(count(strata.back(), false), 893u);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 5.0);
}

TEST(Covariates, MeanImputationWithIndicator) {
    const auto r = parse("a,male,1,0,,0,1,NA,NA,NA,NA\n"
                         "b,male,1,0,,0,3,4,NA,NA,NA\n"
                         "c,male,1,0,,0,5,6,NA,NA,NA\n");
    const auto cm = prepare_covariates(r, {"x1", "x2"});
    ASSERT_EQ(cm.names.size(), 3u);
    EXPECT_EQ(cm.names[2], "x2_missing");
    EXPECT_DOUBLE_EQ(cm.values(cm.row("a"), 1), 5.0);
    EXPECT_DOUBLE_EQ(cm.values(cm.row("a"), 2), 1.0);
    EXPECT_DOUBLE_EQ(cm.values(cm.row("b"), 2), 0.0);
    EXPECT_THROW(cm.row("zz"), DataError);
}

TEST(Availability, PatternsFollowReportingOrder) {
    const auto r = parse("a,male,1,0,,0,1,1,1,2,3\n"
                         "b,male,1,0,,0,1,1,NA,NA,NA\n"
                         "c,male,1,0,,0,1,1,NA,2,NA\n");
    EXPECT_EQ(availability_of(r[0], "2004").label(), "LF+DWR+CESD");
    EXPECT_EQ(availability_of(r[1], "2004").label(), "None");
    EXPECT_EQ(availability_of(r[2], "2004").label(), "DWR");
    const auto strata = stratify_by_availability(r, "2004");
    ASSERT_EQ(strata.size(), 3u);
    EXPECT_EQ(strata[0].pattern.label(), "LF+DWR+CESD");
    EXPECT_EQ(strata[1].pattern.label(), "DWR");
    EXPECT_EQ(strata[2].pattern.label(), "None");
}
