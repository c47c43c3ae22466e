#include <gtest/gtest.h>

#include <cmath>

#include "pimqat/diag.hpp"

using namespace pimqat;
using namespace pimqat::diag;

namespace {

double cell(const SweepTable& t, std::size_t row, const std::string& col) {
    for (std::size_t c = 0; c < t.columns.size(); ++c)
        if (t.columns[c] == col) return t.cells.at(row)[c];
    throw Error("no column " + col);
}

}  // namespace

TEST(SweepTable, SerializesAndChecksShape) {
    SweepTable t;
    t.study = "demo";
    t.axis_names = {"a", "b"};
    t.axis_values = {{"x", "y"}, {"1", "2", "3"}};
    t.columns = {"v"};
    for (int i = 0; i < 6; ++i) t.cells.push_back({i * 0.5});
    set_meta(t, json{{"k", 1}}, 9);
    EXPECT_EQ(t.point(4), (std::vector<std::string>{"y", "2"}));
    const auto csv = t.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "a,b,v");
    EXPECT_NE(csv.find("y,3,2.5\n"), std::string::npos);
    const auto back = SweepTable::from_json(json::parse(t.to_json().dump()));
    EXPECT_EQ(back.to_json(), t.to_json());
    t.cells.pop_back();
    EXPECT_THROW(t.to_csv(), Error);
}

TEST(ConfigHash, StableUnderKeyOrder) {
    const auto a = json::parse(R"({"x": 1, "y": {"p": [1, 2], "q": "s"}})");
    const auto b = json::parse(R"({"y": {"q": "s", "p": [1, 2]}, "x": 1})");
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    const auto c = json::parse(R"({"x": 2, "y": {"p": [1, 2], "q": "s"}})");
    EXPECT_NE(config_hash(a), config_hash(c));
    EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
    EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(ScaleRatio, InfiniteIsOneAndHighResolutionNearOne) {
    ScaleRatioConfig c;
    c.b_imc = {0, 9, 10};
    c.repeats = 2;
    const auto t = scale_ratio_study(c);
    EXPECT_EQ(cell(t, 0, "rho"), 1.0);
    EXPECT_LE(std::abs(cell(t, 1, "rho") - 1.0), 0.05);
    EXPECT_LE(std::abs(cell(t, 2, "rho") - 1.0), 0.05);
    EXPECT_EQ(t.meta.at("config").at("batch"), 100);
    ScaleRatioConfig small = c;
    small.batch = 50;
    EXPECT_THROW(scale_ratio_study(small), Error);
}

TEST(ScaleRatio, NonIncreasingAboveFiveBits) {
    ScaleRatioConfig c;
    c.b_imc = {5, 6, 7, 8, 9, 10};
    c.repeats = 3;
    const auto t = scale_ratio_study(c);
    for (std::size_t r = 1; r < t.cells.size(); ++r)
        EXPECT_LE(cell(t, r, "rho"), cell(t, r - 1, "rho") + 1e-3) << t.point(r)[0];
}

TEST(ScaleRatio, Deterministic) {
    ScaleRatioConfig c;
    c.b_imc = {4};
    c.repeats = 1;
    EXPECT_EQ(scale_ratio_study(c).to_json(), scale_ratio_study(c).to_json());
}

TEST(BnDrift, NoNonIdealityMeansNoDrift) {
    BnDriftConfig c;
    c.use_curves = false;
    c.sigmas = {0.0};
    c.batch = 100;
    const auto t = bn_drift_study(c);
    for (double v : t.cells[0]) EXPECT_EQ(v, 0.0);
}

TEST(BnDrift, AdditiveNoiseDoesNotShrinkVariance) {
    BnDriftConfig c;
    c.use_curves = false;
    c.sigmas = {0.5, 1.0, 2.0};
    const auto t = bn_drift_study(c);
    for (std::size_t r = 0; r < t.cells.size(); ++r) EXPECT_GE(cell(t, r, "var_change_signed"), 0.0);
}

TEST(BnDrift, CurvesAndNoiseMoveStatistics) {
    BnDriftConfig c;
    c.sigmas = {0.0, 0.35};
    const auto t = bn_drift_study(c);
    EXPECT_GT(cell(t, 1, "var_drift_max"), 0.01);
    EXPECT_GT(cell(t, 0, "mean_drift_avg"), 0.0);
}

TEST(GradientRatio, ExactEqualWidthsNearOne) {
    GradRatioConfig c;
    c.batches = 30;
    const auto t = gradient_ratio_check(c);
    ASSERT_EQ(t.cells.size(), 6u);
    for (std::size_t l = 0; l < 6; ++l) {
        EXPECT_DOUBLE_EQ(cell(t, l, "predicted"), 1.0);
        EXPECT_LE(cell(t, l, "rel_error"), 0.25);
    }
}

TEST(GradientRatio, WidthChangeEntersFormula) {
    GradRatioConfig c;
    c.blocks = 4;
    c.widths = {144, 288, 144, 144, 144};
    c.batches = 20;
    const auto t = gradient_ratio_check(c);
    EXPECT_DOUBLE_EQ(cell(t, 0, "predicted"), 2.0);
    EXPECT_DOUBLE_EQ(cell(t, 1, "predicted"), 0.5);
    EXPECT_LE(cell(t, 0, "rel_error"), 0.25);
    EXPECT_LE(cell(t, 1, "rel_error"), 0.25);
}

TEST(GradientRatio, ForwardScaleIsAbsorbedByNormalization) {
    GradRatioConfig c;
    c.b_imc = 4;
    c.batches = 20;
    c.eta = 3.0;
    const auto a = gradient_ratio_check(c);
    c.eta = 30.0;
    const auto b = gradient_ratio_check(c);
    for (std::size_t l = 0; l < a.cells.size(); ++l)
        EXPECT_NEAR(cell(a, l, "measured") / cell(b, l, "measured"), 1.0, 0.1) << l;
}

TEST(GradientRatio, UnitXiVanishesGeometrically) {
    GradRatioConfig c;
    c.blocks = 10;
    c.b_imc = 3;
    c.batches = 10;
    c.xi_mode = nn::XiMode::fixed;
    c.xi_fixed = 1.0;
    const auto t = gradient_ratio_check(c);
    double log_measured = 0.0, log_predicted = 0.0;
    for (std::size_t l = 0; l < t.cells.size(); ++l) {
        log_measured += std::log(cell(t, l, "measured"));
        log_predicted += std::log(1.0 / std::pow(cell(t, l, "rho"), 2));
    }
    EXPECT_LT(log_measured, std::log(1e-6));
    EXPECT_NEAR(log_measured / log_predicted, 1.0, 0.1);
}

TEST(GradientRatio, RejectsShallowStacks) {
    GradRatioConfig c;
    c.blocks = 3;
    EXPECT_THROW(gradient_ratio_check(c), Error);
}

TEST(NoiseError, MatchesClosedForm) {
    NoiseErrorConfig c;
    c.sigmas = {0.0, 0.35, 1.0, 2.0};
    c.samples = 100000;
    const auto t = noise_error_study(c);
    EXPECT_EQ(cell(t, 0, "normalized_std"), 1.0);
    for (std::size_t r = 0; r < t.cells.size(); ++r)
        EXPECT_NEAR(cell(t, r, "normalized_std") / cell(t, r, "closed_form"), 1.0, 0.02);
}
