#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "curemark/prediction.hpp"
#include "curemark/rng.hpp"

using namespace curemark;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LandmarkDataset tiny_landmark() {
    LandmarkDataset lm;
    lm.landmark_time = 3.0;
    lm.covariates = {"bio"};
    for (int i = 0; i < 3; ++i) {
        SubjectRow r;
        r.subject_id = "s" + std::to_string(i);
        r.time = 1.0 + i;
        r.event = i % 2;
        lm.subjects.rows.push_back(r);
    }
    // s0: values 5,6,7 at t = 1,2,3; s1: single value 4 at t = 0.5;
    // s2: values 1,2 at t = 0,2
    lm.history.records = {
        {"s0", "bio", 1.0, 5.0}, {"s0", "bio", 2.0, 6.0}, {"s0", "bio", 3.0, 7.0},
        {"s1", "bio", 0.5, 4.0},
        {"s2", "bio", 0.0, 1.0}, {"s2", "bio", 2.0, 2.0},
    };
    lm.pre_landmark_counts = {{3}, {1}, {2}};
    return lm;
}

} // namespace

TEST_CASE("locf_summary picks the last observed value") {
    auto lm = tiny_landmark();
    auto s = locf_summary(lm);
    CHECK(s(0, 0) == 7.0);
    CHECK(s(1, 0) == 4.0); // single observation far from the landmark
    CHECK(s(2, 0) == 2.0);
}

TEST_CASE("locf_summary is componentwise across covariates") {
    auto lm = tiny_landmark();
    lm.covariates = {"bio", "lab"};
    lm.history.records.push_back({"s0", "lab", 0.5, -1.0});
    lm.history.records.push_back({"s1", "lab", 2.5, -2.0});
    lm.history.records.push_back({"s2", "lab", 1.0, -3.0});
    auto s = locf_summary(lm);
    CHECK(s(0, 0) == 7.0);
    CHECK(s(0, 1) == -1.0);
    CHECK(s(1, 1) == -2.0);
    CHECK(s(2, 1) == -3.0);
}

TEST_CASE("predict_subjects evaluates the plug-in formulas") {
    CureModelFit fit;
    fit.alpha0 = 0.5;
    fit.alpha = VectorXd::Constant(1, 1.0);
    fit.beta = VectorXd::Zero(0);
    fit.psi = VectorXd::Constant(1, 0.8);
    fit.baseline.jump_times = {1.0, 2.0};
    fit.baseline.cumulative = {0.3, 0.9};

    VectorXd x_row = VectorXd::Constant(1, -0.2);
    VectorXd z_row = VectorXd::Constant(1, 0.5);
    auto res = predict_subject(fit, x_row, z_row, {0.5, 1.5, 2.0, 5.0});

    const double eta_inc = 0.5 + 1.0 * -0.2;
    const double pi = 1.0 / (1.0 + std::exp(-eta_inc));
    const double eta_lat = 0.8 * 0.5;
    CHECK(res.pi_hat[0] == Catch::Approx(pi).epsilon(1e-14));
    CHECK(res.eta_inc[0] == Catch::Approx(eta_inc).epsilon(1e-14));
    CHECK(res.eta_lat[0] == Catch::Approx(eta_lat).epsilon(1e-14));

    // before the first event: H0 = 0, S_u = 1, S = 1
    CHECK(res.s_uncured(0, 0) == 1.0);
    CHECK(res.s_overall(0, 0) == 1.0);
    // between jumps: right-continuous step
    CHECK(res.s_uncured(0, 1) == Catch::Approx(std::exp(-0.3 * std::exp(eta_lat))).epsilon(1e-14));
    // at the last jump
    CHECK(res.s_uncured(0, 2) == Catch::Approx(std::exp(-0.9 * std::exp(eta_lat))).epsilon(1e-14));
    // beyond the last event: zero tail and the cure plateau
    CHECK(res.s_uncured(0, 3) == 0.0);
    CHECK(res.s_overall(0, 3) == Catch::Approx(1.0 - pi).epsilon(1e-14));

    // monotone survival, bounded below by the plateau
    for (int k = 1; k < 4; ++k) {
        CHECK(res.s_overall(0, k) <= res.s_overall(0, k - 1) + 1e-15);
        CHECK(res.s_overall(0, k) >= 1.0 - pi - 1e-15);
    }
}

TEST_CASE("predict_subjects validates horizons and dimensions") {
    CureModelFit fit;
    fit.alpha = VectorXd::Zero(1);
    fit.beta = VectorXd::Zero(0);
    fit.psi = VectorXd::Zero(1);
    VectorXd x = VectorXd::Zero(1), z = VectorXd::Zero(1);
    CHECK_THROWS_AS(predict_subject(fit, x, z, {-1.0}), DataError);
    VectorXd z_bad = VectorXd::Zero(2);
    CHECK_THROWS_AS(predict_subject(fit, x, z_bad, {1.0}), DataError);
}

TEST_CASE("noiseless balanced histories rank identically under LOCF and BLUP values") {
    // trajectories with the final value at the landmark and no noise: the
    // subject ordering induced by the latency predictor is the same whether
    // the summary is the last value or the fitted value at the landmark
    RngStream rng(61);
    LandmarkDataset lm;
    lm.landmark_time = 3.0;
    lm.covariates = {"bio"};
    const int m = 12;
    std::vector<double> b0(m), b1(m);
    for (int i = 0; i < m; ++i) {
        SubjectRow r;
        r.subject_id = "s" + std::to_string(i);
        r.time = 1.0;
        r.event = 1;
        lm.subjects.rows.push_back(r);
        b0[i] = rng.normal();
        b1[i] = 0.6 * rng.normal();
        for (int j = 0; j < 10; ++j) {
            const double t = 3.0 * j / 9.0;
            lm.history.records.push_back({"s" + std::to_string(i), "bio", t, b0[i] + b1[i] * t});
        }
    }
    lm.pre_landmark_counts.assign(m, {10});

    const LmmData slice = covariate_slice(lm, "bio");
    MixedModelSpec spec;
    auto mfit = fit_lmm(slice, spec);
    auto pred = predict_random_effects(mfit, slice);
    auto locf = locf_summary(lm);

    // fitted value at the landmark from the BLUP components
    std::vector<double> blup_value(m), locf_value(m);
    for (int i = 0; i < m; ++i) {
        blup_value[i] = mfit.gamma[0] + mfit.gamma[1] * 3.0 + pred.b(i, 0) + pred.b(i, 1) * 3.0;
        locf_value[i] = locf(i, 0);
    }
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            CHECK((blup_value[i] > blup_value[j]) == (locf_value[i] > locf_value[j]));
}

#include "curemark/serialize.hpp"
#include "helpers.hpp"

TEST_CASE("fit bundles round-trip through JSON") {
    CureModelFit cure;
    cure.alpha0 = 0.4;
    cure.alpha = VectorXd::Constant(2, -0.3);
    cure.beta = VectorXd::Zero(0);
    cure.psi = VectorXd::Constant(2, 0.7);
    cure.baseline.jump_times = {0.5, 1.25};
    cure.baseline.cumulative = {0.2, 0.55};
    cure.posterior_q = VectorXd::Constant(3, 0.5);
    cure.loglik_trace = {-10.0, -9.5};
    cure.iterations = 2;
    cure.converged = true;

    MixedModelFit mm;
    mm.spec = MixedModelSpec{};
    mm.gamma = VectorXd::Constant(2, 1.5);
    mm.sigma_b = Eigen::MatrixXd::Zero(2, 2); // singular covariance round-trips
    mm.sigma_b(0, 0) = 0.9;
    mm.sigma_eps_sq = 0.8;
    mm.reml_loglik = -12.5;
    mm.converged = true;
    mm.boundary = true;

    FitBundle b;
    b.landmark_time = 3.0;
    b.strategy = "blup";
    b.incidence_cols = {"x1", "x2"};
    b.longitudinal_cols = {"y1"};
    b.cure = cure;
    b.mixed = {mm};

    testutil::TempDir td;
    save_fit_bundle(b, td.file("fit.json"));
    const FitBundle r = load_fit_bundle(td.file("fit.json"));
    CHECK(r.strategy == "blup");
    CHECK(r.landmark_time == 3.0);
    CHECK(r.cure.alpha0 == cure.alpha0);
    CHECK((r.cure.psi - cure.psi).lpNorm<Eigen::Infinity>() == 0.0);
    CHECK(r.cure.baseline.jump_times == cure.baseline.jump_times);
    CHECK((r.mixed[0].sigma_b - mm.sigma_b).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(r.mixed[0].boundary);

    // identical predictions from the reloaded bundle
    VectorXd x = VectorXd::Constant(2, 0.3), z = VectorXd::Constant(2, -0.1);
    auto p1 = predict_subject(b.cure, x, z, {1.0, 2.0});
    auto p2 = predict_subject(r.cure, x, z, {1.0, 2.0});
    CHECK((p1.s_overall - p2.s_overall).cwiseAbs().maxCoeff() == 0.0);

    CHECK_THROWS_AS(load_fit_bundle(td.file("missing.json")), DataError);
}
