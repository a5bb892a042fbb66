#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <thread>
#include <vector>

#include "curemark/mixed_model.hpp"
#include "curemark/optim.hpp"
#include "curemark/rng.hpp"

using namespace curemark;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

LmmData make_subject_grid(int m, int n_times, double t_max,
                          const std::function<double(int, double, RngStream&)>& value_fn,
                          RngStream& rng) {
    LmmData data;
    data.subjects.resize(m);
    for (int i = 0; i < m; ++i) {
        auto& s = data.subjects[i];
        s.subject_id = "s" + std::to_string(i);
        s.times.resize(n_times);
        s.values.resize(n_times);
        for (int j = 0; j < n_times; ++j) {
            const double t = n_times == 1 ? 0.0 : t_max * j / (n_times - 1);
            s.times[j] = t;
            s.values[j] = value_fn(i, t, rng);
        }
    }
    return data;
}

// Independent REML evaluator used only as a test oracle: builds each
// subject's marginal covariance densely and computes the restricted
// log-likelihood from first principles.
double oracle_reml(const LmmData& data, const MixedModelSpec& spec,
                   const MatrixXd& sigma_b, double sigma2) {
    const int p = spec.p_fixed();
    MatrixXd sww = MatrixXd::Zero(p, p);
    VectorXd swy = VectorXd::Zero(p);
    double logdet = 0.0;
    int n_total = 0;
    std::vector<MatrixXd> lambdas, ws;
    std::vector<VectorXd> ys;
    for (const auto& s : data.subjects) {
        const int n = static_cast<int>(s.times.size());
        n_total += n;
        MatrixXd W(n, p), V(n, spec.p_random());
        for (int j = 0; j < n; ++j) {
            double tp = 1.0;
            for (int d = 0; d <= spec.fixed_time_degree; ++d) {
                W(j, d) = tp;
                tp *= s.times[j];
            }
            tp = 1.0;
            for (int d = 0; d <= spec.random_time_degree; ++d) {
                V(j, d) = tp;
                tp *= s.times[j];
            }
        }
        MatrixXd lambda = V * sigma_b * V.transpose() + sigma2 * MatrixXd::Identity(n, n);
        Eigen::LLT<MatrixXd> llt(lambda);
        if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
        logdet += 2.0 * MatrixXd(llt.matrixL()).diagonal().array().log().sum();
        sww += W.transpose() * llt.solve(W);
        swy += W.transpose() * llt.solve(s.values);
        lambdas.push_back(lambda);
        ws.push_back(W);
        ys.push_back(s.values);
    }
    Eigen::LLT<MatrixXd> lltS(sww);
    const VectorXd gamma = lltS.solve(swy);
    double quad = 0.0;
    for (std::size_t i = 0; i < lambdas.size(); ++i) {
        const VectorXd r = ys[i] - ws[i] * gamma;
        quad += r.dot(lambdas[i].llt().solve(r));
    }
    const double logdet_sww = 2.0 * MatrixXd(lltS.matrixL()).diagonal().array().log().sum();
    return -0.5 * (logdet + logdet_sww + quad +
                   (n_total - p) * std::log(2.0 * std::numbers::pi));
}

} // namespace

TEST_CASE("fit_lmm degenerates cleanly on noiseless common lines") {
    RngStream rng(1);
    auto data = make_subject_grid(6, 5, 3.0,
                                  [](int, double t, RngStream&) { return 2.0 + 1.0 * t; }, rng);
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);
    CHECK(fit.gamma[0] == Catch::Approx(2.0).margin(1e-6));
    CHECK(fit.gamma[1] == Catch::Approx(1.0).margin(1e-6));
    CHECK(fit.sigma_eps_sq == Catch::Approx(0.0).margin(1e-6));
    CHECK(fit.sigma_b.cwiseAbs().maxCoeff() == Catch::Approx(0.0).margin(1e-6));
    CHECK(fit.boundary);
}

TEST_CASE("fit_lmm matches the dense grid+refine REML oracle") {
    RngStream rng(42);
    // 5 subjects, 4 timepoints, random intercept + slope truth
    LmmData data;
    data.subjects.resize(5);
    for (int i = 0; i < 5; ++i) {
        auto& s = data.subjects[i];
        s.subject_id = "s" + std::to_string(i);
        s.times.resize(4);
        s.values.resize(4);
        const double b0 = 0.9 * rng.normal();
        const double b1 = 0.5 * rng.normal();
        for (int j = 0; j < 4; ++j) {
            s.times[j] = j;
            s.values[j] = 1.0 + 0.5 * j + b0 + b1 * j + 0.4 * rng.normal();
        }
    }
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);

    // oracle: coarse grid over (log s00, log s11, atanh rho, log s2), then
    // simplex refinement of the dense REML criterion
    auto crit = [&](const VectorXd& par) {
        const double s00 = std::exp(par[0]);
        const double s11 = std::exp(par[1]);
        const double rho = std::tanh(par[2]);
        MatrixXd sb(2, 2);
        sb << s00, rho * std::sqrt(s00 * s11), rho * std::sqrt(s00 * s11), s11;
        return -oracle_reml(data, spec, sb, std::exp(par[3]));
    };
    VectorXd best(4);
    double best_val = std::numeric_limits<double>::infinity();
    for (double l0 : {-3.0, -1.5, 0.0, 1.5})
        for (double l1 : {-3.0, -1.5, 0.0, 1.5})
            for (double ar : {-1.0, 0.0, 1.0})
                for (double l2 : {-3.0, -1.5, 0.0, 1.5}) {
                    VectorXd p(4);
                    p << l0, l1, ar, l2;
                    const double v = crit(p);
                    if (v < best_val) {
                        best_val = v;
                        best = p;
                    }
                }
    auto refined = optim::minimize_simplex(crit, best, 0.4, 4000, 1e-13);
    const double oracle_loglik = -refined.value;

    CHECK(fit.reml_loglik == Catch::Approx(oracle_loglik).epsilon(1e-3));
    const double s00 = std::exp(refined.x[0]);
    const double s11 = std::exp(refined.x[1]);
    const double s2 = std::exp(refined.x[3]);
    CHECK(fit.sigma_b(0, 0) == Catch::Approx(s00).epsilon(5e-3).margin(1e-4));
    CHECK(fit.sigma_b(1, 1) == Catch::Approx(s11).epsilon(5e-3).margin(1e-4));
    CHECK(fit.sigma_eps_sq == Catch::Approx(s2).epsilon(5e-3).margin(1e-4));
}

TEST_CASE("fit reproduces its stored REML criterion on re-evaluation") {
    RngStream rng(7);
    auto data = make_subject_grid(12, 6, 3.0,
                                  [](int i, double t, RngStream& r) {
                                      return 1.0 + 0.3 * t + 0.8 * (i % 3) + 0.5 * r.normal();
                                  },
                                  rng);
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);
    const double reeval = reml_loglik_at(data, spec, fit.sigma_b, fit.sigma_eps_sq);
    CHECK(std::abs(reeval - fit.reml_loglik) < 1e-10 * (1.0 + std::abs(fit.reml_loglik)));
}

TEST_CASE("REML criterion trace is monotone non-decreasing") {
    RngStream rng(11);
    auto data = make_subject_grid(20, 5, 3.0,
                                  [](int, double t, RngStream& r) {
                                      return 0.5 + 0.2 * t + r.normal() + 0.3 * t * r.normal();
                                  },
                                  rng);
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);
    for (std::size_t k = 1; k < fit.criterion_trace.size(); ++k)
        CHECK(fit.criterion_trace[k] >= fit.criterion_trace[k - 1] - 1e-12);
}

TEST_CASE("fit_lmm recovers simulation variance components", "[slow]") {
    // trajectories with intercept variance 1, slope variance 0.7, residual 1
    const int reps = 200;
    const int m = 1000;
    std::vector<double> s00(reps), s11(reps), se(reps);
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (unsigned w = 0; w < hw; ++w)
        pool.emplace_back([&]() {
            for (int r; (r = next.fetch_add(1)) < reps;) {
                RngStream rng(1000 + r);
                auto data = make_subject_grid(
                    m, 10, 3.0,
                    [](int, double, RngStream&) { return 0.0; }, rng);
                for (auto& s : data.subjects) {
                    const double b0 = rng.normal();
                    const double b1 = std::sqrt(0.7) * rng.normal();
                    for (int j = 0; j < s.times.size(); ++j)
                        s.values[j] = b0 + b1 * s.times[j] + rng.normal();
                }
                MixedModelSpec spec;
                auto fit = fit_lmm(data, spec);
                s00[r] = fit.sigma_b(0, 0);
                s11[r] = fit.sigma_b(1, 1);
                se[r] = fit.sigma_eps_sq;
            }
        });
    for (auto& t : pool) t.join();

    auto check_interval = [&](const std::vector<double>& v, double truth) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= reps;
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= (reps - 1);
        const double half = 1.96 * std::sqrt(var / reps);
        INFO("mean " << mean << " +- " << half << " vs " << truth);
        CHECK(std::abs(mean - truth) <= half + 1e-12);
    };
    check_interval(s00, 1.0);
    check_interval(s11, 0.7);
    check_interval(se, 1.0);
}

TEST_CASE("PQL with identity link delegates to the LMM") {
    RngStream rng(5);
    auto data = make_subject_grid(10, 5, 3.0,
                                  [](int, double t, RngStream& r) {
                                      return 1.0 + t + r.normal();
                                  },
                                  rng);
    MixedModelSpec spec;
    auto f1 = fit_lmm(data, spec);
    auto f2 = fit_glmm_pql(data, spec);
    CHECK((f1.gamma - f2.gamma).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((f1.sigma_b - f2.sigma_b).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(f1.sigma_eps_sq == f2.sigma_eps_sq);
}

TEST_CASE("PQL flags boundary or damping when logit responses separate") {
    RngStream rng(9);
    auto data = make_subject_grid(8, 6, 3.0,
                                  [](int, double, RngStream&) { return 0.0; }, rng);
    MixedModelSpec spec;
    spec.link = Link::logit;
    auto fit = fit_glmm_pql(data, spec);
    CHECK(fit.damped);
}

TEST_CASE("PQL recovers Poisson GLMM fixed effects", "[slow]") {
    const int reps = 200;
    const int m = 500;
    std::vector<double> g0(reps), g1(reps);
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    std::vector<std::thread> pool;
    std::atomic<int> next{0};
    for (unsigned w = 0; w < hw; ++w)
        pool.emplace_back([&]() {
            for (int r; (r = next.fetch_add(1)) < reps;) {
                RngStream rng(5000 + r);
                LmmData data;
                data.subjects.resize(m);
                for (int i = 0; i < m; ++i) {
                    auto& s = data.subjects[i];
                    s.subject_id = "s" + std::to_string(i);
                    s.times.resize(5);
                    s.values.resize(5);
                    const double b0 = 0.25 * rng.normal();
                    for (int j = 0; j < 5; ++j) {
                        s.times[j] = j;
                        const double mu = std::exp(3.0 + 0.15 * j + b0);
                        // poisson draw by inversion
                        double u = rng.uniform();
                        double p = std::exp(-mu), cdf = p;
                        int k = 0;
                        while (u > cdf && k < 10000) {
                            ++k;
                            p *= mu / k;
                            cdf += p;
                        }
                        s.values[j] = k;
                    }
                }
                MixedModelSpec spec;
                spec.link = Link::log;
                spec.random_time_degree = 0;
                auto fit = fit_glmm_pql(data, spec);
                g0[r] = fit.gamma[0];
                g1[r] = fit.gamma[1];
            }
        });
    for (auto& t : pool) t.join();

    auto summarize = [&](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= reps;
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        var /= (reps - 1);
        return std::pair<double, double>(mean, std::sqrt(var / reps));
    };
    auto [m0, se0] = summarize(g0);
    auto [m1, se1] = summarize(g1);
    INFO("gamma0 " << m0 << " se " << se0 << ", gamma1 " << m1 << " se " << se1);
    CHECK(std::abs(m0 - 3.0) <= std::max(3.0 * se0, 5e-3));
    CHECK(std::abs(m1 - 0.15) <= std::max(3.0 * se1, 5e-3));
}

TEST_CASE("BLUP trivial cases") {
    // zero residuals give zero effects
    RngStream rng(3);
    auto data = make_subject_grid(4, 4, 3.0,
                                  [](int, double t, RngStream&) { return 1.0 + 2.0 * t; }, rng);
    MixedModelSpec spec;
    MixedModelFit fit;
    fit.spec = spec;
    fit.gamma = VectorXd(2);
    fit.gamma << 1.0, 2.0;
    fit.sigma_b = MatrixXd::Identity(2, 2);
    fit.sigma_eps_sq = 1.0;
    auto pred = predict_random_effects(fit, data);
    CHECK(pred.b.cwiseAbs().maxCoeff() < 1e-12);

    // sigma_b = 0 shrinks everything to zero
    fit.sigma_b = MatrixXd::Zero(2, 2);
    auto data2 = make_subject_grid(4, 4, 3.0,
                                   [](int i, double t, RngStream&) { return i + t; }, rng);
    auto pred2 = predict_random_effects(fit, data2);
    CHECK(pred2.b.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("BLUP matches the scalar hand computation") {
    // single observation, random intercept: sigma_b = 1, sigma2 = 1,
    // V = 1, residual 2 -> bhat = 1 * (1+1)^-1 * 2 = 1
    LmmData data;
    data.subjects.resize(1);
    data.subjects[0].subject_id = "s0";
    data.subjects[0].times = VectorXd::Zero(1);
    data.subjects[0].values = VectorXd::Constant(1, 2.0);
    MixedModelSpec spec;
    spec.fixed_time_degree = 0;
    spec.random_time_degree = 0;
    MixedModelFit fit;
    fit.spec = spec;
    fit.gamma = VectorXd::Zero(1);
    fit.sigma_b = MatrixXd::Identity(1, 1);
    fit.sigma_eps_sq = 1.0;
    auto pred = predict_random_effects(fit, data);
    CHECK(pred.b(0, 0) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("BLUP equals the joint-density maximizer") {
    RngStream rng(17);
    LmmData data;
    data.subjects.resize(2);
    for (int i = 0; i < 2; ++i) {
        auto& s = data.subjects[i];
        s.subject_id = "s" + std::to_string(i);
        s.times.resize(5);
        s.values.resize(5);
        for (int j = 0; j < 5; ++j) {
            s.times[j] = 0.6 * j;
            s.values[j] = 0.5 + 0.4 * j + rng.normal();
        }
    }
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);
    auto pred = predict_random_effects(fit, data);

    for (int i = 0; i < 2; ++i) {
        const auto& s = data.subjects[i];
        MatrixXd W(5, 2), V(5, 2);
        for (int j = 0; j < 5; ++j) {
            W(j, 0) = 1.0;
            W(j, 1) = s.times[j];
            V(j, 0) = 1.0;
            V(j, 1) = s.times[j];
        }
        Eigen::LDLT<MatrixXd> prior(fit.sigma_b);
        auto negjoint = [&](const VectorXd& b) {
            const VectorXd r = s.values - W * fit.gamma - V * b;
            return 0.5 * r.squaredNorm() / fit.sigma_eps_sq + 0.5 * b.dot(prior.solve(b));
        };
        auto opt = optim::minimize_simplex(negjoint, VectorXd::Zero(2), 0.5, 4000, 1e-14);
        CHECK((opt.x - pred.b.row(i).transpose()).lpNorm<Eigen::Infinity>() < 1e-6);
    }
}

TEST_CASE("random-intercept shrinkage never exceeds the raw subject mean residual") {
    RngStream rng(23);
    LmmData data;
    data.subjects.resize(15);
    for (int i = 0; i < 15; ++i) {
        auto& s = data.subjects[i];
        s.subject_id = "s" + std::to_string(i);
        const int n = 3 + (i % 4);
        s.times.resize(n);
        s.values.resize(n);
        const double b0 = 1.2 * rng.normal();
        for (int j = 0; j < n; ++j) {
            s.times[j] = j;
            s.values[j] = 2.0 + b0 + 0.7 * rng.normal();
        }
    }
    MixedModelSpec spec;
    spec.fixed_time_degree = 0;
    spec.random_time_degree = 0;
    auto fit = fit_lmm(data, spec);
    auto pred = predict_random_effects(fit, data);
    for (int i = 0; i < 15; ++i) {
        const auto& s = data.subjects[i];
        const double mean_resid = (s.values.array() - fit.gamma[0]).mean();
        CHECK(std::abs(pred.b(i, 0)) <= std::abs(mean_resid) + 1e-12);
    }
}

TEST_CASE("GLS estimating equation holds at the REML optimum") {
    RngStream rng(29);
    auto data = make_subject_grid(25, 6, 3.0,
                                  [](int, double t, RngStream& r) {
                                      return 1.0 + 0.5 * t + 0.8 * r.normal();
                                  },
                                  rng);
    for (auto& s : data.subjects) {
        const double b0 = rng.normal();
        const double b1 = 0.4 * rng.normal();
        for (int j = 0; j < s.times.size(); ++j) s.values[j] += b0 + b1 * s.times[j];
    }
    MixedModelSpec spec;
    auto fit = fit_lmm(data, spec);

    // sum over subjects of V' Lambda^-1 (y - W gamma) vanishes when V = W
    VectorXd score = VectorXd::Zero(2);
    for (const auto& s : data.subjects) {
        const int n = static_cast<int>(s.times.size());
        MatrixXd V(n, 2);
        for (int j = 0; j < n; ++j) {
            V(j, 0) = 1.0;
            V(j, 1) = s.times[j];
        }
        MatrixXd lambda = V * fit.sigma_b * V.transpose() +
                          fit.sigma_eps_sq * MatrixXd::Identity(n, n);
        const VectorXd r = s.values - V * fit.gamma;
        score += V.transpose() * lambda.llt().solve(r);
    }
    CHECK(score.lpNorm<Eigen::Infinity>() < 1e-8);

    // consequently the BLUPs sum to zero componentwise
    auto pred = predict_random_effects(fit, data);
    CHECK(pred.b.colwise().sum().lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("fit_lmm validates its inputs") {
    LmmData data;
    data.subjects.resize(1);
    data.subjects[0].subject_id = "s0";
    data.subjects[0].times = VectorXd::Zero(1);
    data.subjects[0].values = VectorXd::Zero(1);
    MixedModelSpec spec;
    CHECK_THROWS_AS(fit_lmm(data, spec), DataError); // 1 observation vs 2 fixed columns

    MixedModelSpec bad;
    bad.random_time_degree = 2;
    bad.fixed_time_degree = 1;
    CHECK_THROWS_AS(bad.validate(), DataError);
}

TEST_CASE("baseline covariates enter the fixed design") {
    RngStream rng(83);
    LmmData data;
    data.subjects.resize(40);
    for (int i = 0; i < 40; ++i) {
        auto& s = data.subjects[i];
        s.subject_id = "s" + std::to_string(i);
        s.baseline = VectorXd::Constant(1, rng.normal());
        const int n = 5;
        s.times.resize(n);
        s.values.resize(n);
        const double b0 = 0.5 * rng.normal();
        for (int j = 0; j < n; ++j) {
            s.times[j] = j;
            s.values[j] = 2.0 + 0.8 * j + 3.0 * s.baseline[0] + b0 + 0.3 * rng.normal();
        }
    }
    MixedModelSpec spec;
    spec.random_time_degree = 0;
    spec.n_baseline = 1;
    auto fit = fit_lmm(data, spec);
    REQUIRE(fit.gamma.size() == 3);
    CHECK(fit.gamma[0] == Catch::Approx(2.0).margin(0.2));
    CHECK(fit.gamma[1] == Catch::Approx(0.8).margin(0.05));
    CHECK(fit.gamma[2] == Catch::Approx(3.0).margin(0.15));
}
