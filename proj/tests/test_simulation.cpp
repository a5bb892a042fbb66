#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <set>

#include "curemark/simulation.hpp"

using namespace curemark;

TEST_CASE("scenario table matches the twelve-scenario grid") {
    struct Row {
        double cf;
        bool balanced;
        Mechanism mech;
    };
    const Row expected[12] = {
        {0.20, true, Mechanism::strong_locf},
        {0.20, false, Mechanism::strong_locf},
        {0.40, true, Mechanism::strong_locf},
        {0.40, false, Mechanism::strong_locf},
        {0.20, true, Mechanism::mild_current_value},
        {0.20, false, Mechanism::mild_current_value},
        {0.40, true, Mechanism::mild_current_value},
        {0.40, false, Mechanism::mild_current_value},
        {0.20, true, Mechanism::true_random_effects},
        {0.20, false, Mechanism::true_random_effects},
        {0.40, true, Mechanism::true_random_effects},
        {0.40, false, Mechanism::true_random_effects},
    };
    for (int id = 1; id <= 12; ++id) {
        auto s = ScenarioSpec::from_id(id, 300);
        CHECK(s.cure_fraction == expected[id - 1].cf);
        CHECK(s.balanced == expected[id - 1].balanced);
        CHECK(s.mechanism == expected[id - 1].mech);
    }
    CHECK(ScenarioSpec::from_id(1, 300).alpha0() == 2.0);
    CHECK(ScenarioSpec::from_id(3, 300).alpha0() == 0.65);
    CHECK_THROWS_AS(ScenarioSpec::from_id(13, 300), DataError);
    CHECK_THROWS_AS(ScenarioSpec::from_id(0, 300), DataError);
}

TEST_CASE("balanced design has ten measurements per covariate ending at the landmark") {
    auto spec = ScenarioSpec::from_id(1, 40);
    auto [train, valid] = generate_dataset(spec, 0, 7);
    std::map<std::pair<std::string, std::string>, std::vector<double>> times;
    for (const auto& r : train.longitudinal.records)
        times[{r.subject_id, r.covariate}].push_back(r.time);
    CHECK(times.size() == 40u * 4u);
    for (auto& [key, ts] : times) {
        CHECK(ts.size() == 10);
        CHECK(ts.front() == 0.0);
        CHECK(ts.back() == 3.0);
    }
}

TEST_CASE("unbalanced design keeps the baseline time and five to ten points") {
    auto spec = ScenarioSpec::from_id(2, 60);
    auto [train, valid] = generate_dataset(spec, 1, 11);
    std::map<std::string, std::set<double>> times; // per subject, shared across covariates
    std::map<std::pair<std::string, std::string>, int> counts;
    for (const auto& r : train.longitudinal.records) {
        times[r.subject_id].insert(r.time);
        counts[{r.subject_id, r.covariate}] += 1;
    }
    bool any_deleted = false;
    for (auto& [sid, ts] : times) {
        CHECK(ts.count(0.0) == 1);
        CHECK(ts.size() >= 5);
        CHECK(ts.size() <= 10);
        if (ts.size() < 10) any_deleted = true;
    }
    CHECK(any_deleted);
    for (auto& [key, n] : counts) CHECK(n == static_cast<int>(times[key.first].size()));
}

TEST_CASE("generation is reproducible and train/validation streams differ") {
    auto spec = ScenarioSpec::from_id(9, 25);
    auto [t1, v1] = generate_dataset(spec, 3, 123);
    auto [t2, v2] = generate_dataset(spec, 3, 123);
    REQUIRE(t1.subjects.rows.size() == t2.subjects.rows.size());
    for (std::size_t i = 0; i < t1.subjects.rows.size(); ++i) {
        CHECK(t1.subjects.rows[i].time == t2.subjects.rows[i].time);
        CHECK(t1.subjects.rows[i].event == t2.subjects.rows[i].event);
        CHECK(t1.subjects.rows[i].x == t2.subjects.rows[i].x);
    }
    REQUIRE(t1.longitudinal.records.size() == t2.longitudinal.records.size());
    for (std::size_t k = 0; k < t1.longitudinal.records.size(); ++k)
        CHECK(t1.longitudinal.records[k].value == t2.longitudinal.records[k].value);

    auto [t3, v3] = generate_dataset(spec, 4, 123);
    CHECK(t1.subjects.rows[0].x != t3.subjects.rows[0].x);
    CHECK(t1.subjects.rows[0].x != v1.subjects.rows[0].x);
}

TEST_CASE("train and validation draws are uncorrelated") {
    auto spec = ScenarioSpec::from_id(1, 1);
    const int reps = 4000;
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (int r = 0; r < reps; ++r) {
        auto [train, valid] = generate_dataset(spec, r, 99);
        const double a = train.subjects.rows[0].x[0];
        const double b = valid.subjects.rows[0].x[0];
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    const double corr = (sxy - sx * sy / reps) /
                        std::sqrt((sxx - sx * sx / reps) * (syy - sy * sy / reps));
    CHECK(std::abs(corr) < 0.05);
}

TEST_CASE("cured subjects are never observed with events") {
    auto spec = ScenarioSpec::from_id(3, 400);
    auto [train, valid] = generate_dataset(spec, 0, 5);
    for (std::size_t i = 0; i < train.subjects.rows.size(); ++i) {
        if (train.truth[i].uncured == 0) {
            CHECK(train.subjects.rows[i].event == 0);
            CHECK(std::isinf(train.truth[i].true_event_time));
        }
        CHECK(train.subjects.rows[i].time > 3.0);
        CHECK(std::isfinite(train.subjects.rows[i].time));
    }
}

TEST_CASE("mechanism summaries evaluate their defining formulas") {
    std::array<double, 4> b0 = {1.0, 0.2, -0.3, 0.0};
    std::array<double, 4> b1 = {0.5, -0.1, 0.2, 0.0};
    std::array<std::array<double, 10>, 4> meas{};
    for (int l = 0; l < 4; ++l)
        for (int j = 0; j < 10; ++j)
            meas[l][j] = b0[l] + b1[l] * sim_constants::balanced_time(j) + 0.01 * (l + j);

    auto strong = latency_summary_for_mechanism(Mechanism::strong_locf, b0, b1, meas);
    for (int l = 0; l < 4; ++l) CHECK(strong[l] == meas[l][9]); // value at t = 3 exactly

    auto mild = latency_summary_for_mechanism(Mechanism::mild_current_value, b0, b1, meas);
    CHECK(mild[0] == Catch::Approx(1.0 + 0.5 * 3.0).epsilon(1e-15)); // 2.5

    std::array<double, 4> zero{};
    auto truth = latency_summary_for_mechanism(Mechanism::true_random_effects, zero, zero, meas);
    for (int l = 0; l < 4; ++l) CHECK(truth[l] == 0.0);
}

TEST_CASE("Weibull sampler reduces to the exponential at shape one") {
    RngStream rng(77);
    const int n = 1000000;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += sample_event_time(0.0, 1.0, 2.0, rng);
    CHECK(std::abs(acc / n - 2.0) < 0.01); // mean = scale, within 0.5%

    double acc2 = 0.0;
    for (int i = 0; i < n; ++i) acc2 += sample_event_time(std::log(2.0), 1.0, 2.0, rng);
    CHECK(std::abs(acc2 / n - 1.0) < 0.005); // hazard doubles, mean halves
}

TEST_CASE("Weibull sampler's empirical survival matches the closed form") {
    RngStream rng(79);
    const int n = 100000;
    const double eta = 0.3, shape = 1.5, scale = 2.5;
    std::vector<double> draws(n);
    for (int i = 0; i < n; ++i) draws[i] = sample_event_time(eta, shape, scale, rng);
    for (double t : {0.5, 1.0, 2.0, 3.0, 5.0}) {
        int alive = 0;
        for (double d : draws)
            if (d > t) ++alive;
        const double s_hat = static_cast<double>(alive) / n;
        const double s_true = std::exp(-std::pow(t / scale, shape) * std::exp(eta));
        CHECK(std::abs(s_hat - s_true) < 0.01);
    }
}

TEST_CASE("empirical cure fraction matches the generating logistic-normal integral",
          "[slow]") {
    // E[1 - logistic(alpha0 + a'X)] with a'X ~ N(0, 2): quadrature gives
    // 0.18394 at alpha0 = 2 and 0.38380 at alpha0 = 0.65
    for (auto [id, expected] : {std::pair<int, double>{1, 0.183940},
                                std::pair<int, double>{3, 0.383802}}) {
        auto spec = ScenarioSpec::from_id(id, 100000);
        auto [train, valid] = generate_dataset(spec, 0, 2024);
        double cured = 0.0;
        for (const auto& t : train.truth) cured += t.uncured == 0 ? 1.0 : 0.0;
        CHECK(std::abs(cured / spec.m - expected) < 0.01);
    }
}

TEST_CASE("calibration hits the event and censoring targets", "[slow]") {
    auto spec = ScenarioSpec::from_id(9, 100000);
    auto [train, valid] = generate_dataset(spec, 0, 31337);
    int uncured = 0, events_in_horizon = 0, censor_preempt = 0;
    for (std::size_t i = 0; i < train.truth.size(); ++i) {
        if (train.truth[i].uncured != 1) continue;
        ++uncured;
        if (train.truth[i].true_event_time <= 3.0 + 10.0) ++events_in_horizon;
        if (train.subjects.rows[i].event == 0) ++censor_preempt;
    }
    CHECK(std::abs(static_cast<double>(events_in_horizon) / uncured - 0.70) < 0.01);
    CHECK(std::abs(static_cast<double>(censor_preempt) / uncured - 0.25) < 0.01);
}
