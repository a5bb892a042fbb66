#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "curemark/data.hpp"
#include "curemark/errors.hpp"
#include "curemark/rng.hpp"

namespace curemark {

// Latency data-generating mechanisms: the hazard depends on the last noisy
// measurement (strong misspecification of the model-based fit), the noiseless
// current value at the landmark (mild), or the random effects themselves
// (correct specification).
enum class Mechanism { strong_locf, mild_current_value, true_random_effects };

inline std::string mechanism_name(Mechanism m) {
    switch (m) {
        case Mechanism::strong_locf: return "strong_locf";
        case Mechanism::mild_current_value: return "mild_current_value";
        case Mechanism::true_random_effects: return "true_random_effects";
    }
    return "strong_locf";
}

namespace sim_constants {

constexpr int n_covariates = 4;          // both time-invariant and time-varying
constexpr int n_balanced_times = 10;     // equispaced on [0, landmark]
constexpr double landmark = 3.0;
constexpr double intercept_sd = 1.0;     // b0 ~ N(0, 1)
constexpr double slope_sd = 0.83666002653407555;   // b1 ~ N(0, 0.7)
constexpr double noise_sd = 1.0;         // measurement noise
constexpr double weibull_shape = 1.75;
constexpr double calibration_horizon = 10.0;
constexpr double target_event_fraction = 0.70;  // uncured events inside the horizon
constexpr double target_censor_fraction = 0.25; // censoring preempting uncured events
// Administrative follow-up ends at the 99% quantile of the uncured event-time
// distribution. Nearly every uncured subject fails inside follow-up, so the
// censored pile at the cutoff is almost purely cured: the IPCW cure-status
// proxy stays clean. An earlier cutoff floods the proxy with uncured
// survivors; no cutoff leaves it to a handful of extreme censoring times.
constexpr double cutoff_event_quantile = 0.99;
constexpr std::array<double, 4> incidence_coef = {-1.0, 0.0, 1.0, 0.0};
constexpr std::array<double, 4> latency_coef = {1.0, 0.0, -1.0, 0.0};

inline double alpha0_for_cure_fraction(double cure_fraction) {
    if (cure_fraction == 0.20) return 2.0;
    if (cure_fraction == 0.40) return 0.65;
    throw DataError("cure fraction must be 0.20 or 0.40");
}

inline double balanced_time(int j) {
    return landmark * j / (n_balanced_times - 1);
}

} // namespace sim_constants

// One of the twelve Table-style scenarios plus run parameters.
struct ScenarioSpec {
    int scenario_id = 1;
    double cure_fraction = 0.20;
    bool balanced = true;
    Mechanism mechanism = Mechanism::strong_locf;
    int m = 300;
    double landmark_time = sim_constants::landmark;

    static ScenarioSpec from_id(int id, int m) {
        if (id < 1 || id > 12) throw DataError("scenario id must lie in 1..12");
        ScenarioSpec s;
        s.scenario_id = id;
        s.m = m;
        const int block = (id - 1) / 4; // 0 strong, 1 mild, 2 true
        s.mechanism = block == 0   ? Mechanism::strong_locf
                      : block == 1 ? Mechanism::mild_current_value
                                   : Mechanism::true_random_effects;
        const int within = (id - 1) % 4;
        s.cure_fraction = within < 2 ? 0.20 : 0.40;
        s.balanced = within % 2 == 0;
        return s;
    }

    double alpha0() const { return sim_constants::alpha0_for_cure_fraction(cure_fraction); }
};

// Latent per-subject state kept for diagnostics; never consumed by fitting.
struct SubjectTruth {
    int uncured = 0; // G
    std::array<double, 4> b0{};
    std::array<double, 4> b1{};
    std::array<double, 4> gen_summary{}; // mechanism-specific latency covariates
    double true_event_time = std::numeric_limits<double>::infinity(); // absolute scale
};

struct GeneratedDataset {
    LongitudinalDataset longitudinal;
    SubjectTable subjects;
    std::vector<SubjectTruth> truth;
};

// Inverse-transform sample from the proportional-hazards Weibull:
// S(t) = exp(-(t/scale)^shape * exp(eta)).
inline double sample_event_time(double eta, double shape, double scale, RngStream& rng) {
    return scale * std::pow(rng.exponential(1.0) / std::exp(eta), 1.0 / shape);
}

// Mechanism-specific 4-vector of generating latency covariates. The full
// (pre-deletion) measurement schedule is used: deletion is an observation
// process applied afterwards.
inline std::array<double, 4> latency_summary_for_mechanism(
    Mechanism mechanism, const std::array<double, 4>& b0, const std::array<double, 4>& b1,
    const std::array<std::array<double, sim_constants::n_balanced_times>, 4>& measurements) {
    using namespace sim_constants;
    std::array<double, 4> s{};
    for (int l = 0; l < n_covariates; ++l) {
        switch (mechanism) {
            case Mechanism::strong_locf:
                s[l] = measurements[l][n_balanced_times - 1]; // noisy value at the landmark
                break;
            case Mechanism::mild_current_value:
                s[l] = b0[l] + b1[l] * landmark;
                break;
            case Mechanism::true_random_effects:
                s[l] = b0[l] + b1[l];
                break;
        }
    }
    return s;
}

namespace sim_detail {

struct Calibration {
    double weibull_scale = 1.0;
    double censor_rate = 0.1;
    double admin_cutoff = 0.0; // post-landmark follow-up end
};

// Pilot-based calibration of the Weibull scale (so ~70% of uncured subjects
// fail inside the follow-up window) and of the exponential censoring rate
// (so ~25% of uncured subjects are censored before their outcome). Both are
// deterministic: the pilot stream has a fixed internal seed.
inline Calibration calibrate(Mechanism mechanism, double cure_fraction) {
    using namespace sim_constants;
    static std::map<std::pair<int, int>, Calibration> cache;
    static std::mutex mu;
    const auto key = std::make_pair(static_cast<int>(mechanism),
                                    static_cast<int>(std::lround(cure_fraction * 100)));
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;

    const int pilot_n = 100000;
    RngStream rng = RngStream(0x5150u).child(
        {static_cast<std::uint64_t>(key.first), static_cast<std::uint64_t>(key.second)});
    std::vector<double> eta(pilot_n);
    std::vector<double> exp1(pilot_n);
    for (int i = 0; i < pilot_n; ++i) {
        std::array<double, 4> b0, b1;
        std::array<std::array<double, n_balanced_times>, 4> meas;
        for (int l = 0; l < n_covariates; ++l) {
            b0[l] = intercept_sd * rng.normal();
            b1[l] = slope_sd * rng.normal();
            for (int j = 0; j < n_balanced_times; ++j)
                meas[l][j] = b0[l] + b1[l] * balanced_time(j) + noise_sd * rng.normal();
        }
        const auto s = latency_summary_for_mechanism(mechanism, b0, b1, meas);
        double e = 0.0;
        for (int l = 0; l < n_covariates; ++l) e += latency_coef[l] * s[l];
        eta[i] = e;
        exp1[i] = rng.exponential(1.0);
    }

    // P(T <= horizon) = E[1 - exp(-exp(eta) (horizon/scale)^shape)], decreasing in scale
    auto event_fraction = [&](double scale) {
        const double base = std::pow(calibration_horizon / scale, weibull_shape);
        double acc = 0.0;
        for (double e : eta) acc += 1.0 - std::exp(-std::exp(e) * base);
        return acc / pilot_n;
    };
    double lo = 1e-3, hi = 1e3;
    for (int it = 0; it < 200; ++it) {
        const double mid = std::sqrt(lo * hi);
        (event_fraction(mid) > target_event_fraction ? lo : hi) = mid;
    }
    Calibration cal;
    cal.weibull_scale = std::sqrt(lo * hi);

    // follow-up cutoff at the upper quantile of realized event times
    std::vector<double> draws(pilot_n);
    for (int i = 0; i < pilot_n; ++i)
        draws[i] = cal.weibull_scale *
                   std::pow(exp1[i] / std::exp(eta[i]), 1.0 / weibull_shape);
    {
        std::vector<double> sorted = draws;
        std::sort(sorted.begin(), sorted.end());
        cal.admin_cutoff =
            sorted[static_cast<std::size_t>(cutoff_event_quantile * (pilot_n - 1))];
    }

    // censoring rate against the truncated outcome horizon
    std::vector<double> horizon(pilot_n);
    for (int i = 0; i < pilot_n; ++i) horizon[i] = std::min(draws[i], cal.admin_cutoff);
    auto censor_fraction = [&](double rate) {
        double acc = 0.0;
        for (double h : horizon) acc += 1.0 - std::exp(-rate * h);
        return acc / pilot_n;
    };
    double rlo = 1e-6, rhi = 10.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = std::sqrt(rlo * rhi);
        (censor_fraction(mid) < target_censor_fraction ? rlo : rhi) = mid;
    }
    cal.censor_rate = std::sqrt(rlo * rhi);

    cache.emplace(key, cal);
    return cal;
}

} // namespace sim_detail

// Generate one dataset (train or validation role is just a stream tag).
inline GeneratedDataset generate_one(const ScenarioSpec& spec, RngStream rng) {
    using namespace sim_constants;
    const auto cal = sim_detail::calibrate(spec.mechanism, spec.cure_fraction);
    const double alpha0 = spec.alpha0();

    GeneratedDataset out;
    out.subjects.x_names = {"x1", "x2", "x3", "x4"};
    out.subjects.rows.reserve(spec.m);
    out.truth.reserve(spec.m);

    for (int i = 0; i < spec.m; ++i) {
        SubjectRow row;
        row.subject_id = "s" + std::to_string(i + 1);
        SubjectTruth truth;

        // baseline covariates and latent cure status
        row.x.resize(n_covariates);
        double eta_inc = alpha0;
        for (int l = 0; l < n_covariates; ++l) {
            row.x[l] = rng.normal();
            eta_inc += incidence_coef[l] * row.x[l];
        }
        truth.uncured = rng.uniform() < 1.0 / (1.0 + std::exp(-eta_inc)) ? 1 : 0;

        // longitudinal trajectories on the full balanced schedule
        std::array<double, 4> b0, b1;
        std::array<std::array<double, n_balanced_times>, 4> meas;
        for (int l = 0; l < n_covariates; ++l) {
            b0[l] = intercept_sd * rng.normal();
            b1[l] = slope_sd * rng.normal();
            for (int j = 0; j < n_balanced_times; ++j)
                meas[l][j] = b0[l] + b1[l] * balanced_time(j) + noise_sd * rng.normal();
        }
        truth.b0 = b0;
        truth.b1 = b1;
        truth.gen_summary = latency_summary_for_mechanism(spec.mechanism, b0, b1, meas);

        // post-landmark outcome
        double eta_lat = 0.0;
        for (int l = 0; l < n_covariates; ++l) eta_lat += latency_coef[l] * truth.gen_summary[l];
        const double event_time =
            sample_event_time(eta_lat, weibull_shape, cal.weibull_scale, rng);
        const double censor_time = rng.exponential(cal.censor_rate);
        double tau;
        if (truth.uncured == 1) {
            truth.true_event_time = spec.landmark_time + event_time;
            tau = std::min({event_time, censor_time, cal.admin_cutoff});
            row.event = event_time <= std::min(censor_time, cal.admin_cutoff) ? 1 : 0;
        } else {
            truth.true_event_time = std::numeric_limits<double>::infinity();
            tau = std::min(censor_time, cal.admin_cutoff);
            row.event = 0;
        }
        row.time = spec.landmark_time + tau;

        // observation-time deletion for the analysis dataset: dropout-style,
        // each subject keeps its first M_i visits. The baseline measurement
        // is always retained and the last retained visit can fall well
        // before the landmark, which is what degrades the last-value summary
        // under irregular follow-up.
        std::array<bool, n_balanced_times> keep;
        keep.fill(true);
        if (!spec.balanced) {
            const int m_i = rng.uniform_int(5, n_balanced_times);
            for (int j = m_i; j < n_balanced_times; ++j) keep[j] = false;
        }
        for (int l = 0; l < n_covariates; ++l)
            for (int j = 0; j < n_balanced_times; ++j)
                if (keep[j])
                    out.longitudinal.records.push_back(
                        {row.subject_id, "y" + std::to_string(l + 1), balanced_time(j),
                         meas[l][j]});

        out.subjects.rows.push_back(std::move(row));
        out.truth.push_back(truth);
    }
    return out;
}

// Training and validation pair for a replicate; the two datasets come from
// independent child streams of (seed, scenario, m, replicate).
inline std::pair<GeneratedDataset, GeneratedDataset> generate_dataset(
    const ScenarioSpec& spec, int replicate_index, std::uint64_t seed) {
    RngStream root(seed);
    const auto key = [&](std::uint64_t role) {
        return root.child({0x5eedULL, static_cast<std::uint64_t>(spec.scenario_id),
                           static_cast<std::uint64_t>(spec.m),
                           static_cast<std::uint64_t>(replicate_index), role});
    };
    return {generate_one(spec, key(0)), generate_one(spec, key(1))};
}

} // namespace curemark
