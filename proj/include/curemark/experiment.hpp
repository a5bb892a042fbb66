#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "curemark/csv.hpp"
#include "curemark/cure_model.hpp"
#include "curemark/data.hpp"
#include "curemark/metrics.hpp"
#include "curemark/mixed_model.hpp"
#include "curemark/prediction.hpp"
#include "curemark/serialize.hpp"
#include "curemark/simulation.hpp"

namespace curemark {

namespace pipeline {

inline Eigen::MatrixXd incidence_design(const LandmarkDataset& lm) {
    const int m = static_cast<int>(lm.subjects.rows.size());
    const int p = m > 0 ? static_cast<int>(lm.subjects.rows[0].x.size()) : 0;
    Eigen::MatrixXd x(m, p);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < p; ++j) x(i, j) = lm.subjects.rows[i].x[j];
    return x;
}

inline Eigen::MatrixXd latency_design(const LandmarkDataset& lm, const Eigen::MatrixXd& summaries) {
    const int m = static_cast<int>(lm.subjects.rows.size());
    const int pz = m > 0 ? static_cast<int>(lm.subjects.rows[0].z.size()) : 0;
    Eigen::MatrixXd z(m, pz + summaries.cols());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < pz; ++j) z(i, j) = lm.subjects.rows[i].z[j];
    z.rightCols(summaries.cols()) = summaries;
    return z;
}

// Fit one summary strategy on a landmark dataset: Steps 1-3.
inline FitBundle fit_strategy(const LandmarkDataset& lm, const std::string& strategy,
                              Link link = Link::identity,
                              const CureEmOptions& em_opts = {}) {
    FitBundle bundle;
    bundle.landmark_time = lm.landmark_time;
    bundle.strategy = strategy;
    bundle.incidence_cols = lm.subjects.x_names;
    bundle.latency_cols = lm.subjects.z_names;
    bundle.longitudinal_cols = lm.covariates;

    if (strategy == "blup") {
        MixedModelSpec spec;
        spec.link = link;
        for (const auto& cov : lm.covariates) {
            const LmmData slice = covariate_slice(lm, cov);
            bundle.mixed.push_back(link == Link::identity ? fit_lmm(slice, spec)
                                                          : fit_glmm_pql(slice, spec));
        }
    } else if (strategy != "locf") {
        throw DataError("unknown summary strategy '" + strategy + "'");
    }

    const Eigen::MatrixXd summaries = summaries_for(lm, bundle.summary_strategy());
    CureData data;
    const int m = static_cast<int>(lm.subjects.rows.size());
    data.time.resize(m);
    data.event.resize(m);
    for (int i = 0; i < m; ++i) {
        data.time[i] = lm.subjects.rows[i].time; // already post-landmark
        data.event[i] = lm.subjects.rows[i].event;
    }
    data.x = incidence_design(lm);
    data.z_ext = latency_design(lm, summaries);
    data.n_z = static_cast<int>(lm.subjects.z_names.size());
    bundle.cure = fit_cure_em(data, em_opts);
    return bundle;
}

struct EvaluationResult {
    MetricValue auc_inc, brier_inc, cindex;
    std::vector<double> grid; // post-landmark horizons
    std::vector<MetricValue> auc_t, brier_t;
};

// Step 4 + metric battery on an evaluation landmark dataset. The horizon
// grid defaults to the evaluation data's own event-time quantile grid.
inline EvaluationResult evaluate_fit(const FitBundle& bundle, const LandmarkDataset& lm,
                                     std::vector<double> grid = {}) {
    const int m = static_cast<int>(lm.subjects.rows.size());
    const Eigen::MatrixXd summaries = summaries_for(lm, bundle.summary_strategy());
    const Eigen::MatrixXd x = incidence_design(lm);
    const Eigen::MatrixXd z_ext = latency_design(lm, summaries);

    Eigen::VectorXd time(m);
    Eigen::VectorXi event(m);
    std::vector<std::string> ids(m);
    for (int i = 0; i < m; ++i) {
        time[i] = lm.subjects.rows[i].time;
        event[i] = lm.subjects.rows[i].event;
        ids[i] = lm.subjects.rows[i].subject_id;
    }

    if (grid.empty()) grid = default_horizon_grid(time, event);

    EvaluationResult out;
    out.grid = grid;
    if (grid.empty()) return out; // degenerate: no events in the evaluation data

    const PredictionResult pred = predict_subjects(bundle.cure, ids, x, z_ext, grid);

    Eigen::VectorXd qhat(m);
    for (int i = 0; i < m; ++i)
        qhat[i] = posterior_uncured(bundle.cure, x.row(i).transpose(),
                                    z_ext.row(i).transpose(), time[i], event[i]);

    const CensoringKm km = km_censoring(time, event);
    out.auc_inc = weighted_auc_inc(pred.eta_inc, qhat);
    out.brier_inc = weighted_brier_inc(pred.pi_hat, event, time, km);
    out.cindex = c_index(pred.eta_lat, time, event);
    out.auc_t.resize(grid.size());
    out.brier_t.resize(grid.size());
    for (std::size_t k = 0; k < grid.size(); ++k) {
        out.auc_t[k] = auc_lat_t(pred.eta_lat, time, event, grid[k], km);
        out.brier_t[k] = brier_lat_t(pred.s_overall.col(static_cast<int>(k)), time, event,
                                     grid[k], km);
    }
    return out;
}

} // namespace pipeline

struct ExperimentConfig {
    std::vector<int> scenario_ids = {1};
    std::vector<int> sample_sizes = {300};
    int replicates = 100;
    std::uint64_t seed = 1;
    std::vector<std::string> strategies = {"blup", "locf"};
    std::string out_dir;
    int jobs = 1;
    double max_failure_fraction = 0.05;

    void validate() const {
        if (replicates < 1) throw DataError("replicate count must be >= 1");
        if (strategies.empty()) throw DataError("at least one summary strategy required");
        for (int id : scenario_ids) ScenarioSpec::from_id(id, 300);
    }
};

namespace experiment_detail {

struct ReplicateOutcome {
    bool ok = false;
    std::string error;
    std::map<std::string, pipeline::EvaluationResult> by_strategy;
};

inline ReplicateOutcome run_replicate(const ScenarioSpec& spec, int replicate,
                                      std::uint64_t seed,
                                      const std::vector<std::string>& strategies) {
    ReplicateOutcome out;
    try {
        auto [train, valid] = generate_dataset(spec, replicate, seed);
        LandmarkConfig cfg;
        cfg.landmark_time = spec.landmark_time;
        const LandmarkDataset lm_train =
            build_landmark_dataset(train.longitudinal, train.subjects, cfg);
        const LandmarkDataset lm_valid =
            build_landmark_dataset(valid.longitudinal, valid.subjects, cfg);

        // one shared grid per replicate so strategy curves are comparable
        Eigen::VectorXd vtime(lm_valid.subjects.rows.size());
        Eigen::VectorXi vevent(lm_valid.subjects.rows.size());
        for (std::size_t i = 0; i < lm_valid.subjects.rows.size(); ++i) {
            vtime[static_cast<int>(i)] = lm_valid.subjects.rows[i].time;
            vevent[static_cast<int>(i)] = lm_valid.subjects.rows[i].event;
        }
        const std::vector<double> grid = default_horizon_grid(vtime, vevent);

        for (const auto& strategy : strategies) {
            const FitBundle bundle = pipeline::fit_strategy(lm_train, strategy);
            out.by_strategy[strategy] = pipeline::evaluate_fit(bundle, lm_valid, grid);
        }
        out.ok = true;
    } catch (const std::exception& e) {
        out.error = e.what();
    }
    return out;
}

struct Accumulator {
    int n = 0;
    double sum = 0.0, sumsq = 0.0;

    void add(const MetricValue& v) {
        if (!v.defined) return;
        ++n;
        sum += v.value;
        sumsq += v.value * v.value;
    }
    void add(double v) {
        ++n;
        sum += v;
        sumsq += v * v;
    }
    double mean() const { return n > 0 ? sum / n : std::nan(""); }
    double sd() const {
        if (n < 2) return std::nan("");
        return std::sqrt(std::max(0.0, (sumsq - sum * sum / n) / (n - 1)));
    }
};

} // namespace experiment_detail

struct StrategyAggregate {
    experiment_detail::Accumulator auc_inc, brier_inc, cindex;
    std::vector<experiment_detail::Accumulator> auc_t, brier_t, grid_time;
};

struct CellResult {
    int attempted = 0;
    int failures = 0;
    std::vector<std::string> errors;
    std::map<std::string, StrategyAggregate> by_strategy;
};

struct ExperimentResult {
    // keyed by (scenario_id, m)
    std::map<std::pair<int, int>, CellResult> cells;
    int total_attempted = 0;
    int total_failures = 0;
};

inline ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();

    struct Task {
        ScenarioSpec spec;
        int replicate;
    };
    std::vector<Task> tasks;
    for (int id : config.scenario_ids)
        for (int m : config.sample_sizes)
            for (int r = 0; r < config.replicates; ++r)
                tasks.push_back({ScenarioSpec::from_id(id, m), r});

    std::vector<experiment_detail::ReplicateOutcome> outcomes(tasks.size());
    std::atomic<std::size_t> next{0};
    const int jobs = std::max(1, config.jobs);
    auto worker = [&]() {
        for (std::size_t t; (t = next.fetch_add(1)) < tasks.size();)
            outcomes[t] = experiment_detail::run_replicate(tasks[t].spec, tasks[t].replicate,
                                                           config.seed, config.strategies);
    };
    // calibration is memoized under a lock; prime it single-threaded
    for (int id : config.scenario_ids) {
        const auto spec = ScenarioSpec::from_id(id, 1);
        sim_detail::calibrate(spec.mechanism, spec.cure_fraction);
    }
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();

    ExperimentResult result;
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto key = std::make_pair(tasks[t].spec.scenario_id, tasks[t].spec.m);
        auto& cell = result.cells[key];
        ++cell.attempted;
        ++result.total_attempted;
        const auto& oc = outcomes[t];
        if (!oc.ok) {
            ++cell.failures;
            ++result.total_failures;
            if (cell.errors.size() < 10) cell.errors.push_back(oc.error);
            continue;
        }
        for (const auto& [strategy, ev] : oc.by_strategy) {
            auto& agg = cell.by_strategy[strategy];
            agg.auc_inc.add(ev.auc_inc);
            agg.brier_inc.add(ev.brier_inc);
            agg.cindex.add(ev.cindex);
            if (agg.auc_t.size() < ev.grid.size()) {
                agg.auc_t.resize(ev.grid.size());
                agg.brier_t.resize(ev.grid.size());
                agg.grid_time.resize(ev.grid.size());
            }
            for (std::size_t k = 0; k < ev.grid.size(); ++k) {
                agg.auc_t[k].add(ev.auc_t[k]);
                agg.brier_t[k].add(ev.brier_t[k]);
                agg.grid_time[k].add(tasks[t].spec.landmark_time + ev.grid[k]);
            }
        }
    }

    const double failure_fraction =
        result.total_attempted > 0
            ? static_cast<double>(result.total_failures) / result.total_attempted
            : 0.0;
    if (failure_fraction > config.max_failure_fraction)
        throw NumericError("replicate failure rate " + csv::format_double(failure_fraction) +
                           " exceeds the " + csv::format_double(config.max_failure_fraction) +
                           " threshold");
    return result;
}

inline void write_experiment_outputs(const ExperimentResult& result,
                                     const ExperimentConfig& config) {
    namespace fs = std::filesystem;
    fs::create_directories(config.out_dir);

    csv::Writer inc((fs::path(config.out_dir) / "incidence_table.csv").string());
    inc.raw_row("scenario,m,strategy,auc_mean,auc_sd,brier_mean,brier_sd,n_replicates");
    csv::Writer cidx((fs::path(config.out_dir) / "latency_cindex.csv").string());
    cidx.raw_row("scenario,m,strategy,cindex_mean,cindex_sd,n_replicates");
    csv::Writer curves((fs::path(config.out_dir) / "latency_curves.csv").string());
    curves.raw_row(
        "scenario,m,strategy,grid_index,time_mean,auc_mean,auc_sd,brier_mean,brier_sd");

    for (const auto& [key, cell] : result.cells) {
        for (const auto& strategy : config.strategies) {
            auto it = cell.by_strategy.find(strategy);
            if (it == cell.by_strategy.end()) continue;
            const auto& agg = it->second;
            inc.row(key.first, key.second, strategy, agg.auc_inc.mean(), agg.auc_inc.sd(),
                    agg.brier_inc.mean(), agg.brier_inc.sd(), agg.auc_inc.n);
            cidx.row(key.first, key.second, strategy, agg.cindex.mean(), agg.cindex.sd(),
                     agg.cindex.n);
            for (std::size_t k = 0; k < agg.auc_t.size(); ++k)
                curves.row(key.first, key.second, strategy, k + 1, agg.grid_time[k].mean(),
                           agg.auc_t[k].mean(), agg.auc_t[k].sd(), agg.brier_t[k].mean(),
                           agg.brier_t[k].sd());
        }
    }

    nlohmann::json manifest;
    manifest["seed"] = config.seed;
    manifest["replicates"] = config.replicates;
    manifest["scenarios"] = config.scenario_ids;
    manifest["sample_sizes"] = config.sample_sizes;
    manifest["strategies"] = config.strategies;
    manifest["total_attempted"] = result.total_attempted;
    manifest["total_failures"] = result.total_failures;
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& [key, cell] : result.cells) {
        nlohmann::json c;
        c["scenario"] = key.first;
        c["m"] = key.second;
        c["attempted"] = cell.attempted;
        c["failures"] = cell.failures;
        c["errors"] = cell.errors;
        cells.push_back(c);
    }
    manifest["cells"] = cells;
    std::ofstream mf(fs::path(config.out_dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

// Repeated cross-validation on a user-supplied dataset: the real-data
// counterpart of the simulation experiment.
struct CvConfig {
    double landmark_time = 0.0;
    int folds = 4;
    int repeats = 10;
    std::uint64_t seed = 1;
    std::vector<std::string> strategies = {"blup", "locf"};
    Link link = Link::identity;
};

inline ExperimentResult run_cv(const LongitudinalDataset& longi, const SubjectTable& subj,
                               const CvConfig& cv) {
    if (cv.folds < 2) throw DataError("cross-validation needs at least 2 folds");
    ExperimentResult result;
    auto& cell = result.cells[{0, static_cast<int>(subj.rows.size())}];

    RngStream rng = RngStream(cv.seed).child({0xcfULL});
    const int n = static_cast<int>(subj.rows.size());

    for (int rep = 0; rep < cv.repeats; ++rep) {
        std::vector<int> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (int i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);

        for (int fold = 0; fold < cv.folds; ++fold) {
            ++cell.attempted;
            ++result.total_attempted;
            try {
                std::set<std::string> test_ids;
                for (int i = fold; i < n; i += cv.folds)
                    test_ids.insert(subj.rows[perm[i]].subject_id);

                SubjectTable train_subj, test_subj;
                train_subj.x_names = test_subj.x_names = subj.x_names;
                train_subj.z_names = test_subj.z_names = subj.z_names;
                for (const auto& row : subj.rows)
                    (test_ids.count(row.subject_id) ? test_subj : train_subj).rows.push_back(row);
                LongitudinalDataset train_long, test_long;
                for (const auto& r : longi.records)
                    (test_ids.count(r.subject_id) ? test_long : train_long).records.push_back(r);

                LandmarkConfig cfg;
                cfg.landmark_time = cv.landmark_time;
                const auto lm_train = build_landmark_dataset(train_long, train_subj, cfg);
                const auto lm_test = build_landmark_dataset(test_long, test_subj, cfg);

                for (const auto& strategy : cv.strategies) {
                    const FitBundle bundle = pipeline::fit_strategy(lm_train, strategy, cv.link);
                    const auto ev = pipeline::evaluate_fit(bundle, lm_test);
                    auto& agg = cell.by_strategy[strategy];
                    agg.auc_inc.add(ev.auc_inc);
                    agg.brier_inc.add(ev.brier_inc);
                    agg.cindex.add(ev.cindex);
                    if (agg.auc_t.size() < ev.grid.size()) {
                        agg.auc_t.resize(ev.grid.size());
                        agg.brier_t.resize(ev.grid.size());
                        agg.grid_time.resize(ev.grid.size());
                    }
                    for (std::size_t k = 0; k < ev.grid.size(); ++k) {
                        agg.auc_t[k].add(ev.auc_t[k]);
                        agg.brier_t[k].add(ev.brier_t[k]);
                        agg.grid_time[k].add(cv.landmark_time + ev.grid[k]);
                    }
                }
            } catch (const std::exception& e) {
                ++cell.failures;
                ++result.total_failures;
                if (cell.errors.size() < 10) cell.errors.push_back(e.what());
            }
        }
    }
    return result;
}

} // namespace curemark
