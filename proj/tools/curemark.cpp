// Command-line front end: simulate scenario datasets, fit landmark cure
// models, produce post-landmark predictions, evaluate predictive metrics,
// and drive the full simulation experiment grid.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <string>
#include <vector>

#include "curemark/curemark.hpp"

namespace fs = std::filesystem;
using namespace curemark;

namespace {

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<double> parse_doubles(const std::string& s) {
    std::vector<double> out;
    for (const auto& tok : split_list(s)) out.push_back(csv::parse_double(tok, "option"));
    return out;
}

std::vector<int> parse_ints(const std::string& s) {
    std::vector<int> out;
    for (const auto& tok : split_list(s)) out.push_back(std::stoi(tok));
    return out;
}

void write_generated(const GeneratedDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    {
        csv::Writer w((dir / "longitudinal.csv").string());
        w.raw_row("subject_id,covariate,time,value");
        for (const auto& r : ds.longitudinal.records) w.row(r.subject_id, r.covariate, r.time, r.value);
    }
    {
        csv::Writer w((dir / "subjects.csv").string());
        std::string header = "subject_id,time,event";
        for (const auto& n : ds.subjects.x_names) header += "," + n;
        w.raw_row(header);
        for (const auto& r : ds.subjects.rows) {
            std::string line = r.subject_id + "," + csv::format_double(r.time) + "," +
                               std::to_string(r.event);
            for (double v : r.x) line += "," + csv::format_double(v);
            w.raw_row(line);
        }
    }
    {
        csv::Writer w((dir / "truth.csv").string());
        std::string header = "subject_id,uncured";
        for (int l = 1; l <= 4; ++l)
            header += ",b0_y" + std::to_string(l) + ",b1_y" + std::to_string(l);
        header += ",gen_summary_y1,gen_summary_y2,gen_summary_y3,gen_summary_y4";
        header += ",true_event_time";
        w.raw_row(header);
        for (std::size_t i = 0; i < ds.subjects.rows.size(); ++i) {
            const auto& t = ds.truth[i];
            std::string line = ds.subjects.rows[i].subject_id + "," + std::to_string(t.uncured);
            for (int l = 0; l < 4; ++l)
                line += "," + csv::format_double(t.b0[l]) + "," + csv::format_double(t.b1[l]);
            for (int l = 0; l < 4; ++l) line += "," + csv::format_double(t.gen_summary[l]);
            line += "," + (std::isinf(t.true_event_time)
                               ? std::string("inf")
                               : csv::format_double(t.true_event_time));
            w.raw_row(line);
        }
    }
}

int cmd_simulate(int scenario, int m, int replicates, std::uint64_t seed,
                 const std::string& out_dir) {
    const auto spec = ScenarioSpec::from_id(scenario, m);
    fs::create_directories(out_dir);
    for (int rep = 0; rep < replicates; ++rep) {
        auto [train, valid] = generate_dataset(spec, rep, seed);
        write_generated(train, fs::path(out_dir) / ("rep-" + std::to_string(rep)));
    }
    nlohmann::json j;
    j["scenario"] = spec.scenario_id;
    j["cure_fraction"] = spec.cure_fraction;
    j["design"] = spec.balanced ? "balanced" : "unbalanced";
    j["mechanism"] = mechanism_name(spec.mechanism);
    j["m"] = spec.m;
    j["landmark_time"] = spec.landmark_time;
    j["replicates"] = replicates;
    j["seed"] = seed;
    std::ofstream out(fs::path(out_dir) / "scenario.json");
    out << j.dump(2) << "\n";
    return 0;
}

struct DataArgs {
    std::string longitudinal_path;
    std::string subjects_path;
    std::string incidence_cols;
    std::string latency_cols;
    std::string longitudinal_cols;
};

LandmarkDataset load_landmark(const DataArgs& args, double landmark,
                              const std::vector<std::string>& inc_override = {},
                              const std::vector<std::string>& lat_override = {}) {
    auto inc = inc_override.empty() ? split_list(args.incidence_cols) : inc_override;
    auto lat = lat_override.empty() ? split_list(args.latency_cols) : lat_override;
    auto [longi, subj] = load_datasets(args.longitudinal_path, args.subjects_path, inc, lat);
    if (!args.longitudinal_cols.empty()) {
        const auto keep = split_list(args.longitudinal_cols);
        LongitudinalDataset filtered;
        for (const auto& r : longi.records)
            if (std::find(keep.begin(), keep.end(), r.covariate) != keep.end())
                filtered.records.push_back(r);
        longi = std::move(filtered);
    }
    LandmarkConfig cfg;
    cfg.landmark_time = landmark;
    return build_landmark_dataset(longi, subj, cfg);
}

int cmd_fit(const DataArgs& data_args, double landmark, const std::string& summary,
            const std::string& link_name_str, int max_iter, double tol,
            const std::string& out_path) {
    const auto lm = load_landmark(data_args, landmark);
    CureEmOptions opts;
    opts.max_iterations = max_iter;
    opts.tol = tol;
    try {
        const FitBundle bundle =
            pipeline::fit_strategy(lm, summary, link_from_name(link_name_str), opts);
        save_fit_bundle(bundle, out_path);
        if (!bundle.cure.converged)
            std::cerr << "warning: EM did not converge within " << max_iter << " iterations\n";
    } catch (...) {
        std::error_code ec;
        fs::remove(out_path, ec); // no partial outputs
        throw;
    }
    return 0;
}

int cmd_predict(const std::string& fit_path, const DataArgs& data_args,
                const std::string& horizons_str, const std::string& out_path) {
    const FitBundle bundle = load_fit_bundle(fit_path);
    const auto lm = load_landmark(data_args, bundle.landmark_time, bundle.incidence_cols,
                                  bundle.latency_cols);
    if (lm.covariates != bundle.longitudinal_cols)
        throw DataError("longitudinal covariates do not match the fitted model");

    std::vector<double> horizons = parse_doubles(horizons_str);
    for (double& h : horizons) {
        if (h <= bundle.landmark_time)
            throw DataError("horizon " + csv::format_double(h) + " is not beyond the landmark");
        h -= bundle.landmark_time;
    }

    const Eigen::MatrixXd summaries = summaries_for(lm, bundle.summary_strategy());
    const Eigen::MatrixXd x = pipeline::incidence_design(lm);
    const Eigen::MatrixXd z_ext = pipeline::latency_design(lm, summaries);
    std::vector<std::string> ids;
    for (const auto& r : lm.subjects.rows) ids.push_back(r.subject_id);

    const PredictionResult pred = predict_subjects(bundle.cure, ids, x, z_ext, horizons);
    write_prediction_csv(pred, bundle.landmark_time, out_path);
    return 0;
}

void write_metric_row(csv::Writer& w, const std::string& label, const std::string& metric,
                      const std::string& time, const MetricValue& v) {
    const std::string name = label.empty() ? metric : label + ":" + metric;
    w.raw_row(name + "," + time + "," + (v.defined ? csv::format_double(v.value) : "NA"));
}

int cmd_evaluate(const std::vector<std::string>& fit_paths, const DataArgs& data_args,
                 const std::string& horizons_str, const std::string& out_path,
                 const std::string& summary_json_path) {
    if (fit_paths.empty()) throw DataError("at least one --fit is required");
    csv::Writer w(out_path);
    w.raw_row("metric,time,value");
    nlohmann::json summary = nlohmann::json::array();
    bool warned = false;

    for (const auto& fit_path : fit_paths) {
        const FitBundle bundle = load_fit_bundle(fit_path);
        const auto lm = load_landmark(data_args, bundle.landmark_time, bundle.incidence_cols,
                                      bundle.latency_cols);
        std::vector<double> grid;
        if (!horizons_str.empty()) {
            grid = parse_doubles(horizons_str);
            for (double& h : grid) {
                if (h <= bundle.landmark_time)
                    throw DataError("horizon " + csv::format_double(h) +
                                    " is not beyond the landmark");
                h -= bundle.landmark_time;
            }
        }
        const auto ev = pipeline::evaluate_fit(bundle, lm, grid);
        const std::string label = fit_paths.size() > 1 ? bundle.strategy : "";

        write_metric_row(w, label, "auc_inc", "", ev.auc_inc);
        write_metric_row(w, label, "brier_inc", "", ev.brier_inc);
        write_metric_row(w, label, "c_index", "", ev.cindex);
        for (std::size_t k = 0; k < ev.grid.size(); ++k) {
            const std::string t = csv::format_double(bundle.landmark_time + ev.grid[k]);
            write_metric_row(w, label, "auc_lat", t, ev.auc_t[k]);
            write_metric_row(w, label, "brier_lat", t, ev.brier_t[k]);
        }
        if (ev.grid.empty() && !warned) {
            std::cerr << "warning: no post-landmark events in the evaluation data; "
                         "time-dependent metrics unavailable\n";
            warned = true;
        }
        if (!ev.auc_inc.defined || !ev.cindex.defined) {
            std::cerr << "warning: some metrics are undefined on this dataset\n";
            warned = true;
        }

        nlohmann::json js;
        js["fit"] = fit_path;
        js["strategy"] = bundle.strategy;
        js["auc_inc"] = ev.auc_inc.defined ? nlohmann::json(ev.auc_inc.value) : nullptr;
        js["brier_inc"] = ev.brier_inc.defined ? nlohmann::json(ev.brier_inc.value) : nullptr;
        js["c_index"] = ev.cindex.defined ? nlohmann::json(ev.cindex.value) : nullptr;
        summary.push_back(js);
    }
    if (!summary_json_path.empty()) {
        std::ofstream out(summary_json_path);
        out << summary.dump(2) << "\n";
    }
    return 0;
}

int cmd_experiment(ExperimentConfig config, const DataArgs& data_args, double landmark,
                   int cv_folds, int cv_repeats) {
    if (!data_args.longitudinal_path.empty()) {
        // cross-validation mode on a user dataset
        auto inc = split_list(data_args.incidence_cols);
        auto lat = split_list(data_args.latency_cols);
        auto [longi, subj] =
            load_datasets(data_args.longitudinal_path, data_args.subjects_path, inc, lat);
        CvConfig cv;
        cv.landmark_time = landmark;
        cv.folds = cv_folds;
        cv.repeats = cv_repeats;
        cv.seed = config.seed;
        cv.strategies = config.strategies;
        const auto result = run_cv(longi, subj, cv);
        write_experiment_outputs(result, config);
        std::cout << "cross-validation: " << result.total_attempted << " fits, "
                  << result.total_failures << " failures\n";
        return 0;
    }

    const auto result = run_experiment(config);
    write_experiment_outputs(result, config);
    std::cout << "experiment: " << result.total_attempted << " replicates, "
              << result.total_failures << " failures\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Model-based landmarking for mixture cure models"};
    app.require_subcommand(1);

    // simulate
    auto* sim = app.add_subcommand("simulate", "Generate scenario datasets as CSV files");
    int scenario = 1, m = 300, replicates = 1;
    std::uint64_t seed = 1;
    std::string out_dir;
    sim->add_option("--scenario", scenario, "Scenario id (1-12)")->required();
    sim->add_option("--m", m, "Subjects per dataset")->required();
    sim->add_option("--replicates", replicates, "Number of replicates");
    sim->add_option("--seed", seed, "Random seed");
    sim->add_option("--out", out_dir, "Output directory")->required();

    // shared data arguments
    DataArgs data_args;
    auto add_data_options = [&](CLI::App* cmd, bool required) {
        auto* lo = cmd->add_option("--longitudinal", data_args.longitudinal_path,
                                   "Longitudinal CSV (subject_id,covariate,time,value)");
        auto* so = cmd->add_option("--subjects", data_args.subjects_path,
                                   "Subjects CSV (subject_id,time,event,covariates...)");
        if (required) {
            lo->required();
            so->required();
        }
        cmd->add_option("--incidence-cols", data_args.incidence_cols,
                        "Comma-separated incidence covariate columns");
        cmd->add_option("--latency-cols", data_args.latency_cols,
                        "Comma-separated latency covariate columns");
        cmd->add_option("--longitudinal-cols", data_args.longitudinal_cols,
                        "Comma-separated longitudinal covariates (default: all)");
    };

    // fit
    auto* fit = app.add_subcommand("fit", "Fit the landmark mixture cure model");
    double landmark = 0.0, tol = 1e-6;
    int max_iter = 500;
    std::string summary = "blup", link_str = "identity", fit_out;
    add_data_options(fit, true);
    fit->add_option("--landmark", landmark, "Landmark time")->required();
    fit->add_option("--summary", summary, "Summary strategy: blup or locf")
        ->check(CLI::IsMember({"blup", "locf"}));
    fit->add_option("--link", link_str, "Mixed-model link: identity, logit, log")
        ->check(CLI::IsMember({"identity", "logit", "log"}));
    fit->add_option("--max-iter", max_iter, "Maximum EM iterations");
    fit->add_option("--tol", tol, "EM relative-change tolerance");
    fit->add_option("--out", fit_out, "Output fit JSON")->required();

    // predict
    auto* predict = app.add_subcommand("predict", "Post-landmark survival predictions");
    std::string predict_fit, horizons_str, predict_out;
    add_data_options(predict, true);
    predict->add_option("--fit", predict_fit, "Fit JSON from the fit subcommand")->required();
    predict->add_option("--horizons", horizons_str, "Comma-separated absolute horizons")
        ->required();
    predict->add_option("--out", predict_out, "Output prediction CSV")->required();

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Predictive performance metrics");
    std::vector<std::string> eval_fits;
    std::string eval_horizons, eval_out, eval_summary_json;
    add_data_options(evaluate, true);
    evaluate->add_option("--fit", eval_fits, "Fit JSON (repeat to compare strategies)")
        ->required();
    evaluate->add_option("--horizons", eval_horizons,
                         "Comma-separated absolute horizons (default: event-quantile grid)");
    evaluate->add_option("--out", eval_out, "Output metrics CSV")->required();
    evaluate->add_option("--summary-json", eval_summary_json, "Optional summary JSON");

    // experiment
    auto* exp = app.add_subcommand("experiment",
                                   "Replicated scenario grid or cross-validation run");
    std::string config_path, scenarios_str = "1", sizes_str = "300", strategies_str = "blup,locf";
    ExperimentConfig config;
    int cv_folds = 4, cv_repeats = 10;
    double exp_landmark = 0.0;
    exp->add_option("--config", config_path, "JSON config file (flags override)");
    exp->add_option("--scenarios", scenarios_str, "Comma-separated scenario ids");
    exp->add_option("--m", sizes_str, "Comma-separated sample sizes");
    exp->add_option("--replicates", config.replicates, "Replicates per cell");
    exp->add_option("--seed", config.seed, "Random seed");
    exp->add_option("--strategies", strategies_str, "Summary strategies to compare");
    exp->add_option("--jobs", config.jobs, "Worker threads (default CUREMARK_JOBS or 1)");
    exp->add_option("--out", config.out_dir, "Output directory")->required();
    exp->add_option("--cv-folds", cv_folds, "Cross-validation folds (with --longitudinal)");
    exp->add_option("--cv-repeats", cv_repeats, "Cross-validation repetitions");
    exp->add_option("--landmark", exp_landmark, "Landmark time (cross-validation mode)");
    add_data_options(exp, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return e.get_name() == "CallForHelp" ? 0 : (code == 0 ? 0 : 1);
    }

    try {
        if (sim->parsed()) return cmd_simulate(scenario, m, replicates, seed, out_dir);
        if (fit->parsed())
            return cmd_fit(data_args, landmark, summary, link_str, max_iter, tol, fit_out);
        if (predict->parsed())
            return cmd_predict(predict_fit, data_args, horizons_str, predict_out);
        if (evaluate->parsed())
            return cmd_evaluate(eval_fits, data_args, eval_horizons, eval_out,
                                eval_summary_json);
        if (exp->parsed()) {
            if (!config_path.empty()) {
                std::ifstream in(config_path);
                if (!in) throw DataError("cannot open " + config_path);
                nlohmann::json j;
                in >> j;
                if (j.contains("scenarios") && exp->count("--scenarios") == 0)
                    config.scenario_ids = j["scenarios"].get<std::vector<int>>();
                else
                    config.scenario_ids = parse_ints(scenarios_str);
                if (j.contains("sample_sizes") && exp->count("--m") == 0)
                    config.sample_sizes = j["sample_sizes"].get<std::vector<int>>();
                else
                    config.sample_sizes = parse_ints(sizes_str);
                if (j.contains("replicates") && exp->count("--replicates") == 0)
                    config.replicates = j["replicates"].get<int>();
                if (j.contains("seed") && exp->count("--seed") == 0)
                    config.seed = j["seed"].get<std::uint64_t>();
                if (j.contains("strategies") && exp->count("--strategies") == 0)
                    config.strategies = j["strategies"].get<std::vector<std::string>>();
                else
                    config.strategies = split_list(strategies_str);
                if (j.contains("jobs") && exp->count("--jobs") == 0)
                    config.jobs = j["jobs"].get<int>();
            } else {
                config.scenario_ids = parse_ints(scenarios_str);
                config.sample_sizes = parse_ints(sizes_str);
                config.strategies = split_list(strategies_str);
            }
            if (exp->count("--jobs") == 0 && config.jobs == 1) {
                if (const char* env = std::getenv("CUREMARK_JOBS")) config.jobs = std::atoi(env);
            }
            return cmd_experiment(config, data_args, exp_landmark, cv_folds, cv_repeats);
        }
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
