#pragma once

#include <Eigen/Dense>
#include <fstream>
#include <json.hpp>
#include <string>
#include <vector>

#include "curemark/csv.hpp"
#include "curemark/cure_model.hpp"
#include "curemark/errors.hpp"
#include "curemark/mixed_model.hpp"
#include "curemark/prediction.hpp"

namespace curemark {

namespace serialize_detail {

// Lower-triangular Cholesky-type factor of a PSD matrix; zero pivots give
// zero columns, so boundary fits with singular covariances round-trip.
inline Eigen::MatrixXd psd_lower_cholesky(const Eigen::MatrixXd& m) {
    const int n = static_cast<int>(m.rows());
    Eigen::MatrixXd a = m;
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    for (int j = 0; j < n; ++j) {
        double pivot = a(j, j);
        for (int k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (pivot <= 1e-14 * (1.0 + std::abs(m(j, j)))) continue; // zero column
        l(j, j) = std::sqrt(pivot);
        for (int i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (int k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    return l;
}

inline nlohmann::json vec_to_json(const Eigen::VectorXd& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

inline Eigen::VectorXd vec_from_json(const nlohmann::json& arr) {
    Eigen::VectorXd v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<int>(i)] = arr[i].get<double>();
    return v;
}

} // namespace serialize_detail

// Everything a later prediction or evaluation run needs: the cure model,
// the per-covariate mixed models (model-based summaries only), the landmark
// time, and the column roles of the training files.
struct FitBundle {
    double landmark_time = 0.0;
    std::string strategy; // "blup" or "locf"
    std::vector<std::string> incidence_cols;
    std::vector<std::string> latency_cols;
    std::vector<std::string> longitudinal_cols;
    CureModelFit cure;
    std::vector<MixedModelFit> mixed; // aligned with longitudinal_cols

    SummaryStrategy summary_strategy() const {
        return strategy == "locf" ? SummaryStrategy::locf()
                                  : SummaryStrategy::model_based(mixed);
    }
};

inline nlohmann::json mixed_fit_to_json(const MixedModelFit& f) {
    using serialize_detail::vec_to_json;
    nlohmann::json j;
    j["link"] = link_name(f.spec.link);
    j["fixed_time_degree"] = f.spec.fixed_time_degree;
    j["random_time_degree"] = f.spec.random_time_degree;
    j["n_baseline"] = f.spec.n_baseline;
    j["gamma"] = vec_to_json(f.gamma);
    const Eigen::MatrixXd l = serialize_detail::psd_lower_cholesky(f.sigma_b);
    nlohmann::json chol = nlohmann::json::array();
    for (int i = 0; i < l.rows(); ++i)
        for (int k = 0; k <= i; ++k) chol.push_back(l(i, k));
    j["sigma_b_cholesky_lower"] = chol;
    j["sigma_eps_sq"] = f.sigma_eps_sq;
    j["reml_loglik"] = f.reml_loglik;
    j["iterations"] = f.iterations;
    j["pql_cycles"] = f.pql_cycles;
    j["converged"] = f.converged;
    j["boundary"] = f.boundary;
    j["damped"] = f.damped;
    return j;
}

inline MixedModelFit mixed_fit_from_json(const nlohmann::json& j) {
    using serialize_detail::vec_from_json;
    MixedModelFit f;
    f.spec.link = link_from_name(j.at("link").get<std::string>());
    f.spec.fixed_time_degree = j.at("fixed_time_degree").get<int>();
    f.spec.random_time_degree = j.at("random_time_degree").get<int>();
    f.spec.n_baseline = j.at("n_baseline").get<int>();
    f.gamma = vec_from_json(j.at("gamma"));
    const int q = f.spec.p_random();
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(q, q);
    const auto& chol = j.at("sigma_b_cholesky_lower");
    int idx = 0;
    for (int i = 0; i < q; ++i)
        for (int k = 0; k <= i; ++k) l(i, k) = chol.at(idx++).get<double>();
    f.sigma_b = l * l.transpose();
    f.sigma_eps_sq = j.at("sigma_eps_sq").get<double>();
    f.reml_loglik = j.at("reml_loglik").get<double>();
    f.iterations = j.at("iterations").get<int>();
    f.pql_cycles = j.at("pql_cycles").get<int>();
    f.converged = j.at("converged").get<bool>();
    f.boundary = j.at("boundary").get<bool>();
    f.damped = j.at("damped").get<bool>();
    return f;
}

inline nlohmann::json fit_bundle_to_json(const FitBundle& b) {
    using serialize_detail::vec_to_json;
    nlohmann::json j;
    j["kind"] = "curemark_fit";
    j["version"] = 1;
    j["landmark_time"] = b.landmark_time;
    j["strategy"] = b.strategy;
    j["incidence_cols"] = b.incidence_cols;
    j["latency_cols"] = b.latency_cols;
    j["longitudinal_cols"] = b.longitudinal_cols;

    nlohmann::json cure;
    cure["alpha0"] = b.cure.alpha0;
    cure["alpha"] = vec_to_json(b.cure.alpha);
    cure["beta"] = vec_to_json(b.cure.beta);
    cure["psi"] = vec_to_json(b.cure.psi);
    cure["baseline_jump_times"] = b.cure.baseline.jump_times;
    cure["baseline_cumulative"] = b.cure.baseline.cumulative;
    cure["zero_tail"] = b.cure.baseline.zero_tail;
    cure["posterior_q"] = vec_to_json(b.cure.posterior_q);
    cure["loglik_trace"] = b.cure.loglik_trace;
    cure["iterations"] = b.cure.iterations;
    cure["converged"] = b.cure.converged;
    cure["incidence_capped"] = b.cure.incidence_capped;
    cure["latency_capped"] = b.cure.latency_capped;
    j["cure_model"] = cure;

    nlohmann::json mixed = nlohmann::json::array();
    for (const auto& f : b.mixed) mixed.push_back(mixed_fit_to_json(f));
    j["mixed_models"] = mixed;
    return j;
}

inline FitBundle fit_bundle_from_json(const nlohmann::json& j) {
    using serialize_detail::vec_from_json;
    if (j.value("kind", "") != "curemark_fit") throw DataError("not a curemark fit file");
    FitBundle b;
    b.landmark_time = j.at("landmark_time").get<double>();
    b.strategy = j.at("strategy").get<std::string>();
    b.incidence_cols = j.at("incidence_cols").get<std::vector<std::string>>();
    b.latency_cols = j.at("latency_cols").get<std::vector<std::string>>();
    b.longitudinal_cols = j.at("longitudinal_cols").get<std::vector<std::string>>();

    const auto& cure = j.at("cure_model");
    b.cure.alpha0 = cure.at("alpha0").get<double>();
    b.cure.alpha = vec_from_json(cure.at("alpha"));
    b.cure.beta = vec_from_json(cure.at("beta"));
    b.cure.psi = vec_from_json(cure.at("psi"));
    b.cure.baseline.jump_times = cure.at("baseline_jump_times").get<std::vector<double>>();
    b.cure.baseline.cumulative = cure.at("baseline_cumulative").get<std::vector<double>>();
    b.cure.baseline.zero_tail = cure.at("zero_tail").get<bool>();
    b.cure.posterior_q = vec_from_json(cure.at("posterior_q"));
    b.cure.loglik_trace = cure.at("loglik_trace").get<std::vector<double>>();
    b.cure.iterations = cure.at("iterations").get<int>();
    b.cure.converged = cure.at("converged").get<bool>();
    b.cure.incidence_capped = cure.at("incidence_capped").get<bool>();
    b.cure.latency_capped = cure.at("latency_capped").get<bool>();

    for (const auto& mj : j.at("mixed_models")) b.mixed.push_back(mixed_fit_from_json(mj));
    return b;
}

inline void save_fit_bundle(const FitBundle& b, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << fit_bundle_to_json(b).dump(2) << "\n";
}

inline FitBundle load_fit_bundle(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid JSON in " + path + ": " + e.what());
    }
    try {
        return fit_bundle_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed fit file " + path + ": " + e.what());
    }
}

// Prediction CSV with absolute horizons:
// subject_id,horizon,pi_hat,S_u_hat,S_hat,eta_inc,eta_lat
inline void write_prediction_csv(const PredictionResult& pred, double landmark_time,
                                 const std::string& path) {
    csv::Writer w(path);
    w.raw_row("subject_id,horizon,pi_hat,S_u_hat,S_hat,eta_inc,eta_lat");
    for (std::size_t i = 0; i < pred.subject_ids.size(); ++i)
        for (std::size_t k = 0; k < pred.horizons.size(); ++k)
            w.row(pred.subject_ids[i], landmark_time + pred.horizons[k],
                  pred.pi_hat[static_cast<int>(i)],
                  pred.s_uncured(static_cast<int>(i), static_cast<int>(k)),
                  pred.s_overall(static_cast<int>(i), static_cast<int>(k)),
                  pred.eta_inc[static_cast<int>(i)], pred.eta_lat[static_cast<int>(i)]);
}

} // namespace curemark
