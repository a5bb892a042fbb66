#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "curemark/cure_model.hpp"
#include "curemark/data.hpp"
#include "curemark/mixed_model.hpp"

namespace curemark {

// How pre-landmark longitudinal history is summarized into latency
// covariates: predicted random effects from per-covariate mixed models, or
// the last observed value.
struct SummaryStrategy {
    enum class Kind { model_based, locf };
    Kind kind = Kind::model_based;
    std::vector<MixedModelFit> mixed_fits; // one per covariate, model_based only

    static SummaryStrategy locf() { return {Kind::locf, {}}; }
    static SummaryStrategy model_based(std::vector<MixedModelFit> fits) {
        return {Kind::model_based, std::move(fits)};
    }

    int summary_width(int n_covariates) const {
        if (kind == Kind::locf) return n_covariates;
        int w = 0;
        for (const auto& f : mixed_fits) w += f.spec.p_random();
        return w;
    }
};

// Last observed value at or before the landmark, per subject and covariate.
// Column order follows lm.covariates.
inline Eigen::MatrixXd locf_summary(const LandmarkDataset& lm) {
    const int m = static_cast<int>(lm.subjects.rows.size());
    const int p = static_cast<int>(lm.covariates.size());
    Eigen::MatrixXd out(m, p);
    for (int l = 0; l < p; ++l) {
        const LmmData slice = covariate_slice(lm, lm.covariates[l]);
        for (int i = 0; i < m; ++i) {
            const auto& s = slice.subjects[i];
            if (s.times.size() == 0)
                throw DataError("subject '" + s.subject_id + "' lacks history for '" +
                                lm.covariates[l] + "'");
            out(i, l) = s.values[s.times.size() - 1]; // slices are time-sorted
        }
    }
    return out;
}

// Concatenated predicted random effects bhat_i = (bhat_i1, ..., bhat_ipY).
inline Eigen::MatrixXd blup_summary(const LandmarkDataset& lm,
                                    const std::vector<MixedModelFit>& fits) {
    if (fits.size() != lm.covariates.size())
        throw DataError("one mixed-model fit per longitudinal covariate required");
    const int m = static_cast<int>(lm.subjects.rows.size());
    int width = 0;
    for (const auto& f : fits) width += f.spec.p_random();
    Eigen::MatrixXd out(m, width);
    int col = 0;
    for (std::size_t l = 0; l < fits.size(); ++l) {
        const LmmData slice = covariate_slice(lm, lm.covariates[l]);
        const auto pred = predict_random_effects(fits[l], slice);
        out.middleCols(col, fits[l].spec.p_random()) = pred.b;
        col += fits[l].spec.p_random();
    }
    return out;
}

inline Eigen::MatrixXd summaries_for(const LandmarkDataset& lm, const SummaryStrategy& strategy) {
    return strategy.kind == SummaryStrategy::Kind::locf ? locf_summary(lm)
                                                        : blup_summary(lm, strategy.mixed_fits);
}

// Plug-in predictions for a set of subjects. Horizons are on the
// post-landmark clock (t' = t_omega - t_landmark > 0).
struct PredictionResult {
    std::vector<std::string> subject_ids;
    std::vector<double> horizons;
    Eigen::VectorXd pi_hat;
    Eigen::VectorXd eta_inc;
    Eigen::VectorXd eta_lat;
    Eigen::MatrixXd s_uncured; // subjects x horizons
    Eigen::MatrixXd s_overall;
};

inline PredictionResult predict_subjects(const CureModelFit& fit,
                                         const std::vector<std::string>& subject_ids,
                                         const Eigen::MatrixXd& x, const Eigen::MatrixXd& z_ext,
                                         const std::vector<double>& horizons) {
    const int m = static_cast<int>(x.rows());
    if (static_cast<int>(subject_ids.size()) != m || z_ext.rows() != m)
        throw DataError("prediction design dimensions disagree");
    for (double h : horizons)
        if (!(h > 0.0)) throw DataError("prediction horizons must lie beyond the landmark");

    const Eigen::VectorXd theta = fit.latency_coefficients();
    if (z_ext.cols() != theta.size())
        throw DataError("latency design width does not match the fitted coefficients");

    PredictionResult res;
    res.subject_ids = subject_ids;
    res.horizons = horizons;
    res.pi_hat.resize(m);
    res.eta_inc.resize(m);
    res.eta_lat.resize(m);
    res.s_uncured.resize(m, static_cast<int>(horizons.size()));
    res.s_overall.resize(m, static_cast<int>(horizons.size()));

    for (int i = 0; i < m; ++i) {
        res.eta_inc[i] = fit.alpha0 + x.row(i).dot(fit.alpha);
        res.pi_hat[i] = 1.0 / (1.0 + std::exp(-res.eta_inc[i]));
        res.eta_lat[i] = theta.size() > 0 ? z_ext.row(i).dot(theta) : 0.0;
        for (std::size_t k = 0; k < horizons.size(); ++k) {
            const double su = fit.baseline.survival_uncured(horizons[k], res.eta_lat[i]);
            res.s_uncured(i, static_cast<int>(k)) = su;
            res.s_overall(i, static_cast<int>(k)) =
                (1.0 - res.pi_hat[i]) + res.pi_hat[i] * su;
        }
    }
    return res;
}

// Single-subject convenience wrapper; works identically for out-of-sample
// subjects since only fitted parameters enter.
inline PredictionResult predict_subject(const CureModelFit& fit, const Eigen::VectorXd& x_row,
                                        const Eigen::VectorXd& zext_row,
                                        const std::vector<double>& horizons,
                                        const std::string& subject_id = "subject") {
    Eigen::MatrixXd x(1, x_row.size());
    x.row(0) = x_row.transpose();
    Eigen::MatrixXd z(1, zext_row.size());
    z.row(0) = zext_row.transpose();
    return predict_subjects(fit, {subject_id}, x, z, horizons);
}

} // namespace curemark
