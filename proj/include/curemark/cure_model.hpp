#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "curemark/errors.hpp"

namespace curemark {

// Step-function cumulative baseline hazard with jumps at event times.
// Evaluation is right-continuous; under the zero-tail convention the
// uncured survival is 0 strictly beyond the largest event time.
struct BaselineHazard {
    std::vector<double> jump_times;  // sorted distinct event times
    std::vector<double> cumulative;  // H0 at each jump time
    bool zero_tail = true;

    double value(double t) const {
        auto it = std::upper_bound(jump_times.begin(), jump_times.end(), t);
        if (it == jump_times.begin()) return 0.0;
        return cumulative[static_cast<std::size_t>(it - jump_times.begin()) - 1];
    }

    double jump_at(double t) const {
        auto it = std::lower_bound(jump_times.begin(), jump_times.end(), t);
        if (it == jump_times.end() || *it != t) return 0.0;
        const std::size_t k = static_cast<std::size_t>(it - jump_times.begin());
        return k == 0 ? cumulative[0] : cumulative[k] - cumulative[k - 1];
    }

    double last_event_time() const {
        return jump_times.empty() ? -std::numeric_limits<double>::infinity() : jump_times.back();
    }

    double survival_uncured(double t, double eta) const {
        if (zero_tail && t > last_event_time()) return 0.0;
        return std::exp(-value(t) * std::exp(eta));
    }
};

// Landmark-scale survival data with split incidence/latency designs.
// Latency columns are ordered [Z | longitudinal summaries]; n_z marks the
// boundary between the beta and psi coefficient blocks.
struct CureData {
    Eigen::VectorXd time;   // post-landmark time, > 0
    Eigen::VectorXi event;  // 1 = event, 0 = censored
    Eigen::MatrixXd x;      // incidence covariates (no intercept column)
    Eigen::MatrixXd z_ext;  // latency covariates
    int n_z = 0;

    int size() const { return static_cast<int>(time.size()); }

    void validate() const {
        const int m = size();
        if (event.size() != m || x.rows() != m || z_ext.rows() != m)
            throw DataError("cure data dimensions disagree");
        if (n_z < 0 || n_z > z_ext.cols()) throw DataError("invalid latency split");
        for (int i = 0; i < m; ++i) {
            if (!(time[i] > 0.0)) throw DataError("post-landmark times must be positive");
            if (event[i] != 0 && event[i] != 1) throw DataError("event indicator outside {0,1}");
        }
    }
};

struct CureModelFit {
    double alpha0 = 0.0;
    Eigen::VectorXd alpha;  // incidence coefficients
    Eigen::VectorXd beta;   // latency coefficients on Z
    Eigen::VectorXd psi;    // latency coefficients on longitudinal summaries
    BaselineHazard baseline;
    Eigen::VectorXd posterior_q;      // input order
    std::vector<double> loglik_trace; // observed-data log-likelihood per iteration

    int iterations = 0;
    bool converged = false;
    bool incidence_capped = false;
    bool latency_capped = false;
    bool loglik_flagged = false; // a -inf observed log-likelihood was encountered

    Eigen::VectorXd latency_coefficients() const {
        Eigen::VectorXd th(beta.size() + psi.size());
        th << beta, psi;
        return th;
    }
};

// Posterior probability of being uncured given survival to t (E-step).
inline double estep_q(double pi, double s_uncured, int delta) {
    if (delta == 1) return 1.0;
    const double num = pi * s_uncured;
    return num / ((1.0 - pi) + num);
}

namespace cure_detail {

constexpr double kLinearPredictorCap = 15.0;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// fractional-response logistic log-likelihood:
// sum_i q_i log pi_i + (1 - q_i) log(1 - pi_i)
inline double q1_value(const Eigen::MatrixXd& x, const Eigen::VectorXd& q,
                       double alpha0, const Eigen::VectorXd& alpha) {
    double v = 0.0;
    for (int i = 0; i < x.rows(); ++i) {
        const double eta = alpha0 + x.row(i).dot(alpha);
        // log pi = -log(1+e^-eta), log(1-pi) = -log(1+e^eta)
        v += -q[i] * std::log1p(std::exp(-eta)) - (1.0 - q[i]) * std::log1p(std::exp(eta));
    }
    return v;
}

inline Eigen::VectorXd q1_gradient(const Eigen::MatrixXd& x, const Eigen::VectorXd& q,
                                   double alpha0, const Eigen::VectorXd& alpha) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(x.cols() + 1);
    for (int i = 0; i < x.rows(); ++i) {
        const double resid = q[i] - sigmoid(alpha0 + x.row(i).dot(alpha));
        g[0] += resid;
        g.tail(x.cols()) += resid * x.row(i).transpose();
    }
    return g;
}

struct IncidenceResult {
    double alpha0 = 0.0;
    Eigen::VectorXd alpha;
    bool capped = false;
};

} // namespace cure_detail

// M-step for the incidence component: weighted logistic regression of the
// posterior memberships on X by Newton-Raphson. Coefficients are rescaled
// onto the +-15 linear-predictor cap when the likelihood separates.
inline cure_detail::IncidenceResult mstep_incidence(const Eigen::MatrixXd& x,
                                                    const Eigen::VectorXd& q,
                                                    double alpha0_start = 0.0,
                                                    const Eigen::VectorXd* alpha_start = nullptr) {
    using namespace cure_detail;
    const int m = static_cast<int>(x.rows());
    const int p = static_cast<int>(x.cols());
    IncidenceResult res;
    res.alpha0 = alpha0_start;
    res.alpha = alpha_start ? *alpha_start : Eigen::VectorXd::Zero(p);

    double cur = q1_value(x, q, res.alpha0, res.alpha);

    for (int iter = 0; iter < 50; ++iter) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(p + 1);
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p + 1, p + 1);
        for (int i = 0; i < m; ++i) {
            const double pi = sigmoid(res.alpha0 + x.row(i).dot(res.alpha));
            const double resid = q[i] - pi;
            const double w = pi * (1.0 - pi);
            Eigen::VectorXd xi(p + 1);
            xi[0] = 1.0;
            xi.tail(p) = x.row(i).transpose();
            g += resid * xi;
            h += w * (xi * xi.transpose());
        }
        if (g.lpNorm<Eigen::Infinity>() < 1e-8) break;

        Eigen::LLT<Eigen::MatrixXd> llt(h);
        if (llt.info() != Eigen::Success) {
            if (iter == 0) throw NumericError("singular Hessian in incidence update");
            res.capped = true;
            break;
        }
        const Eigen::VectorXd step = llt.solve(g);

        double t = 1.0;
        double a0_new = res.alpha0;
        Eigen::VectorXd a_new = res.alpha;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls) {
            a0_new = res.alpha0 + t * step[0];
            a_new = res.alpha + t * step.tail(p);
            const double v = q1_value(x, q, a0_new, a_new);
            if (v >= cur) {
                cur = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;

        // separation guard on the linear-predictor scale
        double max_eta = std::abs(a0_new);
        for (int i = 0; i < m; ++i)
            max_eta = std::max(max_eta, std::abs(a0_new + x.row(i).dot(a_new)));
        if (max_eta > kLinearPredictorCap) {
            const double scale = kLinearPredictorCap / max_eta;
            const double a0_cap = a0_new * scale;
            const Eigen::VectorXd a_cap = a_new * scale;
            const double v_cap = q1_value(x, q, a0_cap, a_cap);
            if (v_cap >= q1_value(x, q, res.alpha0, res.alpha)) {
                res.alpha0 = a0_cap;
                res.alpha = a_cap;
            }
            res.capped = true;
            break;
        }

        const double delta = std::max(std::abs(a0_new - res.alpha0),
                                      (a_new - res.alpha).lpNorm<Eigen::Infinity>());
        res.alpha0 = a0_new;
        res.alpha = a_new;
        if (delta < 1e-12) break;
    }
    return res;
}

namespace cure_detail {

// q-weighted Cox partial log-likelihood pieces under Breslow tie handling.
// Subjects must be sorted by ascending time.
struct CoxSums {
    double loglik = 0.0;
    Eigen::VectorXd gradient;
    Eigen::MatrixXd neg_hessian;
};

inline CoxSums cox_partial(const Eigen::MatrixXd& d, const Eigen::VectorXd& time,
                           const Eigen::VectorXi& event, const Eigen::VectorXd& q,
                           const Eigen::VectorXd& theta, bool with_derivatives) {
    const int m = static_cast<int>(time.size());
    const int p = static_cast<int>(d.cols());
    CoxSums out;
    out.gradient = Eigen::VectorXd::Zero(p);
    out.neg_hessian = Eigen::MatrixXd::Zero(p, p);

    Eigen::VectorXd eta = d * theta;
    double s0 = 0.0;
    Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);

    int i = m - 1;
    while (i >= 0) {
        const double tau = time[i];
        int j = i;
        // absorb everyone with t == tau into the risk set
        while (j >= 0 && time[j] == tau) {
            const double w = q[j] * std::exp(eta[j]);
            s0 += w;
            if (with_derivatives) {
                s1 += w * d.row(j).transpose();
                s2 += w * (d.row(j).transpose() * d.row(j));
            }
            --j;
        }
        // event contributions at tau
        int d_k = 0;
        for (int k = j + 1; k <= i; ++k) {
            if (event[k] == 1) {
                ++d_k;
                out.loglik += eta[k];
                if (with_derivatives) out.gradient += d.row(k).transpose();
            }
        }
        if (d_k > 0) {
            out.loglik -= d_k * std::log(s0);
            if (with_derivatives) {
                const Eigen::VectorXd sbar = s1 / s0;
                out.gradient -= d_k * sbar;
                out.neg_hessian += d_k * (s2 / s0 - sbar * sbar.transpose());
            }
        }
        i = j;
    }
    return out;
}

// modified Breslow estimator: jumps d_k over q-weighted risk sums
inline BaselineHazard breslow(const Eigen::MatrixXd& d, const Eigen::VectorXd& time,
                              const Eigen::VectorXi& event, const Eigen::VectorXd& q,
                              const Eigen::VectorXd& theta) {
    const int m = static_cast<int>(time.size());
    BaselineHazard h0;
    Eigen::VectorXd eta = d * theta;

    double s0 = 0.0;
    std::vector<std::pair<double, double>> jumps; // (time, d_k / s0) descending
    int i = m - 1;
    while (i >= 0) {
        const double tau = time[i];
        int j = i;
        while (j >= 0 && time[j] == tau) {
            s0 += q[j] * std::exp(eta[j]);
            --j;
        }
        int d_k = 0;
        for (int k = j + 1; k <= i; ++k) d_k += event[k];
        if (d_k > 0) jumps.emplace_back(tau, d_k / s0);
        i = j;
    }
    std::reverse(jumps.begin(), jumps.end());
    double cum = 0.0;
    for (const auto& [tau, jump] : jumps) {
        cum += jump;
        h0.jump_times.push_back(tau);
        h0.cumulative.push_back(cum);
    }
    return h0;
}

struct LatencyResult {
    Eigen::VectorXd theta;
    BaselineHazard baseline;
    bool capped = false;
    bool no_events = false;
};

} // namespace cure_detail

// M-step for the latency component: one damped Newton pass on the q-weighted
// Cox partial likelihood, then the Breslow baseline update at the new
// coefficients. Subjects must be sorted by ascending time.
inline cure_detail::LatencyResult mstep_latency(const Eigen::MatrixXd& d,
                                                const Eigen::VectorXd& time,
                                                const Eigen::VectorXi& event,
                                                const Eigen::VectorXd& q,
                                                const Eigen::VectorXd& theta_start) {
    using namespace cure_detail;
    LatencyResult res;
    res.theta = theta_start;

    if (event.sum() == 0) {
        res.no_events = true;
        res.baseline = BaselineHazard{};
        return res;
    }
    if (d.cols() == 0) {
        res.baseline = breslow(d, time, event, q, res.theta);
        return res;
    }

    const CoxSums cur = cox_partial(d, time, event, q, res.theta, true);
    Eigen::LLT<Eigen::MatrixXd> llt(cur.neg_hessian);
    if (llt.info() == Eigen::Success) {
        const Eigen::VectorXd step = llt.solve(cur.gradient);
        double t = 1.0;
        for (int ls = 0; ls < 30; ++ls) {
            const Eigen::VectorXd cand = res.theta + t * step;
            const double v = cox_partial(d, time, event, q, cand, false).loglik;
            if (std::isfinite(v) && v >= cur.loglik) {
                res.theta = cand;
                break;
            }
            t *= 0.5;
        }
    }

    // divergence guard on the latency linear predictor
    double max_eta = (d * res.theta).cwiseAbs().maxCoeff();
    if (max_eta > kLinearPredictorCap) {
        const Eigen::VectorXd cand = res.theta * (kLinearPredictorCap / max_eta);
        if (cox_partial(d, time, event, q, cand, false).loglik >=
            cox_partial(d, time, event, q, theta_start, false).loglik)
            res.theta = cand;
        else
            res.theta = theta_start;
        res.capped = true;
    }

    res.baseline = breslow(d, time, event, q, res.theta);
    return res;
}

// Ordinary (or q-weighted) Cox fit by iterated Newton steps; used for EM
// initialization and as the q = 1 reference fit.
inline cure_detail::LatencyResult fit_weighted_cox(const Eigen::MatrixXd& d,
                                                   const Eigen::VectorXd& time,
                                                   const Eigen::VectorXi& event,
                                                   const Eigen::VectorXd& q,
                                                   int max_iterations = 100) {
    cure_detail::LatencyResult res;
    res.theta = Eigen::VectorXd::Zero(d.cols());
    for (int it = 0; it < max_iterations; ++it) {
        auto next = mstep_latency(d, time, event, q, res.theta);
        const double delta = (next.theta - res.theta).lpNorm<Eigen::Infinity>();
        res = std::move(next);
        if (res.capped || res.no_events || delta < 1e-10) break;
    }
    return res;
}

// Observed-data log-likelihood of the mixture, with the event density taken
// as hazard mass at the jump times of the step-function baseline.
inline double observed_loglik(const Eigen::MatrixXd& x, const Eigen::MatrixXd& d,
                              const Eigen::VectorXd& time, const Eigen::VectorXi& event,
                              double alpha0, const Eigen::VectorXd& alpha,
                              const Eigen::VectorXd& theta, const BaselineHazard& h0,
                              bool* flagged = nullptr) {
    double ll = 0.0;
    for (int i = 0; i < time.size(); ++i) {
        const double pi = cure_detail::sigmoid(alpha0 + x.row(i).dot(alpha));
        const double eta = d.cols() > 0 ? d.row(i).dot(theta) : 0.0;
        if (event[i] == 1) {
            const double jump = h0.jump_at(time[i]);
            if (jump <= 0.0 || pi <= 0.0) {
                if (flagged) *flagged = true;
                return -std::numeric_limits<double>::infinity();
            }
            ll += std::log(pi) + std::log(jump) + eta - h0.value(time[i]) * std::exp(eta);
        } else {
            const double su = h0.survival_uncured(time[i], eta);
            const double mix = (1.0 - pi) + pi * su;
            if (mix <= 0.0) {
                if (flagged) *flagged = true;
                return -std::numeric_limits<double>::infinity();
            }
            ll += std::log(mix);
        }
    }
    return ll;
}

struct CureEmOptions {
    int max_iterations = 500;
    double tol = 1e-6;
};

// EM estimation of the Cox PH mixture cure model on landmark data.
inline CureModelFit fit_cure_em(const CureData& data, const CureEmOptions& opts = {}) {
    data.validate();
    const int m = data.size();
    if (data.event.sum() == 0) throw DataError("cure model requires at least one event");

    // canonical subject order: ascending time, events first within ties, then
    // lexicographic covariates; estimates become invariant to input order
    std::vector<int> ord(m);
    std::iota(ord.begin(), ord.end(), 0);
    std::sort(ord.begin(), ord.end(), [&](int a, int b) {
        if (data.time[a] != data.time[b]) return data.time[a] < data.time[b];
        if (data.event[a] != data.event[b]) return data.event[a] > data.event[b];
        for (int j = 0; j < data.x.cols(); ++j)
            if (data.x(a, j) != data.x(b, j)) return data.x(a, j) < data.x(b, j);
        for (int j = 0; j < data.z_ext.cols(); ++j)
            if (data.z_ext(a, j) != data.z_ext(b, j)) return data.z_ext(a, j) < data.z_ext(b, j);
        return false;
    });

    Eigen::VectorXd time(m);
    Eigen::VectorXi event(m);
    Eigen::MatrixXd x(m, data.x.cols()), d(m, data.z_ext.cols());
    for (int i = 0; i < m; ++i) {
        time[i] = data.time[ord[i]];
        event[i] = data.event[ord[i]];
        x.row(i) = data.x.row(ord[i]);
        d.row(i) = data.z_ext.row(ord[i]);
    }

    CureModelFit fit;

    // initialization: ordinary logistic of delta on X, ordinary Cox for the
    // latency, posteriors from one E-step at those values
    Eigen::VectorXd q = event.cast<double>();
    auto inc = mstep_incidence(x, q);
    auto lat = fit_weighted_cox(d, time, event, Eigen::VectorXd::Ones(m));

    Eigen::VectorXd theta = lat.theta;
    BaselineHazard h0 = lat.baseline;
    double alpha0 = inc.alpha0;
    Eigen::VectorXd alpha = inc.alpha;

    const auto run_estep = [&](Eigen::VectorXd& qv) {
        for (int i = 0; i < m; ++i) {
            const double pi = cure_detail::sigmoid(alpha0 + x.row(i).dot(alpha));
            const double eta = d.cols() > 0 ? d.row(i).dot(theta) : 0.0;
            qv[i] = estep_q(pi, h0.survival_uncured(time[i], eta), event[i]);
        }
    };

    bool flagged = false;
    fit.loglik_trace.push_back(
        observed_loglik(x, d, time, event, alpha0, alpha, theta, h0, &flagged));

    for (int iter = 1; iter <= opts.max_iterations; ++iter) {
        fit.iterations = iter;
        run_estep(q);

        auto inc_r = mstep_incidence(x, q, alpha0, &alpha);
        auto lat_r = mstep_latency(d, time, event, q, theta);
        fit.incidence_capped = fit.incidence_capped || inc_r.capped;
        fit.latency_capped = fit.latency_capped || lat_r.capped;

        const double delta = std::max(
            {std::abs(inc_r.alpha0 - alpha0),
             (inc_r.alpha - alpha).lpNorm<Eigen::Infinity>(),
             d.cols() > 0 ? (lat_r.theta - theta).lpNorm<Eigen::Infinity>() : 0.0});
        const double scale =
            1.0 + std::max(std::abs(alpha0),
                           std::max(alpha.size() ? alpha.lpNorm<Eigen::Infinity>() : 0.0,
                                    theta.size() ? theta.lpNorm<Eigen::Infinity>() : 0.0));

        alpha0 = inc_r.alpha0;
        alpha = inc_r.alpha;
        theta = lat_r.theta;
        h0 = lat_r.baseline;

        fit.loglik_trace.push_back(
            observed_loglik(x, d, time, event, alpha0, alpha, theta, h0, &flagged));

        if (delta / scale < opts.tol) {
            fit.converged = true;
            break;
        }
    }

    run_estep(q);
    fit.alpha0 = alpha0;
    fit.alpha = alpha;
    fit.beta = theta.head(data.n_z);
    fit.psi = theta.tail(data.z_ext.cols() - data.n_z);
    fit.baseline = h0;
    fit.loglik_flagged = flagged;
    fit.posterior_q.resize(m);
    for (int i = 0; i < m; ++i) fit.posterior_q[ord[i]] = q[i];
    return fit;
}

// Posterior membership for a (possibly out-of-sample) subject under a fitted
// model; this is the E-step formula applied at the fitted parameters.
inline double posterior_uncured(const CureModelFit& fit, const Eigen::VectorXd& x_row,
                                const Eigen::VectorXd& zext_row, double time, int event) {
    const double pi = cure_detail::sigmoid(fit.alpha0 + x_row.dot(fit.alpha));
    const double eta = zext_row.size() > 0 ? zext_row.dot(fit.latency_coefficients()) : 0.0;
    return estep_q(pi, fit.baseline.survival_uncured(time, eta), event);
}

} // namespace curemark
