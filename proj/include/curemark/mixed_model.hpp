#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "curemark/data.hpp"
#include "curemark/errors.hpp"
#include "curemark/optim.hpp"

namespace curemark {

enum class Link { identity, logit, log };

inline std::string link_name(Link link) {
    switch (link) {
        case Link::identity: return "identity";
        case Link::logit: return "logit";
        case Link::log: return "log";
    }
    return "identity";
}

inline Link link_from_name(const std::string& s) {
    if (s == "identity") return Link::identity;
    if (s == "logit") return Link::logit;
    if (s == "log") return Link::log;
    throw DataError("unknown link '" + s + "'");
}

namespace links {

// mean as a function of the linear predictor
inline double mean(Link link, double eta) {
    switch (link) {
        case Link::identity: return eta;
        case Link::logit: return 1.0 / (1.0 + std::exp(-eta));
        case Link::log: return std::exp(eta);
    }
    return eta;
}

// d mean / d eta
inline double mean_deriv(Link link, double mu) {
    switch (link) {
        case Link::identity: return 1.0;
        case Link::logit: return mu * (1.0 - mu);
        case Link::log: return mu;
    }
    return 1.0;
}

// canonical variance function
inline double variance(Link link, double mu) {
    switch (link) {
        case Link::identity: return 1.0;
        case Link::logit: return mu * (1.0 - mu);
        case Link::log: return mu;
    }
    return 1.0;
}

inline double eta_of_mean(Link link, double mu) {
    switch (link) {
        case Link::identity: return mu;
        case Link::logit: return std::log(mu / (1.0 - mu));
        case Link::log: return std::log(mu);
    }
    return mu;
}

} // namespace links

// Fixed design W = [1, t, ..., t^fixed_time_degree | baseline columns];
// random design V = [1, t, ..., t^random_time_degree]. V's columns are a
// subset of W's by construction.
struct MixedModelSpec {
    Link link = Link::identity;
    int fixed_time_degree = 1;
    int random_time_degree = 1;
    int n_baseline = 0; // baseline covariate columns appended to W

    void validate() const {
        if (fixed_time_degree < 0 || random_time_degree < 0)
            throw DataError("polynomial degrees must be nonnegative");
        if (random_time_degree > fixed_time_degree)
            throw DataError("random design must be a subset of the fixed design");
        if (n_baseline < 0) throw DataError("n_baseline must be nonnegative");
    }

    int p_fixed() const { return fixed_time_degree + 1 + n_baseline; }
    int p_random() const { return random_time_degree + 1; }
};

// One subject's measurement series for a single longitudinal covariate.
struct LmmSubject {
    std::string subject_id;
    Eigen::VectorXd times;
    Eigen::VectorXd values;
    Eigen::VectorXd baseline; // length n_baseline, possibly empty
};

struct LmmData {
    std::vector<LmmSubject> subjects;

    int total_observations() const {
        int n = 0;
        for (const auto& s : subjects) n += static_cast<int>(s.times.size());
        return n;
    }
};

// Slice one covariate out of a landmark dataset, measurements sorted by time.
inline LmmData covariate_slice(const LandmarkDataset& lm, const std::string& covariate) {
    LmmData data;
    data.subjects.resize(lm.subjects.rows.size());
    for (std::size_t i = 0; i < lm.subjects.rows.size(); ++i)
        data.subjects[i].subject_id = lm.subjects.rows[i].subject_id;

    std::vector<std::vector<std::pair<double, double>>> buf(lm.subjects.rows.size());
    for (const auto& r : lm.history.records) {
        if (r.covariate != covariate) continue;
        const int i = lm.subject_index(r.subject_id);
        if (i >= 0) buf[i].emplace_back(r.time, r.value);
    }
    for (std::size_t i = 0; i < buf.size(); ++i) {
        auto& v = buf[i];
        std::sort(v.begin(), v.end());
        data.subjects[i].times.resize(v.size());
        data.subjects[i].values.resize(v.size());
        for (std::size_t j = 0; j < v.size(); ++j) {
            data.subjects[i].times[j] = v[j].first;
            data.subjects[i].values[j] = v[j].second;
        }
    }
    return data;
}

struct MixedModelFit {
    MixedModelSpec spec;
    Eigen::VectorXd gamma;      // fixed effects
    Eigen::MatrixXd sigma_b;    // random-effect covariance (p_random x p_random)
    double sigma_eps_sq = 0.0;  // residual variance on the link/working scale

    // convergence record
    double reml_loglik = 0.0;
    int iterations = 0;
    int pql_cycles = 0;
    bool converged = false;
    bool boundary = false; // singular (or near-singular) sigma_b
    bool damped = false;   // PQL step-halving or link-boundary clamp engaged
    std::vector<double> criterion_trace; // REML criterion per accepted optimizer step
};

namespace detail {

inline void design_rows(const MixedModelSpec& spec, const LmmSubject& s,
                        Eigen::MatrixXd& W, Eigen::MatrixXd& V) {
    const int n = static_cast<int>(s.times.size());
    W.resize(n, spec.p_fixed());
    V.resize(n, spec.p_random());
    for (int j = 0; j < n; ++j) {
        double tp = 1.0;
        for (int d = 0; d <= spec.fixed_time_degree; ++d) {
            W(j, d) = tp;
            tp *= s.times[j];
        }
        for (int k = 0; k < spec.n_baseline; ++k) W(j, spec.fixed_time_degree + 1 + k) = s.baseline[k];
        tp = 1.0;
        for (int d = 0; d <= spec.random_time_degree; ++d) {
            V(j, d) = tp;
            tp *= s.times[j];
        }
    }
}

// Per-subject cross-products against the inverse weight matrix diag(a);
// fixed for the duration of one REML solve, so the profiled criterion can be
// evaluated in O(p^3) per subject regardless of series length.
struct GramBlocks {
    Eigen::MatrixXd Gww, Gwv, Gvv;
    Eigen::VectorXd gwy, gvy;
    double syy = 0.0;
    double logdet_a = 0.0;
    int n = 0;
};

inline GramBlocks build_grams(const Eigen::MatrixXd& W, const Eigen::MatrixXd& V,
                              const Eigen::VectorXd& y, const Eigen::VectorXd& a) {
    GramBlocks g;
    g.n = static_cast<int>(y.size());
    const Eigen::VectorXd ai = a.cwiseInverse();
    const Eigen::MatrixXd Wa = ai.asDiagonal() * W;
    g.Gww = W.transpose() * Wa;
    g.Gwv = Wa.transpose() * V;
    g.Gvv = V.transpose() * (ai.asDiagonal() * V);
    g.gwy = Wa.transpose() * y;
    g.gvy = V.transpose() * (ai.cwiseProduct(y));
    g.syy = y.dot(ai.cwiseProduct(y));
    g.logdet_a = a.array().log().sum();
    return g;
}

// theta -> lower-triangular relative Cholesky factor (log-diagonal scale)
inline Eigen::MatrixXd theta_to_chol(const Eigen::VectorXd& theta, int q) {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q, q);
    int k = 0;
    for (int j = 0; j < q; ++j)
        for (int i = j; i < q; ++i) {
            L(i, j) = (i == j) ? std::exp(theta[k]) : theta[k];
            ++k;
        }
    return L;
}

struct RemlEval {
    double loglik = 0.0;
    Eigen::VectorXd gamma;
    double sigma2 = 0.0;
    Eigen::MatrixXd sigma_b;
};

// Profiled REML criterion. The marginal covariance is written as
// sigma^2 * (diag(a) + V L L' V'); both gamma and sigma^2 are profiled out.
class RemlObjective {
  public:
    RemlObjective(std::vector<GramBlocks> grams, int p, int q)
        : grams_(std::move(grams)), p_(p), q_(q) {
        for (const auto& g : grams_) n_total_ += g.n;
    }

    int n_params() const { return q_ * (q_ + 1) / 2; }
    int n_total() const { return n_total_; }

    double operator()(const Eigen::VectorXd& theta) const {
        return -evaluate(theta).loglik;
    }

    RemlEval evaluate(const Eigen::VectorXd& theta, bool throw_on_singular = false) const {
        const Eigen::MatrixXd L = theta_to_chol(theta, q_);
        Eigen::MatrixXd Sww = Eigen::MatrixXd::Zero(p_, p_);
        Eigen::VectorXd swy = Eigen::VectorXd::Zero(p_);
        double syy = 0.0, logdet = 0.0;

        for (const auto& g : grams_) {
            Eigen::MatrixXd C = Eigen::MatrixXd::Identity(q_, q_) + L.transpose() * g.Gvv * L;
            Eigen::LLT<Eigen::MatrixXd> llt(C);
            if (llt.info() != Eigen::Success) return {-std::numeric_limits<double>::infinity(), {}, 0.0, {}};
            logdet += 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum() + g.logdet_a;
            const Eigen::MatrixXd U = g.Gwv * L;            // p x q
            const Eigen::VectorXd v = L.transpose() * g.gvy; // q
            Sww.noalias() += g.Gww - U * llt.solve(U.transpose());
            swy.noalias() += g.gwy - U * llt.solve(v);
            syy += g.syy - v.dot(llt.solve(v));
        }

        Eigen::LLT<Eigen::MatrixXd> lltS(Sww);
        if (lltS.info() != Eigen::Success) {
            // at the starting point this is a rank-deficient design; during
            // line search it just marks an inadmissible variance ratio
            if (throw_on_singular)
                throw NumericError("singular fixed-effect design in mixed model");
            return {-std::numeric_limits<double>::infinity(), {}, 0.0, {}};
        }
        RemlEval ev;
        ev.gamma = lltS.solve(swy);
        const double rss = std::max(syy - swy.dot(ev.gamma), 0.0);
        const double dof = static_cast<double>(n_total_ - p_);
        ev.sigma2 = rss / dof;
        const double log_s2 = std::log(std::max(ev.sigma2, 1e-300));
        const double logdet_sww = 2.0 * Eigen::MatrixXd(lltS.matrixL()).diagonal().array().log().sum();
        ev.loglik = -0.5 * (dof * (log_s2 + 1.0 + std::log(2.0 * std::numbers::pi)) + logdet + logdet_sww);
        ev.sigma_b = ev.sigma2 * (L * L.transpose());
        return ev;
    }

  private:
    std::vector<GramBlocks> grams_;
    int p_, q_;
    int n_total_ = 0;
};

} // namespace detail

// REML log-likelihood of a stored fit, recomputed from the unprofiled
// criterion with dense per-subject marginal covariances. Weights a give the
// diagonal scale of the residual covariance (identity for the plain LMM).
inline double reml_loglik_at(const LmmData& data, const MixedModelSpec& spec,
                             const Eigen::MatrixXd& sigma_b, double sigma2,
                             const std::vector<Eigen::VectorXd>* weights = nullptr,
                             const std::vector<Eigen::VectorXd>* responses = nullptr) {
    const int p = spec.p_fixed();
    Eigen::MatrixXd Sww = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd swy = Eigen::VectorXd::Zero(p);
    double syy = 0.0, logdet = 0.0;
    int n_total = 0;

    struct Cached {
        Eigen::MatrixXd W;
        Eigen::LLT<Eigen::MatrixXd> llt;
        Eigen::VectorXd y;
    };
    std::vector<Cached> cache;
    cache.reserve(data.subjects.size());

    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& s = data.subjects[i];
        const int n = static_cast<int>(s.times.size());
        n_total += n;
        Eigen::MatrixXd W, V;
        detail::design_rows(spec, s, W, V);
        Eigen::VectorXd a = weights ? (*weights)[i] : Eigen::VectorXd::Ones(n);
        Eigen::VectorXd y = responses ? (*responses)[i] : s.values;
        Eigen::MatrixXd lambda = V * sigma_b * V.transpose();
        lambda += (sigma2 * a).asDiagonal();
        Cached c{std::move(W), Eigen::LLT<Eigen::MatrixXd>(lambda), std::move(y)};
        if (c.llt.info() != Eigen::Success)
            throw NumericError("marginal covariance not positive definite");
        logdet += 2.0 * Eigen::MatrixXd(c.llt.matrixL()).diagonal().array().log().sum();
        Sww.noalias() += c.W.transpose() * c.llt.solve(c.W);
        swy.noalias() += c.W.transpose() * c.llt.solve(c.y);
        syy += c.y.dot(c.llt.solve(c.y));
        cache.push_back(std::move(c));
    }
    Eigen::LLT<Eigen::MatrixXd> lltS(Sww);
    if (lltS.info() != Eigen::Success) throw NumericError("singular fixed-effect design");
    const Eigen::VectorXd gamma = lltS.solve(swy);
    const double rss = syy - swy.dot(gamma);
    const double logdet_sww = 2.0 * Eigen::MatrixXd(lltS.matrixL()).diagonal().array().log().sum();
    return -0.5 * (logdet + logdet_sww + rss +
                   static_cast<double>(n_total - p) * std::log(2.0 * std::numbers::pi));
}

namespace detail {

inline MixedModelFit fit_weighted_lmm(const LmmData& data, const MixedModelSpec& spec,
                                      const std::vector<Eigen::VectorXd>& weights,
                                      const std::vector<Eigen::VectorXd>& responses,
                                      const Eigen::VectorXd* warm_theta = nullptr,
                                      Eigen::VectorXd* theta_out = nullptr) {
    spec.validate();
    const int p = spec.p_fixed();
    const int q = spec.p_random();

    std::vector<GramBlocks> grams;
    grams.reserve(data.subjects.size());
    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& s = data.subjects[i];
        if (s.times.size() == 0)
            throw DataError("subject '" + s.subject_id + "' has no observations");
        Eigen::MatrixXd W, V;
        design_rows(spec, s, W, V);
        grams.push_back(build_grams(W, V, responses[i], weights[i]));
    }

    RemlObjective obj(std::move(grams), p, q);
    if (obj.n_total() <= p)
        throw DataError("need more observations than fixed-effect columns");

    Eigen::VectorXd theta0 = Eigen::VectorXd::Zero(obj.n_params());
    if (warm_theta && warm_theta->size() == obj.n_params() &&
        std::isfinite(obj.evaluate(*warm_theta).loglik))
        theta0 = *warm_theta;
    obj.evaluate(theta0, /*throw_on_singular=*/true); // surfaces a rank-deficient design up front

    optim::Options opts;
    opts.max_iterations = 200;
    opts.step_tol = 1e-7;
    auto res = optim::minimize_bfgs([&obj](const Eigen::VectorXd& t) { return obj(t); }, theta0, opts);
    if (!res.converged)
        throw NumericError("REML optimization did not converge within 200 iterations");

    const RemlEval ev = obj.evaluate(res.x);
    MixedModelFit fit;
    fit.spec = spec;
    fit.gamma = ev.gamma;
    fit.sigma_b = ev.sigma_b;
    fit.sigma_eps_sq = ev.sigma2;
    fit.reml_loglik = ev.loglik;
    fit.iterations = res.iterations;
    fit.converged = res.converged;
    fit.criterion_trace.assign(res.trace.begin(), res.trace.end());
    for (auto& v : fit.criterion_trace) v = -v; // store as log-likelihood

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.sigma_b);
    const double tr = fit.sigma_b.trace();
    fit.boundary = es.eigenvalues().minCoeff() < 1e-8 * (1.0 + tr);
    fit.pql_cycles = 0;
    if (theta_out) *theta_out = res.x; // relative-Cholesky optimum, reusable as warm start
    return fit;
}

} // namespace detail

// Step 1, Gaussian case: REML fit of the linear mixed model for one
// longitudinal covariate on pre-landmark data.
inline MixedModelFit fit_lmm(const LmmData& data, const MixedModelSpec& spec) {
    if (spec.link != Link::identity)
        throw DataError("fit_lmm requires the identity link");
    std::vector<Eigen::VectorXd> weights, responses;
    weights.reserve(data.subjects.size());
    responses.reserve(data.subjects.size());
    for (const auto& s : data.subjects) {
        weights.push_back(Eigen::VectorXd::Ones(s.times.size()));
        responses.push_back(s.values);
    }
    return detail::fit_weighted_lmm(data, spec, weights, responses);
}

namespace detail {

inline double conditional_loglik(Link link, double y, double mu) {
    switch (link) {
        case Link::identity: return -0.5 * (y - mu) * (y - mu);
        case Link::logit: return y * std::log(mu) + (1.0 - y) * std::log(1.0 - mu);
        case Link::log: return y * std::log(mu) - mu - std::lgamma(y + 1.0);
    }
    return 0.0;
}

inline void clamp_mean(Link link, double& mu, bool& hit) {
    if (link == Link::logit) {
        if (mu < 1e-6) { mu = 1e-6; hit = true; }
        if (mu > 1.0 - 1e-6) { mu = 1.0 - 1e-6; hit = true; }
    } else if (link == Link::log) {
        if (mu < 1e-8) { mu = 1e-8; hit = true; }
    }
}

} // namespace detail

// Predicted random effects (empirical Bayes / BLUP). For non-identity links
// the working response at the fitted parameters replaces y, iterating the
// subject-level linearization to its fixed point.
struct RandomEffectPrediction {
    std::vector<std::string> subject_ids;
    Eigen::MatrixXd b; // one row per subject, p_random columns
    bool singular = false;
};

inline RandomEffectPrediction predict_random_effects(const MixedModelFit& fit, const LmmData& data) {
    const auto& spec = fit.spec;
    const int q = spec.p_random();
    RandomEffectPrediction out;
    out.subject_ids.reserve(data.subjects.size());
    out.b.resize(data.subjects.size(), q);

    const double sb_scale = fit.sigma_b.trace();
    const bool degenerate = sb_scale < 1e-12 && fit.sigma_eps_sq < 1e-12;
    if (degenerate) out.singular = true;

    for (std::size_t i = 0; i < data.subjects.size(); ++i) {
        const auto& s = data.subjects[i];
        out.subject_ids.push_back(s.subject_id);
        if (s.times.size() == 0) throw DataError("subject '" + s.subject_id + "' has no observations");
        Eigen::MatrixXd W, V;
        detail::design_rows(spec, s, W, V);
        if (degenerate || sb_scale == 0.0) {
            out.b.row(i).setZero();
            continue;
        }

        Eigen::VectorXd bhat = Eigen::VectorXd::Zero(q);
        const int n = static_cast<int>(s.times.size());
        for (int pass = 0; pass < 25; ++pass) {
            Eigen::VectorXd eta = W * fit.gamma + V * bhat;
            Eigen::VectorXd ystar(n), a(n);
            bool hit = false;
            for (int j = 0; j < n; ++j) {
                double mu = links::mean(spec.link, eta[j]);
                detail::clamp_mean(spec.link, mu, hit);
                const double d = links::mean_deriv(spec.link, mu);
                ystar[j] = eta[j] + (s.values[j] - mu) / d;
                a[j] = links::variance(spec.link, mu) / (d * d);
            }
            Eigen::MatrixXd M = V * fit.sigma_b * V.transpose();
            M += (fit.sigma_eps_sq * a).asDiagonal();
            Eigen::VectorXd r = ystar - W * fit.gamma;
            Eigen::LLT<Eigen::MatrixXd> llt(M);
            Eigen::VectorXd bnew;
            if (llt.info() == Eigen::Success) {
                bnew = fit.sigma_b * V.transpose() * llt.solve(r);
            } else {
                out.singular = true;
                bnew = fit.sigma_b * V.transpose() *
                       M.completeOrthogonalDecomposition().solve(r);
            }
            const double delta = (bnew - bhat).lpNorm<Eigen::Infinity>();
            bhat = bnew;
            if (spec.link == Link::identity || delta < 1e-10) break;
        }
        out.b.row(i) = bhat.transpose();
    }
    return out;
}

// Step 1, non-Gaussian case: penalized quasi-likelihood via iterated
// linearization. Alternates (a) working response and weights at the current
// fit, (b) weighted REML, until the estimates stabilize.
inline MixedModelFit fit_glmm_pql(const LmmData& data, const MixedModelSpec& spec) {
    spec.validate();
    if (spec.link == Link::identity) return fit_lmm(data, spec);

    const std::size_t m = data.subjects.size();
    // domain checks
    for (const auto& s : data.subjects)
        for (int j = 0; j < s.values.size(); ++j) {
            const double y = s.values[j];
            if (spec.link == Link::logit && y != 0.0 && y != 1.0)
                throw DataError("logit link requires responses in {0,1}");
            if (spec.link == Link::log && y < 0.0)
                throw DataError("log link requires nonnegative responses");
        }

    // initial linear predictor from family-typical fitted means
    std::vector<Eigen::VectorXd> eta(m);
    for (std::size_t i = 0; i < m; ++i) {
        const auto& s = data.subjects[i];
        eta[i].resize(s.values.size());
        for (int j = 0; j < s.values.size(); ++j) {
            double mu0 = spec.link == Link::logit ? (s.values[j] + 0.5) / 2.0 : s.values[j] + 0.1;
            eta[i][j] = links::eta_of_mean(spec.link, mu0);
        }
    }

    MixedModelFit fit;
    bool have_prev = false;
    Eigen::VectorXd prev_par;
    double prev_criterion = -std::numeric_limits<double>::infinity();
    bool damped = false;
    Eigen::VectorXd warm;
    int total_inner_iterations = 0;

    for (int cycle = 1; cycle <= 100; ++cycle) {
        std::vector<Eigen::VectorXd> ystar(m), a(m);
        bool hit = false;
        for (std::size_t i = 0; i < m; ++i) {
            const auto& s = data.subjects[i];
            const int n = static_cast<int>(s.values.size());
            ystar[i].resize(n);
            a[i].resize(n);
            for (int j = 0; j < n; ++j) {
                double mu = links::mean(spec.link, eta[i][j]);
                detail::clamp_mean(spec.link, mu, hit);
                const double d = links::mean_deriv(spec.link, mu);
                ystar[i][j] = eta[i][j] + (s.values[j] - mu) / d;
                a[i][j] = links::variance(spec.link, mu) / (d * d);
            }
        }
        if (hit) damped = true;

        MixedModelFit inner = detail::fit_weighted_lmm(data, spec, a, ystar,
                                                       warm.size() ? &warm : nullptr, &warm);
        total_inner_iterations += inner.iterations;

        // empirical Bayes effects under the working model
        RandomEffectPrediction blup;
        {
            blup.subject_ids.reserve(m);
            blup.b.resize(m, spec.p_random());
            for (std::size_t i = 0; i < m; ++i) {
                const auto& s = data.subjects[i];
                blup.subject_ids.push_back(s.subject_id);
                Eigen::MatrixXd W, V;
                detail::design_rows(spec, s, W, V);
                Eigen::MatrixXd M = V * inner.sigma_b * V.transpose();
                M += (inner.sigma_eps_sq * a[i]).asDiagonal();
                const Eigen::VectorXd r = ystar[i] - W * inner.gamma;
                Eigen::LLT<Eigen::MatrixXd> llt(M);
                if (llt.info() == Eigen::Success)
                    blup.b.row(i) = (inner.sigma_b * V.transpose() * llt.solve(r)).transpose();
                else
                    blup.b.row(i).setZero();
            }
        }

        // proposed linear predictor and PQL criterion
        std::vector<Eigen::VectorXd> eta_prop(m);
        auto criterion_of = [&](const std::vector<Eigen::VectorXd>& e) {
            double c = 0.0;
            Eigen::LDLT<Eigen::MatrixXd> ldlt(
                inner.sigma_b + 1e-12 * (1.0 + inner.sigma_b.trace()) *
                                    Eigen::MatrixXd::Identity(spec.p_random(), spec.p_random()));
            for (std::size_t i = 0; i < m; ++i) {
                const auto& s = data.subjects[i];
                for (int j = 0; j < s.values.size(); ++j) {
                    double mu = links::mean(spec.link, e[i][j]);
                    bool dummy = false;
                    detail::clamp_mean(spec.link, mu, dummy);
                    c += detail::conditional_loglik(spec.link, s.values[j], mu);
                }
                const Eigen::VectorXd bi = blup.b.row(i).transpose();
                c -= 0.5 * bi.dot(ldlt.solve(bi));
            }
            return c;
        };

        for (std::size_t i = 0; i < m; ++i) {
            const auto& s = data.subjects[i];
            Eigen::MatrixXd W, V;
            detail::design_rows(spec, s, W, V);
            eta_prop[i] = W * inner.gamma + V * blup.b.row(i).transpose();
        }
        double crit = criterion_of(eta_prop);
        int halvings = 0;
        while (have_prev && crit < prev_criterion - 1e-10 && halvings < 5) {
            for (std::size_t i = 0; i < m; ++i)
                eta_prop[i] = 0.5 * (eta_prop[i] + eta[i]);
            crit = criterion_of(eta_prop);
            ++halvings;
            damped = true;
        }
        // parameter-change convergence on (gamma, vec sigma_b); a stalled
        // quasi-likelihood with active boundary clamps also terminates,
        // since past the clamp the drifting parameters are unidentified
        Eigen::VectorXd par(inner.gamma.size() + spec.p_random() * spec.p_random());
        par << inner.gamma, Eigen::Map<const Eigen::VectorXd>(inner.sigma_b.data(),
                                                              inner.sigma_b.size());
        fit = inner;
        fit.pql_cycles = cycle;
        fit.iterations = total_inner_iterations;
        fit.damped = damped;
        if (have_prev) {
            const double rel = (par - prev_par).lpNorm<Eigen::Infinity>() /
                               (1.0 + prev_par.lpNorm<Eigen::Infinity>());
            const bool stalled = hit && std::abs(crit - prev_criterion) <
                                            1e-8 * (1.0 + std::abs(crit));
            if (rel < 1e-6 || stalled) {
                fit.converged = true;
                eta = std::move(eta_prop);
                return fit;
            }
        }
        eta = std::move(eta_prop);
        prev_criterion = crit;
        prev_par = par;
        have_prev = true;
    }
    fit.converged = false;
    throw NumericError("PQL did not converge within 100 cycles");
}

} // namespace curemark
