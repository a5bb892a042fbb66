#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <vector>

namespace curemark::optim {

struct Result {
    Eigen::VectorXd x;
    double value = 0.0;
    int iterations = 0;
    bool converged = false;
    // accepted objective values, one per iteration; non-increasing by
    // construction of the backtracking line search
    std::vector<double> trace;
};

struct Options {
    int max_iterations = 200;
    double step_tol = 1e-7;
    double value_tol = 1e-12;
    double fd_step = 1e-6;
};

namespace detail {

inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                   const Eigen::VectorXd& x, double h0) {
    const int n = static_cast<int>(x.size());
    Eigen::VectorXd g(n), xp = x;
    for (int k = 0; k < n; ++k) {
        const double h = h0 * std::max(1.0, std::abs(x[k]));
        xp[k] = x[k] + h;
        const double fp = f(xp);
        xp[k] = x[k] - h;
        const double fm = f(xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * h);
    }
    return g;
}

} // namespace detail

// BFGS with backtracking (Armijo) line search and central-difference
// gradients. Minimizes f; every accepted iterate strictly improves.
inline Result minimize_bfgs(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x0, const Options& opts = {}) {
    const int n = static_cast<int>(x0.size());
    Result res;
    res.x = x0;
    res.value = f(x0);
    res.trace.push_back(res.value);

    Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
    Eigen::VectorXd g = detail::fd_gradient(f, res.x, opts.fd_step);

    for (int iter = 0; iter < opts.max_iterations; ++iter) {
        res.iterations = iter + 1;
        Eigen::VectorXd d = -(H * g);
        double slope = g.dot(d);
        if (!(slope < 0.0)) { // H lost positive definiteness; reset
            H.setIdentity();
            d = -g;
            slope = g.dot(d);
            if (!(slope < 0.0)) {
                res.converged = true;
                break;
            }
        }

        double t = 1.0;
        double fnew = 0.0;
        bool accepted = false;
        for (int ls = 0; ls < 40; ++ls) {
            fnew = f(res.x + t * d);
            if (std::isfinite(fnew) && fnew <= res.value + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            res.converged = true; // no descent at line-search resolution
            break;
        }

        const Eigen::VectorXd step = t * d;
        const Eigen::VectorXd xnew = res.x + step;
        const Eigen::VectorXd gnew = detail::fd_gradient(f, xnew, opts.fd_step);
        const Eigen::VectorXd yvec = gnew - g;
        const double sy = step.dot(yvec);
        if (sy > 1e-12) {
            const Eigen::VectorXd Hy = H * yvec;
            const double yHy = yvec.dot(Hy);
            H += ((sy + yHy) / (sy * sy)) * (step * step.transpose()) -
                 (Hy * step.transpose() + step * Hy.transpose()) / sy;
        }

        const double df = res.value - fnew;
        res.x = xnew;
        res.value = fnew;
        res.trace.push_back(fnew);
        g = gnew;

        if (step.lpNorm<Eigen::Infinity>() < opts.step_tol ||
            df < opts.value_tol * (1.0 + std::abs(fnew))) {
            res.converged = true;
            break;
        }
    }
    return res;
}

// Nelder-Mead simplex; derivative-free fallback used by a few robustness
// paths and handy for small problems.
inline Result minimize_simplex(const std::function<double(const Eigen::VectorXd&)>& f,
                               const Eigen::VectorXd& x0, double scale = 0.5,
                               int max_iterations = 2000, double tol = 1e-10) {
    const int n = static_cast<int>(x0.size());
    std::vector<Eigen::VectorXd> pts(n + 1, x0);
    std::vector<double> vals(n + 1);
    for (int i = 1; i <= n; ++i) pts[i][i - 1] += scale * std::max(1.0, std::abs(x0[i - 1]));
    for (int i = 0; i <= n; ++i) vals[i] = f(pts[i]);

    Result res;
    for (int iter = 0; iter < max_iterations; ++iter) {
        res.iterations = iter + 1;
        int lo = 0, hi = 0, hi2 = 0;
        for (int i = 1; i <= n; ++i) {
            if (vals[i] < vals[lo]) lo = i;
            if (vals[i] > vals[hi]) hi = i;
        }
        for (int i = 0; i <= n; ++i)
            if (i != hi && vals[i] > vals[hi2]) hi2 = i;

        if (std::abs(vals[hi] - vals[lo]) < tol * (1.0 + std::abs(vals[lo]))) {
            res.converged = true;
            break;
        }

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i <= n; ++i)
            if (i != hi) centroid += pts[i];
        centroid /= n;

        Eigen::VectorXd refl = centroid + (centroid - pts[hi]);
        double frefl = f(refl);
        if (frefl < vals[lo]) {
            Eigen::VectorXd exp2 = centroid + 2.0 * (centroid - pts[hi]);
            double fexp = f(exp2);
            if (fexp < frefl) {
                pts[hi] = exp2;
                vals[hi] = fexp;
            } else {
                pts[hi] = refl;
                vals[hi] = frefl;
            }
        } else if (frefl < vals[hi2]) {
            pts[hi] = refl;
            vals[hi] = frefl;
        } else {
            Eigen::VectorXd contr = centroid + 0.5 * (pts[hi] - centroid);
            double fcontr = f(contr);
            if (fcontr < vals[hi]) {
                pts[hi] = contr;
                vals[hi] = fcontr;
            } else {
                for (int i = 0; i <= n; ++i) {
                    if (i == lo) continue;
                    pts[i] = pts[lo] + 0.5 * (pts[i] - pts[lo]);
                    vals[i] = f(pts[i]);
                }
            }
        }
    }
    int lo = 0;
    for (int i = 1; i <= n; ++i)
        if (vals[i] < vals[lo]) lo = i;
    res.x = pts[lo];
    res.value = vals[lo];
    return res;
}

} // namespace curemark::optim
