#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "curemark/errors.hpp"

namespace curemark {

// Metric evaluation outcome; `defined` is false when no comparable pairs or
// contributing subjects exist, `ties` marks score ties that contributed no
// credit under the strict-inequality convention.
struct MetricValue {
    double value = 0.0;
    bool defined = false;
    bool ties = false;     // score ties received no credit
    bool excluded = false; // subjects dropped for lack of a positive weight
};

// Kaplan-Meier estimate of the censoring survival G(t) = P(C > t),
// treating censoring as the event.
struct CensoringKm {
    std::vector<double> drop_times; // distinct times with censoring drops
    std::vector<double> values;     // G right after each drop

    double value(double t) const {
        auto it = std::upper_bound(drop_times.begin(), drop_times.end(), t);
        if (it == drop_times.begin()) return 1.0;
        return values[static_cast<std::size_t>(it - drop_times.begin()) - 1];
    }

    // left limit G(t-)
    double left(double t) const {
        auto it = std::lower_bound(drop_times.begin(), drop_times.end(), t);
        if (it == drop_times.begin()) return 1.0;
        return values[static_cast<std::size_t>(it - drop_times.begin()) - 1];
    }
};

inline CensoringKm km_censoring(const Eigen::VectorXd& time, const Eigen::VectorXi& event) {
    const int m = static_cast<int>(time.size());
    if (m == 0) throw DataError("empty dataset");
    std::vector<int> ord(m);
    for (int i = 0; i < m; ++i) ord[i] = i;
    std::sort(ord.begin(), ord.end(), [&](int a, int b) { return time[a] < time[b]; });

    CensoringKm km;
    double g = 1.0;
    int i = 0;
    while (i < m) {
        const double tau = time[ord[i]];
        int at_risk = m - i;
        int censored_here = 0;
        while (i < m && time[ord[i]] == tau) {
            if (event[ord[i]] == 0) ++censored_here;
            ++i;
        }
        if (censored_here > 0) {
            g *= 1.0 - static_cast<double>(censored_here) / at_risk;
            km.drop_times.push_back(tau);
            km.values.push_back(g);
        }
    }
    return km;
}

// Weighted AUC for the incidence component: pairs weighted by q_i (1 - q_j),
// strict inequality on the scores.
inline MetricValue weighted_auc_inc(const Eigen::VectorXd& eta, const Eigen::VectorXd& q) {
    MetricValue out;
    const int m = static_cast<int>(eta.size());
    double num = 0.0, den = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            const double w = q[i] * (1.0 - q[j]);
            if (w <= 0.0) continue;
            den += w;
            if (eta[i] > eta[j])
                num += w;
            else if (eta[i] == eta[j])
                out.ties = true;
        }
    if (den <= 0.0) return out;
    out.value = num / den;
    out.defined = true;
    return out;
}

// Weighted Brier score for the incidence component. Determinable subjects
// are events (label 1) and subjects censored beyond the largest event time
// (label 0); everyone else carries weight 0. Weights invert the probability
// of being determinable: an event at t_i required freedom from censoring up
// to t_i (1/G(t_i-)), a censored label-0 subject required freedom from
// censoring through the last event time (1/G(tau_max)). Averaging over the
// full sample keeps the inverse weighting calibrated.
inline MetricValue weighted_brier_inc(const Eigen::VectorXd& prediction,
                                      const Eigen::VectorXi& event, const Eigen::VectorXd& time,
                                      const CensoringKm& km) {
    MetricValue out;
    const int m = static_cast<int>(time.size());
    double tau_max = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < m; ++i)
        if (event[i] == 1) tau_max = std::max(tau_max, time[i]);

    double sum = 0.0;
    int contributing = 0;
    for (int i = 0; i < m; ++i) {
        double label, g;
        if (event[i] == 1) {
            label = 1.0;
            g = km.left(time[i]);
        } else if (time[i] > tau_max) {
            label = 0.0;
            g = km.value(tau_max);
        } else {
            continue; // cure status not determinable
        }
        if (g <= 0.0) {
            out.excluded = true;
            continue;
        }
        sum += (prediction[i] - label) * (prediction[i] - label) / g;
        ++contributing;
    }
    if (contributing == 0) return out;
    out.value = sum / m;
    out.defined = true;
    return out;
}

// Time-dependent AUC at horizon t: cases experienced the event before t,
// controls are still at risk beyond t, both IPCW-weighted.
inline MetricValue auc_lat_t(const Eigen::VectorXd& eta, const Eigen::VectorXd& time,
                             const Eigen::VectorXi& event, double t, const CensoringKm& km) {
    MetricValue out;
    const int m = static_cast<int>(time.size());
    std::vector<int> cases, controls;
    std::vector<double> wcase, wctrl;
    const double g_t = km.value(t);
    for (int i = 0; i < m; ++i) {
        if (time[i] <= t && event[i] == 1) {
            const double g = km.left(time[i]);
            if (g > 0.0) {
                cases.push_back(i);
                wcase.push_back(1.0 / g);
            }
        } else if (time[i] > t) {
            if (g_t > 0.0) {
                controls.push_back(i);
                wctrl.push_back(1.0 / g_t);
            }
        }
    }
    if (cases.empty() || controls.empty()) return out;

    double num = 0.0, den = 0.0;
    for (std::size_t a = 0; a < cases.size(); ++a)
        for (std::size_t b = 0; b < controls.size(); ++b) {
            const double w = wcase[a] * wctrl[b];
            den += w;
            if (eta[cases[a]] > eta[controls[b]])
                num += w;
            else if (eta[cases[a]] == eta[controls[b]])
                out.ties = true;
        }
    out.value = num / den;
    out.defined = true;
    return out;
}

// Time-dependent Brier score at horizon t with the standard IPCW split:
// events before t weighted by 1/G(t_i-), survivors by 1/G(t), subjects
// censored before t excluded. Averaged over the full sample.
inline MetricValue brier_lat_t(const Eigen::VectorXd& survival_at_t, const Eigen::VectorXd& time,
                               const Eigen::VectorXi& event, double t, const CensoringKm& km) {
    MetricValue out;
    const int m = static_cast<int>(time.size());
    if (m == 0) return out;
    double sum = 0.0;
    bool any = false;
    for (int i = 0; i < m; ++i) {
        double w = 0.0, label = 0.0;
        if (time[i] <= t && event[i] == 1) {
            const double g = km.left(time[i]);
            if (g <= 0.0) {
                out.excluded = true;
                continue;
            }
            w = 1.0 / g;
            label = 0.0;
        } else if (time[i] > t) {
            const double g = km.value(t);
            if (g <= 0.0) {
                out.excluded = true;
                continue;
            }
            w = 1.0 / g;
            label = 1.0;
        } else {
            continue; // censored before t
        }
        sum += w * (label - survival_at_t[i]) * (label - survival_at_t[i]);
        any = true;
    }
    if (!any) return out;
    out.value = sum / m;
    out.defined = true;
    return out;
}

// Harrell-type concordance with the comparability kernel
// D_ij = I[t_i < t_j, d_i = 1] + I[t_i = t_j, d_i = 1, d_j = 0].
inline MetricValue c_index(const Eigen::VectorXd& eta, const Eigen::VectorXd& time,
                           const Eigen::VectorXi& event) {
    MetricValue out;
    const int m = static_cast<int>(time.size());
    double num = 0.0, den = 0.0;
    for (int i = 0; i < m; ++i) {
        if (event[i] != 1) continue;
        for (int j = 0; j < m; ++j) {
            if (i == j) continue;
            const bool comparable =
                (time[i] < time[j]) || (time[i] == time[j] && event[j] == 0);
            if (!comparable) continue;
            den += 1.0;
            if (eta[i] > eta[j])
                num += 1.0;
            else if (eta[i] == eta[j])
                out.ties = true;
        }
    }
    if (den <= 0.0) return out;
    out.value = num / den;
    out.defined = true;
    return out;
}

// Default horizon grid: 10 equispaced points from the landmark out to the
// 90th percentile of observed post-landmark event times.
inline std::vector<double> default_horizon_grid(const Eigen::VectorXd& time,
                                                const Eigen::VectorXi& event,
                                                int n_points = 10) {
    std::vector<double> events;
    for (int i = 0; i < time.size(); ++i)
        if (event[i] == 1) events.push_back(time[i]);
    if (events.empty()) return {};
    std::sort(events.begin(), events.end());
    const std::size_t k = static_cast<std::size_t>(0.9 * (events.size() - 1));
    const double q90 = events[k];
    std::vector<double> grid;
    for (int j = 1; j <= n_points; ++j) grid.push_back(q90 * j / n_points);
    return grid;
}

} // namespace curemark
