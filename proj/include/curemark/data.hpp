#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "curemark/csv.hpp"
#include "curemark/errors.hpp"

namespace curemark {

// One repeated measurement of a longitudinal covariate.
struct LongRecord {
    std::string subject_id;
    std::string covariate;
    double time = 0.0;
    double value = 0.0;
};

// Long-format repeated measurements across subjects and covariates.
struct LongitudinalDataset {
    std::vector<LongRecord> records;

    // Distinct covariate names, sorted.
    std::vector<std::string> covariate_names() const {
        std::set<std::string> s;
        for (const auto& r : records) s.insert(r.covariate);
        return {s.begin(), s.end()};
    }
};

// Per-subject survival outcome and baseline covariates. X drives the
// incidence submodel, Z the latency submodel; the two may overlap.
struct SubjectRow {
    std::string subject_id;
    double time = 0.0;
    int event = 0;
    std::vector<double> x;
    std::vector<double> z;
};

struct SubjectTable {
    std::vector<SubjectRow> rows;
    std::vector<std::string> x_names;
    std::vector<std::string> z_names;

    const SubjectRow* find(const std::string& id) const {
        for (const auto& r : rows)
            if (r.subject_id == id) return &r;
        return nullptr;
    }
};

struct LandmarkConfig {
    double landmark_time = 0.0;
    std::vector<double> prediction_horizons; // absolute times, > landmark_time

    void validate() const {
        if (!(landmark_time > 0.0)) throw DataError("landmark time must be positive");
        double prev = landmark_time;
        for (double h : prediction_horizons) {
            if (!(h > prev))
                throw DataError("prediction horizons must be strictly increasing and exceed the landmark");
            prev = h;
        }
    }
};

// At-risk cohort at the landmark with truncated longitudinal history.
// Subject survival clocks are reset so post-landmark time starts at 0.
struct LandmarkDataset {
    double landmark_time = 0.0;
    SubjectTable subjects;                      // times already reset: t' = t - landmark
    LongitudinalDataset history;                // records with time <= landmark
    std::vector<std::string> covariates;        // longitudinal covariate names, sorted
    // pre-landmark measurement counts: subject index -> covariate index -> n_i
    std::vector<std::vector<int>> pre_landmark_counts;

    int subject_index(const std::string& id) const {
        for (std::size_t i = 0; i < subjects.rows.size(); ++i)
            if (subjects.rows[i].subject_id == id) return static_cast<int>(i);
        return -1;
    }
};

namespace detail {

inline void validate_longitudinal(const LongitudinalDataset& longi, const SubjectTable& subj) {
    std::unordered_set<std::string> known;
    known.reserve(subj.rows.size());
    for (const auto& r : subj.rows) {
        if (!known.insert(r.subject_id).second)
            throw DataError("duplicate subject_id '" + r.subject_id + "' in subject table");
        if (!(r.time > 0.0) || !std::isfinite(r.time))
            throw DataError("subject '" + r.subject_id + "' has non-positive observed time");
        if (r.event != 0 && r.event != 1)
            throw DataError("subject '" + r.subject_id + "' has event indicator outside {0,1}");
        for (double v : r.x)
            if (!std::isfinite(v)) throw DataError("non-finite incidence covariate for '" + r.subject_id + "'");
        for (double v : r.z)
            if (!std::isfinite(v)) throw DataError("non-finite latency covariate for '" + r.subject_id + "'");
    }
    std::set<std::tuple<std::string, std::string, double>> seen;
    for (const auto& r : longi.records) {
        if (!std::isfinite(r.time) || r.time < 0.0)
            throw DataError("negative or non-finite measurement time for '" + r.subject_id + "'");
        if (!std::isfinite(r.value))
            throw DataError("non-finite measurement value for '" + r.subject_id + "'");
        if (known.find(r.subject_id) == known.end())
            throw DataError("longitudinal record references unknown subject '" + r.subject_id + "'");
        if (!seen.insert({r.subject_id, r.covariate, r.time}).second)
            throw DataError("duplicate measurement (" + r.subject_id + ", " + r.covariate + ", t=" +
                            csv::format_double(r.time) + ")");
    }
}

} // namespace detail

// Load and validate the CSV pair. The longitudinal file has header
// subject_id,covariate,time,value; the subjects file has header
// subject_id,time,event,<covariate columns>, each assigned to X and/or Z
// roles by name.
inline std::pair<LongitudinalDataset, SubjectTable> load_datasets(
    const std::string& longitudinal_path, const std::string& subjects_path,
    const std::vector<std::string>& incidence_cols, const std::vector<std::string>& latency_cols) {
    const csv::Table lt = csv::read_file(longitudinal_path);
    const int c_id = lt.require_column("subject_id", longitudinal_path);
    const int c_cov = lt.require_column("covariate", longitudinal_path);
    const int c_time = lt.require_column("time", longitudinal_path);
    const int c_value = lt.require_column("value", longitudinal_path);

    LongitudinalDataset longi;
    longi.records.reserve(lt.rows.size());
    for (const auto& row : lt.rows) {
        LongRecord r;
        r.subject_id = row[c_id];
        r.covariate = row[c_cov];
        r.time = csv::parse_double(row[c_time], longitudinal_path);
        r.value = csv::parse_double(row[c_value], longitudinal_path);
        longi.records.push_back(std::move(r));
    }

    const csv::Table st = csv::read_file(subjects_path);
    const int s_id = st.require_column("subject_id", subjects_path);
    const int s_time = st.require_column("time", subjects_path);
    const int s_event = st.require_column("event", subjects_path);
    std::vector<int> x_idx, z_idx;
    for (const auto& name : incidence_cols) x_idx.push_back(st.require_column(name, subjects_path));
    for (const auto& name : latency_cols) z_idx.push_back(st.require_column(name, subjects_path));

    SubjectTable subj;
    subj.x_names = incidence_cols;
    subj.z_names = latency_cols;
    subj.rows.reserve(st.rows.size());
    for (const auto& row : st.rows) {
        SubjectRow r;
        r.subject_id = row[s_id];
        r.time = csv::parse_double(row[s_time], subjects_path);
        const double ev = csv::parse_double(row[s_event], subjects_path);
        if (ev != 0.0 && ev != 1.0)
            throw DataError("event indicator must be 0 or 1 in " + subjects_path);
        r.event = static_cast<int>(ev);
        for (int j : x_idx) r.x.push_back(csv::parse_double(row[j], subjects_path));
        for (int j : z_idx) r.z.push_back(csv::parse_double(row[j], subjects_path));
        subj.rows.push_back(std::move(r));
    }

    detail::validate_longitudinal(longi, subj);
    return {std::move(longi), std::move(subj)};
}

// Restrict to subjects still at risk at the landmark and drop post-landmark
// measurements. Observed times are reset to t' = t - landmark so the
// landmarked cure model's baseline hazard starts at 0.
inline LandmarkDataset build_landmark_dataset(const LongitudinalDataset& longi,
                                              const SubjectTable& subj,
                                              const LandmarkConfig& cfg) {
    cfg.validate();
    const double tl = cfg.landmark_time;

    LandmarkDataset lm;
    lm.landmark_time = tl;
    lm.subjects.x_names = subj.x_names;
    lm.subjects.z_names = subj.z_names;
    std::unordered_map<std::string, int> index;
    for (const auto& r : subj.rows) {
        if (r.time > tl) {
            SubjectRow reset = r;
            reset.time = r.time - tl;
            index.emplace(r.subject_id, static_cast<int>(lm.subjects.rows.size()));
            lm.subjects.rows.push_back(std::move(reset));
        }
    }
    if (lm.subjects.rows.empty()) throw DataError("empty at-risk set at landmark");

    std::set<std::string> cov_names;
    for (const auto& r : longi.records) cov_names.insert(r.covariate);
    lm.covariates.assign(cov_names.begin(), cov_names.end());
    std::unordered_map<std::string, int> cov_index;
    for (std::size_t l = 0; l < lm.covariates.size(); ++l) cov_index.emplace(lm.covariates[l], static_cast<int>(l));

    lm.pre_landmark_counts.assign(lm.subjects.rows.size(), std::vector<int>(lm.covariates.size(), 0));
    lm.history.records.reserve(longi.records.size());
    for (const auto& r : longi.records) {
        if (r.time > tl) continue;
        auto it = index.find(r.subject_id);
        if (it == index.end()) continue; // subject not at risk
        lm.history.records.push_back(r);
        lm.pre_landmark_counts[it->second][cov_index.at(r.covariate)] += 1;
    }

    for (std::size_t i = 0; i < lm.subjects.rows.size(); ++i)
        for (std::size_t l = 0; l < lm.covariates.size(); ++l)
            if (lm.pre_landmark_counts[i][l] == 0)
                throw DataError("subject '" + lm.subjects.rows[i].subject_id +
                                "' has no pre-landmark measurement of '" + lm.covariates[l] + "'");
    return lm;
}

} // namespace curemark
