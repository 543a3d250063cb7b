#pragma once

// Metrics: F-beta of binary correctness predictions, system accuracy,
// boundary baselines, relative performance, coverage, and subgroup bias.

#include <cmath>
#include <iomanip>
#include <numeric>

#include "deferkit/defer.hpp"

namespace deferkit {

/// F-beta with precision weighted over recall for beta < 1. Returns 0 when
/// the denominator vanishes (e.g. constant predictors at tiny budgets).
inline double f_beta(const std::vector<int>& predictions, const std::vector<int>& truths,
                     double beta = 0.5, int positive_class = 1) {
    if (predictions.empty() || predictions.size() != truths.size())
        throw PreconditionError("f_beta: empty or mismatched inputs");
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        bool p = predictions[i] == positive_class;
        bool t = truths[i] == positive_class;
        if (p && t) ++tp;
        else if (p && !t) ++fp;
        else if (!p && t) ++fn;
    }
    double b2 = beta * beta;
    double denom = (1.0 + b2) * tp + b2 * fn + fp;
    if (denom == 0.0) return 0.0;
    return (1.0 + b2) * tp / denom;
}

inline double system_accuracy(const std::vector<PredictionRow>& dump) {
    if (dump.empty()) throw PreconditionError("system_accuracy: empty dump");
    double correct = 0;
    for (const auto& r : dump) correct += r.system_pred == r.y ? 1.0 : 0.0;
    return correct / double(dump.size());
}

inline double coverage(const std::vector<PredictionRow>& dump) {
    if (dump.empty()) throw PreconditionError("coverage: empty dump");
    double kept = 0;
    for (const auto& r : dump) kept += r.deferred ? 0.0 : 1.0;
    return kept / double(dump.size());
}

/// Budgeted accuracy as a fraction of the complete-expert-predictions
/// upper boundary, in percent.
inline double relative_performance(double acc_budgeted, double acc_complete) {
    if (!(acc_complete > 0.0)) throw PreconditionError("relative_performance: zero denominator");
    return 100.0 * acc_budgeted / acc_complete;
}

struct BiasReport {
    double gender_gap = 0.0;  // |acc_male - acc_female|
    double age_mad = 0.0;     // mean |acc_bin - acc_overall| over 5 bins
    std::vector<double> age_bin_edges;  // emitted for audit
    std::vector<double> age_bin_accuracy;
};

/// Subgroup accuracy disparities. Age bins are equal-population quintiles
/// over the evaluated rows; their boundaries are reported for audit.
inline BiasReport bias_report(const std::vector<PredictionRow>& dump, const Dataset& ds,
                              int n_age_bins = 5) {
    if (dump.empty()) throw PreconditionError("bias_report: empty dump");
    std::vector<std::string> missing;
    double male_correct = 0, male_n = 0, female_correct = 0, female_n = 0;
    std::vector<std::pair<double, bool>> by_age;  // (age, correct); sorted below
    std::vector<std::pair<double, std::string>> age_ids;
    for (const auto& r : dump) {
        const Example& ex = ds.by_id(r.id);
        auto gender = ex.meta_get("gender");
        auto age = ex.meta_get("age");
        if (!gender || !age) {
            missing.push_back(r.id);
            continue;
        }
        bool correct = r.system_pred == r.y;
        if (*gender == "M") {
            male_n += 1;
            male_correct += correct;
        } else if (*gender == "F") {
            female_n += 1;
            female_correct += correct;
        } else {
            throw MetadataError("id " + r.id + ": gender must be M or F, got '" + *gender + "'");
        }
        age_ids.emplace_back(std::stod(*age), r.id);
        by_age.emplace_back(std::stod(*age), correct);
    }
    if (!missing.empty()) {
        std::string msg = "missing gender/age metadata for ids:";
        for (const auto& id : missing) msg += " " + id;
        throw MetadataError(msg);
    }
    if (male_n == 0 || female_n == 0) throw MetadataError("bias_report: a gender group is empty");

    BiasReport rep;
    rep.gender_gap = std::abs(male_correct / male_n - female_correct / female_n);

    // stable equal-population bins: sort by (age, id)
    std::vector<std::size_t> order(by_age.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (age_ids[a].first != age_ids[b].first) return age_ids[a].first < age_ids[b].first;
        return age_ids[a].second < age_ids[b].second;
    });
    double overall = 0;
    for (const auto& [age, c] : by_age) overall += c ? 1.0 : 0.0;
    overall /= double(by_age.size());

    double mad = 0.0;
    std::size_t n = order.size();
    for (int b = 0; b < n_age_bins; ++b) {
        std::size_t lo = n * std::size_t(b) / std::size_t(n_age_bins);
        std::size_t hi = n * std::size_t(b + 1) / std::size_t(n_age_bins);
        if (lo == hi) throw MetadataError("bias_report: empty age bin " + std::to_string(b + 1));
        double correct = 0;
        for (std::size_t i = lo; i < hi; ++i) correct += by_age[order[i]].second ? 1.0 : 0.0;
        double acc = correct / double(hi - lo);
        rep.age_bin_accuracy.push_back(acc);
        rep.age_bin_edges.push_back(age_ids[order[lo]].first);
        mad += std::abs(acc - overall);
    }
    rep.age_bin_edges.push_back(age_ids[order[n - 1]].first);
    rep.age_mad = mad / double(n_age_bins);
    return rep;
}

struct Boundaries {
    double classifier_alone = 0.0;
    double expert_alone = 0.0;
    double complete_regime = -1.0;  // <0 when no complete-regime team supplied
};

inline Boundaries boundaries(const Dataset& ds, const std::vector<std::string>& test_ids,
                             const EmbeddingModel& classifier,
                             const TeamModel* complete_team = nullptr) {
    if (test_ids.empty()) throw PreconditionError("boundaries: empty test set");
    Boundaries b;
    Classification cls = classify(classifier, ds, test_ids);
    double cls_correct = 0, exp_correct = 0;
    for (std::size_t i = 0; i < test_ids.size(); ++i) {
        const Example& ex = ds.by_id(test_ids[i]);
        if (ex.h < 0) throw PreconditionError("boundaries: id " + ex.id + " lacks expert prediction");
        cls_correct += cls.classes[i] == ex.y ? 1.0 : 0.0;
        exp_correct += ex.h == ex.y ? 1.0 : 0.0;
    }
    b.classifier_alone = cls_correct / double(test_ids.size());
    b.expert_alone = exp_correct / double(test_ids.size());
    if (complete_team)
        b.complete_regime = system_accuracy(team_predict(*complete_team, ds, test_ids));
    return b;
}

// ---------------------------------------------------------------------------
// Metric report tables: one row per (algorithm, variant, expert, l, seed),
// appended so partial grids survive interruption.
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string algorithm;
    std::string variant;  // expertise predictor variant
    std::string expert;
    int l = 0;
    std::uint64_t seed = 0;
    double system_acc = 0.0;
    double cov = 0.0;
    double f05 = 0.0;
    double relative = -1.0;
    double gender_gap = -1.0;
    double age_mad = -1.0;
    double classifier_alone = -1.0;
    double expert_alone = -1.0;
    double complete_regime = -1.0;
};

inline void append_metric_rows(const std::vector<MetricRow>& rows, const std::string& path) {
    bool fresh = !std::filesystem::exists(path);
    std::ofstream f(path, std::ios::app);
    if (!f) throw ParseError("cannot write metric table: " + path);
    if (fresh)
        f << "algorithm\tvariant\texpert\tl\tseed\tsystem_acc\tcoverage\tf05\trelative\t"
             "gender_gap\tage_mad\tclassifier_alone\texpert_alone\tcomplete_regime\n";
    f << std::setprecision(10);
    for (const auto& r : rows)
        f << r.algorithm << "\t" << r.variant << "\t" << r.expert << "\t" << r.l << "\t" << r.seed
          << "\t" << r.system_acc << "\t" << r.cov << "\t" << r.f05 << "\t" << r.relative << "\t"
          << r.gender_gap << "\t" << r.age_mad << "\t" << r.classifier_alone << "\t"
          << r.expert_alone << "\t" << r.complete_regime << "\n";
}

inline std::vector<MetricRow> load_metric_rows(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open metric table: " + path);
    std::vector<MetricRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            continue;
        }
        auto fl = detail::split_fields(line, '\t');
        if (fl.size() != 14) throw ParseError("metric table: bad row '" + line + "'");
        MetricRow r;
        r.algorithm = fl[0];
        r.variant = fl[1];
        r.expert = fl[2];
        r.l = std::stoi(fl[3]);
        r.seed = std::stoull(fl[4]);
        r.system_acc = std::stod(fl[5]);
        r.cov = std::stod(fl[6]);
        r.f05 = std::stod(fl[7]);
        r.relative = std::stod(fl[8]);
        r.gender_gap = std::stod(fl[9]);
        r.age_mad = std::stod(fl[10]);
        r.classifier_alone = std::stod(fl[11]);
        r.expert_alone = std::stod(fl[12]);
        r.complete_regime = std::stod(fl[13]);
        rows.push_back(r);
    }
    return rows;
}

struct AggregateRow {
    std::string algorithm, variant, expert;
    int l = 0;
    int n_seeds = 0;
    double mean_acc = 0.0, std_acc = 0.0;
    double mean_f05 = 0.0, std_f05 = 0.0;
    double mean_cov = 0.0;
    double classifier_alone = 0.0, expert_alone = 0.0, complete_regime = 0.0;
};

/// Mean and standard deviation over seeds per (algorithm, variant, expert, l).
inline std::vector<AggregateRow> aggregate_metrics(const std::vector<MetricRow>& rows) {
    std::map<std::tuple<std::string, std::string, std::string, int>, std::vector<const MetricRow*>>
        groups;
    for (const auto& r : rows) groups[{r.algorithm, r.variant, r.expert, r.l}].push_back(&r);
    std::vector<AggregateRow> out;
    for (const auto& [key, members] : groups) {
        AggregateRow a;
        std::tie(a.algorithm, a.variant, a.expert, a.l) = key;
        a.n_seeds = int(members.size());
        double n = double(members.size());
        for (const auto* m : members) {
            a.mean_acc += m->system_acc / n;
            a.mean_f05 += m->f05 / n;
            a.mean_cov += m->cov / n;
            a.classifier_alone += m->classifier_alone / n;
            a.expert_alone += m->expert_alone / n;
            a.complete_regime += m->complete_regime / n;
        }
        for (const auto* m : members) {
            a.std_acc += (m->system_acc - a.mean_acc) * (m->system_acc - a.mean_acc) / n;
            a.std_f05 += (m->f05 - a.mean_f05) * (m->f05 - a.mean_f05) / n;
        }
        a.std_acc = std::sqrt(a.std_acc);
        a.std_f05 = std::sqrt(a.std_f05);
        out.push_back(a);
    }
    return out;
}

inline void save_aggregate_table(const std::vector<AggregateRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write aggregate table: " + path);
    f << "algorithm\tvariant\texpert\tl\tn_seeds\tmean_acc\tstd_acc\tmean_f05\tstd_f05\t"
         "mean_coverage\tclassifier_alone\texpert_alone\tcomplete_regime\n";
    f << std::setprecision(10);
    for (const auto& r : rows)
        f << r.algorithm << "\t" << r.variant << "\t" << r.expert << "\t" << r.l << "\t"
          << r.n_seeds << "\t" << r.mean_acc << "\t" << r.std_acc << "\t" << r.mean_f05 << "\t"
          << r.std_f05 << "\t" << r.mean_cov << "\t" << r.classifier_alone << "\t"
          << r.expert_alone << "\t" << r.complete_regime << "\n";
}

}  // namespace deferkit
