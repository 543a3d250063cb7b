#pragma once

// Self-contained SVG emitter for the team-performance figures: system
// accuracy vs number of expert predictions l (log x), mean +/- std bands
// per expertise-predictor variant, and horizontal reference lines for the
// Classifier Alone / Expert Alone / Complete Expert Predictions boundaries.

#include <cmath>
#include <fstream>

#include "deferkit/evaluation.hpp"

namespace deferkit {

namespace detail {

struct PlotFrame {
    double x0 = 70, y0 = 420, x1 = 600, y1 = 40;  // pixel frame (y grows down)
    double lmin = 1, lmax = 10, amin = 0.0, amax = 1.0;

    double px(double l) const {
        double t = (std::log(l) - std::log(lmin)) / (std::log(lmax) - std::log(lmin) + 1e-12);
        return x0 + t * (x1 - x0);
    }
    double py(double acc) const {
        double t = (acc - amin) / (amax - amin + 1e-12);
        return y0 + t * (y1 - y0);
    }
};

inline const char* series_color(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                   "#ff7f0e", "#8c564b"};
    return colors[i % 6];
}

}  // namespace detail

/// One figure: every variant's accuracy-vs-l curve for a single
/// (expert, algorithm) pair. Throws on an empty table.
inline void emit_plot(const std::vector<AggregateRow>& rows, const std::string& title,
                      const std::string& path) {
    if (rows.empty()) throw PreconditionError("emit_plot: empty metric table");

    std::map<std::string, std::vector<const AggregateRow*>> series;
    double lmin = 1e300, lmax = 0, amin = 1.0, amax = 0.0;
    double cls_alone = rows[0].classifier_alone;
    double exp_alone = rows[0].expert_alone;
    double complete = rows[0].complete_regime;
    for (const auto& r : rows) {
        series[r.variant].push_back(&r);
        lmin = std::min(lmin, double(r.l));
        lmax = std::max(lmax, double(r.l));
        amin = std::min({amin, r.mean_acc - r.std_acc, cls_alone, exp_alone});
        amax = std::max({amax, r.mean_acc + r.std_acc, complete, exp_alone, cls_alone});
    }
    double pad = 0.05 * (amax - amin + 0.02);
    detail::PlotFrame fr;
    fr.lmin = lmin;
    fr.lmax = std::max(lmax, lmin * 1.01);
    fr.amin = std::max(0.0, amin - pad);
    fr.amax = std::min(1.0, amax + pad);

    std::ofstream f(path);
    if (!f) throw ParseError("cannot write figure: " + path);
    f << "<svg xmlns='http://www.w3.org/2000/svg' width='660' height='480' "
         "font-family='sans-serif' font-size='12'>\n";
    f << "<rect width='660' height='480' fill='white'/>\n";
    f << "<text x='330' y='20' text-anchor='middle' font-size='14'>" << title << "</text>\n";
    // axes
    f << "<line x1='" << fr.x0 << "' y1='" << fr.y0 << "' x2='" << fr.x1 << "' y2='" << fr.y0
      << "' stroke='black'/>\n";
    f << "<line x1='" << fr.x0 << "' y1='" << fr.y0 << "' x2='" << fr.x0 << "' y2='" << fr.y1
      << "' stroke='black'/>\n";
    f << "<text x='" << (fr.x0 + fr.x1) / 2 << "' y='455' text-anchor='middle'>"
      << "expert predictions l (log scale)</text>\n";
    f << "<text x='16' y='230' transform='rotate(-90 16 230)' text-anchor='middle'>"
      << "system accuracy</text>\n";
    // y ticks
    for (int t = 0; t <= 4; ++t) {
        double a = fr.amin + t * (fr.amax - fr.amin) / 4.0;
        double y = fr.py(a);
        f << "<line x1='" << fr.x0 - 4 << "' y1='" << y << "' x2='" << fr.x0 << "' y2='" << y
          << "' stroke='black'/>\n";
        f << "<text x='" << fr.x0 - 8 << "' y='" << y + 4 << "' text-anchor='end'>"
          << int(a * 1000) / 1000.0 << "</text>\n";
    }

    // boundary reference lines (constants, independent of l)
    auto hline = [&](double v, const char* color, const std::string& label) {
        if (v < 0) return;
        double y = fr.py(v);
        f << "<line x1='" << fr.x0 << "' y1='" << y << "' x2='" << fr.x1 << "' y2='" << y
          << "' stroke='" << color << "' stroke-dasharray='6,4'/>\n";
        f << "<text x='" << fr.x1 + 4 << "' y='" << y + 4 << "' fill='" << color
          << "' font-size='10'>" << label << "</text>\n";
    };
    hline(cls_alone, "#777777", "classifier");
    hline(exp_alone, "#bb7700", "expert");
    hline(complete, "#007700", "complete");

    std::size_t si = 0;
    double legend_y = 52;
    for (auto& [variant, pts] : series) {
        std::sort(pts.begin(), pts.end(),
                  [](const AggregateRow* a, const AggregateRow* b) { return a->l < b->l; });
        const char* color = detail::series_color(si++);
        // std band
        std::string band = "<polygon fill='" + std::string(color) + "' opacity='0.15' points='";
        for (const auto* p : pts)
            band += std::to_string(fr.px(p->l)) + "," + std::to_string(fr.py(p->mean_acc + p->std_acc)) + " ";
        for (auto it = pts.rbegin(); it != pts.rend(); ++it)
            band += std::to_string(fr.px((*it)->l)) + "," +
                    std::to_string(fr.py((*it)->mean_acc - (*it)->std_acc)) + " ";
        f << band << "'/>\n";
        // mean line + points
        f << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (const auto* p : pts) f << fr.px(p->l) << "," << fr.py(p->mean_acc) << " ";
        f << "'/>\n";
        for (const auto* p : pts) {
            f << "<circle cx='" << fr.px(p->l) << "' cy='" << fr.py(p->mean_acc)
              << "' r='3' fill='" << color << "'/>\n";
            f << "<text x='" << fr.px(p->l) << "' y='" << fr.y0 + 14
              << "' text-anchor='middle' font-size='10'>" << p->l << "</text>\n";
        }
        f << "<rect x='80' y='" << legend_y - 9 << "' width='10' height='10' fill='" << color
          << "'/>\n";
        f << "<text x='94' y='" << legend_y << "'>" << variant << "</text>\n";
        legend_y += 16;
    }
    f << "</svg>\n";
}

/// One figure per (expert, algorithm) group under out_dir.
inline std::vector<std::string> emit_plots(const std::vector<AggregateRow>& aggregates,
                                           const std::string& out_dir) {
    if (aggregates.empty()) throw PreconditionError("emit_plots: empty metric table");
    std::map<std::pair<std::string, std::string>, std::vector<AggregateRow>> figures;
    for (const auto& r : aggregates) figures[{r.expert, r.algorithm}].push_back(r);
    std::vector<std::string> paths;
    std::filesystem::create_directories(out_dir);
    for (const auto& [key, rows] : figures) {
        std::string name = key.first + "_" + key.second + ".svg";
        std::string path = (std::filesystem::path(out_dir) / name).string();
        emit_plot(rows, key.second + " on expert " + key.first, path);
        paths.push_back(path);
    }
    return paths;
}

}  // namespace deferkit
