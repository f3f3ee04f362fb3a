#pragma once

#include "gseg/trainer.hpp"

namespace gseg::report {

// CSV + three SVG charts per run set: test Dice vs kJ/epoch, test Dice vs
// total kJ, and the percentage of test Dice lost relative to the U-Net
// baseline run. SVGs use a fixed 800x600 canvas; every datum is one
// element tagged class="datum", which is the structure the tests parse.

struct ReportFiles {
    std::string csv;
    std::string fig_dice_vs_epoch_kj;   // scatter
    std::string fig_dice_vs_total_kj;   // scatter
    std::string fig_relative_loss;      // bars; empty if no baseline run
    std::vector<std::string> warnings;
};

namespace report_detail {

constexpr int kWidth = 800, kHeight = 600;
constexpr int kMarginL = 80, kMarginR = 30, kMarginT = 40, kMarginB = 60;

inline std::string svg_open(const std::string& title) {
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
       << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
    os << "  <rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight
       << "\" fill=\"white\"/>\n";
    os << "  <text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
       << title << "</text>\n";
    // axes
    os << "  <line x1=\"" << kMarginL << "\" y1=\"" << kHeight - kMarginB << "\" x2=\""
       << kWidth - kMarginR << "\" y2=\"" << kHeight - kMarginB
       << "\" stroke=\"black\"/>\n";
    os << "  <line x1=\"" << kMarginL << "\" y1=\"" << kMarginT << "\" x2=\"" << kMarginL
       << "\" y2=\"" << kHeight - kMarginB << "\" stroke=\"black\"/>\n";
    return os.str();
}

inline double map_x(double v, double lo, double hi) {
    double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return kMarginL + f * (kWidth - kMarginL - kMarginR);
}

inline double map_y(double v, double lo, double hi) {
    double f = hi > lo ? (v - lo) / (hi - lo) : 0.5;
    return (kHeight - kMarginB) - f * (kHeight - kMarginT - kMarginB);
}

inline std::string scatter(const std::string& title, const std::string& x_label,
                           const std::vector<std::pair<double, double>>& points,
                           const std::vector<std::string>& labels) {
    double xlo = std::numeric_limits<double>::max(), xhi = std::numeric_limits<double>::lowest();
    double ylo = 0.0, yhi = 1.0;
    for (auto [x, y] : points) {
        xlo = std::min(xlo, x);
        xhi = std::max(xhi, x);
    }
    if (points.empty()) xlo = 0, xhi = 1;
    if (xhi <= xlo) xhi = xlo + 1;
    xlo = std::min(xlo, 0.0);

    std::ostringstream os;
    os << svg_open(title);
    os << "  <text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 16
       << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n";
    os << "  <text x=\"20\" y=\"" << kHeight / 2
       << "\" font-size=\"12\" transform=\"rotate(-90 20 " << kHeight / 2
       << ")\">test Dice</text>\n";
    for (size_t i = 0; i < points.size(); ++i) {
        double cx = map_x(points[i].first, xlo, xhi);
        double cy = map_y(points[i].second, ylo, yhi);
        os << "  <circle class=\"datum\" cx=\"" << cx << "\" cy=\"" << cy
           << "\" r=\"6\" fill=\"steelblue\"/>\n";
        os << "  <text x=\"" << cx + 8 << "\" y=\"" << cy - 8 << "\" font-size=\"11\">"
           << labels[i] << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

inline std::string bars(const std::string& title, const std::vector<double>& values,
                        const std::vector<std::string>& labels) {
    double vhi = 1.0;
    for (double v : values) vhi = std::max(vhi, v);
    std::ostringstream os;
    os << svg_open(title);
    os << "  <text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 16
       << "\" text-anchor=\"middle\" font-size=\"12\">model</text>\n";
    double span = kWidth - kMarginL - kMarginR;
    double slot = values.empty() ? span : span / static_cast<double>(values.size());
    for (size_t i = 0; i < values.size(); ++i) {
        double x = kMarginL + slot * static_cast<double>(i) + slot * 0.2;
        double y = map_y(values[i], 0.0, vhi);
        double base = kHeight - kMarginB;
        os << "  <rect class=\"datum\" x=\"" << x << "\" y=\"" << std::min(y, base)
           << "\" width=\"" << slot * 0.6 << "\" height=\"" << std::abs(base - y)
           << "\" fill=\"indianred\"/>\n";
        os << "  <text x=\"" << x + slot * 0.3 << "\" y=\"" << base + 16
           << "\" text-anchor=\"middle\" font-size=\"11\">" << labels[i] << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace report_detail

// relative Dice loss in percent against the baseline value
inline double relative_dice_loss(double baseline_dice, double model_dice) {
    if (baseline_dice == 0.0) throw Error("report: baseline dice is zero");
    return 100.0 * (baseline_dice - model_dice) / baseline_dice;
}

inline ReportFiles emit_report(const std::vector<train::RunLog>& runs) {
    if (runs.empty()) throw Error("report: needs at least one complete run log");

    ReportFiles out;
    std::ostringstream csv;
    csv << "run,model,test_dice,total_kj,kj_per_epoch,dice_per_kj\n";
    std::vector<std::pair<double, double>> per_epoch_pts, total_pts;
    std::vector<std::string> labels;
    for (const auto& r : runs) {
        double epochs = r.epochs.empty() ? 1.0 : static_cast<double>(r.epochs.size());
        double kj_per_epoch = r.energy.total_kj / epochs;
        csv << r.run_name << ',' << r.arch << ',' << r.test_dice << ',' << r.energy.total_kj
            << ',' << kj_per_epoch << ',' << r.dice_per_kj << "\n";
        per_epoch_pts.push_back({kj_per_epoch, r.test_dice});
        total_pts.push_back({r.energy.total_kj, r.test_dice});
        labels.push_back(r.run_name);
    }
    out.csv = csv.str();

    out.fig_dice_vs_epoch_kj = report_detail::scatter(
        "test Dice vs energy per epoch", "kJ per epoch", per_epoch_pts, labels);
    out.fig_dice_vs_total_kj = report_detail::scatter(
        "test Dice vs total training energy", "total kJ", total_pts, labels);

    const train::RunLog* baseline = nullptr;
    for (const auto& r : runs)
        if (r.arch == "unet") baseline = &r;
    if (!baseline) {
        out.warnings.push_back("no unet baseline run; relative-loss figure skipped");
        return out;
    }
    std::vector<double> losses;
    for (const auto& r : runs)
        losses.push_back(relative_dice_loss(baseline->test_dice, r.test_dice));
    out.fig_relative_loss =
        report_detail::bars("% test Dice lost vs U-Net baseline", losses, labels);
    return out;
}

inline void write_report(const ReportFiles& files, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto put = [&](const std::string& name, const std::string& content) {
        if (content.empty()) return;
        std::ofstream os(fs::path(dir) / name);
        if (!os) throw Error("report: cannot write " + name);
        os << content;
    };
    put("summary.csv", files.csv);
    put("dice_vs_epoch_kj.svg", files.fig_dice_vs_epoch_kj);
    put("dice_vs_total_kj.svg", files.fig_dice_vs_total_kj);
    put("dice_relative_loss.svg", files.fig_relative_loss);
}

}  // namespace gseg::report
