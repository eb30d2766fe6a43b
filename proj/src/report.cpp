#include "granflow/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "granflow/archive.hpp"
#include "granflow/error.hpp"
#include "granflow/metrics.hpp"

namespace granflow::report {

namespace {

constexpr int kCell = 12;
constexpr int kGap = 36;
constexpr int kTop = 44;
constexpr int kBar = 10;

std::string num(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

// Viridis sampled at nine stops.
std::string colour(double t) {
    static constexpr std::array<std::array<double, 3>, 9> stops{{{68, 1, 84},
                                                                 {71, 44, 122},
                                                                 {59, 81, 139},
                                                                 {44, 113, 142},
                                                                 {33, 144, 141},
                                                                 {39, 173, 129},
                                                                 {92, 200, 99},
                                                                 {170, 220, 50},
                                                                 {253, 231, 37}}};
    t = std::isfinite(t) ? std::clamp(t, 0.0, 1.0) : 0.0;
    const double x = t * (stops.size() - 1);
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(x), stops.size() - 2);
    const double f = x - static_cast<double>(i);
    char buf[8];
    int rgb[3];
    for (int k = 0; k < 3; ++k) rgb[k] = static_cast<int>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

std::pair<double, double> range_of(std::initializer_list<const std::vector<double>*> vs) {
    double lo = INFINITY, hi = -INFINITY;
    for (const auto* v : vs) {
        for (double x : *v) {
            if (!std::isfinite(x)) continue;
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    }
    if (!(lo <= hi)) lo = 0.0, hi = 1.0;
    if (hi == lo) hi = lo + 1.0;
    return {lo, hi};
}

std::vector<double> plane(const io::ArrayEntry& e, int ch) {
    const std::size_t n = static_cast<std::size_t>(e.shape[e.shape.size() - 2]) * e.shape.back();
    return {e.data.begin() + static_cast<std::ptrdiff_t>(ch * n), e.data.begin() + static_cast<std::ptrdiff_t>((ch + 1) * n)};
}

}  // namespace

std::string heatmap_svg(const std::string& title, int rows, int cols, const std::vector<Panel>& panels) {
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    for (const auto& p : panels) {
        if (p.values.size() != n) throw ShapeError("heatmap: panel '" + p.title + "' has the wrong size");
    }
    const int pw = cols * kCell, ph = rows * kCell;
    const int width = kGap + static_cast<int>(panels.size()) * (pw + kGap);
    const int height = kTop + ph + 20 + kBar + 40;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kGap << "\" y=\"18\" font-size=\"14\">" << escape(title) << "</text>\n";
    for (std::size_t k = 0; k < panels.size(); ++k) {
        const auto& p = panels[k];
        const int x0 = kGap + static_cast<int>(k) * (pw + kGap);
        const double span = p.hi - p.lo;
        os << "<text x=\"" << x0 << "\" y=\"" << kTop - 6 << "\">" << escape(p.title) << "</text>\n";
        os << "<g shape-rendering=\"crispEdges\">\n";
        for (int r = 0; r < rows; ++r) {
            const int y = kTop + (rows - 1 - r) * kCell;
            for (int c = 0; c < cols; ++c) {
                const double v = p.values[static_cast<std::size_t>(r) * cols + c];
                os << "<rect x=\"" << x0 + c * kCell << "\" y=\"" << y << "\" width=\"" << kCell << "\" height=\""
                   << kCell << "\" fill=\"" << colour((v - p.lo) / span) << "\"/>\n";
            }
        }
        os << "</g>\n";
        os << "<rect x=\"" << x0 << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
           << "\" fill=\"none\" stroke=\"black\"/>\n";
        // Colour bar.
        const int yb = kTop + ph + 20;
        const int steps = 32;
        for (int s = 0; s < steps; ++s) {
            os << "<rect x=\"" << x0 + s * pw / steps << "\" y=\"" << yb << "\" width=\""
               << (s + 1) * pw / steps - s * pw / steps << "\" height=\"" << kBar << "\" fill=\""
               << colour((s + 0.5) / steps) << "\"/>\n";
        }
        os << "<text x=\"" << x0 << "\" y=\"" << yb + kBar + 13 << "\">" << num(p.lo) << "</text>\n";
        os << "<text x=\"" << x0 + pw << "\" y=\"" << yb + kBar + 13 << "\" text-anchor=\"end\">" << num(p.hi)
           << "</text>\n";
        os << "<text x=\"" << x0 + pw / 2 << "\" y=\"" << yb + kBar + 28 << "\" text-anchor=\"middle\">"
           << escape(p.label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<fs::path> render_reconstruction(const fs::path& recon_dir, const fs::path& out_dir) {
    const auto a = io::FieldArchive::load(recon_dir / "fields");
    const auto& truth = a.get("truth");
    const auto& mean = a.get("mean");
    const auto& sd = a.get("std");
    const int rows = truth.shape[1], cols = truth.shape[2];
    const int members = a.get("samples").shape[0];
    const int slice = a.attributes.value("slice", 0);
    const double time = a.attributes.value("time", 0.0);
    std::string mode = "?";
    if (a.attributes.contains("sampler")) mode = a.attributes["sampler"].value("mode", "?");
    const std::string name = recon_dir.filename().string();

    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    auto emit = [&](const io::ArrayEntry& t, const io::ArrayEntry& m, const io::ArrayEntry* s, int ch,
                    const std::string& q, const std::string& unit) {
        const auto tv = plane(t, ch), mv = plane(m, ch);
        std::vector<double> err(tv.size());
        for (std::size_t k = 0; k < tv.size(); ++k) err[k] = std::abs(mv[k] - tv[k]);
        const auto [lo, hi] = range_of({&tv, &mv});
        std::vector<Panel> panels;
        panels.push_back({"truth", tv, lo, hi, q + " [" + unit + "]"});
        panels.push_back({members > 1 ? "ensemble mean" : "reconstruction", mv, lo, hi, q + " [" + unit + "]"});
        const double ehi = range_of({&err}).second;
        panels.push_back({"|error|", err, 0.0, ehi > 0.0 ? ehi : 1.0, "|" + q + " error| [" + unit + "]"});
        if (s && members > 1) {
            const auto sv = plane(*s, ch);
            const double shi = range_of({&sv}).second;
            panels.push_back({"ensemble std", sv, 0.0, shi > 0.0 ? shi : 1.0, "std " + q + " [" + unit + "]"});
        }
        char title[160];
        std::snprintf(title, sizeof title, "%s  slice %d  t = %.3f s  guidance %s  K = %d", q.c_str(), slice, time,
                      mode.c_str(), members);
        const fs::path file = out_dir / (name + "_" + q + ".svg");
        io::write_text_atomic(file, heatmap_svg(title, rows, cols, panels));
        written.push_back(file);
    };
    const char* vel[] = {"vx", "vy", "vz"};
    for (int ch = 0; ch < 3; ++ch) emit(truth, mean, &sd, ch, vel[ch], "m/s");
    if (const auto* pt = a.find("physics_truth")) {
        const char* phys[] = {"p", "q", "T"};
        const char* units[] = {"Pa", "Pa", "m^2/s^2"};
        for (int ch = 0; ch < 3; ++ch) emit(*pt, a.get("physics"), nullptr, ch, phys[ch], units[ch]);
    }
    return written;
}

std::string summary_table(const std::vector<fs::path>& recon_dirs) {
    std::ostringstream os;
    os << "| case | quantity | mask | rmse | r | cells |\n";
    os << "|---|---|---|---|---|---|\n";
    for (const auto& dir : recon_dirs) {
        for (const auto& row : metrics::read_csv(dir / "metrics.csv")) {
            os << "| " << dir.filename().string() << " | " << row.quantity << " | " << row.mask_kind << " | "
               << num(row.rmse) << " | " << num(row.r) << " | " << row.n_act << " |\n";
        }
    }
    return os.str();
}

}  // namespace granflow::report
