#include "granflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>

#include "granflow/archive.hpp"

namespace granflow::metrics {

namespace {

void check(const Field& a, const Field& b, const Mask& mask, int ch) {
    if (!a.same_shape(b)) throw ShapeError("metrics: field shapes differ");
    if (mask.rows != a.rows || mask.cols != a.cols) throw ShapeError("metrics: mask shape differs");
    if (ch < 0 || ch >= a.channels) throw ShapeError("metrics: channel out of range");
}

std::size_t require_cells(const Mask& mask) {
    const std::size_t n = mask.count();
    if (n == 0) throw ConfigError("metrics: empty mask");
    return n;
}

}  // namespace

double masked_rmse(const Field& truth, const Field& pred, const Mask& mask, int ch) {
    check(truth, pred, mask, ch);
    const std::size_t n = require_cells(mask);
    const auto t = truth.channel(ch), p = pred.channel(ch);
    double s = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (mask.data[k]) s += (t[k] - p[k]) * (t[k] - p[k]);
    }
    return std::sqrt(s / static_cast<double>(n));
}

double masked_pearson(const Field& truth, const Field& pred, const Mask& mask, int ch) {
    check(truth, pred, mask, ch);
    const std::size_t n = require_cells(mask);
    const auto t = truth.channel(ch), p = pred.channel(ch);
    double mt = 0.0, mp = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (mask.data[k]) mt += t[k], mp += p[k];
    }
    mt /= static_cast<double>(n);
    mp /= static_cast<double>(n);
    double stp = 0.0, stt = 0.0, spp = 0.0;
    bool t_const = true, p_const = true;
    std::optional<std::size_t> first;
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (!mask.data[k]) continue;
        if (!first) first = k;
        t_const = t_const && t[k] == t[*first];
        p_const = p_const && p[k] == p[*first];
        const double a = t[k] - mt, b = p[k] - mp;
        stp += a * b;
        stt += a * a;
        spp += b * b;
    }
    if (t_const || p_const || !(stt > 0.0) || !(spp > 0.0)) throw UndefinedMetric("pearson: zero variance over " + std::to_string(n) + " cells");
    return stp / std::sqrt(stt * spp);
}

double coverage(const Field& truth, const Field& mean, const Field& std, const Mask& mask, int ch, double m) {
    check(truth, mean, mask, ch);
    check(truth, std, mask, ch);
    const std::size_t n = require_cells(mask);
    const auto t = truth.channel(ch), mu = mean.channel(ch), sd = std.channel(ch);
    std::size_t hit = 0;
    for (std::size_t k = 0; k < t.size(); ++k) {
        if (!mask.data[k]) continue;
        if (sd[k] < 0.0) throw ConfigError("coverage: negative standard deviation");
        const double err = std::abs(t[k] - mu[k]);
        if (sd[k] == 0.0 ? err == 0.0 : err <= m * sd[k]) ++hit;
    }
    return static_cast<double>(hit) / static_cast<double>(n);
}

double ecdf_distance(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw ConfigError("ecdf_distance: empty sample");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() || j < b.size()) {
        // Step both CDFs past the next distinct value.
        const double x = j == b.size() || (i < a.size() && a[i] <= b[j]) ? a[i] : b[j];
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    return d;
}

std::vector<double> masked_values(const Field& f, const Mask& mask, int ch) {
    check(f, f, mask, ch);
    std::vector<double> out;
    const auto v = f.channel(ch);
    for (std::size_t k = 0; k < v.size(); ++k) {
        if (mask.data[k]) out.push_back(v[k]);
    }
    return out;
}

std::vector<MetricRow> evaluate(const Field& truth, const Field& pred, const Mask& active,
                                std::span<const std::string> names, int slice, double time) {
    if (names.size() != static_cast<std::size_t>(truth.channels)) throw ShapeError("metrics: one name per channel required");
    const std::pair<const char*, Mask> masks[] = {
        {"active", active}, {"empty", active.complement()}, {"all", Mask(active.rows, active.cols, true)}};
    std::vector<MetricRow> rows;
    for (const auto& [kind, m] : masks) {
        if (m.count() == 0) continue;
        for (int ch = 0; ch < truth.channels; ++ch) {
            MetricRow r;
            r.quantity = names[ch];
            r.slice = slice;
            r.time = time;
            r.mask_kind = kind;
            r.n_act = m.count();
            r.rmse = masked_rmse(truth, pred, m, ch);
            try {
                r.r = masked_pearson(truth, pred, m, ch);
            } catch (const UndefinedMetric&) {
                r.r = std::numeric_limits<double>::quiet_NaN();
            }
            rows.push_back(r);
        }
    }
    return rows;
}

void write_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    std::ostringstream os;
    os.precision(9);
    os << "quantity,slice,time,mask_kind,rmse,r,n_act\n";
    for (const auto& r : rows) {
        os << r.quantity << ',' << r.slice << ',' << r.time << ',' << r.mask_kind << ',' << r.rmse << ',';
        if (std::isnan(r.r)) {
            os << "nan";
        } else {
            os << r.r;
        }
        os << ',' << r.n_act << '\n';
    }
    io::write_text_atomic(path, os.str());
}

std::vector<MetricRow> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "quantity,slice,time,mask_kind,rmse,r,n_act") throw ConfigError(path.string() + ":1: unexpected header");
    std::vector<MetricRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[7];
        for (auto& s : f) std::getline(ss, s, ',');
        try {
            MetricRow r;
            r.quantity = f[0];
            r.slice = std::stoi(f[1]);
            r.time = std::stod(f[2]);
            r.mask_kind = f[3];
            r.rmse = std::stod(f[4]);
            r.r = f[5] == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(f[5]);
            r.n_act = std::stoul(f[6]);
            rows.push_back(r);
        } catch (const std::exception&) {
            throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
        }
    }
    return rows;
}

}  // namespace granflow::metrics
