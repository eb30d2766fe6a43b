#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "granflow/error.hpp"
#include "granflow/field.hpp"

namespace granflow::metrics {

/// Raised when a correlation is undefined (a masked series has zero variance).
class UndefinedMetric : public NumericError {
public:
    using NumericError::NumericError;
};

// Channel `ch` of truth and prediction over the cells where mask is set.
double masked_rmse(const Field& truth, const Field& pred, const Mask& mask, int ch);
double masked_pearson(const Field& truth, const Field& pred, const Mask& mask, int ch);
/// Fraction of masked cells with |truth - mean| <= m * std; zero std covers only exact hits.
double coverage(const Field& truth, const Field& mean, const Field& std, const Mask& mask, int ch, double m);
/// Kolmogorov-Smirnov distance between the empirical CDFs of a and b.
double ecdf_distance(std::vector<double> a, std::vector<double> b);
/// Channel values at masked cells.
std::vector<double> masked_values(const Field& f, const Mask& mask, int ch);

struct MetricRow {
    std::string quantity;
    int slice = 0;
    double time = 0.0;
    std::string mask_kind;  // active, empty, all
    double rmse = 0.0;
    double r = 0.0;  // NaN when undefined
    std::size_t n_act = 0;
};

/// Rows for every channel over the active mask, its complement and the full slice.
/// `active` comes from the truth field.
std::vector<MetricRow> evaluate(const Field& truth, const Field& pred, const Mask& active,
                                std::span<const std::string> names, int slice, double time);

void write_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_csv(const std::filesystem::path& path);

}  // namespace granflow::metrics
