#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace granflow::report {

namespace fs = std::filesystem;

struct Panel {
    std::string title;
    std::vector<double> values;  // rows x cols, row 0 at the bottom
    double lo = 0.0;
    double hi = 1.0;
    std::string label;  // colour-bar caption including units
};

/// Row of equally sized heatmaps, each with its own colour bar. Output bytes depend
/// only on the inputs.
std::string heatmap_svg(const std::string& title, int rows, int cols, const std::vector<Panel>& panels);

/// Renders every quantity of a saved reconstruction into `out_dir`; returns the files written.
/// Panels: truth, reconstruction (ensemble mean when K > 1), |error|, and std when K > 1.
std::vector<fs::path> render_reconstruction(const fs::path& recon_dir, const fs::path& out_dir);

/// Markdown table of the active/empty/all metrics of each reconstruction directory.
std::string summary_table(const std::vector<fs::path>& recon_dirs);

}  // namespace granflow::report
