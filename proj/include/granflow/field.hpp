#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace granflow {

/// Channel-major 2D field (channels x rows x cols). Rows run along z, cols along x.
struct Field {
    int channels = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Field() = default;
    Field(int c, int r, int w, double fill = 0.0)
        : channels(c), rows(r), cols(w), data(static_cast<std::size_t>(c) * r * w, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(rows) * cols; }
    std::size_t size() const { return data.size(); }

    double& at(int c, int r, int w) { return data[(static_cast<std::size_t>(c) * rows + r) * cols + w]; }
    double at(int c, int r, int w) const { return data[(static_cast<std::size_t>(c) * rows + r) * cols + w]; }

    std::span<double> channel(int c) { return {data.data() + c * plane(), plane()}; }
    std::span<const double> channel(int c) const { return {data.data() + c * plane(), plane()}; }

    bool same_shape(const Field& o) const {
        return channels == o.channels && rows == o.rows && cols == o.cols;
    }
};

/// Boolean per-cell mask over (rows x cols).
struct Mask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> data;

    Mask() = default;
    Mask(int r, int w, bool fill = false)
        : rows(r), cols(w), data(static_cast<std::size_t>(r) * w, fill ? 1 : 0) {}

    std::size_t size() const { return data.size(); }
    bool operator()(int r, int w) const { return data[static_cast<std::size_t>(r) * cols + w] != 0; }
    std::size_t count() const {
        std::size_t n = 0;
        for (auto v : data) n += v ? 1 : 0;
        return n;
    }
    Mask complement() const {
        Mask m = *this;
        for (auto& v : m.data) v = v ? 0 : 1;
        return m;
    }
};

}  // namespace granflow
