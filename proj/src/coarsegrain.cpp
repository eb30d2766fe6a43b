#include "granflow/coarsegrain.hpp"

#include <cmath>
#include <string>

#include "granflow/json_util.hpp"

namespace granflow::cg {

void GridSpec::validate() const {
    if (!(cell_size > 0)) throw ConfigError("grid: cell_size must be positive");
    for (int n : dims) {
        if (n < 1) throw ConfigError("grid: dims must be >= 1");
    }
}

std::optional<std::size_t> GridSpec::locate(const Vec3& x) const {
    int idx[3];
    for (int a = 0; a < 3; ++a) {
        const double f = std::floor((x[a] - origin[a]) / cell_size);
        if (!(f >= 0 && f < dims[a])) return std::nullopt;
        idx[a] = static_cast<int>(f);
    }
    return index(idx[0], idx[1], idx[2]);
}

GridVolume grid_average_velocity(const dem::ParticleState& state, const GridSpec& spec) {
    spec.validate();
    GridVolume v;
    v.spec = spec;
    const std::size_t n = spec.cell_count();
    v.count.assign(n, 0);
    v.v_cell.assign(n, Vec3::Zero());
    v.T.assign(n, 0.0);
    v.sigma.assign(n, Mat3::Zero());
    v.p.assign(n, 0.0);
    v.q.assign(n, 0.0);
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const auto cell = spec.locate(state.positions[i]);
        if (!cell) {
            ++v.outside;
            continue;
        }
        ++v.count[*cell];
        v.v_cell[*cell] += state.velocities[i];
    }
    for (std::size_t c = 0; c < n; ++c) {
        if (v.count[c] > 0) v.v_cell[c] /= static_cast<double>(v.count[c]);
    }
    return v;
}

void granular_temperature(const dem::ParticleState& state, GridVolume& volume) {
    const std::size_t n = volume.spec.cell_count();
    std::vector<double> sum(n, 0.0);
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state.fixed[i]) continue;
        const auto cell = volume.spec.locate(state.positions[i]);
        if (!cell) continue;
        sum[*cell] += (state.velocities[i] - volume.v_cell[*cell]).squaredNorm();
    }
    for (std::size_t c = 0; c < n; ++c) {
        volume.T[c] = volume.count[c] > 1 ? sum[c] / volume.count[c] / 3.0 : 0.0;
    }
}

void loveweber_stress(const dem::ParticleState& state, GridVolume& volume) {
    const std::size_t n = volume.spec.cell_count();
    volume.sigma.assign(n, Mat3::Zero());
    const double inv_v = 1.0 / volume.spec.cell_volume();
    for (const auto& c : state.contacts) {
        if (c.is_wall()) continue;
        const auto cell = volume.spec.locate(c.point);
        if (!cell) continue;
        volume.sigma[*cell] += c.force * c.branch.transpose();
    }
    for (std::size_t k = 0; k < n; ++k) {
        if (volume.count[k] == 0) {
            volume.sigma[k].setZero();
            continue;
        }
        const Mat3 s = volume.sigma[k] * inv_v;
        volume.sigma[k] = 0.5 * (s + s.transpose());
    }
}

void stress_invariants(GridVolume& volume) {
    const std::size_t n = volume.spec.cell_count();
    volume.p.assign(n, 0.0);
    volume.q.assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        const Mat3& s = volume.sigma[k];
        volume.p[k] = -(s(0, 0) + s(1, 1) + s(2, 2)) / 3.0;
        const double a = s(0, 0) - s(1, 1), b = s(1, 1) - s(2, 2), c = s(0, 0) - s(2, 2);
        const double shear = s(0, 1) * s(0, 1) + s(0, 2) * s(0, 2) + s(1, 2) * s(1, 2);
        volume.q[k] = std::sqrt(0.5 * (a * a + b * b + c * c + 6.0 * shear));
    }
}

GridVolume coarse_grain(const dem::ParticleState& state, const GridSpec& spec) {
    GridVolume v = grid_average_velocity(state, spec);
    granular_temperature(state, v);
    loveweber_stress(state, v);
    stress_invariants(v);
    return v;
}

std::array<int, 4> slice_layers(const GridSpec& spec, double d) {
    if (!(d > 0)) throw ConfigError("slices: particle diameter must be positive");
    std::array<int, 4> out{0, 0, 0, 0};
    const int ny = spec.dims[1];
    const double wall_center = 0.5 * spec.cell_size;
    if (wall_center + kSliceDepths.back() * d > ny * spec.cell_size) {
        throw ConfigError("slices: grid is " + std::to_string(ny * spec.cell_size) +
                          " m deep, shallower than the deepest slice at " +
                          std::to_string(kSliceDepths.back()) + "d");
    }
    for (int s = 0; s < 3; ++s) {
        const int layer = static_cast<int>(std::lround(kSliceDepths[s] * d / spec.cell_size));
        out[s + 1] = std::min(layer, ny - 1);
    }
    return out;
}

Mask activity_mask(const Field& velocity, double threshold) {
    Mask m(velocity.rows, velocity.cols);
    for (int r = 0; r < velocity.rows; ++r) {
        for (int w = 0; w < velocity.cols; ++w) {
            double s2 = 0.0;
            for (int c = 0; c < velocity.channels; ++c) s2 += velocity.at(c, r, w) * velocity.at(c, r, w);
            m.data[static_cast<std::size_t>(r) * velocity.cols + w] = std::sqrt(s2) > threshold ? 1 : 0;
        }
    }
    return m;
}

std::array<SliceSample, 4> extract_slices(const GridVolume& volume, double d, double time) {
    const auto layers = slice_layers(volume.spec, d);
    const int nx = volume.spec.dims[0], nz = volume.spec.dims[2];
    std::array<SliceSample, 4> out;
    for (int s = 0; s < 4; ++s) {
        SliceSample& sl = out[s];
        sl.index = s;
        sl.layer = layers[s];
        sl.y_plus = s == 0 ? 0.0 : kSliceDepths[s - 1];
        sl.time = time;
        sl.velocity = Field(3, nz, nx);
        sl.physics = Field(3, nz, nx);
        for (int iz = 0; iz < nz; ++iz) {
            for (int ix = 0; ix < nx; ++ix) {
                const std::size_t k = volume.spec.index(ix, sl.layer, iz);
                for (int c = 0; c < 3; ++c) sl.velocity.at(c, iz, ix) = volume.v_cell[k][c];
                sl.physics.at(0, iz, ix) = volume.p[k];
                sl.physics.at(1, iz, ix) = volume.q[k];
                sl.physics.at(2, iz, ix) = volume.T[k];
            }
        }
        sl.mask = activity_mask(sl.velocity);
    }
    return out;
}

void to_json(nlohmann::json& j, const GridSpec& g) {
    j = nlohmann::json{{"origin", {g.origin.x(), g.origin.y(), g.origin.z()}},
                       {"cell_size", g.cell_size},
                       {"dims", g.dims}};
}

void from_json(const nlohmann::json& j, GridSpec& g) {
    SectionReader r(j, "grid");
    std::array<double, 3> origin{g.origin.x(), g.origin.y(), g.origin.z()};
    r.get("origin", origin);
    r.get("cell_size", g.cell_size);
    r.get("dims", g.dims);
    r.finish();
    g.origin = Vec3(origin[0], origin[1], origin[2]);
    g.validate();
}

void add_volume(io::FieldArchive& archive, const std::string& prefix, const GridVolume& volume, double time) {
    const auto& s = volume.spec;
    const int nx = s.dims[0], ny = s.dims[1], nz = s.dims[2];
    const std::size_t n = s.cell_count();
    std::vector<double> buf(n);
    for (std::size_t k = 0; k < n; ++k) buf[k] = volume.count[k];
    archive.add(prefix + "/count", {nz, ny, nx}, "1", time, buf);
    buf.assign(3 * n, 0.0);
    for (int c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < n; ++k) buf[c * n + k] = volume.v_cell[k][c];
    }
    archive.add(prefix + "/v_cell", {3, nz, ny, nx}, "m/s", time, buf);
    archive.add(prefix + "/T", {nz, ny, nx}, "m^2/s^2", time, volume.T);
    buf.assign(9 * n, 0.0);
    for (int a = 0; a < 3; ++a) {
        for (int b = 0; b < 3; ++b) {
            for (std::size_t k = 0; k < n; ++k) buf[(3 * a + b) * n + k] = volume.sigma[k](a, b);
        }
    }
    archive.add(prefix + "/sigma", {3, 3, nz, ny, nx}, "Pa", time, buf);
    archive.add(prefix + "/p", {nz, ny, nx}, "Pa", time, volume.p);
    archive.add(prefix + "/q", {nz, ny, nx}, "Pa", time, volume.q);
}

void add_slice(io::FieldArchive& archive, const std::string& prefix, const SliceSample& slice) {
    const int nz = slice.velocity.rows, nx = slice.velocity.cols;
    archive.add(prefix + "/velocity", {3, nz, nx}, "m/s", slice.time, slice.velocity.data);
    std::vector<double> mask(slice.mask.data.begin(), slice.mask.data.end());
    archive.add(prefix + "/mask", {nz, nx}, "1", slice.time, mask);
    archive.add(prefix + "/physics", {3, nz, nx}, "Pa,Pa,m^2/s^2", slice.time, slice.physics.data);
}

SliceSample read_slice(const io::FieldArchive& archive, const std::string& prefix) {
    auto to_field = [](const io::ArrayEntry& e) {
        if (e.shape.size() != 3) throw ShapeError("array '" + e.name + "' must be 3-dimensional");
        Field f(e.shape[0], e.shape[1], e.shape[2]);
        f.data.assign(e.data.begin(), e.data.end());
        return f;
    };
    SliceSample s;
    const auto& vel = archive.get(prefix + "/velocity");
    s.velocity = to_field(vel);
    s.time = vel.time;
    s.physics = to_field(archive.get(prefix + "/physics"));
    const auto& m = archive.get(prefix + "/mask");
    s.mask = Mask(s.velocity.rows, s.velocity.cols);
    if (m.data.size() != s.mask.size()) throw ShapeError("mask '" + m.name + "' does not match its velocity field");
    for (std::size_t k = 0; k < m.data.size(); ++k) s.mask.data[k] = m.data[k] != 0.0f ? 1 : 0;
    return s;
}

}  // namespace granflow::cg
