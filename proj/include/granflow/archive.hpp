#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace granflow::io {

namespace fs = std::filesystem;
using Json = nlohmann::json;

// Raw little-endian arrays.
void write_f32(const fs::path& path, std::span<const double> values);
void write_f32(const fs::path& path, std::span<const float> values);
std::vector<float> read_f32(const fs::path& path);
void write_u32(const fs::path& path, std::span<const std::uint32_t> values);
std::vector<std::uint32_t> read_u32(const fs::path& path);

/// Writes through a sibling temp file and renames it into place.
void write_text_atomic(const fs::path& path, const std::string& text);
void write_json_atomic(const fs::path& path, const Json& j);

/// Parses a JSON file; malformed input raises ConfigError naming file and line.
Json read_json(const fs::path& path);

/// Directory staged under "<target>.tmp" and renamed over <target> on commit.
class StagedDir {
public:
    explicit StagedDir(fs::path target);
    ~StagedDir();
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;

    const fs::path& path() const { return staging_; }
    void commit();

private:
    fs::path target_;
    fs::path staging_;
    bool committed_ = false;
};

struct ArrayEntry {
    std::string name;
    std::vector<int> shape;
    std::string units;
    double time = 0.0;
    std::vector<float> data;
};

/// Named f32 arrays with declared shape, units and time, plus free-form attributes.
/// On disk: manifest.json and one <index>.f32 file per array.
class FieldArchive {
public:
    Json attributes = Json::object();

    void add(std::string name, std::vector<int> shape, std::string units, double time,
             std::span<const double> values);
    const ArrayEntry& get(const std::string& name) const;
    const ArrayEntry* find(const std::string& name) const;
    const std::vector<ArrayEntry>& arrays() const { return arrays_; }

    void save(const fs::path& dir) const;
    static FieldArchive load(const fs::path& dir);

private:
    std::vector<ArrayEntry> arrays_;
};

}  // namespace granflow::io
