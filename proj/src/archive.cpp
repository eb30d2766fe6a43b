#include "granflow/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "granflow/error.hpp"

namespace granflow::io {

namespace {

template <typename U>
U to_le(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        U out{};
        auto* src = reinterpret_cast<const unsigned char*>(&v);
        auto* dst = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
        return out;
    } else {
        return v;
    }
}

std::string read_all(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& path, const void* data, std::size_t n) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw Error("short write to " + path.string());
}

}  // namespace

void write_f32(const fs::path& path, std::span<const double> values) {
    std::vector<std::uint32_t> raw(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        raw[i] = to_le(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
    }
    write_bytes(path, raw.data(), raw.size() * 4);
}

void write_f32(const fs::path& path, std::span<const float> values) {
    std::vector<std::uint32_t> raw(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) raw[i] = to_le(std::bit_cast<std::uint32_t>(values[i]));
    write_bytes(path, raw.data(), raw.size() * 4);
}

std::vector<float> read_f32(const fs::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() % 4 != 0) throw ConfigError(path.string() + ": size is not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + 4 * i, 4);
        out[i] = std::bit_cast<float>(to_le(u));
    }
    return out;
}

void write_u32(const fs::path& path, std::span<const std::uint32_t> values) {
    std::vector<std::uint32_t> raw(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) raw[i] = to_le(values[i]);
    write_bytes(path, raw.data(), raw.size() * 4);
}

std::vector<std::uint32_t> read_u32(const fs::path& path) {
    const std::string bytes = read_all(path);
    if (bytes.size() % 4 != 0) throw ConfigError(path.string() + ": size is not a multiple of 4");
    std::vector<std::uint32_t> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t u;
        std::memcpy(&u, bytes.data() + 4 * i, 4);
        out[i] = to_le(u);
    }
    return out;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    write_bytes(tmp, text.data(), text.size());
    fs::rename(tmp, path);
}

void write_json_atomic(const fs::path& path, const Json& j) {
    write_text_atomic(path, j.dump(2) + "\n");
}

Json read_json(const fs::path& path) {
    const std::string text = read_all(path);
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        const std::size_t pos = std::min<std::size_t>(e.byte, text.size());
        const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n');
        throw ConfigError(path.string() + ":" + std::to_string(line) + ": JSON parse error: " + e.what());
    }
}

StagedDir::StagedDir(fs::path target) : target_(std::move(target)) {
    staging_ = target_;
    staging_ += ".tmp";
    fs::remove_all(staging_);
    fs::create_directories(staging_);
}

StagedDir::~StagedDir() {
    if (!committed_) {
        std::error_code ec;
        fs::remove_all(staging_, ec);
    }
}

void StagedDir::commit() {
    fs::remove_all(target_);
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::rename(staging_, target_);
    committed_ = true;
}

void FieldArchive::add(std::string name, std::vector<int> shape, std::string units, double time,
                       std::span<const double> values) {
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    if (n != values.size()) throw ShapeError("array '" + name + "' shape does not match data length");
    ArrayEntry e{std::move(name), std::move(shape), std::move(units), time, {}};
    e.data.assign(values.begin(), values.end());
    arrays_.push_back(std::move(e));
}

const ArrayEntry* FieldArchive::find(const std::string& name) const {
    for (const auto& a : arrays_) {
        if (a.name == name) return &a;
    }
    return nullptr;
}

const ArrayEntry& FieldArchive::get(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw ConfigError("field archive has no array '" + name + "'");
}

void FieldArchive::save(const fs::path& dir) const {
    StagedDir staged(dir);
    Json manifest;
    manifest["format"] = "granflow.fields";
    manifest["version"] = 1;
    manifest["attributes"] = attributes;
    Json list = Json::array();
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
        const auto& a = arrays_[i];
        const std::string file = std::to_string(i) + ".f32";
        write_f32(staged.path() / file, std::span<const float>(a.data));
        list.push_back({{"name", a.name}, {"file", file}, {"shape", a.shape}, {"dtype", "f32"},
                        {"units", a.units}, {"time", a.time}});
    }
    manifest["arrays"] = list;
    write_json_atomic(staged.path() / "manifest.json", manifest);
    staged.commit();
}

FieldArchive FieldArchive::load(const fs::path& dir) {
    const Json manifest = read_json(dir / "manifest.json");
    try {
        if (manifest.at("format") != "granflow.fields") {
            throw ConfigError((dir / "manifest.json").string() + ": not a field archive");
        }
        FieldArchive out;
        out.attributes = manifest.value("attributes", Json::object());
        for (const auto& a : manifest.at("arrays")) {
            ArrayEntry e;
            e.name = a.at("name").get<std::string>();
            e.shape = a.at("shape").get<std::vector<int>>();
            e.units = a.value("units", "");
            e.time = a.value("time", 0.0);
            e.data = read_f32(dir / a.at("file").get<std::string>());
            std::size_t n = 1;
            for (int s : e.shape) n *= static_cast<std::size_t>(s);
            if (n != e.data.size()) throw ConfigError("array '" + e.name + "' has wrong length on disk");
            out.arrays_.push_back(std::move(e));
        }
        return out;
    } catch (const Json::exception& e) {
        throw ConfigError((dir / "manifest.json").string() + ": " + e.what());
    }
}

}  // namespace granflow::io
