#pragma once

#include <set>
#include <string>

#include <json.hpp>

#include "granflow/error.hpp"

namespace granflow {

/// Reads optional keys from a JSON object section and rejects keys nobody asked for.
class SectionReader {
public:
    SectionReader(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
        if (!j_.is_object()) throw ConfigError(section_ + ": expected an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(section_ + "." + key + ": " + e.what());
        }
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) throw ConfigError(section_ + ": unknown key '" + it.key() + "'");
        }
    }

private:
    const nlohmann::json& j_;
    std::string section_;
    std::set<std::string> seen_;
};

}  // namespace granflow
