#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <json.hpp>

#include "errors.hpp"

namespace treeloss {

// Rejects misspelled config keys instead of silently using defaults.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, std::string_view block)
{
    if (!j.is_object()) throw ConfigError(std::string(block) + " block must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        bool ok = false;
        for (auto a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + std::string(block) + " block");
    }
}

} // namespace treeloss
