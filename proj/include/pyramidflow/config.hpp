#pragma once

// Flat `key = value` run configuration. Blank lines and `#` comments are
// ignored; unknown keys and duplicate keys are errors.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "pyramidflow/errors.hpp"
#include "pyramidflow/flow_blocks.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/training.hpp"

namespace pyramidflow {

enum class Precision { F32, F64 };

struct RunConfig {
    std::size_t levels = 4;
    std::size_t depth = 2;
    std::size_t channels = 16;
    std::size_t in_channels = 3;
    VnAxis vn_axis = VnAxis::Channel;
    double lr = 2e-4;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    LossKind loss = LossKind::Fourier;

    ModelConfig model(std::size_t height, std::size_t width) const {
        ModelConfig m;
        m.levels = levels;
        m.depth = depth;
        m.channels = channels;
        m.in_channels = in_channels;
        m.height = height;
        m.width = width;
        m.vn_axis = vn_axis;
        m.seed = seed;
        return m;
    }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename U>
U parse_number(std::string_view key, std::string_view text) {
    U v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw ConfigError("config key '" + std::string(key) + "': cannot parse '" + std::string(text) + "'");
    }
    return v;
}

}  // namespace detail

inline VnAxis parse_vn_axis(std::string_view s) {
    if (s == "cvn" || s == "channel") return VnAxis::Channel;
    if (s == "svn" || s == "spatial") return VnAxis::Spatial;
    if (s == "none") return VnAxis::None;
    throw ConfigError("vn_axis must be cvn, svn or none (got '" + std::string(s) + "')");
}

inline RunConfig parse_config(std::string_view text) {
    RunConfig c;
    std::set<std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = raw;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const std::string key(detail::trim(line.substr(0, eq)));
        const std::string_view value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty()) {
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
        }
        if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");

        if (key == "L") c.levels = detail::parse_number<std::size_t>(key, value);
        else if (key == "D") c.depth = detail::parse_number<std::size_t>(key, value);
        else if (key == "C") c.channels = detail::parse_number<std::size_t>(key, value);
        else if (key == "c_in") c.in_channels = detail::parse_number<std::size_t>(key, value);
        else if (key == "vn_axis") c.vn_axis = parse_vn_axis(value);
        else if (key == "lr") c.lr = detail::parse_number<double>(key, value);
        else if (key == "steps") c.steps = detail::parse_number<std::size_t>(key, value);
        else if (key == "seed") c.seed = detail::parse_number<std::uint64_t>(key, value);
        else if (key == "precision") {
            if (value == "f32") c.precision = Precision::F32;
            else if (value == "f64") c.precision = Precision::F64;
            else throw ConfigError("precision must be f32 or f64 (got '" + std::string(value) + "')");
        } else if (key == "loss") {
            if (value == "fourier") c.loss = LossKind::Fourier;
            else if (value == "spatial") c.loss = LossKind::Spatial;
            else throw ConfigError("loss must be fourier or spatial (got '" + std::string(value) + "')");
        } else {
            throw ConfigError("unknown config key '" + key + "' (line " + std::to_string(line_no) + ")");
        }
    }
    if (c.levels < 1 || c.depth < 1 || c.in_channels < 1 || c.channels < c.in_channels) {
        throw ConfigError("config requires L >= 1, D >= 1, c_in >= 1 and C >= c_in");
    }
    if (c.in_channels != 1 && c.in_channels != 3) throw ConfigError("c_in must be 1 (gray) or 3 (RGB)");
    if (!(c.lr > 0)) throw ConfigError("lr must be positive");
    return c;
}

inline RunConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_text(path)); }

}  // namespace pyramidflow
