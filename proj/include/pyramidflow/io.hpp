#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "pyramidflow/errors.hpp"

namespace pyramidflow::io {

namespace fs = std::filesystem;

inline std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read error on " + path.string());
    return bytes;
}

inline std::string read_text(const fs::path& path) {
    auto bytes = read_file(path);
    return {bytes.begin(), bytes.end()};
}

/// Writes into a sibling temporary file and renames it over `path`, so readers
/// see either the old file or the complete new one.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

    thread_local std::mt19937_64 salt{std::random_device{}()};
    const fs::path tmp = dir / ("." + path.filename().string() + ".tmp" + std::to_string(salt() % 1000000007ULL));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp, ec);
            throw IoError("write error on " + tmp.string());
        }
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignore;
        fs::remove(tmp, ignore);
        throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
    }
}

inline void write_file_atomic(const fs::path& path, const std::vector<unsigned char>& bytes) {
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace pyramidflow::io
