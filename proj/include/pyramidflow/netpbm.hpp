#pragma once

// Binary Netpbm: P5 (8 or 16 bit grayscale) and P6 (8 bit RGB).
// 16-bit samples are big-endian as the format requires.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pyramidflow/errors.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/tensor.hpp"

namespace pyramidflow::netpbm {

struct Image {
    std::size_t width = 0, height = 0, channels = 1;
    unsigned maxval = 255;
    std::vector<std::uint16_t> samples;  // interleaved, row-major

    std::uint16_t at(std::size_t i, std::size_t j, std::size_t c = 0) const {
        return samples[(i * width + j) * channels + c];
    }
    std::uint16_t& at(std::size_t i, std::size_t j, std::size_t c = 0) {
        return samples[(i * width + j) * channels + c];
    }
};

namespace detail {

class HeaderReader {
public:
    explicit HeaderReader(const std::vector<unsigned char>& b) : bytes_(b) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    unsigned long number(const char* what) {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) {
            throw FormatError(std::string("netpbm: malformed header, expected ") + what);
        }
        unsigned long v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_++] - '0');
            if (v > 1000000000UL) throw FormatError(std::string("netpbm: ") + what + " out of range");
        }
        return v;
    }

    std::size_t pos_ = 0;
    const std::vector<unsigned char>& bytes_;
};

}  // namespace detail

inline Image decode(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw FormatError("netpbm: unsupported magic (need P5 or P6)");
    }
    Image img;
    img.channels = bytes[1] == '6' ? 3 : 1;
    detail::HeaderReader r(bytes);
    r.pos_ = 2;
    img.width = r.number("width");
    img.height = r.number("height");
    const unsigned long maxval = r.number("maxval");
    if (img.width == 0 || img.height == 0) throw FormatError("netpbm: zero image dimension");
    if (maxval == 0 || maxval > 65535) throw FormatError("netpbm: maxval must be in 1..65535");
    if (img.channels == 3 && maxval > 255) throw FormatError("netpbm: only 8-bit P6 is supported");
    img.maxval = static_cast<unsigned>(maxval);
    if (r.pos_ >= bytes.size() || !std::isspace(bytes[r.pos_])) {
        throw FormatError("netpbm: missing whitespace after maxval");
    }
    ++r.pos_;

    const std::size_t bps = maxval > 255 ? 2 : 1;
    const std::size_t count = img.width * img.height * img.channels;
    if (bytes.size() - r.pos_ < count * bps) {
        throw FormatError("netpbm: truncated payload (" + std::to_string(bytes.size() - r.pos_) + " of " +
                          std::to_string(count * bps) + " bytes)");
    }
    img.samples.resize(count);
    const unsigned char* p = bytes.data() + r.pos_;
    for (std::size_t k = 0; k < count; ++k) {
        const std::uint16_t v = bps == 2 ? static_cast<std::uint16_t>((p[2 * k] << 8) | p[2 * k + 1]) : p[k];
        if (v > maxval) throw FormatError("netpbm: sample exceeds maxval");
        img.samples[k] = v;
    }
    return img;
}

inline std::vector<unsigned char> encode(const Image& img) {
    if (img.channels != 1 && img.channels != 3) throw FormatError("netpbm: channels must be 1 or 3");
    if (img.maxval == 0 || img.maxval > 65535 || (img.channels == 3 && img.maxval > 255)) {
        throw FormatError("netpbm: unsupported maxval " + std::to_string(img.maxval));
    }
    if (img.samples.size() != img.width * img.height * img.channels) throw FormatError("netpbm: sample count");
    const std::string header = std::string(img.channels == 3 ? "P6" : "P5") + "\n" + std::to_string(img.width) +
                               " " + std::to_string(img.height) + "\n" + std::to_string(img.maxval) + "\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    const bool wide = img.maxval > 255;
    for (auto v : img.samples) {
        if (v > img.maxval) throw FormatError("netpbm: sample exceeds maxval");
        if (wide) out.push_back(static_cast<unsigned char>(v >> 8));
        out.push_back(static_cast<unsigned char>(v & 0xff));
    }
    return out;
}

inline Image read(const std::filesystem::path& path) {
    try {
        return decode(io::read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

inline void write(const std::filesystem::path& path, const Image& img) { io::write_file_atomic(path, encode(img)); }

/// Samples scaled to [0, 1] as a (1, channels, h, w) tensor.
template <typename T>
Tensor4<T> to_tensor(const Image& img) {
    Tensor4<T> t({1, img.channels, img.height, img.width});
    const double scale = 1.0 / img.maxval;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t i = 0; i < img.height; ++i)
            for (std::size_t j = 0; j < img.width; ++j) t(0, c, i, j) = static_cast<T>(img.at(i, j, c) * scale);
    return t;
}

/// Inverse of to_tensor for values in [0, 1]; out-of-range values are clamped.
template <typename T>
Image from_tensor(const Tensor4<T>& t, unsigned maxval = 255) {
    if (t.n() != 1 || (t.c() != 1 && t.c() != 3)) throw ShapeError("netpbm: tensor must be (1, 1|3, h, w)");
    Image img{t.w(), t.h(), t.c(), maxval, {}};
    img.samples.resize(t.size());
    for (std::size_t c = 0; c < t.c(); ++c)
        for (std::size_t i = 0; i < t.h(); ++i)
            for (std::size_t j = 0; j < t.w(); ++j) {
                const double v = std::clamp(static_cast<double>(t(0, c, i, j)), 0.0, 1.0);
                img.at(i, j, c) = static_cast<std::uint16_t>(std::lround(v * maxval));
            }
    return img;
}

/// Score map quantized as round(65535 * v / score_max) into a 16-bit PGM.
/// An all-zero map has score_max 0 and is written as zeros.
template <typename T>
Image quantize_score_map(const Tensor4<T>& map, double& score_max) {
    if (map.n() != 1 || map.c() != 1) throw ShapeError("score map must be (1, 1, h, w)");
    score_max = 0;
    for (T v : map.values()) {
        if (!std::isfinite(static_cast<double>(v)) || v < 0) throw NumericError("score map must be finite and >= 0");
        score_max = std::max(score_max, static_cast<double>(v));
    }
    Image img{map.w(), map.h(), 1, 65535, std::vector<std::uint16_t>(map.size(), 0)};
    if (score_max > 0) {
        for (std::size_t k = 0; k < map.size(); ++k) {
            img.samples[k] = static_cast<std::uint16_t>(std::lround(65535.0 * static_cast<double>(map[k]) / score_max));
        }
    }
    return img;
}

/// Writes `<path>` and the sidecar `<path>.txt` containing `score_max <value>`.
template <typename T>
double write_score_map(const std::filesystem::path& path, const Tensor4<T>& map) {
    double score_max = 0;
    const Image img = quantize_score_map(map, score_max);
    write(path, img);
    char line[64];
    std::snprintf(line, sizeof line, "score_max %.17g\n", score_max);
    io::write_file_atomic(path.string() + ".txt", std::string_view(line));
    return score_max;
}

}  // namespace pyramidflow::netpbm
