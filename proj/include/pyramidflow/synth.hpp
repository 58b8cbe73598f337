#pragma once

// Synthetic registered textures with blob and scratch defects, written in the
// MVTec AD directory layout:
//   train/good/NNN.pgm
//   test/good/NNN.pgm, test/<kind>/NNN.pgm
//   ground_truth/<kind>/NNN_mask.pgm
//   summary.txt

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pyramidflow/errors.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/netpbm.hpp"

namespace pyramidflow::synth {

enum class Texture { Grating, ValueNoise };
enum class DefectKind { Blob, Scratch };

inline const char* to_string(DefectKind k) { return k == DefectKind::Blob ? "blob" : "scratch"; }

struct SynthConfig {
    Texture texture = Texture::Grating;
    std::size_t size = 64;
    std::vector<DefectKind> defect_kinds{DefectKind::Blob, DefectKind::Scratch};
    double defect_rate = 0.5;  // fraction of test images that carry a defect
    std::uint64_t seed = 0;
    double noise = 0.02;  // per-pixel sensor noise (std, in [0,1] intensity)
};

/// Float image in [0,1] plus binary mask, both size x size row-major.
struct Sample {
    std::vector<double> pixels;
    std::vector<std::uint8_t> mask;
};

/// Pixels whose centre lies within distance r of (cy, cx).
inline std::vector<std::uint8_t> rasterize_disc(std::size_t h, std::size_t w, double cy, double cx, double r) {
    std::vector<std::uint8_t> m(h * w, 0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double dy = static_cast<double>(i) + 0.5 - cy, dx = static_cast<double>(j) + 0.5 - cx;
            if (dy * dy + dx * dx <= r * r) m[i * w + j] = 1;
        }
    return m;
}

/// Pixels whose centre lies within half_width of the segment (y0,x0)-(y1,x1).
inline std::vector<std::uint8_t> rasterize_segment(std::size_t h, std::size_t w, double y0, double x0, double y1,
                                                   double x1, double half_width) {
    std::vector<std::uint8_t> m(h * w, 0);
    const double vy = y1 - y0, vx = x1 - x0;
    const double len2 = vy * vy + vx * vx;
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const double py = static_cast<double>(i) + 0.5 - y0, px = static_cast<double>(j) + 0.5 - x0;
            const double t = len2 > 0 ? std::clamp((py * vy + px * vx) / len2, 0.0, 1.0) : 0.0;
            const double dy = py - t * vy, dx = px - t * vx;
            if (dy * dy + dx * dx <= half_width * half_width) m[i * w + j] = 1;
        }
    return m;
}

/// Deterministic generator: the base texture is fixed per seed, each image
/// adds its own small brightness jitter and sensor noise.
class Generator {
public:
    explicit Generator(SynthConfig cfg) : cfg_(std::move(cfg)), rng_(cfg_.seed) {
        if (cfg_.size < 8) throw ConfigError("synth: size must be >= 8");
        if (!(cfg_.defect_rate >= 0 && cfg_.defect_rate <= 1)) throw ConfigError("synth: defect rate must be in [0,1]");
        if (cfg_.defect_kinds.empty()) throw ConfigError("synth: at least one defect kind required");
        base_ = cfg_.texture == Texture::Grating ? make_grating() : make_value_noise();
    }

    const SynthConfig& config() const { return cfg_; }
    const std::vector<double>& base() const { return base_; }

    Sample normal() {
        Sample s{base_, std::vector<std::uint8_t>(base_.size(), 0)};
        std::normal_distribution<double> noise(0.0, cfg_.noise);
        std::uniform_real_distribution<double> jitter(-0.03, 0.03);
        const double offset = jitter(rng_);
        for (auto& p : s.pixels) p = std::clamp(p + offset + noise(rng_), 0.0, 1.0);
        return s;
    }

    Sample defective(DefectKind kind) {
        Sample s = normal();
        const std::size_t n = cfg_.size;
        const double sz = static_cast<double>(n);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::vector<std::uint8_t> mask;
        if (kind == DefectKind::Blob) {
            const double r = sz * (0.05 + 0.07 * u01(rng_));
            const double cy = r + (sz - 2 * r) * u01(rng_), cx = r + (sz - 2 * r) * u01(rng_);
            mask = rasterize_disc(n, n, cy, cx, r);
        } else {
            const double angle = std::numbers::pi * u01(rng_);
            const double len = sz * (0.25 + 0.25 * u01(rng_));
            const double cy = sz * (0.25 + 0.5 * u01(rng_)), cx = sz * (0.25 + 0.5 * u01(rng_));
            const double dy = 0.5 * len * std::sin(angle), dx = 0.5 * len * std::cos(angle);
            mask = rasterize_segment(n, n, cy - dy, cx - dx, cy + dy, cx + dx, 1.0 + 0.5 * u01(rng_));
        }
        // Either a dark or a bright stain, clearly outside the texture's range.
        const bool dark = u01(rng_) < 0.5;
        const double level = dark ? 0.05 + 0.05 * u01(rng_) : 0.9 + 0.05 * u01(rng_);
        std::normal_distribution<double> noise(0.0, cfg_.noise);
        for (std::size_t k = 0; k < mask.size(); ++k) {
            if (mask[k]) s.pixels[k] = std::clamp(level + noise(rng_), 0.0, 1.0);
        }
        s.mask = std::move(mask);
        return s;
    }

    DefectKind pick_kind() {
        std::uniform_int_distribution<std::size_t> pick(0, cfg_.defect_kinds.size() - 1);
        return cfg_.defect_kinds[pick(rng_)];
    }

private:
    std::vector<double> make_grating() {
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        const double n = static_cast<double>(cfg_.size);
        const double angle = std::numbers::pi * u01(rng_);
        const double period = n / (4.0 + 4.0 * u01(rng_));
        const double phase = 2 * std::numbers::pi * u01(rng_);
        std::vector<double> img(cfg_.size * cfg_.size);
        for (std::size_t i = 0; i < cfg_.size; ++i)
            for (std::size_t j = 0; j < cfg_.size; ++j) {
                const double t = (std::cos(angle) * j + std::sin(angle) * i) / period;
                img[i * cfg_.size + j] = 0.5 + 0.2 * std::sin(2 * std::numbers::pi * t + phase);
            }
        return img;
    }

    /// Bilinear interpolation of a random lattice, two octaves.
    std::vector<double> make_value_noise() {
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        std::vector<double> img(cfg_.size * cfg_.size, 0.0);
        double amplitude = 0.25;
        for (std::size_t cells : {4, 8}) {
            std::vector<double> lattice((cells + 1) * (cells + 1));
            for (auto& v : lattice) v = u01(rng_) - 0.5;
            const double step = static_cast<double>(cfg_.size) / static_cast<double>(cells);
            for (std::size_t i = 0; i < cfg_.size; ++i)
                for (std::size_t j = 0; j < cfg_.size; ++j) {
                    const double y = (static_cast<double>(i) + 0.5) / step, x = (static_cast<double>(j) + 0.5) / step;
                    const auto y0 = std::min(static_cast<std::size_t>(y), cells - 1);
                    const auto x0 = std::min(static_cast<std::size_t>(x), cells - 1);
                    const double fy = y - y0, fx = x - x0;
                    auto at = [&](std::size_t a, std::size_t b) { return lattice[a * (cells + 1) + b]; };
                    const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                                     fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                    img[i * cfg_.size + j] += amplitude * v;
                }
            amplitude *= 0.5;
        }
        for (auto& p : img) p = std::clamp(0.5 + p, 0.0, 1.0);
        return img;
    }

    SynthConfig cfg_;
    std::mt19937_64 rng_;
    std::vector<double> base_;
};

struct Summary {
    std::size_t train = 0, test_good = 0, test_defective = 0;
    bool aupro_valid = false;  // at least one test image with a non-empty mask
};

inline netpbm::Image to_pgm(const std::vector<double>& pixels, std::size_t size) {
    netpbm::Image img{size, size, 1, 255, std::vector<std::uint16_t>(pixels.size())};
    for (std::size_t k = 0; k < pixels.size(); ++k) {
        img.samples[k] = static_cast<std::uint16_t>(std::lround(std::clamp(pixels[k], 0.0, 1.0) * 255.0));
    }
    return img;
}

inline netpbm::Image mask_to_pgm(const std::vector<std::uint8_t>& mask, std::size_t size) {
    netpbm::Image img{size, size, 1, 255, std::vector<std::uint16_t>(mask.size())};
    for (std::size_t k = 0; k < mask.size(); ++k) img.samples[k] = mask[k] ? 255 : 0;
    return img;
}

inline std::string image_id(std::size_t k) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "%03zu", k);
    return buf;
}

/// n normal training images and n test images, round(n * defect_rate) of them defective.
inline Summary generate(const std::filesystem::path& root, const SynthConfig& cfg, std::size_t n) {
    if (n < 1) throw ConfigError("synth: n must be >= 1");
    Generator gen(cfg);
    Summary sum;
    for (std::size_t k = 0; k < n; ++k) {
        netpbm::write(root / "train" / "good" / (image_id(k) + ".pgm"), to_pgm(gen.normal().pixels, cfg.size));
        ++sum.train;
    }
    const auto defective = static_cast<std::size_t>(std::llround(static_cast<double>(n) * cfg.defect_rate));
    std::vector<std::size_t> per_kind_count(2, 0);
    for (std::size_t k = 0; k < n; ++k) {
        if (k < n - defective) {
            netpbm::write(root / "test" / "good" / (image_id(sum.test_good) + ".pgm"),
                          to_pgm(gen.normal().pixels, cfg.size));
            ++sum.test_good;
            continue;
        }
        const DefectKind kind = gen.pick_kind();
        const Sample s = gen.defective(kind);
        const std::string id = image_id(per_kind_count[static_cast<std::size_t>(kind)]++);
        netpbm::write(root / "test" / to_string(kind) / (id + ".pgm"), to_pgm(s.pixels, cfg.size));
        netpbm::write(root / "ground_truth" / to_string(kind) / (id + "_mask.pgm"), mask_to_pgm(s.mask, cfg.size));
        ++sum.test_defective;
    }
    sum.aupro_valid = sum.test_defective > 0;
    const std::string text = "size = " + std::to_string(cfg.size) + "\nseed = " + std::to_string(cfg.seed) +
                             "\ntexture = " + (cfg.texture == Texture::Grating ? "grating" : "value-noise") +
                             "\ntrain = " + std::to_string(sum.train) +
                             "\ntest_good = " + std::to_string(sum.test_good) +
                             "\ntest_defective = " + std::to_string(sum.test_defective) +
                             "\naupro_valid = " + (sum.aupro_valid ? "1" : "0") + "\n";
    io::write_file_atomic(root / "summary.txt", std::string_view(text));
    return sum;
}

}  // namespace pyramidflow::synth
