#pragma once

// MVTec AD style dataset loading and training-time augmentation.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pyramidflow/errors.hpp"
#include "pyramidflow/netpbm.hpp"
#include "pyramidflow/tensor.hpp"

namespace pyramidflow {

namespace fs = std::filesystem;

template <typename T>
struct DatasetItem {
    std::string id;    // "<kind>/<stem>", e.g. "good/003" or "blob/017"
    std::string kind;  // "good" or the defect directory name
    Tensor4<T> image;  // (1, c, h, w) in [0, 1]
    std::vector<std::uint8_t> mask;  // h*w, empty vector when no ground truth
    bool has_anomaly() const { return std::any_of(mask.begin(), mask.end(), [](auto v) { return v != 0; }); }
};

namespace detail {

inline std::vector<fs::path> sorted_images(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        const auto ext = e.path().extension().string();
        if (e.is_regular_file() && (ext == ".pgm" || ext == ".ppm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    return files;
}

inline std::vector<std::string> sorted_subdirs(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

template <typename T>
Tensor4<T> load_image(const fs::path& path, std::size_t channels) {
    const auto img = netpbm::read(path);
    if (img.channels != channels) {
        throw FormatError(path.string() + ": has " + std::to_string(img.channels) + " channel(s), expected " +
                          std::to_string(channels));
    }
    return netpbm::to_tensor<T>(img);
}

inline std::vector<std::uint8_t> load_mask(const fs::path& path, std::size_t h, std::size_t w) {
    const auto img = netpbm::read(path);
    if (img.channels != 1) throw FormatError(path.string() + ": masks must be grayscale");
    if (img.height != h || img.width != w) {
        throw ShapeError(path.string() + ": mask is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         ", image is " + std::to_string(h) + "x" + std::to_string(w));
    }
    std::vector<std::uint8_t> m(img.samples.size());
    for (std::size_t k = 0; k < m.size(); ++k) m[k] = img.samples[k] != 0;
    return m;
}

}  // namespace detail

/// Training split: only train/good is admitted. Any other subdirectory, or a
/// ground-truth mask for a "good" image, violates the normality contract.
template <typename T>
std::vector<DatasetItem<T>> load_train(const fs::path& root, std::size_t channels) {
    const fs::path train = root / "train";
    if (!fs::is_directory(train / "good")) throw IoError("no train/good directory under " + root.string());
    for (const auto& sub : detail::sorted_subdirs(train)) {
        if (sub != "good") throw FormatError("train split contains non-normal class '" + sub + "'");
    }
    if (fs::exists(root / "ground_truth" / "good")) {
        throw FormatError("ground_truth/good exists: normal images must not carry anomaly masks");
    }
    std::vector<DatasetItem<T>> items;
    for (const auto& f : detail::sorted_images(train / "good")) {
        items.push_back({"good/" + f.stem().string(), "good", detail::load_image<T>(f, channels), {}});
    }
    if (items.empty()) throw IoError("train/good under " + root.string() + " has no images");
    const auto shape = items.front().image.shape();
    for (const auto& it : items) {
        if (it.image.shape() != shape) throw ShapeError("train image " + it.id + " differs in size from the first");
    }
    return items;
}

/// Test split: test/good without masks, test/<kind> with ground_truth/<kind>/<stem>_mask.pgm.
template <typename T>
std::vector<DatasetItem<T>> load_test(const fs::path& root, std::size_t channels) {
    const fs::path test = root / "test";
    if (!fs::is_directory(test)) throw IoError("no test directory under " + root.string());
    std::vector<DatasetItem<T>> items;
    for (const auto& kind : detail::sorted_subdirs(test)) {
        for (const auto& f : detail::sorted_images(test / kind)) {
            DatasetItem<T> it{kind + "/" + f.stem().string(), kind, detail::load_image<T>(f, channels), {}};
            const auto mask_path = root / "ground_truth" / kind / (f.stem().string() + "_mask.pgm");
            const std::size_t h = it.image.h(), w = it.image.w();
            if (kind == "good") {
                it.mask.assign(h * w, 0);
            } else if (fs::exists(mask_path)) {
                it.mask = detail::load_mask(mask_path, h, w);
            } else {
                throw IoError("missing ground-truth mask " + mask_path.string());
            }
            items.push_back(std::move(it));
        }
    }
    if (items.empty()) throw IoError("test split under " + root.string() + " has no images");
    return items;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentOptions {
    double flip_probability = 0.5;
    double rotate_probability = 0.5;
    bool rotations = true;
};

template <typename T>
Tensor4<T> flip_horizontal(const Tensor4<T>& x) {
    Tensor4<T> y(x.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t i = 0; i < x.h(); ++i)
                for (std::size_t j = 0; j < x.w(); ++j) y(n, c, i, j) = x(n, c, i, x.w() - 1 - j);
    return y;
}

template <typename T>
Tensor4<T> flip_vertical(const Tensor4<T>& x) {
    Tensor4<T> y(x.shape());
    for (std::size_t n = 0; n < x.n(); ++n)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t i = 0; i < x.h(); ++i)
                for (std::size_t j = 0; j < x.w(); ++j) y(n, c, i, j) = x(n, c, x.h() - 1 - i, j);
    return y;
}

/// Counter-clockwise rotation by k * 90 degrees; square planes only.
template <typename T>
Tensor4<T> rotate90(const Tensor4<T>& x, int k) {
    if (x.h() != x.w()) throw ShapeError("rotate90 requires square images, got " + x.shape().str());
    k = ((k % 4) + 4) % 4;
    Tensor4<T> y = x;
    const std::size_t s = x.h();
    for (int r = 0; r < k; ++r) {
        Tensor4<T> t(x.shape());
        for (std::size_t n = 0; n < x.n(); ++n)
            for (std::size_t c = 0; c < x.c(); ++c)
                for (std::size_t i = 0; i < s; ++i)
                    for (std::size_t j = 0; j < s; ++j) t(n, c, s - 1 - j, i) = y(n, c, i, j);
        y = std::move(t);
    }
    return y;
}

/// Random flips (each with its probability) then, with rotate_probability, a
/// rotation by k * 90 degrees with k uniform in {0, 1, 2, 3}. Exact permutations of pixels.
template <typename T>
Tensor4<T> augment(const Tensor4<T>& x, std::mt19937_64& rng, const AugmentOptions& opt = {}) {
    if (opt.rotations && x.h() != x.w()) {
        throw ShapeError("augmentation with rotations needs square images, got " + x.shape().str());
    }
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    Tensor4<T> y = x;
    if (u01(rng) < opt.flip_probability) y = flip_horizontal(y);
    if (u01(rng) < opt.flip_probability) y = flip_vertical(y);
    if (opt.rotations && u01(rng) < opt.rotate_probability) {
        std::uniform_int_distribution<int> k(0, 3);
        y = rotate90(y, k(rng));
    }
    return y;
}

}  // namespace pyramidflow
