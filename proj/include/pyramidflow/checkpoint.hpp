#pragma once

// PYFL1 tensor container:
//   magic "PYFL1\0" | u16 version | u32 count |
//   count x { u16 name_len, name bytes, u8 dtype (0 f32, 1 f64), u8 ndim, u32 dims[ndim], payload } |
//   u32 crc32 of everything before it.
// All integers and payloads are little-endian.

#include <zlib.h>

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

#include "pyramidflow/errors.hpp"
#include "pyramidflow/io.hpp"
#include "pyramidflow/model.hpp"
#include "pyramidflow/tensor.hpp"
#include "pyramidflow/training.hpp"

namespace pyramidflow::checkpoint {

inline constexpr char kMagic[6] = {'P', 'Y', 'F', 'L', '1', '\0'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

/// One named tensor with its payload kept as little-endian bytes.
struct Entry {
    std::string name;
    DType dtype = DType::F64;
    std::vector<std::uint32_t> dims;
    std::vector<unsigned char> payload;

    std::size_t element_count() const {
        std::size_t n = 1;
        for (auto d : dims) n *= d;
        return n;
    }
};

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<unsigned char>(v >> (8 * b)));
}

class Cursor {
public:
    Cursor(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(static_cast<U>(data_[pos_ + b]) << (8 * b));
        pos_ += sizeof(U);
        return v;
    }

    const unsigned char* take(std::size_t n, const char* what) {
        need(n, what);
        const unsigned char* p = data_ + pos_;
        pos_ += n;
        return p;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (size_ - pos_ < n) throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
Entry make_entry(std::string name, std::span<const T> values, std::vector<std::uint32_t> dims) {
    Entry e{std::move(name), dtype_of<T>(), std::move(dims), {}};
    if (e.element_count() != values.size()) throw ShapeError("checkpoint entry " + e.name + ": dims/value mismatch");
    e.payload.reserve(values.size() * sizeof(T));
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : values) detail::put_le(e.payload, std::bit_cast<Bits>(v));
    return e;
}

template <typename T>
Entry make_entry(std::string name, const Tensor4<T>& t) {
    const auto& s = t.shape();
    return make_entry<T>(std::move(name), t.values(),
                         {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)});
}

template <typename T>
std::vector<T> entry_values(const Entry& e) {
    if (e.dtype != dtype_of<T>()) {
        throw FormatError("checkpoint entry " + e.name + " has dtype " + (e.dtype == DType::F32 ? "f32" : "f64") +
                          ", expected " + (dtype_of<T>() == DType::F32 ? "f32" : "f64"));
    }
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    detail::Cursor cur(e.payload.data(), e.payload.size());
    std::vector<T> out(e.element_count());
    for (auto& v : out) v = std::bit_cast<T>(cur.get<Bits>("payload"));
    return out;
}

template <typename T>
Tensor4<T> entry_tensor(const Entry& e) {
    if (e.dims.size() != 4) throw FormatError("checkpoint entry " + e.name + " is not a 4-d tensor");
    Tensor4<T> t({e.dims[0], e.dims[1], e.dims[2], e.dims[3]});
    const auto v = entry_values<T>(e);
    std::copy(v.begin(), v.end(), t.data());
    return t;
}

inline std::vector<unsigned char> encode(const std::vector<Entry>& entries) {
    std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
    detail::put_le<std::uint16_t>(out, kVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.empty() || e.name.size() > 0xffff) throw FormatError("checkpoint: invalid tensor name length");
        if (e.dims.size() > 0xff) throw FormatError("checkpoint: too many dims for " + e.name);
        if (e.payload.size() != e.element_count() * dtype_size(e.dtype)) {
            throw FormatError("checkpoint: payload size mismatch for " + e.name);
        }
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(static_cast<unsigned char>(e.dtype));
        out.push_back(static_cast<unsigned char>(e.dims.size()));
        for (auto d : e.dims) detail::put_le<std::uint32_t>(out, d);
        out.insert(out.end(), e.payload.begin(), e.payload.end());
    }
    const auto crc = ::crc32(0L, out.data(), static_cast<uInt>(out.size()));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(crc));
    return out;
}

inline std::vector<Entry> decode(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < sizeof kMagic + 2 + 4 + 4 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw FormatError("checkpoint: bad magic");
    }
    const std::size_t body = bytes.size() - 4;
    detail::Cursor tail(bytes.data() + body, 4);
    const auto stored = tail.get<std::uint32_t>("crc");
    const auto actual = static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(body)));
    if (stored != actual) throw FormatError("checkpoint: CRC mismatch (file corrupted)");

    detail::Cursor cur(bytes.data(), body);
    cur.take(sizeof kMagic, "magic");
    const auto version = cur.get<std::uint16_t>("version");
    if (version != kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kVersion) + ")");
    }
    const auto count = cur.get<std::uint32_t>("tensor count");
    std::vector<Entry> entries;
    std::set<std::string> names;
    for (std::uint32_t k = 0; k < count; ++k) {
        Entry e;
        const auto len = cur.get<std::uint16_t>("name length");
        const unsigned char* name = cur.take(len, "name");
        e.name.assign(reinterpret_cast<const char*>(name), len);
        const auto dtype = cur.get<std::uint8_t>("dtype");
        if (dtype > 1) throw FormatError("checkpoint: unknown dtype code for " + e.name);
        e.dtype = static_cast<DType>(dtype);
        const auto ndim = cur.get<std::uint8_t>("ndim");
        for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(cur.get<std::uint32_t>("dims"));
        const std::size_t n = e.element_count() * dtype_size(e.dtype);
        const unsigned char* p = cur.take(n, "payload");
        e.payload.assign(p, p + n);
        if (!names.insert(e.name).second) throw FormatError("checkpoint: duplicate tensor name " + e.name);
        entries.push_back(std::move(e));
    }
    if (cur.pos() != body) throw FormatError("checkpoint: trailing bytes before CRC");
    return entries;
}

inline void write(const std::filesystem::path& path, const std::vector<Entry>& entries) {
    io::write_file_atomic(path, encode(entries));
}

inline std::vector<Entry> read(const std::filesystem::path& path) {
    try {
        return decode(io::read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Model, optimizer and template (de)serialization

inline int vn_code(VnAxis a) { return static_cast<int>(a); }

inline VnAxis vn_from_code(double code) {
    if (code == 0) return VnAxis::Channel;
    if (code == 1) return VnAxis::Spatial;
    if (code == 2) return VnAxis::None;
    throw FormatError("checkpoint: invalid vn_axis code");
}

inline Entry config_entry(const ModelConfig& c) {
    const std::vector<double> v{static_cast<double>(c.levels), static_cast<double>(c.depth),
                                static_cast<double>(c.channels), static_cast<double>(c.in_channels),
                                static_cast<double>(c.height), static_cast<double>(c.width),
                                static_cast<double>(vn_code(c.vn_axis)), static_cast<double>(c.seed)};
    return make_entry<double>("meta.config", v, {static_cast<std::uint32_t>(v.size())});
}

inline ModelConfig config_from_entry(const Entry& e) {
    const auto v = entry_values<double>(e);
    if (v.size() != 8) throw FormatError("checkpoint: meta.config must hold 8 values");
    ModelConfig c;
    c.levels = static_cast<std::size_t>(v[0]);
    c.depth = static_cast<std::size_t>(v[1]);
    c.channels = static_cast<std::size_t>(v[2]);
    c.in_channels = static_cast<std::size_t>(v[3]);
    c.height = static_cast<std::size_t>(v[4]);
    c.width = static_cast<std::size_t>(v[5]);
    c.vn_axis = vn_from_code(v[6]);
    c.seed = static_cast<std::uint64_t>(v[7]);
    try {
        c.validate();
    } catch (const ConfigError& err) {
        throw FormatError(std::string("checkpoint: invalid stored config: ") + err.what());
    }
    return c;
}

inline const Entry& find_entry(const std::vector<Entry>& entries, const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return e;
    throw FormatError("checkpoint: missing tensor " + name);
}

/// Precision the model tensors were stored in (dtype of "W").
inline DType stored_precision(const std::vector<Entry>& entries) { return find_entry(entries, "W").dtype; }

template <typename T>
std::vector<Entry> model_entries(PyramidFlowModel<T>& model, const AdamOptimizer<T>* optimizer = nullptr) {
    std::vector<Entry> out{config_entry(model.config())};
    model.for_each_parameter([&](const std::string& name, Tensor4<T>& t) { out.push_back(make_entry(name, t)); });
    for (auto& b : model.blocks()) out.push_back(make_entry(b.name() + "invconv.P", b.invconv().permutation_matrix()));
    model.for_each_buffer([&](const std::string& name, Tensor4<T>& t) { out.push_back(make_entry(name, t)); });
    if (optimizer) {
        const std::vector<double> step{static_cast<double>(optimizer->step_count())};
        out.push_back(make_entry<double>("adam.step", step, {1}));
        for (const auto& [name, mom] : optimizer->moments()) {
            out.push_back(make_entry("adam.m." + name, mom.m));
            out.push_back(make_entry("adam.v." + name, mom.v));
        }
    }
    return out;
}

template <typename T>
void save_model(const std::filesystem::path& path, PyramidFlowModel<T>& model,
                const AdamOptimizer<T>* optimizer = nullptr) {
    write(path, model_entries(model, optimizer));
}

/// Rebuilds the model from entries. Every entry must be consumed (strict):
/// unknown names are rejected, as are missing parameters. Optimizer entries
/// are accepted only when `optimizer` is given.
template <typename T>
PyramidFlowModel<T> model_from_entries(const std::vector<Entry>& entries, AdamOptimizer<T>* optimizer = nullptr) {
    const ModelConfig config = config_from_entry(find_entry(entries, "meta.config"));
    auto model = PyramidFlowModel<T>::build(config);
    std::map<std::string, const Entry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    std::set<std::string> used{"meta.config"};

    auto assign = [&](const std::string& name, Tensor4<T>& dst) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + name);
        Tensor4<T> t = entry_tensor<T>(*it->second);
        if (t.shape() != dst.shape()) {
            throw FormatError("checkpoint: tensor " + name + " has shape " + t.shape().str() + ", model expects " +
                              dst.shape().str());
        }
        dst = std::move(t);
        used.insert(name);
    };
    model.for_each_parameter(assign);
    model.for_each_buffer(assign);
    for (auto& b : model.blocks()) {
        Tensor4<T> p = b.invconv().permutation_matrix();
        assign(b.name() + "invconv.P", p);
        b.invconv().set_permutation_matrix(p);
    }
    if (optimizer) {
        auto step = by_name.find("adam.step");
        if (step != by_name.end()) {
            const auto v = entry_values<double>(*step->second);
            if (v.size() != 1) throw FormatError("checkpoint: adam.step must be scalar");
            optimizer->set_step_count(static_cast<std::size_t>(v[0]));
            used.insert("adam.step");
            model.for_each_parameter([&](const std::string& name, Tensor4<T>& param) {
                const bool has_m = by_name.count("adam.m." + name) != 0;
                const bool has_v = by_name.count("adam.v." + name) != 0;
                if (!has_m && !has_v) return;
                typename AdamOptimizer<T>::Moments mom{Tensor4<T>(param.shape()), Tensor4<T>(param.shape())};
                assign("adam.m." + name, mom.m);
                assign("adam.v." + name, mom.v);
                optimizer->moments()[name] = std::move(mom);
            });
        }
    }
    for (const auto& e : entries) {
        if (!used.count(e.name)) throw FormatError("checkpoint: unknown tensor name " + e.name);
    }
    return model;
}

template <typename T>
PyramidFlowModel<T> load_model(const std::filesystem::path& path, AdamOptimizer<T>* optimizer = nullptr) {
    const auto entries = read(path);
    try {
        return model_from_entries<T>(entries, optimizer);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

template <typename T>
void save_template(const std::filesystem::path& path, const ModelConfig& config, const LatentTemplate<T>& tmpl) {
    std::vector<Entry> out{config_entry(config)};
    const std::vector<double> count{static_cast<double>(tmpl.sample_count)};
    out.push_back(make_entry<double>("template.count", count, {1}));
    for (std::size_t d = 0; d < tmpl.means.size(); ++d) {
        out.push_back(make_entry("template.level" + std::to_string(d), tmpl.means[d]));
    }
    write(path, out);
}

/// Loads a template and checks it was fitted for a model with `config`'s layout.
template <typename T>
LatentTemplate<T> load_template(const std::filesystem::path& path, const ModelConfig& config) {
    const auto entries = read(path);
    const ModelConfig stored = config_from_entry(find_entry(entries, "meta.config"));
    if (stored.levels != config.levels || stored.channels != config.channels || stored.height != config.height ||
        stored.width != config.width) {
        throw FormatError(path.string() + ": template was fitted for a different model layout");
    }
    LatentTemplate<T> tmpl;
    std::vector<Tensor4<T>> levels;
    for (std::size_t d = 0; d < config.levels; ++d) {
        levels.push_back(entry_tensor<T>(find_entry(entries, "template.level" + std::to_string(d))));
    }
    const auto count = entry_values<double>(find_entry(entries, "template.count"));
    if (count.size() != 1 || count[0] < 1) throw FormatError(path.string() + ": invalid template.count");
    if (entries.size() != config.levels + 2) throw FormatError(path.string() + ": unexpected tensors in template");
    tmpl.means = PyramidStack<T>(std::move(levels));
    tmpl.sample_count = static_cast<std::size_t>(count[0]);
    return tmpl;
}

}  // namespace pyramidflow::checkpoint
