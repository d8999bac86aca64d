#pragma once

// On-disk tensor container shared by checkpoints, dataset caches and sample
// grids: a directory holding manifest.json plus one little-endian flat binary
// blob per tensor.
//
// manifest.json:
//   {"format": "layersync-tensors", "version": 1,
//    "meta": {...},
//    "tensors": [{"name": "...", "shape": [..], "dtype": "f64"|"f32", "file": "0000.bin"}, ...]}

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "layersync/tensor.hpp"

namespace layersync {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class DType { f32, f64 };

inline std::string dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline DType dtype_from_name(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    throw std::runtime_error("unknown dtype '" + s + "'");
}

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct TensorArchive {
    json meta = json::object();
    std::vector<NamedTensor> tensors;

    const NamedTensor& at(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::out_of_range("archive has no tensor '" + name + "'");
    }
    bool contains(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return true;
        return false;
    }
    template <typename T>
    void add(std::string name, const BasicTensor<T>& t) {
        tensors.push_back({std::move(name), t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    }
    template <typename T>
    BasicTensor<T> get(const std::string& name) const {
        const auto& nt = at(name);
        return BasicTensor<T>(nt.shape, std::vector<T>(nt.values.begin(), nt.values.end()));
    }
};

namespace detail {

template <typename U>
void write_le(std::ofstream& out, U v) {
    auto bits = std::bit_cast<std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>>(v);
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U read_le(const unsigned char* p) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
    return std::bit_cast<U>(bits);
}

}  // namespace detail

// Writes into `dir` (created if needed). The manifest is written last, so a
// directory with a manifest is always complete.
inline void write_archive(const fs::path& dir, const TensorArchive& archive, DType dtype = DType::f64) {
    fs::create_directories(dir);
    json manifest{{"format", "layersync-tensors"}, {"version", 1}, {"meta", archive.meta}, {"tensors", json::array()}};
    for (std::size_t i = 0; i < archive.tensors.size(); ++i) {
        const auto& t = archive.tensors[i];
        std::ostringstream file;
        file << std::setw(4) << std::setfill('0') << i << ".bin";
        std::ofstream out(dir / file.str(), std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / file.str()).string());
        for (double v : t.values) {
            if (dtype == DType::f64)
                detail::write_le<double>(out, v);
            else
                detail::write_le<float>(out, static_cast<float>(v));
        }
        manifest["tensors"].push_back(
            {{"name", t.name}, {"shape", t.shape}, {"dtype", dtype_name(dtype)}, {"file", file.str()}});
    }
    const fs::path tmp = dir / "manifest.json.tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << manifest.dump(2) << '\n';
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, dir / "manifest.json");
}

inline TensorArchive read_archive(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no archive manifest in " + dir.string());
    json manifest = json::parse(in);
    if (manifest.value("format", "") != "layersync-tensors")
        throw std::runtime_error(dir.string() + ": not a layersync tensor archive");
    TensorArchive archive;
    archive.meta = manifest.value("meta", json::object());
    for (const auto& entry : manifest.at("tensors")) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        t.shape = entry.at("shape").get<Shape>();
        const DType dtype = dtype_from_name(entry.at("dtype").get<std::string>());
        const std::size_t width = dtype == DType::f64 ? 8 : 4;
        const fs::path blob = dir / entry.at("file").get<std::string>();
        std::ifstream bin(blob, std::ios::binary);
        if (!bin) throw std::runtime_error("missing blob " + blob.string());
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
        const std::size_t n = numel_of(t.shape);
        if (bytes.size() != n * width)
            throw std::runtime_error(blob.string() + ": expected " + std::to_string(n * width) + " bytes, found " +
                                     std::to_string(bytes.size()));
        t.values.resize(n);
        for (std::size_t i = 0; i < n; ++i)
            t.values[i] = dtype == DType::f64 ? detail::read_le<double>(bytes.data() + 8 * i)
                                              : static_cast<double>(detail::read_le<float>(bytes.data() + 4 * i));
        archive.tensors.push_back(std::move(t));
    }
    return archive;
}

// Tiles (N, C, H, W) samples into a grid and writes binary PGM (C == 1) or PPM (C == 3),
// mapping [lo, hi] linearly to [0, 255].
template <typename T>
void write_image_grid(const fs::path& path, const BasicTensor<T>& samples, int columns = 8, double lo = -2.0,
                      double hi = 2.0) {
    if (samples.dim() != 4) throw ShapeError("write_image_grid: expected (N, C, H, W)");
    const std::size_t n = samples.size(0), c = samples.size(1), h = samples.size(2), w = samples.size(3);
    if (c != 1 && c != 3) throw ShapeError("write_image_grid: need 1 or 3 channels");
    const std::size_t cols = std::min<std::size_t>(static_cast<std::size_t>(std::max(columns, 1)), std::max<std::size_t>(n, 1));
    const std::size_t rows = (n + cols - 1) / cols;
    const std::size_t gw = cols * (w + 1) + 1, gh = rows * (h + 1) + 1;
    std::vector<unsigned char> pixels(gw * gh * c, 0);
    const auto v = samples.data();
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t oy = (k / cols) * (h + 1) + 1, ox = (k % cols) * (w + 1) + 1;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double val = static_cast<double>(v[((k * c + ch) * h + y) * w + x]);
                    const double u = std::clamp((val - lo) / (hi - lo), 0.0, 1.0);
                    pixels[((oy + y) * gw + ox + x) * c + ch] = static_cast<unsigned char>(std::lround(255.0 * u));
                }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << (c == 1 ? "P5" : "P6") << '\n' << gw << ' ' << gh << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

}  // namespace layersync
