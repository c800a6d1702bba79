#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/tensor.hpp"

namespace cagan {

// Binary portable pixmap (P6, 8-bit). Values map [-1,1] <-> [0,255] with
// round-to-nearest, so a write/read round trip is idempotent.
inline void write_ppm(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3)
        throw std::invalid_argument("write_ppm: want [3,H,W]");
    const std::size_t h = img.dim(1), w = img.dim(2);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("write_ppm: cannot open " + path);
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = (img.at((c * h + y) * w + x) + 1.0) * 0.5 * 255.0;
                row[x * 3 + c] = static_cast<unsigned char>(std::clamp(std::lround(v), 0l, 255l));
            }
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw std::runtime_error("write_ppm: write failed for " + path);
}

inline Tensor read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: not a P6 file: " + path);
    auto next_int = [&is, &path]() {
        // skip whitespace and '#' comments
        for (;;) {
            int ch = is.peek();
            if (ch == '#') {
                std::string line;
                std::getline(is, line);
            } else if (std::isspace(ch)) {
                is.get();
            } else {
                break;
            }
        }
        long v = 0;
        is >> v;
        if (!is) throw std::runtime_error("read_ppm: malformed header in " + path);
        return v;
    };
    const long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error("read_ppm: unsupported format");
    is.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    Tensor img = Tensor::zeros({3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    for (std::size_t y = 0; y < static_cast<std::size_t>(h); ++y)
        for (std::size_t x = 0; x < static_cast<std::size_t>(w); ++x)
            for (std::size_t c = 0; c < 3; ++c)
                img.data()[(c * h + y) * w + x] =
                    static_cast<double>(raw[(y * w + x) * 3 + c]) / 255.0 * 2.0 - 1.0;
    return img;
}

// Tiles same-size [3,H,W] images into a rows x cols grid with a 2px gutter.
inline Tensor tile_images(const std::vector<Tensor>& imgs, std::size_t cols) {
    if (imgs.empty()) throw std::invalid_argument("tile_images: empty list");
    const std::size_t h = imgs[0].dim(1), w = imgs[0].dim(2), gap = 2;
    const std::size_t rows = (imgs.size() + cols - 1) / cols;
    const std::size_t oh = rows * h + (rows + 1) * gap;
    const std::size_t ow = cols * w + (cols + 1) * gap;
    Tensor out = Tensor::full({3, oh, ow}, -1.0);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        if (imgs[i].dim(1) != h || imgs[i].dim(2) != w)
            throw std::invalid_argument("tile_images: mixed sizes");
        const std::size_t r = i / cols, c = i % cols;
        const std::size_t y0 = gap + r * (h + gap), x0 = gap + c * (w + gap);
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                    out.data()[(ch * oh + y0 + y) * ow + x0 + x] = imgs[i].at((ch * h + y) * w + x);
    }
    return out;
}

// Minimal line chart for the metric curves: one polyline per series on a
// light canvas, auto-scaled; companion to the CSV, not a replacement.
inline void write_line_chart_ppm(const std::string& path,
                                 const std::vector<std::vector<double>>& series,
                                 std::size_t width = 480, std::size_t height = 320) {
    Tensor canvas = Tensor::full({3, height, width}, 1.0);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t longest = 0;
    for (const auto& s : series) {
        longest = std::max(longest, s.size());
        for (double v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (longest < 2 || !std::isfinite(lo) || !std::isfinite(hi)) {
        write_ppm(path, canvas);
        return;
    }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double colors[4][3] = {{-1, -1, 0.9}, {0.9, -1, -1}, {-1, 0.7, -1}, {0.6, 0.2, -0.8}};
    auto put = [&](std::size_t x, std::size_t y, const double* col) {
        for (std::size_t c = 0; c < 3; ++c) canvas.data()[(c * height + y) * width + x] = col[c];
    };
    const std::size_t margin = 8;
    auto to_px = [&](std::size_t i, double v, std::size_t len) {
        const double fx = static_cast<double>(i) / static_cast<double>(len - 1);
        const double fy = (v - lo) / (hi - lo);
        const std::size_t x = margin + static_cast<std::size_t>(fx * static_cast<double>(width - 2 * margin - 1));
        const std::size_t y = height - 1 - margin -
                              static_cast<std::size_t>(fy * static_cast<double>(height - 2 * margin - 1));
        return std::pair<std::size_t, std::size_t>(x, y);
    };
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& data = series[s];
        if (data.size() < 2) continue;
        const double* col = colors[s % 4];
        for (std::size_t i = 0; i + 1 < data.size(); ++i) {
            auto [x0, y0] = to_px(i, data[i], data.size());
            auto [x1, y1] = to_px(i + 1, data[i + 1], data.size());
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(x1) - static_cast<std::ptrdiff_t>(x0);
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(y1) - static_cast<std::ptrdiff_t>(y0);
            const std::size_t steps = static_cast<std::size_t>(std::max<std::ptrdiff_t>(
                1, std::max(std::abs(dx), std::abs(dy))));
            for (std::size_t t = 0; t <= steps; ++t) {
                const double f = static_cast<double>(t) / static_cast<double>(steps);
                put(x0 + static_cast<std::size_t>(std::lround(f * static_cast<double>(dx))),
                    y0 + static_cast<std::size_t>(std::lround(f * static_cast<double>(dy))), col);
            }
        }
    }
    write_ppm(path, canvas);
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::trunc | std::ios::binary);
    if (!os) throw std::runtime_error("write_text_file: cannot open " + path);
    os << content;
    if (!os) throw std::runtime_error("write_text_file: write failed for " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_text_file: cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace cagan
