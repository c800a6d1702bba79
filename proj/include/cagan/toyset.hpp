#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cagan/io.hpp"
#include "cagan/rng.hpp"
#include "cagan/tensor.hpp"
#include "cagan/text.hpp"

namespace cagan {

// ---------------------------------------------------------------------------
// scene specification

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle, Bar };
enum class ColorKind : std::uint8_t { Red, Green, Blue, Yellow, White };
enum class SizeKind : std::uint8_t { Small, Large };
enum class PositionKind : std::uint8_t { Left, Right, Top, Bottom, Center };
enum class BackgroundKind : std::uint8_t { Dark, Light };

inline constexpr std::size_t kShapeCount = 4;
inline constexpr std::size_t kColorCount = 5;
inline constexpr std::size_t kSizeCount = 2;
inline constexpr std::size_t kPositionCount = 5;
inline constexpr std::size_t kBackgroundCount = 2;
inline constexpr std::size_t kClassCount = kShapeCount * kColorCount;  // (shape, color)

inline const char* to_string(ShapeKind s) {
    static const char* names[] = {"circle", "square", "triangle", "bar"};
    return names[static_cast<std::size_t>(s)];
}
inline const char* to_string(ColorKind c) {
    static const char* names[] = {"red", "green", "blue", "yellow", "white"};
    return names[static_cast<std::size_t>(c)];
}
inline const char* to_string(SizeKind s) {
    static const char* names[] = {"small", "large"};
    return names[static_cast<std::size_t>(s)];
}
inline const char* to_string(PositionKind p) {
    static const char* names[] = {"left", "right", "top", "bottom", "center"};
    return names[static_cast<std::size_t>(p)];
}
inline const char* to_string(BackgroundKind b) {
    static const char* names[] = {"dark", "light"};
    return names[static_cast<std::size_t>(b)];
}

struct SceneSpec {
    ShapeKind shape = ShapeKind::Circle;
    ColorKind color = ColorKind::Red;
    SizeKind size = SizeKind::Large;
    PositionKind position = PositionKind::Center;
    BackgroundKind background = BackgroundKind::Dark;

    // class label = (shape, color) pair
    std::size_t class_label() const {
        return static_cast<std::size_t>(shape) * kColorCount + static_cast<std::size_t>(color);
    }

    std::uint64_t digest() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::uint8_t v : {static_cast<std::uint8_t>(shape), static_cast<std::uint8_t>(color),
                               static_cast<std::uint8_t>(size), static_cast<std::uint8_t>(position),
                               static_cast<std::uint8_t>(background)}) {
            h ^= v;
            h *= 0x100000001b3ull;
        }
        return h;
    }

    bool operator==(const SceneSpec&) const = default;
};

inline std::vector<SceneSpec> all_scene_specs() {
    std::vector<SceneSpec> out;
    out.reserve(kShapeCount * kColorCount * kSizeCount * kPositionCount * kBackgroundCount);
    for (std::size_t s = 0; s < kShapeCount; ++s)
        for (std::size_t c = 0; c < kColorCount; ++c)
            for (std::size_t z = 0; z < kSizeCount; ++z)
                for (std::size_t p = 0; p < kPositionCount; ++p)
                    for (std::size_t b = 0; b < kBackgroundCount; ++b)
                        out.push_back({static_cast<ShapeKind>(s), static_cast<ColorKind>(c),
                                       static_cast<SizeKind>(z), static_cast<PositionKind>(p),
                                       static_cast<BackgroundKind>(b)});
    return out;
}

inline SceneSpec sample_scene_spec(Rng& rng) {
    SceneSpec s;
    s.shape = static_cast<ShapeKind>(rng.below(kShapeCount));
    s.color = static_cast<ColorKind>(rng.below(kColorCount));
    s.size = static_cast<SizeKind>(rng.below(kSizeCount));
    s.position = static_cast<PositionKind>(rng.below(kPositionCount));
    s.background = static_cast<BackgroundKind>(rng.below(kBackgroundCount));
    return s;
}

// ---------------------------------------------------------------------------
// rendering

namespace toy_detail {

struct Rgb {
    double r, g, b;
};

inline Rgb color_value(ColorKind c) {
    switch (c) {
        case ColorKind::Red: return {0.85, 0.10, 0.10};
        case ColorKind::Green: return {0.10, 0.80, 0.12};
        case ColorKind::Blue: return {0.12, 0.15, 0.85};
        case ColorKind::Yellow: return {0.88, 0.82, 0.10};
        case ColorKind::White: return {0.95, 0.95, 0.95};
    }
    throw std::invalid_argument("unknown color");
}

inline Rgb background_value(BackgroundKind b) {
    switch (b) {
        case BackgroundKind::Dark: return {0.10, 0.10, 0.10};
        case BackgroundKind::Light: return {0.65, 0.65, 0.65};
    }
    throw std::invalid_argument("unknown background");
}

inline void center_of(PositionKind p, double& cx, double& cy) {
    switch (p) {
        case PositionKind::Left: cx = 0.28; cy = 0.50; return;
        case PositionKind::Right: cx = 0.72; cy = 0.50; return;
        case PositionKind::Top: cx = 0.50; cy = 0.28; return;
        case PositionKind::Bottom: cx = 0.50; cy = 0.72; return;
        case PositionKind::Center: cx = 0.50; cy = 0.50; return;
    }
    throw std::invalid_argument("unknown position");
}

// membership test in unit coordinates
inline bool inside_shape(const SceneSpec& spec, double x, double y, double cx, double cy,
                         double radius) {
    const double dx = x - cx, dy = y - cy;
    switch (spec.shape) {
        case ShapeKind::Circle:
            return dx * dx + dy * dy <= radius * radius;
        case ShapeKind::Square:
            return std::abs(dx) <= radius * 0.9 && std::abs(dy) <= radius * 0.9;
        case ShapeKind::Triangle: {
            // upward triangle: apex (cx, cy - r), base y = cy + 0.75 r
            const double top = -radius, bottom = 0.75 * radius;
            if (dy < top || dy > bottom) return false;
            const double half_width = 0.95 * radius * (dy - top) / (bottom - top);
            return std::abs(dx) <= half_width;
        }
        case ShapeKind::Bar:
            return std::abs(dx) <= radius * 1.15 && std::abs(dy) <= radius * 0.38;
    }
    throw std::invalid_argument("unknown shape");
}

}  // namespace toy_detail

// Anti-aliased rasterization (4x4 supersampling per pixel) of the scene at
// the given square resolution; values in [-1, 1].
inline Tensor render(const SceneSpec& spec, std::size_t resolution) {
    if (resolution < 8 || (resolution & (resolution - 1)) != 0)
        throw std::invalid_argument("render: resolution must be a power of two >= 8");
    const toy_detail::Rgb fg = toy_detail::color_value(spec.color);
    const toy_detail::Rgb bg = toy_detail::background_value(spec.background);
    double cx = 0.0, cy = 0.0;
    toy_detail::center_of(spec.position, cx, cy);
    const double radius = spec.size == SizeKind::Large ? 0.25 : 0.14;

    Tensor img = Tensor::zeros({3, resolution, resolution});
    const double inv_res = 1.0 / static_cast<double>(resolution);
    constexpr int ss = 4;
    const double sub = 1.0 / (2.0 * ss);
    for (std::size_t py = 0; py < resolution; ++py) {
        for (std::size_t px = 0; px < resolution; ++px) {
            int hits = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx) {
                    const double x = (static_cast<double>(px) + (2 * sx + 1) * sub) * inv_res;
                    const double y = (static_cast<double>(py) + (2 * sy + 1) * sub) * inv_res;
                    if (toy_detail::inside_shape(spec, x, y, cx, cy, radius)) ++hits;
                }
            const double a = static_cast<double>(hits) / (ss * ss);
            const double r = bg.r + a * (fg.r - bg.r);
            const double g = bg.g + a * (fg.g - bg.g);
            const double b = bg.b + a * (fg.b - bg.b);
            img.data()[(0 * resolution + py) * resolution + px] = r * 2.0 - 1.0;
            img.data()[(1 * resolution + py) * resolution + px] = g * 2.0 - 1.0;
            img.data()[(2 * resolution + py) * resolution + px] = b * 2.0 - 1.0;
        }
    }
    return img;
}

// Boolean shape mask at the same supersampling threshold (pixel majority).
inline std::vector<std::uint8_t> render_mask(const SceneSpec& spec, std::size_t resolution) {
    double cx = 0.0, cy = 0.0;
    toy_detail::center_of(spec.position, cx, cy);
    const double radius = spec.size == SizeKind::Large ? 0.25 : 0.14;
    std::vector<std::uint8_t> mask(resolution * resolution, 0);
    const double inv_res = 1.0 / static_cast<double>(resolution);
    for (std::size_t py = 0; py < resolution; ++py)
        for (std::size_t px = 0; px < resolution; ++px) {
            const double x = (static_cast<double>(px) + 0.5) * inv_res;
            const double y = (static_cast<double>(py) + 0.5) * inv_res;
            mask[py * resolution + px] =
                toy_detail::inside_shape(spec, x, y, cx, cy, radius) ? 1 : 0;
        }
    return mask;
}

// ---------------------------------------------------------------------------
// captions

// Deterministic template of the scene fields; one of two paraphrases chosen
// by a hash of the spec so the encoder sees non-trivial variation.
inline std::string caption(const SceneSpec& spec) {
    std::ostringstream os;
    if (spec.digest() % 2 == 0) {
        os << "a " << to_string(spec.size) << ' ' << to_string(spec.color) << ' '
           << to_string(spec.shape) << " on the " << to_string(spec.position) << " of a "
           << to_string(spec.background) << " background";
    } else {
        os << "the " << to_string(spec.position) << " of a " << to_string(spec.background)
           << " background shows a " << to_string(spec.size) << ' ' << to_string(spec.color) << ' '
           << to_string(spec.shape);
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// dominant-color oracle

// Classifies the dominant color over a pixel mask by which channel means sit
// high: {r} -> red, {g} -> green, {b} -> blue, {r,g} -> yellow, all -> white.
inline ColorKind dominant_color_in_mask(const Tensor& img, const std::vector<std::uint8_t>& mask) {
    if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("want [3,H,W]");
    const std::size_t hw = img.dim(1) * img.dim(2);
    if (mask.size() != hw) throw std::invalid_argument("mask size mismatch");
    double m[3] = {0, 0, 0};
    std::size_t count = 0;
    for (std::size_t i = 0; i < hw; ++i) {
        if (!mask[i]) continue;
        ++count;
        for (std::size_t c = 0; c < 3; ++c) m[c] += (img.at(c * hw + i) + 1.0) * 0.5;
    }
    if (count == 0) throw std::invalid_argument("dominant_color_in_mask: empty mask");
    for (double& v : m) v /= static_cast<double>(count);
    const double hi = std::max({m[0], m[1], m[2]});
    const bool r = m[0] > hi - 0.25, g = m[1] > hi - 0.25, b = m[2] > hi - 0.25;
    if (r && g && b) return ColorKind::White;
    if (r && g) return ColorKind::Yellow;
    if (g) return ColorKind::Green;
    if (b) return ColorKind::Blue;
    return ColorKind::Red;
}

// Mask-free variant for generated images: foreground = pixels far from the
// per-channel median (the background dominates the median).
inline ColorKind classify_dominant_color(const Tensor& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw std::invalid_argument("want [3,H,W]");
    const std::size_t hw = img.dim(1) * img.dim(2);
    double med[3];
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<double> vals(img.data() + c * hw, img.data() + (c + 1) * hw);
        std::nth_element(vals.begin(), vals.begin() + vals.size() / 2, vals.end());
        med[c] = vals[vals.size() / 2];
    }
    std::vector<double> dist(hw);
    for (std::size_t i = 0; i < hw; ++i) {
        double d = 0.0;
        for (std::size_t c = 0; c < 3; ++c) d += std::abs(img.at(c * hw + i) - med[c]);
        dist[i] = d;
    }
    // keep the most contrasting eighth of the pixels
    std::vector<double> sorted = dist;
    std::nth_element(sorted.begin(), sorted.begin() + (hw - hw / 8), sorted.end());
    const double thresh = std::max(sorted[hw - hw / 8], 0.15);
    std::vector<std::uint8_t> mask(hw, 0);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < hw; ++i)
        if (dist[i] >= thresh) {
            mask[i] = 1;
            ++kept;
        }
    if (kept == 0) mask.assign(hw, 1);
    return dominant_color_in_mask(img, mask);
}

// ---------------------------------------------------------------------------
// dataset build / load

struct ToyDataset {
    std::vector<Tensor> images;  // [3, H, W] each
    std::vector<std::string> captions;
    std::vector<SceneSpec> specs;
    std::size_t resolution = 64;
};

namespace toy_detail {

inline std::string index_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06zu.ppm", i);
    return buf;
}

inline void write_split(const std::filesystem::path& dir, const std::vector<SceneSpec>& specs,
                        std::size_t resolution) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream tsv;
    tsv << "index\tcaption\tshape\tcolor\tsize\tposition\tbackground\n";
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const SceneSpec& s = specs[i];
        write_ppm((dir / index_name(i)).string(), render(s, resolution));
        tsv << i << '\t' << caption(s) << '\t' << to_string(s.shape) << '\t' << to_string(s.color)
            << '\t' << to_string(s.size) << '\t' << to_string(s.position) << '\t'
            << to_string(s.background) << '\n';
    }
    write_text_file((dir / "captions.tsv").string(), tsv.str());
}

inline ToyDataset read_split(const std::filesystem::path& dir) {
    ToyDataset ds;
    std::ifstream tsv(dir / "captions.tsv");
    if (!tsv) throw std::runtime_error("dataset: cannot open " + (dir / "captions.tsv").string());
    std::string line;
    std::getline(tsv, line);  // header
    auto field_index = [](const std::string& name) {
        static const std::vector<std::string> names = {"index", "caption", "shape", "color",
                                                       "size", "position", "background"};
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::logic_error("bad field");
    };
    (void)field_index;
    while (std::getline(tsv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, '\t')) cols.push_back(cell);
        if (cols.size() != 7) throw std::runtime_error("dataset: malformed row: " + line);
        const std::size_t idx = std::stoul(cols[0]);
        ds.images.push_back(read_ppm((dir / index_name(idx)).string()));
        ds.captions.push_back(cols[1]);
        SceneSpec s;
        auto match = [](const std::string& v, auto count, auto cast) {
            for (std::size_t i = 0; i < count; ++i)
                if (v == to_string(cast(i))) return cast(i);
            throw std::runtime_error("dataset: unknown field value " + v);
        };
        s.shape = match(cols[2], kShapeCount, [](std::size_t i) { return static_cast<ShapeKind>(i); });
        s.color = match(cols[3], kColorCount, [](std::size_t i) { return static_cast<ColorKind>(i); });
        s.size = match(cols[4], kSizeCount, [](std::size_t i) { return static_cast<SizeKind>(i); });
        s.position =
            match(cols[5], kPositionCount, [](std::size_t i) { return static_cast<PositionKind>(i); });
        s.background = match(cols[6], kBackgroundCount,
                             [](std::size_t i) { return static_cast<BackgroundKind>(i); });
        ds.specs.push_back(s);
    }
    if (!ds.images.empty()) ds.resolution = ds.images[0].dim(1);
    return ds;
}

}  // namespace toy_detail

// Samples specs uniformly and writes train/ and test/ splits plus the shared
// vocabulary. A fixed seed reproduces the directory bit for bit.
inline void build_dataset(const std::string& root, std::size_t n_train, std::size_t n_test,
                          std::uint64_t seed, std::size_t resolution = 64) {
    if (n_train < 1 || n_test < 1) throw std::invalid_argument("build_dataset: need n >= 1");
    namespace fs = std::filesystem;
    Rng rng = Rng(seed).fork(0x70795e7);

    std::vector<SceneSpec> train(n_train), test(n_test);
    for (auto& s : train) s = sample_scene_spec(rng);
    for (auto& s : test) s = sample_scene_spec(rng);

    toy_detail::write_split(fs::path(root) / "train", train, resolution);
    toy_detail::write_split(fs::path(root) / "test", test, resolution);

    Vocabulary vocab;
    for (const auto& s : train)
        for (const auto& w : split_words(caption(s))) vocab.add(w);
    for (const auto& s : test)
        for (const auto& w : split_words(caption(s))) vocab.add(w);
    vocab.save((fs::path(root) / "vocab.txt").string());
}

inline ToyDataset load_dataset_split(const std::string& root, const std::string& split) {
    return toy_detail::read_split(std::filesystem::path(root) / split);
}

inline Vocabulary load_dataset_vocab(const std::string& root) {
    return Vocabulary::load((std::filesystem::path(root) / "vocab.txt").string());
}

}  // namespace cagan
