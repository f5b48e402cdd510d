#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "caf/hash.hpp"
#include "caf/tensor.hpp"

namespace caf {

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
};

struct Image {
    std::int64_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb; // row-major, 3 bytes per pixel

    Image() = default;
    Image(std::int64_t w, std::int64_t h, Rgb fill = {255, 255, 255}) : width(w), height(h) {
        rgb.resize(static_cast<std::size_t>(w * h * 3));
        for (std::int64_t i = 0; i < w * h; ++i) {
            rgb[static_cast<std::size_t>(3 * i)] = fill.r;
            rgb[static_cast<std::size_t>(3 * i + 1)] = fill.g;
            rgb[static_cast<std::size_t>(3 * i + 2)] = fill.b;
        }
    }

    void set(std::int64_t x, std::int64_t y, Rgb c) {
        if (x < 0 || y < 0 || x >= width || y >= height) return;
        const auto i = static_cast<std::size_t>(3 * (y * width + x));
        rgb[i] = c.r;
        rgb[i + 1] = c.g;
        rgb[i + 2] = c.b;
    }
};

// ---------------------------------------------------------------------------
// PNG encoding (RGB8, zlib stream with stored deflate blocks; no external
// compression dependency, output is bit-deterministic).
// ---------------------------------------------------------------------------

namespace detail {

inline void push_u32be(std::vector<std::uint8_t>& v, std::uint32_t x) {
    v.push_back(static_cast<std::uint8_t>(x >> 24));
    v.push_back(static_cast<std::uint8_t>(x >> 16));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
    v.push_back(static_cast<std::uint8_t>(x));
}

inline void push_chunk(std::vector<std::uint8_t>& out, const char type[4], const std::vector<std::uint8_t>& data) {
    push_u32be(out, static_cast<std::uint32_t>(data.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), data.begin(), data.end());
    push_u32be(out, crc32(out.data() + start, out.size() - start));
}

} // namespace detail

inline std::vector<std::uint8_t> encode_png(const Image& img) {
    // Raw scanlines, filter byte 0 per row.
    std::vector<std::uint8_t> raw;
    raw.reserve(static_cast<std::size_t>(img.height * (img.width * 3 + 1)));
    for (std::int64_t y = 0; y < img.height; ++y) {
        raw.push_back(0);
        const auto* row = img.rgb.data() + y * img.width * 3;
        raw.insert(raw.end(), row, row + img.width * 3);
    }

    // zlib wrapper around stored deflate blocks.
    std::vector<std::uint8_t> z;
    z.push_back(0x78);
    z.push_back(0x01);
    std::size_t off = 0;
    while (off < raw.size() || raw.empty()) {
        const std::size_t len = std::min<std::size_t>(65535, raw.size() - off);
        const bool final = off + len == raw.size();
        z.push_back(final ? 1 : 0);
        z.push_back(static_cast<std::uint8_t>(len & 0xff));
        z.push_back(static_cast<std::uint8_t>(len >> 8));
        z.push_back(static_cast<std::uint8_t>(~len & 0xff));
        z.push_back(static_cast<std::uint8_t>((~len >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + static_cast<std::ptrdiff_t>(off), raw.begin() + static_cast<std::ptrdiff_t>(off + len));
        off += len;
        if (final) break;
    }
    detail::push_u32be(z, adler32(raw.data(), raw.size()));

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    std::vector<std::uint8_t> ihdr;
    detail::push_u32be(ihdr, static_cast<std::uint32_t>(img.width));
    detail::push_u32be(ihdr, static_cast<std::uint32_t>(img.height));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // truecolour
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::push_chunk(out, "IHDR", ihdr);
    detail::push_chunk(out, "IDAT", z);
    detail::push_chunk(out, "IEND", {});
    return out;
}

inline void write_png(const Image& img, const std::filesystem::path& path) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const auto bytes = encode_png(img);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw std::runtime_error("write_png: cannot write " + path.string());
    }
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Tensor <-> Image conversion and CAM colouring
// ---------------------------------------------------------------------------

// One example (C,H,W) float in [0,1] -> RGB image, nearest-upscaled.
template <typename T>
Image tensor_to_image(const Tensor<T>& batch, std::int64_t index, int scale = 1) {
    const std::int64_t c = batch.shape.at(1), h = batch.shape.at(2), w = batch.shape.at(3);
    Image img(w * scale, h * scale);
    for (std::int64_t y = 0; y < h * scale; ++y)
        for (std::int64_t x = 0; x < w * scale; ++x) {
            const std::int64_t sy = y / scale, sx = x / scale;
            auto px = [&](std::int64_t ch) {
                const double v = static_cast<double>(batch.at(index, c == 1 ? 0 : ch, sy, sx));
                return static_cast<std::uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
            };
            img.set(x, y, {px(0), px(1), px(2)});
        }
    return img;
}

// Jet-style colour for a value in [0,1].
inline Rgb heat_color(double v) {
    v = std::min(1.0, std::max(0.0, v));
    auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(std::min(1.0, std::max(0.0, x)) * 255.0)); };
    return {ch(1.5 - std::abs(4.0 * v - 3.0)), ch(1.5 - std::abs(4.0 * v - 2.0)), ch(1.5 - std::abs(4.0 * v - 1.0))};
}

// Blend a normalized heat map (N,H,W in [0,1]) over an image batch.
template <typename T>
Image overlay_to_image(const Tensor<T>& images, const Tensor<T>& heat, std::int64_t index, int scale = 1,
                       double alpha = 0.5) {
    const std::int64_t c = images.shape.at(1), h = images.shape.at(2), w = images.shape.at(3);
    Image img(w * scale, h * scale);
    for (std::int64_t y = 0; y < h * scale; ++y)
        for (std::int64_t x = 0; x < w * scale; ++x) {
            const std::int64_t sy = y / scale, sx = x / scale;
            const Rgb hc = heat_color(static_cast<double>(heat.at(index, 0, sy, sx)));
            auto px = [&](std::int64_t ch, std::uint8_t heat_ch) {
                const double base = static_cast<double>(images.at(index, c == 1 ? 0 : ch, sy, sx));
                const double v = (1.0 - alpha) * base + alpha * static_cast<double>(heat_ch) / 255.0;
                return static_cast<std::uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
            };
            img.set(x, y, {px(0, hc.r), px(1, hc.g), px(2, hc.b)});
        }
    return img;
}

// Tile images into a rows x cols grid with padding.
inline Image tile_grid(const std::vector<std::vector<Image>>& rows, int pad = 2) {
    std::int64_t cell_w = 0, cell_h = 0;
    std::size_t cols = 0;
    for (const auto& r : rows) {
        cols = std::max(cols, r.size());
        for (const auto& im : r) {
            cell_w = std::max(cell_w, im.width);
            cell_h = std::max(cell_h, im.height);
        }
    }
    Image out(static_cast<std::int64_t>(cols) * (cell_w + pad) + pad,
              static_cast<std::int64_t>(rows.size()) * (cell_h + pad) + pad, {32, 32, 32});
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t cidx = 0; cidx < rows[r].size(); ++cidx) {
            const Image& im = rows[r][cidx];
            const std::int64_t ox = static_cast<std::int64_t>(cidx) * (cell_w + pad) + pad;
            const std::int64_t oy = static_cast<std::int64_t>(r) * (cell_h + pad) + pad;
            for (std::int64_t y = 0; y < im.height; ++y)
                for (std::int64_t x = 0; x < im.width; ++x) {
                    const auto i = static_cast<std::size_t>(3 * (y * im.width + x));
                    out.set(ox + x, oy + y, {im.rgb[i], im.rgb[i + 1], im.rgb[i + 2]});
                }
        }
    return out;
}

// ---------------------------------------------------------------------------
// Minimal 5x7 font and line plots
// ---------------------------------------------------------------------------

namespace detail {

// Each glyph: 7 rows, low 5 bits used, bit 4 = left pixel.
inline const std::uint8_t* glyph5x7(char c) {
    static const std::uint8_t digits[10][7] = {
        {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}, {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e},
        {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}, {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e},
        {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}, {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e},
        {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}, {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
        {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}, {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}};
    static const std::uint8_t lower[26][7] = {
        {0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f}, // a
        {0x10, 0x10, 0x1e, 0x11, 0x11, 0x11, 0x1e}, // b
        {0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e}, // c
        {0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f}, // d
        {0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e}, // e
        {0x06, 0x09, 0x08, 0x1c, 0x08, 0x08, 0x08}, // f
        {0x00, 0x0f, 0x11, 0x11, 0x0f, 0x01, 0x0e}, // g
        {0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11}, // h
        {0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e}, // i
        {0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0c}, // j
        {0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12}, // k
        {0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}, // l
        {0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15}, // m
        {0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11}, // n
        {0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e}, // o
        {0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10}, // p
        {0x00, 0x00, 0x0f, 0x11, 0x0f, 0x01, 0x01}, // q
        {0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10}, // r
        {0x00, 0x00, 0x0e, 0x10, 0x0e, 0x01, 0x1e}, // s
        {0x08, 0x08, 0x1c, 0x08, 0x08, 0x09, 0x06}, // t
        {0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d}, // u
        {0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04}, // v
        {0x00, 0x00, 0x11, 0x15, 0x15, 0x15, 0x0a}, // w
        {0x00, 0x00, 0x11, 0x0a, 0x04, 0x0a, 0x11}, // x
        {0x00, 0x00, 0x11, 0x11, 0x0f, 0x01, 0x0e}, // y
        {0x00, 0x00, 0x1f, 0x02, 0x04, 0x08, 0x1f}, // z
    };
    static const std::uint8_t dot[7] = {0, 0, 0, 0, 0, 0x0c, 0x0c};
    static const std::uint8_t dash[7] = {0, 0, 0, 0x1f, 0, 0, 0};
    static const std::uint8_t plus[7] = {0, 0x04, 0x04, 0x1f, 0x04, 0x04, 0};
    static const std::uint8_t slash[7] = {0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10};
    static const std::uint8_t eq[7] = {0, 0, 0x1f, 0, 0x1f, 0, 0};
    static const std::uint8_t under[7] = {0, 0, 0, 0, 0, 0, 0x1f};
    static const std::uint8_t colon[7] = {0, 0x0c, 0x0c, 0, 0x0c, 0x0c, 0};
    static const std::uint8_t blank[7] = {0, 0, 0, 0, 0, 0, 0};
    if (c >= '0' && c <= '9') return digits[c - '0'];
    if (c >= 'a' && c <= 'z') return lower[c - 'a'];
    if (c >= 'A' && c <= 'Z') return lower[c - 'A'];
    switch (c) {
        case '.': return dot;
        case '-': return dash;
        case '+': return plus;
        case '/': return slash;
        case '=': return eq;
        case '_': return under;
        case ':': return colon;
        default: return blank;
    }
}

} // namespace detail

inline void draw_text(Image& img, std::int64_t x, std::int64_t y, const std::string& s, Rgb color, int scale = 1) {
    std::int64_t cx = x;
    for (char c : s) {
        const std::uint8_t* glyph = detail::glyph5x7(c);
        for (int row = 0; row < 7; ++row)
            for (int col = 0; col < 5; ++col)
                if (glyph[row] & (1 << (4 - col)))
                    for (int dy = 0; dy < scale; ++dy)
                        for (int dx = 0; dx < scale; ++dx)
                            img.set(cx + col * scale + dx, y + row * scale + dy, color);
        cx += 6 * scale;
    }
}

inline void draw_line(Image& img, std::int64_t x0, std::int64_t y0, std::int64_t x1, std::int64_t y1, Rgb color) {
    const std::int64_t dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
    const std::int64_t sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
    std::int64_t err = dx + dy;
    while (true) {
        img.set(x0, y0, color);
        if (x0 == x1 && y0 == y1) break;
        const std::int64_t e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x0 += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y0 += sy;
        }
    }
}

struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
    Rgb color;
};

inline std::string format_tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// Simple line plot with axes, ticks and a legend.
inline Image render_line_plot(const std::string& title, const std::string& xlabel, const std::string& ylabel,
                              const std::vector<PlotSeries>& series, int width = 640, int height = 440) {
    Image img(width, height);
    const std::int64_t left = 70, right = width - 20, top = 40, bottom = height - 50;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmin > xmax) {
        xmin = 0;
        xmax = 1;
    }
    if (ymin > ymax) {
        ymin = 0;
        ymax = 1;
    }
    if (xmax - xmin < 1e-12) {
        xmax += 0.5;
        xmin -= 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymax += 0.5;
        ymin -= 0.5;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto px = [&](double x) {
        return left + static_cast<std::int64_t>((x - xmin) / (xmax - xmin) * static_cast<double>(right - left));
    };
    auto py = [&](double y) {
        return bottom - static_cast<std::int64_t>((y - ymin) / (ymax - ymin) * static_cast<double>(bottom - top));
    };

    const Rgb axis{60, 60, 60};
    draw_line(img, left, top, left, bottom, axis);
    draw_line(img, left, bottom, right, bottom, axis);
    for (int i = 0; i <= 4; ++i) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        draw_line(img, px(xv), bottom, px(xv), bottom + 4, axis);
        draw_text(img, px(xv) - 10, bottom + 8, format_tick(xv), axis);
        draw_line(img, left - 4, py(yv), left, py(yv), axis);
        draw_text(img, 8, py(yv) - 3, format_tick(yv), axis);
    }
    draw_text(img, (left + right) / 2 - 3 * static_cast<std::int64_t>(title.size()), 12, title, {0, 0, 0});
    draw_text(img, (left + right) / 2 - 3 * static_cast<std::int64_t>(xlabel.size()), height - 14, xlabel, axis);
    draw_text(img, 8, top - 18, ylabel, axis);

    std::int64_t ly = top + 4;
    for (const auto& s : series) {
        for (std::size_t i = 1; i < s.points.size(); ++i)
            draw_line(img, px(s.points[i - 1].first), py(s.points[i - 1].second), px(s.points[i].first),
                      py(s.points[i].second), s.color);
        for (const auto& [x, y] : s.points) {
            draw_line(img, px(x) - 2, py(y), px(x) + 2, py(y), s.color);
            draw_line(img, px(x), py(y) - 2, px(x), py(y) + 2, s.color);
        }
        draw_line(img, right - 90, ly + 3, right - 70, ly + 3, s.color);
        draw_text(img, right - 64, ly, s.label, {0, 0, 0});
        ly += 12;
    }
    return img;
}

inline Rgb series_color(std::size_t i) {
    static const Rgb palette[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                  {148, 103, 189}, {140, 86, 75}};
    return palette[i % 6];
}

} // namespace caf
