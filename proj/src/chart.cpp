#include <png.h>

#include <array>
#include <cstdio>
#include <map>
#include <memory>

#include "forge/error.hpp"
#include "forge/taxonomy.hpp"

namespace forge {

namespace {

// 5x7 glyphs, one byte per row, low five bits used (bit 4 is the leftmost column).
using Glyph = std::array<std::uint8_t, 7>;

const std::map<char, Glyph>& font() {
    static const std::map<char, Glyph> f{
        {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
        {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
        {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
        {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
        {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
        {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
        {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
        {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
        {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
        {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
        {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
        {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
        {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
        {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
        {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
        {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
        {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
        {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
        {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
        {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
        {'/', {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
        {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}}, {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}},
    };
    return f;
}

struct Rgb {
    std::uint8_t r, g, b;
};

class Canvas {
public:
    Canvas(int w, int h, Rgb bg) : w_(w), h_(h), px_(static_cast<std::size_t>(w * h) * 3) {
        fill(0, 0, w, h, bg);
    }

    void fill(int x0, int y0, int x1, int y1, Rgb c) {
        for (int y = std::max(0, y0); y < std::min(h_, y1); ++y)
            for (int x = std::max(0, x0); x < std::min(w_, x1); ++x) {
                auto* p = &px_[static_cast<std::size_t>(y * w_ + x) * 3];
                p[0] = c.r;
                p[1] = c.g;
                p[2] = c.b;
            }
    }

    // Uppercased; unknown characters render as '?'.
    void text(int x, int y, const std::string& s, Rgb c, int scale = 1) {
        for (char ch : s) {
            char u = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            auto it = font().find(u);
            const Glyph& g = it != font().end() ? it->second : font().at('?');
            for (int row = 0; row < 7; ++row)
                for (int col = 0; col < 5; ++col)
                    if (g[static_cast<std::size_t>(row)] & (0x10 >> col))
                        fill(x + col * scale, y + row * scale, x + (col + 1) * scale, y + (row + 1) * scale, c);
            x += 6 * scale;
        }
    }

    static int text_width(const std::string& s, int scale = 1) { return static_cast<int>(s.size()) * 6 * scale; }

    void write_png(const std::filesystem::path& path) const {
        std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
        if (!fp) throw StorageError("cannot write " + path.string());
        png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
        png_infop info = png ? png_create_info_struct(png) : nullptr;
        if (!png || !info) {
            png_destroy_write_struct(&png, &info);
            throw StorageError("libpng initialisation failed");
        }
        if (setjmp(png_jmpbuf(png))) {
            png_destroy_write_struct(&png, &info);
            throw StorageError("libpng failed writing " + path.string());
        }
        png_init_io(png, fp.get());
        png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8, PNG_COLOR_TYPE_RGB,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        for (int y = 0; y < h_; ++y)
            png_write_row(png, const_cast<png_bytep>(&px_[static_cast<std::size_t>(y * w_) * 3]));
        png_write_end(png, nullptr);
        png_destroy_write_struct(&png, &info);
    }

private:
    int w_, h_;
    std::vector<std::uint8_t> px_;
};

}  // namespace

void render_chart_png(const MistakeDistribution& d, const std::filesystem::path& path) {
    const Rgb white{255, 255, 255}, ink{40, 40, 40}, grid{220, 220, 220}, bar{70, 110, 180}, muted{150, 150, 150};
    const int n = std::max<int>(1, static_cast<int>(d.per_label.size()));
    const int slot = 72;
    const int left = 48, right = 16, top = 40, plot_h = 240, bottom = 44;
    const int width = left + n * slot + right;
    const int height = top + plot_h + bottom;
    Canvas c(width, height, white);

    c.text(left, 12, "MISTAKE RATE " + d.taxonomy_name + " " + d.agent_name, ink, 2);

    for (int pct = 0; pct <= 100; pct += 25) {
        const int y = top + plot_h - pct * plot_h / 100;
        c.fill(left, y, width - right, y + 1, grid);
        const std::string label = std::to_string(pct);
        c.text(left - 6 - Canvas::text_width(label), y - 3, label, ink);
    }
    c.fill(left, top, left + 1, top + plot_h + 1, ink);
    c.fill(left, top + plot_h, width - right, top + plot_h + 1, ink);

    for (int i = 0; i < static_cast<int>(d.per_label.size()); ++i) {
        const auto& s = d.per_label[static_cast<std::size_t>(i)];
        const int x0 = left + i * slot + 12;
        const int x1 = x0 + slot - 24;
        std::string value;
        if (s.mistake_rate) {
            const int h = static_cast<int>(*s.mistake_rate * plot_h / 100.0 + 0.5);
            c.fill(x0, top + plot_h - h, x1, top + plot_h, bar);
            value = format1(*s.mistake_rate);
            c.text(x0 + (x1 - x0 - Canvas::text_width(value)) / 2, top + plot_h - h - 10, value, ink);
        } else {
            value = "N/A";
            c.text(x0 + (x1 - x0 - Canvas::text_width(value)) / 2, top + plot_h - 10, value, muted);
        }
        std::string name = s.label.substr(0, static_cast<std::size_t>(slot / 6 - 1));
        c.text(left + i * slot + (slot - Canvas::text_width(name)) / 2, top + plot_h + 8, name, ink);
        const std::string count = std::to_string(s.n_mistakes) + "/" + std::to_string(s.n_samples);
        c.text(left + i * slot + (slot - Canvas::text_width(count)) / 2, top + plot_h + 22, count, muted);
    }
    c.write_png(path);
}

}  // namespace forge
