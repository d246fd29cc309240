#include <png.h>

#include <csetjmp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "phd/imaging.hpp"

namespace phd::imaging {

namespace {

struct Decoded {
    int height = 0;
    int width = 0;
    int channels = 0;  // 1 or 3 after normalization
    std::vector<std::uint8_t> bytes;  // interleaved
};

struct ReadCursor {
    const std::string* src;
    std::size_t pos;
};

void read_cb(png_structp png, png_bytep out, png_size_t n) {
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + n > cur->src->size()) png_error(png, "truncated PNG data");
    std::memcpy(out, cur->src->data() + cur->pos, n);
    cur->pos += n;
}

void write_cb(png_structp png, png_bytep data, png_size_t n) {
    static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), n);
}

void flush_cb(png_structp) {}

thread_local std::string g_png_error;

void error_cb(png_structp png, png_const_charp msg) {
    g_png_error = msg;
    png_longjmp(png, 1);
}

void warning_cb(png_structp, png_const_charp) {}

// Decodes to 8-bit gray (want_gray) or RGB, dropping alpha.
Decoded decode(const std::string& data, bool want_gray) {
    if (data.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(data.data()), 0, 8) != 0) {
        throw ImagingError("not a PNG stream");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_cb, warning_cb);
    png_infop info = png_create_info_struct(png);
    Decoded out;
    std::vector<png_bytep> rows;
    ReadCursor cur{&data, 0};
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImagingError("PNG: " + g_png_error);
    }
    png_set_read_fn(png, &cur, read_cb);
    png_read_info(png, info);
    const png_byte color = png_get_color_type(png, info);
    const png_byte depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    const bool has_trns = png_get_valid(png, info, PNG_INFO_tRNS) != 0;
    if (has_trns) png_set_tRNS_to_alpha(png);
    if ((color & PNG_COLOR_MASK_ALPHA) || has_trns) png_set_strip_alpha(png);
    const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
    if (want_gray && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    if (!want_gray && is_gray) png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out.bytes.resize(stride * static_cast<std::size_t>(out.height));
    rows.resize(static_cast<std::size_t>(out.height));
    for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = out.bytes.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

std::string encode(const std::vector<std::uint8_t>& bytes, int height, int width, int channels) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_cb, warning_cb);
    png_infop info = png_create_info_struct(png);
    std::string out;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw ImagingError("PNG: " + g_png_error);
    }
    png_set_write_fn(png, &out, write_cb, flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * width * channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

std::uint8_t quantize(float v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

std::string slurp(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ImagingError("cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void spill(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ImagingError("cannot write " + path.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw ImagingError("write failed for " + path.string());
}

template <typename F>
auto with_path(const std::filesystem::path& path, F&& f) {
    try {
        return f();
    } catch (const ImagingError& e) {
        throw ImagingError(path.string() + ": " + e.what());
    }
}

}  // namespace

RasterImage decode_png(const std::string& bytes) {
    const Decoded d = decode(bytes, false);
    RasterImage img(d.height, d.width);
    for (int y = 0; y < d.height; ++y)
        for (int x = 0; x < d.width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) = d.bytes[(static_cast<std::size_t>(y) * d.width + x) * 3 + c] / 255.0f;
    return img;
}

std::string encode_png(const RasterImage& image) {
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(image.height) * image.width * 3);
    for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < 3; ++c)
                bytes[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] = quantize(image.at(c, y, x));
    return encode(bytes, image.height, image.width, 3);
}

RasterImage read_png(const std::filesystem::path& path) {
    return with_path(path, [&] { return decode_png(slurp(path)); });
}

void write_png(const std::filesystem::path& path, const RasterImage& image) { spill(path, encode_png(image)); }

AlphaMatte read_matte_png(const std::filesystem::path& path) {
    return with_path(path, [&] {
        const Decoded d = decode(slurp(path), true);
        AlphaMatte m(d.height, d.width);
        for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = d.bytes[i] / 255.0f;
        return m;
    });
}

void write_matte_png(const std::filesystem::path& path, const AlphaMatte& matte) {
    std::vector<std::uint8_t> bytes(matte.values.size());
    std::transform(matte.values.begin(), matte.values.end(), bytes.begin(), quantize);
    spill(path, encode(bytes, matte.height, matte.width, 1));
}

BinaryMask decode_mask_png(const std::string& bytes) {
    const Decoded d = decode(bytes, true);
    BinaryMask m(d.height, d.width);
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = d.bytes[i] >= 128 ? 1 : 0;
    return m;
}

BinaryMask read_mask_png(const std::filesystem::path& path) {
    return with_path(path, [&] { return decode_mask_png(slurp(path)); });
}

void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
    std::vector<std::uint8_t> bytes(mask.bits.size());
    std::transform(mask.bits.begin(), mask.bits.end(), bytes.begin(), [](std::uint8_t b) { return b ? 255 : 0; });
    spill(path, encode(bytes, mask.height, mask.width, 1));
}

}  // namespace phd::imaging
