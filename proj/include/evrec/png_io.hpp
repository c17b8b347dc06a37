#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "evrec/representation.hpp"

namespace evrec {

namespace detail {

inline void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xFF));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xFF));
    out.push_back(static_cast<uint8_t>(v & 0xFF));
}

inline uint32_t read_u32_be(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16)
         | (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const uint8_t* payload, size_t length) {
    put_u32_be(out, static_cast<uint32_t>(length));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    if (length) out.insert(out.end(), payload, payload + length);
    const uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, out.data() + start, static_cast<uInt>(4 + length)));
    put_u32_be(out, crc);
}

}  // namespace detail

/// Encode an 8-bit grayscale image as a non-interlaced PNG. Compression
/// settings are fixed so identical pixels give identical bytes.
inline std::vector<uint8_t> encode_png_gray8(const uint8_t* pixels, int width, int height) {
    if (width < 1 || height < 1) {
        throw std::invalid_argument("encode_png_gray8: empty image");
    }
    // Raw scanlines with filter byte 0.
    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(height) * (static_cast<size_t>(width) + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), pixels + static_cast<size_t>(y) * width,
                   pixels + static_cast<size_t>(y + 1) * width);
    }
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(bound);
    if (::compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw std::runtime_error("encode_png_gray8: deflate failed");
    }
    compressed.resize(bound);

    std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    uint8_t ihdr[13];
    ihdr[0] = static_cast<uint8_t>((width >> 24) & 0xFF);
    ihdr[1] = static_cast<uint8_t>((width >> 16) & 0xFF);
    ihdr[2] = static_cast<uint8_t>((width >> 8) & 0xFF);
    ihdr[3] = static_cast<uint8_t>(width & 0xFF);
    ihdr[4] = static_cast<uint8_t>((height >> 24) & 0xFF);
    ihdr[5] = static_cast<uint8_t>((height >> 16) & 0xFF);
    ihdr[6] = static_cast<uint8_t>((height >> 8) & 0xFF);
    ihdr[7] = static_cast<uint8_t>(height & 0xFF);
    ihdr[8] = 8;   // bit depth
    ihdr[9] = 0;   // grayscale
    ihdr[10] = 0;  // deflate
    ihdr[11] = 0;  // adaptive filtering
    ihdr[12] = 0;  // no interlace
    detail::append_chunk(out, "IHDR", ihdr, sizeof(ihdr));
    detail::append_chunk(out, "IDAT", compressed.data(), compressed.size());
    detail::append_chunk(out, "IEND", nullptr, 0);
    return out;
}

struct DecodedPng {
    int width = 0;
    int height = 0;
    int channels = 0;          // 1, 2, 3 or 4
    std::vector<uint8_t> pixels;  // row-major, interleaved
};

/// Minimal PNG reader: 8-bit depth, color types 0/2/4/6, no interlacing.
inline DecodedPng decode_png(const uint8_t* bytes, size_t length) {
    static const uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    if (length < 8 || std::memcmp(bytes, kSignature, 8) != 0) {
        throw std::runtime_error("decode_png: bad signature");
    }
    DecodedPng png;
    int bit_depth = 0, color_type = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool saw_end = false;
    while (pos + 8 <= length && !saw_end) {
        const uint32_t chunk_len = detail::read_u32_be(bytes + pos);
        if (pos + 12 + chunk_len > length) {
            throw std::runtime_error("decode_png: truncated chunk");
        }
        const char* type = reinterpret_cast<const char*>(bytes + pos + 4);
        const uint8_t* payload = bytes + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            png.width = static_cast<int>(detail::read_u32_be(payload));
            png.height = static_cast<int>(detail::read_u32_be(payload + 4));
            bit_depth = payload[8];
            color_type = payload[9];
            if (bit_depth != 8) throw std::runtime_error("decode_png: only 8-bit depth supported");
            if (payload[12] != 0) throw std::runtime_error("decode_png: interlaced PNG unsupported");
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + chunk_len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            saw_end = true;
        }
        pos += 12 + chunk_len;
    }
    switch (color_type) {
        case 0: png.channels = 1; break;
        case 2: png.channels = 3; break;
        case 4: png.channels = 2; break;
        case 6: png.channels = 4; break;
        default: throw std::runtime_error("decode_png: unsupported color type");
    }
    if (png.width < 1 || png.height < 1 || idat.empty()) {
        throw std::runtime_error("decode_png: missing image data");
    }
    const size_t stride = static_cast<size_t>(png.width) * png.channels;
    std::vector<uint8_t> raw(static_cast<size_t>(png.height) * (stride + 1));
    uLongf raw_len = static_cast<uLongf>(raw.size());
    if (::uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size())) != Z_OK
        || raw_len != raw.size()) {
        throw std::runtime_error("decode_png: inflate failed");
    }
    // Undo per-scanline filters.
    png.pixels.assign(static_cast<size_t>(png.height) * stride, 0);
    const int bpp = png.channels;
    for (int y = 0; y < png.height; ++y) {
        const uint8_t filter = raw[static_cast<size_t>(y) * (stride + 1)];
        const uint8_t* src = raw.data() + static_cast<size_t>(y) * (stride + 1) + 1;
        uint8_t* cur = png.pixels.data() + static_cast<size_t>(y) * stride;
        const uint8_t* up = (y > 0) ? cur - stride : nullptr;
        for (size_t x = 0; x < stride; ++x) {
            const int a = (x >= static_cast<size_t>(bpp)) ? cur[x - bpp] : 0;
            const int b = up ? up[x] : 0;
            const int c = (up && x >= static_cast<size_t>(bpp)) ? up[x - bpp] : 0;
            int value = src[x];
            switch (filter) {
                case 0: break;
                case 1: value += a; break;
                case 2: value += b; break;
                case 3: value += (a + b) / 2; break;
                case 4: {
                    const int p = a + b - c;
                    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    value += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
                default: throw std::runtime_error("decode_png: bad filter type");
            }
            cur[x] = static_cast<uint8_t>(value & 0xFF);
        }
    }
    return png;
}

inline DecodedPng decode_png(const std::vector<uint8_t>& bytes) {
    return decode_png(bytes.data(), bytes.size());
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("write_file_bytes: cannot open " + path);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw std::runtime_error("write_file_bytes: write failed for " + path);
    }
}

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("read_file_bytes: cannot open " + path);
    }
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

/// Write an intensity image as 8-bit grayscale PNG. Values are clamped to
/// [0, 1] and quantized with round-to-nearest.
inline void write_image_png(const std::string& path, const IntensityImage& image) {
    const int h = image.height();
    const int w = image.width();
    std::vector<uint8_t> pixels(static_cast<size_t>(h) * w);
    for (size_t i = 0; i < pixels.size(); ++i) {
        const double v = std::clamp(image.data[i], 0.0, 1.0);
        pixels[i] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
    write_file_bytes(path, encode_png_gray8(pixels.data(), w, h));
}

/// Load a grayscale image in [0, 1] from PNG (RGB collapses via mean) or
/// binary PGM (P5).
inline IntensityImage read_image_gray(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    IntensityImage image;
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5') {
        // Minimal binary PGM: header "P5 w h maxval" then raw bytes.
        size_t pos = 2;
        auto next_int = [&]() {
            while (pos < bytes.size() && (std::isspace(bytes[pos]) || bytes[pos] == '#')) {
                if (bytes[pos] == '#') {
                    while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                }
                ++pos;
            }
            long v = 0;
            bool any = false;
            while (pos < bytes.size() && std::isdigit(bytes[pos])) {
                v = v * 10 + (bytes[pos] - '0');
                ++pos;
                any = true;
            }
            if (!any) throw std::runtime_error("read_image_gray: malformed PGM header in " + path);
            return v;
        };
        const long w = next_int();
        const long h = next_int();
        const long maxval = next_int();
        ++pos;  // single whitespace after maxval
        if (w < 1 || h < 1 || maxval < 1 || maxval > 255
            || pos + static_cast<size_t>(w) * h > bytes.size()) {
            throw std::runtime_error("read_image_gray: malformed PGM in " + path);
        }
        image.data = Tensor({static_cast<size_t>(h), static_cast<size_t>(w)});
        for (size_t i = 0; i < static_cast<size_t>(w) * h; ++i) {
            image.data[i] = static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval);
        }
        return image;
    }
    const DecodedPng png = decode_png(bytes);
    image.data = Tensor({static_cast<size_t>(png.height), static_cast<size_t>(png.width)});
    const int color_channels = (png.channels >= 3) ? 3 : 1;
    for (int y = 0; y < png.height; ++y) {
        for (int x = 0; x < png.width; ++x) {
            const uint8_t* px = png.pixels.data()
                                + (static_cast<size_t>(y) * png.width + x) * png.channels;
            double v = 0.0;
            for (int c = 0; c < color_channels; ++c) v += px[c];
            image.data(static_cast<size_t>(y), static_cast<size_t>(x)) =
                v / (255.0 * color_channels);
        }
    }
    return image;
}

}  // namespace evrec
