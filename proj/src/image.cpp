// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#include "gac/image.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace gac {

namespace {

uint8_t quantize8(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    return uint8_t(std::lround(v * 255.0));
}

void put_u32_le(std::ofstream& os, uint32_t v) {
    unsigned char b[4] = {
        (unsigned char)(v & 0xff),
        (unsigned char)((v >> 8) & 0xff),
        (unsigned char)((v >> 16) & 0xff),
        (unsigned char)((v >> 24) & 0xff),
    };
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::ifstream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("truncated depth file: " + path);
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

void put_f32_le(std::ofstream& os, float f) {
    uint32_t v;
    static_assert(sizeof(v) == sizeof(f));
    std::memcpy(&v, &f, 4);
    put_u32_le(os, v);
}

}  // namespace

void write_ppm(const std::string& path, const RgbImage& img) {
    require(img.height > 0 && img.width > 0, "write_ppm: empty image");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> row(size_t(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) row[size_t(x) * 3 + c] = quantize8(img.at(y, x, c));
        os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!os) throw IoError("write failed: " + path);
}

RgbImage read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw IoError("not a binary PPM: " + path);
    // Skip whitespace and '#' comments between header fields.
    auto next_int = [&]() -> int {
        int ch = is.get();
        while (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n' || ch == '#') {
            if (ch == '#')
                while (ch != '\n' && ch != EOF) ch = is.get();
            ch = is.get();
        }
        int v = 0;
        bool any = false;
        while (ch >= '0' && ch <= '9') {
            v = v * 10 + (ch - '0');
            any = true;
            ch = is.get();
        }
        if (!any) throw IoError("malformed PPM header: " + path);
        is.unget();
        return v;
    };
    int w = next_int();
    int h = next_int();
    int maxval = next_int();
    if (maxval != 255) throw IoError("unsupported PPM maxval: " + path);
    is.get();  // single whitespace byte after maxval
    if (w <= 0 || h <= 0) throw IoError("bad PPM dimensions: " + path);
    RgbImage img(h, w);
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        if (!is.read(reinterpret_cast<char*>(row.data()), std::streamsize(row.size())))
            throw IoError("truncated PPM: " + path);
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = double(row[size_t(x) * 3 + c]) / 255.0;
    }
    return img;
}

void write_depth_raw(const std::string& path, const DepthMap& depth) {
    require(depth.height > 0 && depth.width > 0, "write_depth_raw: empty depth");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    put_u32_le(os, uint32_t(depth.height));
    put_u32_le(os, uint32_t(depth.width));
    for (double d : depth.data) put_f32_le(os, float(d));
    if (!os) throw IoError("write failed: " + path);
}

DepthMap read_depth_raw(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    uint32_t h = get_u32_le(is, path);
    uint32_t w = get_u32_le(is, path);
    if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20))
        throw IoError("bad depth dimensions: " + path);
    DepthMap depth{int(h), int(w)};
    for (size_t i = 0; i < depth.data.size(); ++i) {
        uint32_t v = get_u32_le(is, path);
        float f;
        std::memcpy(&f, &v, 4);
        depth.data[i] = double(f);
    }
    return depth;
}

}  // namespace gac
