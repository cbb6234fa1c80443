// Copyright Contributors to the gacgen project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gac/common.hpp"

namespace gac {

// Interleaved RGB, row-major, values in [0, 1].
struct RgbImage {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // size height * width * 3

    RgbImage() = default;
    RgbImage(int h, int w, double fill = 0.0) : height(h), width(w), data(size_t(h) * w * 3, fill) {
        require(h > 0 && w > 0, "RgbImage: dimensions must be positive");
    }

    double& at(int y, int x, int c) { return data[(size_t(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return data[(size_t(y) * width + x) * 3 + c]; }
    size_t pixels() const { return size_t(height) * width; }
};

// Per-pixel positive depth along the camera z axis, row-major.
struct DepthMap {
    int height = 0;
    int width = 0;
    std::vector<double> data;  // size height * width

    DepthMap() = default;
    DepthMap(int h, int w, double fill = 0.0) : height(h), width(w), data(size_t(h) * w, fill) {
        require(h > 0 && w > 0, "DepthMap: dimensions must be positive");
    }

    double& at(int y, int x) { return data[size_t(y) * width + x]; }
    double at(int y, int x) const { return data[size_t(y) * width + x]; }
};

// 8-bit binary PPM (P6). Doubles are clamped to [0,1] and quantized with
// round(v * 255).
void write_ppm(const std::string& path, const RgbImage& img);
RgbImage read_ppm(const std::string& path);

// Raw depth: header of two little-endian uint32 (height, width) followed by
// height*width little-endian float32 values.
void write_depth_raw(const std::string& path, const DepthMap& depth);
DepthMap read_depth_raw(const std::string& path);

}  // namespace gac
