#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vlplan {

// RGB8 image, row-major, 3 bytes per pixel.
struct Raster {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> data;  // height*width*3

    Raster() = default;
    Raster(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, 0) {}

    std::uint8_t* px(int y, int x) { return data.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* px(int y, int x) const {
        return data.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }

    bool same_dims(const Raster& o) const { return height == o.height && width == o.width; }
    bool operator==(const Raster& o) const {
        return height == o.height && width == o.width && data == o.data;
    }
};

// Binary PPM (P6, maxval 255). The on-disk image format used by `score`
// and the renderer.
void write_ppm(const Raster& r, const std::string& path);
Raster read_ppm(const std::string& path);

// Luma in [0,1] per pixel (0.299 R + 0.587 G + 0.114 B, bytes scaled by 255).
std::vector<double> to_gray01(const Raster& r);

}  // namespace vlplan
