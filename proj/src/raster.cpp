#include "vlplan/raster.hpp"

#include <fstream>

#include "vlplan/error.hpp"

namespace vlplan {

void write_ppm(const Raster& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot open for writing: " + path);
    out << "P6\n" << r.width << ' ' << r.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(r.data.data()),
              static_cast<std::streamsize>(r.data.size()));
    require(out.good(), ErrorKind::Io, "write failed: " + path);
}

Raster read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    require(magic == "P6" && w > 0 && h > 0 && maxval == 255, ErrorKind::Io,
            "unsupported image header in " + path);
    in.get();  // single whitespace after the header
    Raster r(h, w);
    in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size()));
    require(in.gcount() == static_cast<std::streamsize>(r.data.size()), ErrorKind::Io,
            "truncated image: " + path);
    return r;
}

std::vector<double> to_gray01(const Raster& r) {
    std::vector<double> g(static_cast<std::size_t>(r.height) * r.width);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const std::uint8_t* p = r.data.data() + i * 3;
        g[i] = (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]) / 255.0;
    }
    return g;
}

}  // namespace vlplan
