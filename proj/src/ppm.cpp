#include "sml/ppm.hpp"

#include <fstream>

#include "sml/errors.hpp"

namespace sml {

const std::array<std::array<std::uint8_t, 3>, 16>& class_palette() {
    static const std::array<std::array<std::uint8_t, 3>, 16> palette = {{
        {31, 119, 180},  {255, 127, 14},  {44, 160, 44},   {214, 39, 40},
        {148, 103, 189}, {140, 86, 75},   {227, 119, 194}, {127, 127, 127},
        {188, 189, 34},  {23, 190, 207},  {174, 199, 232}, {255, 187, 120},
        {152, 223, 138}, {255, 152, 150}, {197, 176, 213}, {196, 156, 148},
    }};
    return palette;
}

void write_map_ppm(const std::string& path, std::size_t height, std::size_t width,
                   const std::vector<std::uint16_t>& classes) {
    if (classes.size() != height * width)
        throw ArgumentError("ppm: class map size does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os << "P6\n" << width << " " << height << "\n255\n";
    const auto& pal = class_palette();
    for (std::uint16_t c : classes) {
        std::uint8_t rgb[3] = {0, 0, 0};
        if (c != 0) {
            const auto& p = pal[(c - 1) % pal.size()];
            rgb[0] = p[0];
            rgb[1] = p[1];
            rgb[2] = p[2];
        }
        os.write(reinterpret_cast<const char*>(rgb), 3);
    }
    if (!os) throw DataError("write failed: " + path);
}

}  // namespace sml
