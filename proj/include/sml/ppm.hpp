#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sml {

// Fixed 16-color class palette; class k (1-based) uses entry (k-1) mod 16,
// class 0 (unlabeled/background) renders black.
const std::array<std::array<std::uint8_t, 3>, 16>& class_palette();

// Binary PPM (P6, maxval 255) of a per-pixel class map, row-major.
void write_map_ppm(const std::string& path, std::size_t height, std::size_t width,
                   const std::vector<std::uint16_t>& classes);

}  // namespace sml
