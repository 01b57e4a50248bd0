#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sml/rng.hpp"
#include "sml/tensor.hpp"

namespace sml {

// Hyperspectral raster, band-interleaved-by-pixel: values[(r*width + c)*bands + b].
struct HsiCube {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t bands = 0;
    std::vector<float> values;

    float at(std::size_t r, std::size_t c, std::size_t b) const {
        return values[(r * width + c) * bands + b];
    }
};

// Per-pixel labels; 0 = unlabeled, 1..classes are real classes.
struct GroundTruth {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t classes = 0;
    std::vector<std::uint16_t> labels;

    std::uint16_t at(std::size_t r, std::size_t c) const { return labels[r * width + c]; }
};

HsiCube load_cube(const std::string& path, bool normalize = false);
void save_cube(const HsiCube& cube, const std::string& path);
GroundTruth load_labels(const std::string& path);
void save_labels(const GroundTruth& gt, const std::string& path);

// Per-band min-max rescale to [0,1]; constant bands map to 0.
void normalize_bands(HsiCube& cube);

// s x s x bands window centered at (row,col); borders filled by reflection
// that does not repeat the edge pixel.
Tensor<float> extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t s);

struct PatchRecord {
    std::size_t row = 0;
    std::size_t col = 0;
    std::uint16_t label = 0;  // 1-based gt label
};

// Lazy patch collection: pixel coordinates plus labels; tensors come from
// extract_patch at batch-assembly time.
struct PatchSet {
    const HsiCube* cube = nullptr;
    std::size_t patch_size = 0;
    std::vector<PatchRecord> records;
};

// Stack the selected records into one (B, s, s, bands) batch tensor.
Tensor<float> gather_batch(const PatchSet& set, const std::vector<std::size_t>& which);

struct SplitResult {
    std::vector<PatchRecord> train;
    std::vector<PatchRecord> val;
    std::vector<PatchRecord> test;
};

// Per class: round(n_k * frac) pixels to train and val (ties to even),
// remainder to test; order within class randomized by the seed.
SplitResult stratified_split(const GroundTruth& gt, double train_frac, double val_frac,
                             std::uint64_t seed);

// Synthetic scene: class signatures are Gaussian bumps over the band index,
// spatial layout is a Voronoi partition of random sites, plus N(0, sigma)
// noise per value. Guarantees pairwise signature separation >= 5 sigma.
std::pair<HsiCube, GroundTruth> synth_generate(std::size_t classes, std::size_t bands,
                                               std::size_t height, std::size_t width, double sigma,
                                               std::uint64_t seed);

}  // namespace sml
