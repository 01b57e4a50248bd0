#include "sml/hsi.hpp"

#include <algorithm>
#include <cfenv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "sml/errors.hpp"

namespace sml {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t take_u32(std::istream& is, const char* field) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError(std::string("header short: ") + field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

constexpr std::uint64_t kMaxPixels = 1ull << 31;

}  // namespace

void save_cube(const HsiCube& cube, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write("HSC1", 4);
    put_u32(os, static_cast<std::uint32_t>(cube.height));
    put_u32(os, static_cast<std::uint32_t>(cube.width));
    put_u32(os, static_cast<std::uint32_t>(cube.bands));
    for (float f : cube.values) {
        std::uint32_t v;
        std::memcpy(&v, &f, 4);
        put_u32(os, v);
    }
    if (!os) throw DataError("write failed: " + path);
}

HsiCube load_cube(const std::string& path, bool normalize) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "HSC1")
        throw FormatError("not a cube file (bad magic): " + path);
    HsiCube cube;
    cube.height = take_u32(is, "height");
    cube.width = take_u32(is, "width");
    cube.bands = take_u32(is, "bands");
    if (cube.height == 0 || cube.width == 0 || cube.bands == 0)
        throw FormatError("zero dimension in cube header");
    std::uint64_t n = static_cast<std::uint64_t>(cube.height) * cube.width * cube.bands;
    if (n > kMaxPixels) throw FormatError("dimension overflow in cube header");
    cube.values.resize(n);
    std::vector<char> raw(n * 4);
    if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size())))
        throw FormatError("payload short: " + path);
    for (std::uint64_t i = 0; i < n; ++i) {
        std::uint32_t v = 0;
        for (int k = 0; k < 4; ++k)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + k])) << (8 * k);
        std::memcpy(&cube.values[i], &v, 4);
    }
    is.peek();
    if (!is.eof()) throw FormatError("trailing bytes in cube file: " + path);
    for (float f : cube.values)
        if (!std::isfinite(f)) throw DataError("non-finite value in cube: " + path);
    if (normalize) normalize_bands(cube);
    return cube;
}

void save_labels(const GroundTruth& gt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path);
    os.write("HSG1", 4);
    put_u32(os, static_cast<std::uint32_t>(gt.height));
    put_u32(os, static_cast<std::uint32_t>(gt.width));
    put_u32(os, static_cast<std::uint32_t>(gt.classes));
    for (std::uint16_t v : gt.labels) {
        unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)};
        os.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!os) throw DataError("write failed: " + path);
}

GroundTruth load_labels(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::string(magic, 4) != "HSG1")
        throw FormatError("not a label file (bad magic): " + path);
    GroundTruth gt;
    gt.height = take_u32(is, "height");
    gt.width = take_u32(is, "width");
    gt.classes = take_u32(is, "classes");
    if (gt.height == 0 || gt.width == 0 || gt.classes == 0)
        throw FormatError("zero dimension in label header");
    std::uint64_t n = static_cast<std::uint64_t>(gt.height) * gt.width;
    if (n > kMaxPixels) throw FormatError("dimension overflow in label header");
    gt.labels.resize(n);
    std::vector<char> raw(n * 2);
    if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size())))
        throw FormatError("payload short: " + path);
    for (std::uint64_t i = 0; i < n; ++i)
        gt.labels[i] = static_cast<std::uint16_t>(static_cast<unsigned char>(raw[i * 2]) |
                                                  (static_cast<unsigned char>(raw[i * 2 + 1]) << 8));
    is.peek();
    if (!is.eof()) throw FormatError("trailing bytes in label file: " + path);
    for (std::uint16_t v : gt.labels)
        if (v > gt.classes)
            throw FormatError("label " + std::to_string(v) + " exceeds class count " +
                              std::to_string(gt.classes));
    return gt;
}

void normalize_bands(HsiCube& cube) {
    std::size_t pixels = cube.height * cube.width;
    for (std::size_t b = 0; b < cube.bands; ++b) {
        float lo = std::numeric_limits<float>::infinity();
        float hi = -std::numeric_limits<float>::infinity();
        for (std::size_t p = 0; p < pixels; ++p) {
            float v = cube.values[p * cube.bands + b];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        float range = hi - lo;
        for (std::size_t p = 0; p < pixels; ++p) {
            float& v = cube.values[p * cube.bands + b];
            v = (range > 0.0f) ? (v - lo) / range : 0.0f;
        }
    }
}

namespace {

// Mirror index into [0, n) without repeating the edge sample: ..., 2, 1, 0 -> 1, 2, ...
std::size_t reflect_index(std::ptrdiff_t i, std::ptrdiff_t n) {
    if (n == 1) return 0;
    std::ptrdiff_t period = 2 * (n - 1);
    std::ptrdiff_t m = i % period;
    if (m < 0) m += period;
    if (m >= n) m = period - m;
    return static_cast<std::size_t>(m);
}

}  // namespace

Tensor<float> extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t s) {
    if (s == 0 || s % 2 == 0) throw ArgumentError("patch size must be odd, got " + std::to_string(s));
    if (row >= cube.height || col >= cube.width)
        throw ArgumentError("patch center outside the image");
    std::ptrdiff_t half = static_cast<std::ptrdiff_t>(s / 2);
    Tensor<float> out(Shape{s, s, cube.bands});
    for (std::size_t i = 0; i < s; ++i) {
        std::size_t r = reflect_index(static_cast<std::ptrdiff_t>(row) - half + static_cast<std::ptrdiff_t>(i),
                                      static_cast<std::ptrdiff_t>(cube.height));
        for (std::size_t j = 0; j < s; ++j) {
            std::size_t c = reflect_index(static_cast<std::ptrdiff_t>(col) - half + static_cast<std::ptrdiff_t>(j),
                                          static_cast<std::ptrdiff_t>(cube.width));
            const float* src = cube.values.data() + (r * cube.width + c) * cube.bands;
            float* dst = out.data() + (i * s + j) * cube.bands;
            std::memcpy(dst, src, cube.bands * sizeof(float));
        }
    }
    return out;
}

Tensor<float> gather_batch(const PatchSet& set, const std::vector<std::size_t>& which) {
    if (set.cube == nullptr) throw ArgumentError("patch set has no cube attached");
    if (which.empty()) throw ArgumentError("empty batch");
    std::size_t s = set.patch_size;
    Tensor<float> out(Shape{which.size(), s, s, set.cube->bands});
    std::size_t per = s * s * set.cube->bands;
    for (std::size_t i = 0; i < which.size(); ++i) {
        const PatchRecord& rec = set.records.at(which[i]);
        Tensor<float> patch = extract_patch(*set.cube, rec.row, rec.col, s);
        std::memcpy(out.data() + i * per, patch.data(), per * sizeof(float));
    }
    return out;
}

SplitResult stratified_split(const GroundTruth& gt, double train_frac, double val_frac,
                             std::uint64_t seed) {
    if (train_frac < 0 || val_frac < 0 || train_frac + val_frac >= 1.0)
        throw ArgumentError("split fractions must be non-negative and sum below 1");
    if (gt.classes == 0) throw DataError("ground truth declares zero classes");
    std::vector<std::vector<std::size_t>> by_class(gt.classes + 1);
    for (std::size_t i = 0; i < gt.labels.size(); ++i)
        if (gt.labels[i] != 0) by_class[gt.labels[i]].push_back(i);

    SplitResult out;
    Rng rng(seed);
    int saved_rounding = std::fegetround();
    std::fesetround(FE_TONEAREST);  // ties-to-even for the per-class counts
    for (std::size_t k = 1; k <= gt.classes; ++k) {
        auto& pix = by_class[k];
        if (pix.size() < 3)
            throw DataError("class " + std::to_string(k) + " has " + std::to_string(pix.size()) +
                            " labeled pixels; need at least 3");
        std::size_t n_train = static_cast<std::size_t>(std::nearbyint(static_cast<double>(pix.size()) * train_frac));
        std::size_t n_val = static_cast<std::size_t>(std::nearbyint(static_cast<double>(pix.size()) * val_frac));
        if (n_train + n_val > pix.size()) n_val = pix.size() - n_train;
        rng.shuffle(pix);
        for (std::size_t i = 0; i < pix.size(); ++i) {
            PatchRecord rec{pix[i] / gt.width, pix[i] % gt.width, static_cast<std::uint16_t>(k)};
            if (i < n_train)
                out.train.push_back(rec);
            else if (i < n_train + n_val)
                out.val.push_back(rec);
            else
                out.test.push_back(rec);
        }
    }
    std::fesetround(saved_rounding);
    return out;
}

std::pair<HsiCube, GroundTruth> synth_generate(std::size_t classes, std::size_t bands,
                                               std::size_t height, std::size_t width, double sigma,
                                               std::uint64_t seed) {
    if (classes < 2) throw ArgumentError("synthetic scene needs at least 2 classes");
    if (bands == 0) throw ArgumentError("synthetic scene needs at least 1 band");
    if (height * width < 10 * classes)
        throw ArgumentError("grid too small: need at least 10 pixels per class");
    if (sigma < 0) throw ArgumentError("noise sigma must be non-negative");

    // Gaussian-bump signature per class, bump centers spread over the bands.
    std::vector<std::vector<float>> sig(classes, std::vector<float>(bands));
    double bw = static_cast<double>(bands) / (2.5 * static_cast<double>(classes));
    for (std::size_t k = 0; k < classes; ++k) {
        double mu = (static_cast<double>(k) + 0.5) * static_cast<double>(bands) / static_cast<double>(classes) - 0.5;
        for (std::size_t b = 0; b < bands; ++b) {
            double d = (static_cast<double>(b) - mu) / bw;
            sig[k][b] = static_cast<float>(std::exp(-0.5 * d * d));
        }
    }
    double min_sep = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < classes; ++a)
        for (std::size_t b = a + 1; b < classes; ++b) {
            double d2 = 0;
            for (std::size_t q = 0; q < bands; ++q) {
                double d = static_cast<double>(sig[a][q]) - sig[b][q];
                d2 += d * d;
            }
            min_sep = std::min(min_sep, std::sqrt(d2));
        }
    if (sigma > 0 && min_sep < 5.0 * sigma)
        throw ArgumentError("noise sigma " + std::to_string(sigma) +
                            " too large: signature separation " + std::to_string(min_sep) +
                            " is below 5 sigma");

    Rng rng(seed);
    // Voronoi layout: a few sites per class, pixel takes its nearest site's
    // class. Redraw if a class ends up starved of pixels.
    std::size_t sites_per_class = 3;
    struct Site {
        double r, c;
        std::uint16_t cls;
    };
    GroundTruth gt;
    gt.height = height;
    gt.width = width;
    gt.classes = classes;
    gt.labels.resize(height * width);
    std::size_t min_per_class = std::max<std::size_t>(3, height * width / (10 * classes));
    bool ok = false;
    for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
        std::vector<Site> sites;
        for (std::size_t k = 0; k < classes; ++k)
            for (std::size_t t = 0; t < sites_per_class; ++t)
                sites.push_back(Site{rng.uniform() * static_cast<double>(height),
                                     rng.uniform() * static_cast<double>(width),
                                     static_cast<std::uint16_t>(k + 1)});
        std::vector<std::size_t> count(classes + 1, 0);
        for (std::size_t r = 0; r < height; ++r)
            for (std::size_t c = 0; c < width; ++c) {
                double best = std::numeric_limits<double>::infinity();
                std::uint16_t cls = 1;
                for (const Site& s : sites) {
                    double dr = static_cast<double>(r) + 0.5 - s.r;
                    double dc = static_cast<double>(c) + 0.5 - s.c;
                    double d = dr * dr + dc * dc;
                    if (d < best) {
                        best = d;
                        cls = s.cls;
                    }
                }
                gt.labels[r * width + c] = cls;
                ++count[cls];
            }
        ok = true;
        for (std::size_t k = 1; k <= classes; ++k)
            if (count[k] < min_per_class) ok = false;
    }
    if (!ok) throw DataError("could not lay out a scene covering every class");

    HsiCube cube;
    cube.height = height;
    cube.width = width;
    cube.bands = bands;
    cube.values.resize(height * width * bands);
    for (std::size_t p = 0; p < height * width; ++p) {
        const auto& s = sig[gt.labels[p] - 1];
        for (std::size_t b = 0; b < bands; ++b)
            cube.values[p * bands + b] =
                s[b] + static_cast<float>(sigma * rng.normal());
    }
    return {std::move(cube), std::move(gt)};
}

}  // namespace sml
