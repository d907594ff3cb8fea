#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "paumer/rng.hpp"

namespace paumer {

constexpr std::uint8_t kIgnoreLabel = 255;

struct SegSample {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> image;          // H*W*3, values in [0,1]
    std::vector<std::uint8_t> labels;  // H*W, [0,K) or 255
};

struct SyntheticTaskConfig {
    std::int64_t height = 64;
    std::int64_t width = 64;
    std::int64_t classes = 5;
    std::int64_t shapes_min = 2;
    std::int64_t shapes_max = 4;
    double noise_sigma = 0.03;
    std::uint64_t palette_seed = 7;
    double small_fraction = 0.25;  // fraction of shapes drawn small
    std::int64_t count = 128;      // default sample count for generation
    // Hard variant: class 0 is always the background, classes 2k-1 and 2k
    // share a base color and differ only in shape kind (odd: rectangle,
    // even: ellipse) plus a +-pair_color_delta channel offset. Small deltas
    // under heavy noise make single patches ambiguous while whole shapes
    // stay separable, so context decides the class.
    bool paired_shape_classes = false;
    double pair_color_delta = 0.0;

    void validate() const;  // throws ConfigError
};

// Axis-aligned rectangle or ellipse; later shapes draw over earlier ones.
struct ShapeSpec {
    enum Kind { rect, ellipse } kind = rect;
    std::int64_t cls = 0;
    double cx = 0, cy = 0;  // center, pixels
    double rx = 0, ry = 0;  // half extents
};

// Per-class base colors, deterministic in (classes, seed).
std::vector<std::array<float, 3>> class_palette(std::int64_t classes,
                                                std::uint64_t seed);

SegSample generate_sample(Rng& rng, const SyntheticTaskConfig& cfg);
// Also reports the background class and drawn shape list (test oracle hook).
SegSample generate_sample_debug(Rng& rng, const SyntheticTaskConfig& cfg,
                                std::int64_t* background_out,
                                std::vector<ShapeSpec>* shapes_out);

// FNV-1a over the sample's image and label bytes.
std::uint64_t sample_digest(const SegSample& s);

// ---- PMSEG1 container --------------------------------------------------------
// magic "PMSEG1\0", then little-endian u32 {count, height, width, classes},
// then per sample: float32 image (H*W*3) followed by u8 labels (H*W).

void write_dataset(const std::string& path, const std::vector<SegSample>& samples,
                   std::int64_t classes);

// Streaming reader; validates the header eagerly and records sizes.
class DatasetReader {
public:
    explicit DatasetReader(const std::string& path);

    std::int64_t count() const { return count_; }
    std::int64_t height() const { return height_; }
    std::int64_t width() const { return width_; }
    std::int64_t classes() const { return classes_; }

    bool done() const { return read_ == count_; }
    SegSample next();

private:
    std::ifstream in_;
    std::string path_;
    std::int64_t count_ = 0, height_ = 0, width_ = 0, classes_ = 0;
    std::int64_t read_ = 0;
    std::uint64_t offset_ = 0;
};

std::vector<SegSample> read_dataset(const std::string& path,
                                    std::int64_t* classes_out = nullptr);

// Converts a directory of paired 8-bit image/label PNGs into PMSEG1.
// Pairs are matched by identical filename in the two directories.
// Returns the number of samples written.
std::int64_t convert_png_dir(const std::string& images_dir,
                             const std::string& labels_dir, std::int64_t classes,
                             const std::string& out_path);

}  // namespace paumer
