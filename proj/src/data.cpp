#include "paumer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "paumer/errors.hpp"
#include "paumer/png_io.hpp"

namespace paumer {

namespace fs = std::filesystem;

void SyntheticTaskConfig::validate() const {
    if (height <= 0 || width <= 0) throw ConfigError("task: image sides must be positive");
    if (classes < 2) throw ConfigError("task: need at least two classes");
    if (classes > 254) throw ConfigError("task: at most 254 classes (255 is reserved)");
    if (shapes_min < 0 || shapes_max < shapes_min) {
        throw ConfigError("task: invalid shape count range");
    }
    if (noise_sigma < 0.0) throw ConfigError("task: noise sigma must be >= 0");
    if (small_fraction < 0.0 || small_fraction > 1.0) {
        throw ConfigError("task: small_fraction outside [0,1]");
    }
    if (count < 0) throw ConfigError("task: count must be >= 0");
}

namespace {

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    const double hh = (h - std::floor(h)) * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    double r, g, b;
    switch (sector) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

bool inside_shape(const ShapeSpec& s, std::int64_t px, std::int64_t py) {
    // Evaluated at pixel centers.
    const double x = static_cast<double>(px) + 0.5;
    const double y = static_cast<double>(py) + 0.5;
    if (s.kind == ShapeSpec::rect) {
        return std::abs(x - s.cx) <= s.rx && std::abs(y - s.cy) <= s.ry;
    }
    const double dx = (x - s.cx) / s.rx;
    const double dy = (y - s.cy) / s.ry;
    return dx * dx + dy * dy <= 1.0;
}

}  // namespace

std::vector<std::array<float, 3>> class_palette(std::int64_t classes,
                                                std::uint64_t seed) {
    Rng rng(seed);
    const double hue_offset = rng.uniform();
    std::vector<std::array<float, 3>> palette(static_cast<std::size_t>(classes));
    for (std::int64_t k = 0; k < classes; ++k) {
        const double hue = hue_offset + static_cast<double>(k) / static_cast<double>(classes);
        const double sat = 0.55 + 0.30 * rng.uniform();
        const double val = 0.70 + 0.25 * rng.uniform();
        palette[static_cast<std::size_t>(k)] = hsv_to_rgb(hue, sat, val);
    }
    return palette;
}

namespace {

// Paired mode maps class 0 to its own color and classes 2k-1, 2k to a shared
// one; kind carries the remaining bit of identity.
std::vector<std::array<float, 3>> task_palette(const SyntheticTaskConfig& cfg) {
    if (!cfg.paired_shape_classes) return class_palette(cfg.classes, cfg.palette_seed);
    const std::int64_t distinct = 1 + (cfg.classes - 1 + 1) / 2;
    const auto base = class_palette(distinct, cfg.palette_seed);
    std::vector<std::array<float, 3>> palette(static_cast<std::size_t>(cfg.classes));
    palette[0] = base[0];
    const float d = static_cast<float>(cfg.pair_color_delta);
    for (std::int64_t c = 1; c < cfg.classes; ++c) {
        auto color = base[static_cast<std::size_t>(1 + (c - 1) / 2)];
        // Opposite offsets for the two members of a pair.
        const float sign = c % 2 == 1 ? 1.0f : -1.0f;
        color[0] = std::clamp(color[0] + sign * d, 0.05f, 0.95f);
        color[1] = std::clamp(color[1] - sign * d, 0.05f, 0.95f);
        color[2] = std::clamp(color[2] + sign * d, 0.05f, 0.95f);
        palette[static_cast<std::size_t>(c)] = color;
    }
    return palette;
}

}  // namespace

SegSample generate_sample_debug(Rng& rng, const SyntheticTaskConfig& cfg,
                                std::int64_t* background_out,
                                std::vector<ShapeSpec>* shapes_out) {
    cfg.validate();
    const std::int64_t h = cfg.height, w = cfg.width, k = cfg.classes;
    const auto palette = task_palette(cfg);

    const auto background =
        cfg.paired_shape_classes
            ? std::int64_t{0}
            : static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(k)));
    const std::int64_t n_shapes =
        cfg.shapes_min +
        static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(cfg.shapes_max - cfg.shapes_min + 1)));

    const double side = static_cast<double>(std::min(h, w));
    std::vector<ShapeSpec> shapes;
    shapes.reserve(static_cast<std::size_t>(n_shapes));
    for (std::int64_t i = 0; i < n_shapes; ++i) {
        ShapeSpec s;
        // Any class other than the background; overlaps between shapes are fine.
        auto c = static_cast<std::int64_t>(rng.uniform_index(
            static_cast<std::uint64_t>(k - 1)));
        s.cls = c >= background ? c + 1 : c;
        if (cfg.paired_shape_classes) {
            s.kind = s.cls % 2 == 1 ? ShapeSpec::rect : ShapeSpec::ellipse;
        } else {
            s.kind = rng.uniform() < 0.5 ? ShapeSpec::rect : ShapeSpec::ellipse;
        }
        const bool small = rng.uniform() < cfg.small_fraction;
        const double lo = small ? 2.0 : side / 8.0;
        const double hi = small ? std::max(3.0, side / 10.0) : side / 3.0;
        s.rx = rng.uniform(lo, hi);
        s.ry = rng.uniform(lo, hi);
        s.cx = rng.uniform(0.0, static_cast<double>(w));
        s.cy = rng.uniform(0.0, static_cast<double>(h));
        shapes.push_back(s);
    }

    SegSample sample;
    sample.height = h;
    sample.width = w;
    sample.labels.assign(static_cast<std::size_t>(h * w),
                         static_cast<std::uint8_t>(background));
    for (const auto& s : shapes) {
        // Later shapes draw over earlier ones.
        const auto y0 = static_cast<std::int64_t>(std::max(0.0, std::floor(s.cy - s.ry)));
        const auto y1 = static_cast<std::int64_t>(
            std::min(static_cast<double>(h), std::ceil(s.cy + s.ry) + 1.0));
        const auto x0 = static_cast<std::int64_t>(std::max(0.0, std::floor(s.cx - s.rx)));
        const auto x1 = static_cast<std::int64_t>(
            std::min(static_cast<double>(w), std::ceil(s.cx + s.rx) + 1.0));
        for (std::int64_t py = y0; py < y1; ++py) {
            for (std::int64_t px = x0; px < x1; ++px) {
                if (inside_shape(s, px, py)) {
                    sample.labels[static_cast<std::size_t>(py * w + px)] =
                        static_cast<std::uint8_t>(s.cls);
                }
            }
        }
    }

    sample.image.resize(static_cast<std::size_t>(h * w * 3));
    for (std::int64_t p = 0; p < h * w; ++p) {
        const auto& base = palette[sample.labels[static_cast<std::size_t>(p)]];
        for (int c = 0; c < 3; ++c) {
            double v = base[static_cast<std::size_t>(c)];
            if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * rng.normal();
            sample.image[static_cast<std::size_t>(p * 3 + c)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

    if (background_out != nullptr) *background_out = background;
    if (shapes_out != nullptr) *shapes_out = std::move(shapes);
    return sample;
}

SegSample generate_sample(Rng& rng, const SyntheticTaskConfig& cfg) {
    return generate_sample_debug(rng, cfg, nullptr, nullptr);
}

std::uint64_t sample_digest(const SegSample& s) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix = [&hash](const void* data, std::size_t len) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            hash ^= p[i];
            hash *= 0x100000001b3ULL;
        }
    };
    mix(s.image.data(), s.image.size() * sizeof(float));
    mix(s.labels.data(), s.labels.size());
    return hash;
}

// ---- PMSEG1 -------------------------------------------------------------------

namespace {

constexpr char kMagic[7] = {'P', 'M', 'S', 'E', 'G', '1', '\0'};

void put_u32(std::ofstream& out, std::uint32_t v) {
    const std::uint8_t b[4] = {static_cast<std::uint8_t>(v),
                               static_cast<std::uint8_t>(v >> 8),
                               static_cast<std::uint8_t>(v >> 16),
                               static_cast<std::uint8_t>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in, std::uint64_t& offset, const std::string& what) {
    std::uint8_t b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw FormatError("dataset: truncated " + what, offset);
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_dataset(const std::string& path, const std::vector<SegSample>& samples,
                   std::int64_t classes) {
    if (classes < 2 || classes > 254) {
        throw ConfigError("write_dataset: classes " + std::to_string(classes) +
                          " outside [2,254]");
    }
    std::int64_t h = 0, w = 0;
    if (!samples.empty()) {
        h = samples.front().height;
        w = samples.front().width;
    }
    for (const auto& s : samples) {
        if (s.height != h || s.width != w) {
            throw ContractError("write_dataset: inconsistent sample sizes");
        }
        if (static_cast<std::int64_t>(s.image.size()) != h * w * 3 ||
            static_cast<std::int64_t>(s.labels.size()) != h * w) {
            throw ContractError("write_dataset: sample buffers do not match its size");
        }
        for (auto lab : s.labels) {
            if (lab != kIgnoreLabel && lab >= classes) {
                throw InvalidLabelError("write_dataset: label " + std::to_string(lab) +
                                        " outside [0," + std::to_string(classes) + ")");
            }
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("write_dataset: cannot open '" + path + "'");
    out.write(kMagic, sizeof(kMagic));
    put_u32(out, static_cast<std::uint32_t>(samples.size()));
    put_u32(out, static_cast<std::uint32_t>(h));
    put_u32(out, static_cast<std::uint32_t>(w));
    put_u32(out, static_cast<std::uint32_t>(classes));
    for (const auto& s : samples) {
        out.write(reinterpret_cast<const char*>(s.image.data()),
                  static_cast<std::streamsize>(s.image.size() * sizeof(float)));
        out.write(reinterpret_cast<const char*>(s.labels.data()),
                  static_cast<std::streamsize>(s.labels.size()));
    }
    if (!out) throw IoError("write_dataset: short write to '" + path + "'");
}

DatasetReader::DatasetReader(const std::string& path)
    : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw IoError("dataset: cannot open '" + path + "'");
    char magic[sizeof(kMagic)];
    in_.read(magic, sizeof(kMagic));
    if (in_.gcount() != sizeof(kMagic) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("dataset: bad magic in '" + path + "'", 0);
    }
    offset_ = sizeof(kMagic);
    count_ = get_u32(in_, offset_, "header");
    height_ = get_u32(in_, offset_, "header");
    width_ = get_u32(in_, offset_, "header");
    classes_ = get_u32(in_, offset_, "header");
    if (classes_ < 2 || classes_ > 254 || (count_ > 0 && (height_ <= 0 || width_ <= 0))) {
        throw FormatError("dataset: implausible header in '" + path + "'", sizeof(kMagic));
    }
}

SegSample DatasetReader::next() {
    if (done()) throw ContractError("dataset: next() past the end of '" + path_ + "'");
    SegSample s;
    s.height = height_;
    s.width = width_;
    const std::size_t pixels = static_cast<std::size_t>(height_ * width_);
    s.image.resize(pixels * 3);
    in_.read(reinterpret_cast<char*>(s.image.data()),
             static_cast<std::streamsize>(pixels * 3 * sizeof(float)));
    if (static_cast<std::size_t>(in_.gcount()) != pixels * 3 * sizeof(float)) {
        throw FormatError("dataset: truncated image in '" + path_ + "'", offset_);
    }
    offset_ += pixels * 3 * sizeof(float);
    s.labels.resize(pixels);
    in_.read(reinterpret_cast<char*>(s.labels.data()),
             static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(in_.gcount()) != pixels) {
        throw FormatError("dataset: truncated labels in '" + path_ + "'", offset_);
    }
    for (auto lab : s.labels) {
        if (lab != kIgnoreLabel && lab >= classes_) {
            throw InvalidLabelError("dataset: label " + std::to_string(lab) +
                                    " outside [0," + std::to_string(classes_) + ") in '" +
                                    path_ + "'");
        }
    }
    offset_ += pixels;
    ++read_;
    return s;
}

std::vector<SegSample> read_dataset(const std::string& path, std::int64_t* classes_out) {
    DatasetReader reader(path);
    if (classes_out != nullptr) *classes_out = reader.classes();
    std::vector<SegSample> samples;
    samples.reserve(static_cast<std::size_t>(reader.count()));
    while (!reader.done()) samples.push_back(reader.next());
    return samples;
}

// ---- PNG conversion --------------------------------------------------------------

std::int64_t convert_png_dir(const std::string& images_dir,
                             const std::string& labels_dir, std::int64_t classes,
                             const std::string& out_path) {
    if (!fs::is_directory(images_dir)) {
        throw IoError("convert: '" + images_dir + "' is not a directory");
    }
    if (!fs::is_directory(labels_dir)) {
        throw IoError("convert: '" + labels_dir + "' is not a directory");
    }
    std::map<std::string, fs::path> images;
    for (const auto& e : fs::directory_iterator(images_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".png") {
            images.emplace(e.path().filename().string(), e.path());
        }
    }

    std::vector<SegSample> samples;
    for (const auto& [name, img_path] : images) {
        const fs::path lab_path = fs::path(labels_dir) / name;
        if (!fs::is_regular_file(lab_path)) {
            throw IoError("convert: no label file for '" + name + "'");
        }
        const PngImage img = read_png(img_path.string());
        const PngImage lab = read_png(lab_path.string());
        if (lab.channels != 1) {
            throw ConfigError("convert: label '" + name + "' must be 8-bit grayscale");
        }
        if (img.width != lab.width || img.height != lab.height) {
            throw ConfigError("convert: size mismatch between image and label '" + name +
                              "'");
        }
        SegSample s;
        s.height = img.height;
        s.width = img.width;
        const std::size_t pixels = static_cast<std::size_t>(img.height * img.width);
        s.image.resize(pixels * 3);
        for (std::size_t p = 0; p < pixels; ++p) {
            for (int c = 0; c < 3; ++c) {
                const std::uint8_t byte = img.channels == 3 ? img.data[p * 3 + static_cast<std::size_t>(c)]
                                                            : img.data[p];
                s.image[p * 3 + static_cast<std::size_t>(c)] =
                    static_cast<float>(byte) / 255.0f;
            }
        }
        s.labels.assign(lab.data.begin(), lab.data.end());
        for (auto l : s.labels) {
            if (l != kIgnoreLabel && l >= classes) {
                throw InvalidLabelError("convert: label " + std::to_string(l) +
                                        " outside [0," + std::to_string(classes) +
                                        ") in '" + name + "'");
            }
        }
        samples.push_back(std::move(s));
    }
    write_dataset(out_path, samples, classes);
    return static_cast<std::int64_t>(samples.size());
}

}  // namespace paumer
